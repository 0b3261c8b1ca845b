#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "groupalign/diffusion.hpp"
#include "groupalign/errors.hpp"
#include "groupalign/groupdpo.hpp"
#include "groupalign/personalization.hpp"
#include "groupalign/reward.hpp"
#include "groupalign/rng.hpp"

namespace groupalign {

// Geometry and knobs of the synthetic preference world. Everything an
// experiment needs to re-create the world is in here plus the seed, so the
// world itself never has to be persisted parameter-by-parameter.
struct WorldConfig {
    int n_users = 200;
    std::vector<int> cardinalities = {8, 8, 8, 8};  // user feature fields
    int item_dim = 32;
    int cond_dim = 8;
    int n_prompts = 50;
    int group_size = 5;
    int k_positives = 2;
    int n_records = 4000;
    int n_pretrain_records = 800;
    double noise = 0.0;          // gaussian score noise at labeling time
    bool style_only = false;     // candidates consistency-equal, labels style-driven
    int min_records_per_user = 0;  // 0 disables the guarantee
    uint64_t seed = 0;
};

// Hidden scoring machinery. Models must never see these values; experiments
// persist the seeded WorldConfig instead and re-derive them on demand.
struct OracleParams {
    // style_map[field][value] is the style-space embedding of one feature
    // value; a user's style vector is the sum over their fields.
    std::vector<std::vector<std::vector<double>>> style_map;
    std::vector<std::vector<double>> prompt_render;  // cond_dim rows of item_dim
    std::vector<std::vector<double>> style_render;   // style rows of item_dim
    double consistency_weight = 1.0;
    double style_weight = 1.0;
};

struct World {
    WorldConfig cfg;
    OracleParams oracle;
    std::vector<UserProfile> users;
    std::vector<std::vector<double>> prompt_conds;  // unit vectors, id = index
};

// One labeled candidate group. `features` denormalizes the user's fields so
// a reader never needs the world to build model inputs.
struct GroupRecord {
    int user_id = 0;
    std::vector<int> features;
    int prompt_id = 0;
    std::vector<double> cond;
    std::vector<std::vector<double>> items;
    std::vector<int> labels;  // exactly k_positives ones
    std::string split = "train";
};

World generate_world(const WorldConfig& cfg);

std::vector<double> render_condition(const std::vector<double>& cond,
                                     const OracleParams& oracle);
std::vector<double> style_vector(const UserProfile& user, const OracleParams& oracle);
std::vector<double> style_offset(const UserProfile& user, const OracleParams& oracle);

// consistency_weight * cos(item, render(c)) +
// style_weight * cos(item - render(c), style_offset(user)) + noise * gauss.
// `rng` is only touched when noise > 0 and must then be non-null.
double oracle_score(const std::vector<double>& item, const std::vector<double>& cond,
                    const UserProfile& user, const OracleParams& oracle,
                    double noise = 0.0, Rng* rng = nullptr);

// Binary labels marking the k top-scored candidates, score ties broken by
// ascending index.
std::vector<int> label_candidates(const std::vector<std::vector<double>>& items,
                                  const std::vector<double>& cond, const UserProfile& user,
                                  const OracleParams& oracle, int k, double noise = 0.0,
                                  Rng* rng = nullptr);

// Candidates around render(cond) built from scaled style offsets of the
// target and donor users, labeled by the oracle. In style_only mode the
// offsets are orthogonalized against the rendered direction and given a
// common norm, so consistency cannot separate the candidates.
GroupRecord make_group(const World& world, int user_id, int prompt_id, Rng& rng);

// Candidates mixing the true prompt's rendering with distractor prompts',
// labeled by the consistency term alone. Backbone pretraining data: the
// signal is user-independent by construction.
GroupRecord make_consistency_group(const World& world, int user_id, int prompt_id, Rng& rng);

// n_records style groups, users round-robin so every user gets
// floor(n_records / n_users) of them; prompts drawn from the pool.
std::vector<GroupRecord> generate_records(const World& world, Rng& rng);

// Tags records 8:1:1 train/valid/test on a seeded shuffle, then repairs the
// assignment so every user keeps at least one train record.
void assign_splits(std::vector<GroupRecord>& records, int n_users, uint64_t seed);

void write_records(const std::vector<GroupRecord>& records, const std::string& path);
std::vector<GroupRecord> read_records(const std::string& path);

// Writes train/valid/test/pretrain JSONL plus world.json (the seeded config,
// never oracle parameters) into out_dir. Returns the five paths in that
// order.
std::vector<std::string> emit_dataset(const World& world, const std::string& out_dir);

// WorldConfig <-> JSON text, for world.json and experiment configs.
std::string world_config_to_json(const WorldConfig& cfg);
WorldConfig world_config_from_json(const std::string& text);

// Deterministic token realization of a prompt for the text tower.
std::vector<int> prompt_token_ids(int prompt_id, int vocab, int len);

RmExample to_rm_example(const GroupRecord& rec, int vocab, int prompt_len);
PreferenceGroup to_preference_group(const GroupRecord& rec);

// One denoising example per positively labeled item.
std::vector<DiffusionExample> positive_examples(const std::vector<GroupRecord>& records,
                                                bool with_user);

}  // namespace groupalign
