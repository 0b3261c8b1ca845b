#include "groupalign/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace groupalign {

namespace {

constexpr int kStyleDim = 6;
// Item-space jitter on candidates outside style_only mode; the oracle's own
// score noise is configured separately.
constexpr double kItemJitter = 0.05;
// Common norm of the orthogonalized style offsets in style_only mode.
constexpr double kStyleScale = 0.75;

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

// Zero-direction inputs contribute nothing rather than dividing by zero.
double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double na = norm(a), nb = norm(b);
    if (na < 1e-12 || nb < 1e-12) return 0.0;
    return dot(a, b) / (na * nb);
}

void validate(const WorldConfig& cfg) {
    if (cfg.n_users <= 0) throw ConfigError("n_users must be positive");
    if (cfg.cardinalities.empty()) throw ConfigError("at least one user feature field");
    for (int c : cfg.cardinalities)
        if (c <= 0) throw ConfigError("feature cardinality must be positive");
    if (cfg.item_dim <= 0) throw ConfigError("item_dim must be positive");
    if (cfg.cond_dim <= 0) throw ConfigError("cond_dim must be positive");
    if (cfg.n_prompts <= 0) throw ConfigError("n_prompts must be positive");
    if (cfg.k_positives <= 0 || cfg.k_positives >= cfg.group_size)
        throw ConfigError("need 0 < k_positives < group_size");
    if (cfg.n_records < 0) throw ConfigError("n_records must be non-negative");
    if (cfg.n_pretrain_records < 0) throw ConfigError("n_pretrain_records must be non-negative");
    if (cfg.noise < 0) throw ConfigError("noise must be non-negative");
    if (cfg.min_records_per_user > 0 &&
        cfg.n_records / cfg.n_users < cfg.min_records_per_user)
        throw ConfigError("n_records too small for min_records_per_user");
}

std::vector<double> matvec_rows(const std::vector<double>& v,
                                const std::vector<std::vector<double>>& rows, int out_dim) {
    std::vector<double> out(out_dim, 0.0);
    for (std::size_t i = 0; i < v.size(); ++i)
        for (int d = 0; d < out_dim; ++d) out[d] += v[i] * rows[i][d];
    return out;
}

}  // namespace

World generate_world(const WorldConfig& cfg) {
    validate(cfg);
    World world;
    world.cfg = cfg;
    Rng rng(mix_seed(cfg.seed, 0x776f726cULL));

    world.oracle.style_map.resize(cfg.cardinalities.size());
    for (std::size_t f = 0; f < cfg.cardinalities.size(); ++f) {
        world.oracle.style_map[f].resize(cfg.cardinalities[f]);
        for (int v = 0; v < cfg.cardinalities[f]; ++v)
            world.oracle.style_map[f][v] = rng.gaussian_vector(kStyleDim);
    }

    double pr_scale = 1.0 / std::sqrt(static_cast<double>(cfg.cond_dim));
    world.oracle.prompt_render.resize(cfg.cond_dim);
    for (auto& row : world.oracle.prompt_render) {
        row = rng.gaussian_vector(cfg.item_dim);
        for (auto& x : row) x *= pr_scale;
    }

    double sr_scale = 1.0 / std::sqrt(static_cast<double>(kStyleDim));
    world.oracle.style_render.resize(kStyleDim);
    for (auto& row : world.oracle.style_render) {
        row = rng.gaussian_vector(cfg.item_dim);
        for (auto& x : row) x *= sr_scale;
    }

    world.users.resize(cfg.n_users);
    for (auto& user : world.users) {
        user.feature_ids.resize(cfg.cardinalities.size());
        for (std::size_t f = 0; f < cfg.cardinalities.size(); ++f)
            user.feature_ids[f] = rng.uniform_index(cfg.cardinalities[f]);
    }

    world.prompt_conds.resize(cfg.n_prompts);
    for (auto& cond : world.prompt_conds) {
        double n = 0.0;
        do {
            cond = rng.gaussian_vector(cfg.cond_dim);
            n = norm(cond);
        } while (n < 1e-9);
        for (auto& x : cond) x /= n;
    }
    return world;
}

std::vector<double> render_condition(const std::vector<double>& cond,
                                     const OracleParams& oracle) {
    if (cond.size() != oracle.prompt_render.size())
        throw DimensionError("condition length does not match the render matrix");
    return matvec_rows(cond, oracle.prompt_render,
                       static_cast<int>(oracle.prompt_render[0].size()));
}

std::vector<double> style_vector(const UserProfile& user, const OracleParams& oracle) {
    if (user.feature_ids.size() != oracle.style_map.size())
        throw DimensionError("profile field count does not match the style map");
    std::vector<double> style(oracle.style_map[0][0].size(), 0.0);
    for (std::size_t f = 0; f < user.feature_ids.size(); ++f) {
        int v = user.feature_ids[f];
        if (v < 0 || v >= static_cast<int>(oracle.style_map[f].size()))
            throw IndexError("feature value outside its field cardinality");
        const auto& e = oracle.style_map[f][v];
        for (std::size_t i = 0; i < style.size(); ++i) style[i] += e[i];
    }
    return style;
}

std::vector<double> style_offset(const UserProfile& user, const OracleParams& oracle) {
    return matvec_rows(style_vector(user, oracle), oracle.style_render,
                       static_cast<int>(oracle.style_render[0].size()));
}

double oracle_score(const std::vector<double>& item, const std::vector<double>& cond,
                    const UserProfile& user, const OracleParams& oracle, double noise,
                    Rng* rng) {
    std::vector<double> rendered = render_condition(cond, oracle);
    if (item.size() != rendered.size())
        throw DimensionError("item length does not match the rendered condition");
    std::vector<double> residual(item.size());
    for (std::size_t i = 0; i < item.size(); ++i) residual[i] = item[i] - rendered[i];
    double score = oracle.consistency_weight * cosine(item, rendered) +
                   oracle.style_weight * cosine(residual, style_offset(user, oracle));
    if (noise > 0) {
        if (!rng) throw ContractError("score noise requested without an rng");
        score += noise * rng->gaussian();
    }
    return score;
}

std::vector<int> label_candidates(const std::vector<std::vector<double>>& items,
                                  const std::vector<double>& cond, const UserProfile& user,
                                  const OracleParams& oracle, int k, double noise,
                                  Rng* rng) {
    if (items.empty()) throw DegenerateInputError("no candidates to label");
    if (k <= 0 || k >= static_cast<int>(items.size()))
        throw ConfigError("need 0 < k < candidate count");
    std::vector<double> scores(items.size());
    for (std::size_t i = 0; i < items.size(); ++i)
        scores[i] = oracle_score(items[i], cond, user, oracle, noise, rng);
    std::vector<int> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });
    std::vector<int> labels(items.size(), 0);
    for (int i = 0; i < k; ++i) labels[order[i]] = 1;
    return labels;
}

GroupRecord make_group(const World& world, int user_id, int prompt_id, Rng& rng) {
    const WorldConfig& cfg = world.cfg;
    if (user_id < 0 || user_id >= cfg.n_users) throw IndexError("user_id outside the world");
    if (prompt_id < 0 || prompt_id >= cfg.n_prompts)
        throw IndexError("prompt_id outside the prompt pool");
    const UserProfile& user = world.users[user_id];
    const std::vector<double>& cond = world.prompt_conds[prompt_id];
    std::vector<double> base = render_condition(cond, world.oracle);
    std::vector<double> own = style_offset(user, world.oracle);

    GroupRecord rec;
    rec.user_id = user_id;
    rec.features = user.feature_ids;
    rec.prompt_id = prompt_id;
    rec.cond = cond;
    rec.items.reserve(cfg.group_size);
    for (int j = 0; j < cfg.group_size; ++j) {
        int donor = rng.uniform_index(cfg.n_users);
        double a = rng.uniform();
        std::vector<double> donor_off = style_offset(world.users[donor], world.oracle);
        std::vector<double> raw(cfg.item_dim);
        for (int d = 0; d < cfg.item_dim; ++d)
            raw[d] = a * own[d] + (1.0 - a) * donor_off[d];

        if (cfg.style_only) {
            // Project out the rendered direction and fix the norm so every
            // candidate has the same consistency, leaving style as the only
            // separating signal.
            double bb = std::max(dot(base, base), 1e-12);
            for (;;) {
                double coef = dot(raw, base) / bb;
                for (int d = 0; d < cfg.item_dim; ++d) raw[d] -= coef * base[d];
                double n = norm(raw);
                if (n >= 1e-9) {
                    for (int d = 0; d < cfg.item_dim; ++d)
                        raw[d] *= kStyleScale / n;
                    // Fixed-norm projection erases the mixing weight, so
                    // candidates whose donor offset is collinear with the
                    // user's own collapse to one vector and tie exactly.
                    // Re-mix until this candidate differs from the others.
                    bool duplicate = false;
                    for (const auto& prev : rec.items) {
                        double dist2 = 0.0;
                        for (int d = 0; d < cfg.item_dim; ++d) {
                            double diff = base[d] + raw[d] - prev[d];
                            dist2 += diff * diff;
                        }
                        if (dist2 < 1e-18) duplicate = true;
                    }
                    if (!duplicate) break;
                }
                raw = rng.gaussian_vector(cfg.item_dim);
            }
            std::vector<double> item(cfg.item_dim);
            for (int d = 0; d < cfg.item_dim; ++d) item[d] = base[d] + raw[d];
            rec.items.push_back(std::move(item));
        } else {
            std::vector<double> jitter = rng.gaussian_vector(cfg.item_dim);
            std::vector<double> item(cfg.item_dim);
            for (int d = 0; d < cfg.item_dim; ++d)
                item[d] = base[d] + raw[d] + kItemJitter * jitter[d];
            rec.items.push_back(std::move(item));
        }
    }
    rec.labels = label_candidates(rec.items, cond, user, world.oracle, cfg.k_positives,
                                  cfg.style_only ? 0.0 : cfg.noise, &rng);
    return rec;
}

GroupRecord make_consistency_group(const World& world, int user_id, int prompt_id,
                                   Rng& rng) {
    const WorldConfig& cfg = world.cfg;
    if (user_id < 0 || user_id >= cfg.n_users) throw IndexError("user_id outside the world");
    if (prompt_id < 0 || prompt_id >= cfg.n_prompts)
        throw IndexError("prompt_id outside the prompt pool");
    const std::vector<double>& cond = world.prompt_conds[prompt_id];
    std::vector<double> base = render_condition(cond, world.oracle);

    GroupRecord rec;
    rec.user_id = user_id;
    rec.features = world.users[user_id].feature_ids;
    rec.prompt_id = prompt_id;
    rec.cond = cond;
    rec.items.reserve(cfg.group_size);
    for (int j = 0; j < cfg.group_size; ++j) {
        int q = rng.uniform_index(cfg.n_prompts);
        std::vector<double> other = render_condition(world.prompt_conds[q], world.oracle);
        double m = rng.uniform();
        std::vector<double> jitter = rng.gaussian_vector(cfg.item_dim);
        std::vector<double> item(cfg.item_dim);
        for (int d = 0; d < cfg.item_dim; ++d)
            item[d] = m * base[d] + (1.0 - m) * other[d] + kItemJitter * jitter[d];
        rec.items.push_back(std::move(item));
    }
    // Labels come from the consistency term alone: with the style weight off
    // the oracle cannot see the user.
    OracleParams blind = world.oracle;
    blind.style_weight = 0.0;
    rec.labels = label_candidates(rec.items, cond, world.users[user_id], blind,
                                  cfg.k_positives, 0.0, nullptr);
    return rec;
}

std::vector<GroupRecord> generate_records(const World& world, Rng& rng) {
    std::vector<GroupRecord> records;
    records.reserve(world.cfg.n_records);
    for (int i = 0; i < world.cfg.n_records; ++i) {
        int user = i % world.cfg.n_users;
        int prompt = rng.uniform_index(world.cfg.n_prompts);
        records.push_back(make_group(world, user, prompt, rng));
    }
    return records;
}

void assign_splits(std::vector<GroupRecord>& records, int n_users, uint64_t seed) {
    int n = static_cast<int>(records.size());
    int n_valid = n / 10;
    int n_test = n / 10;
    int n_train = n - n_valid - n_test;
    if (n_train < n_users)
        throw ConfigError("fewer train slots than users; every user needs one");

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(seed, 0x73706c69ULL));
    rng.shuffle(order);
    for (int pos = 0; pos < n; ++pos) {
        GroupRecord& rec = records[order[pos]];
        rec.split = pos < n_train ? "train" : pos < n_train + n_valid ? "valid" : "test";
    }

    // Repair pass: swap a trainless user's first record against a train
    // record of a user that can spare one. Deterministic scan order.
    std::vector<int> train_count(n_users, 0);
    for (const auto& rec : records)
        if (rec.split == "train") ++train_count[rec.user_id];
    for (int u = 0; u < n_users; ++u) {
        if (train_count[u] > 0) continue;
        int mine = -1;
        for (int i = 0; i < n && mine < 0; ++i)
            if (records[i].user_id == u) mine = i;
        if (mine < 0) throw ConfigError("user without any record cannot reach train");
        int theirs = -1;
        for (int i = 0; i < n && theirs < 0; ++i)
            if (records[i].split == "train" && train_count[records[i].user_id] > 1)
                theirs = i;
        if (theirs < 0) throw ConfigError("no spare train record to reassign");
        std::swap(records[mine].split, records[theirs].split);
        --train_count[records[theirs].user_id];
        ++train_count[u];
    }
}

void write_records(const std::vector<GroupRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (const auto& rec : records) {
        nlohmann::ordered_json row;
        row["user_id"] = rec.user_id;
        row["features"] = rec.features;
        row["prompt_id"] = rec.prompt_id;
        row["condition"] = rec.cond;
        row["items"] = rec.items;
        row["labels"] = rec.labels;
        row["split"] = rec.split;
        out << row.dump() << '\n';
    }
    if (!out.good()) throw IoError("write failed: " + path);
}

std::vector<GroupRecord> read_records(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("dataset file not found: " + path);
    std::vector<GroupRecord> records;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json row;
        try {
            row = nlohmann::json::parse(line);
            GroupRecord rec;
            rec.user_id = row.at("user_id").get<int>();
            rec.features = row.at("features").get<std::vector<int>>();
            rec.prompt_id = row.at("prompt_id").get<int>();
            rec.cond = row.at("condition").get<std::vector<double>>();
            rec.items = row.at("items").get<std::vector<std::vector<double>>>();
            rec.labels = row.at("labels").get<std::vector<int>>();
            rec.split = row.at("split").get<std::string>();
            records.push_back(std::move(rec));
        } catch (const nlohmann::json::exception& e) {
            throw IoError("bad dataset row at " + path + ":" + std::to_string(line_no) +
                          ": " + e.what());
        }
    }
    return records;
}

std::vector<std::string> emit_dataset(const World& world, const std::string& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create directory: " + out_dir);

    Rng rec_rng(mix_seed(world.cfg.seed, 0x72656373ULL));
    std::vector<GroupRecord> records = generate_records(world, rec_rng);
    assign_splits(records, world.cfg.n_users, world.cfg.seed);

    Rng pre_rng(mix_seed(world.cfg.seed, 0x70726574ULL));
    std::vector<GroupRecord> pretrain;
    pretrain.reserve(world.cfg.n_pretrain_records);
    for (int i = 0; i < world.cfg.n_pretrain_records; ++i) {
        int user = i % world.cfg.n_users;
        int prompt = pre_rng.uniform_index(world.cfg.n_prompts);
        pretrain.push_back(make_consistency_group(world, user, prompt, pre_rng));
    }

    std::vector<std::string> paths;
    for (const char* split : {"train", "valid", "test"}) {
        std::vector<GroupRecord> part;
        for (const auto& rec : records)
            if (rec.split == split) part.push_back(rec);
        std::string path = out_dir + "/" + split + ".jsonl";
        write_records(part, path);
        paths.push_back(path);
    }
    std::string pre_path = out_dir + "/pretrain.jsonl";
    write_records(pretrain, pre_path);
    paths.push_back(pre_path);

    std::string world_path = out_dir + "/world.json";
    std::ofstream out(world_path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + world_path);
    out << world_config_to_json(world.cfg) << '\n';
    if (!out.good()) throw IoError("write failed: " + world_path);
    paths.push_back(world_path);
    return paths;
}

std::string world_config_to_json(const WorldConfig& cfg) {
    nlohmann::ordered_json j;
    j["n_users"] = cfg.n_users;
    j["cardinalities"] = cfg.cardinalities;
    j["item_dim"] = cfg.item_dim;
    j["cond_dim"] = cfg.cond_dim;
    j["n_prompts"] = cfg.n_prompts;
    j["group_size"] = cfg.group_size;
    j["k_positives"] = cfg.k_positives;
    j["n_records"] = cfg.n_records;
    j["n_pretrain_records"] = cfg.n_pretrain_records;
    j["noise"] = cfg.noise;
    j["style_only"] = cfg.style_only;
    j["min_records_per_user"] = cfg.min_records_per_user;
    j["seed"] = cfg.seed;
    return j.dump(2);
}

WorldConfig world_config_from_json(const std::string& text) {
    WorldConfig cfg;
    try {
        nlohmann::json j = nlohmann::json::parse(text);
        cfg.n_users = j.value("n_users", cfg.n_users);
        cfg.cardinalities = j.value("cardinalities", cfg.cardinalities);
        cfg.item_dim = j.value("item_dim", cfg.item_dim);
        cfg.cond_dim = j.value("cond_dim", cfg.cond_dim);
        cfg.n_prompts = j.value("n_prompts", cfg.n_prompts);
        cfg.group_size = j.value("group_size", cfg.group_size);
        cfg.k_positives = j.value("k_positives", cfg.k_positives);
        cfg.n_records = j.value("n_records", cfg.n_records);
        cfg.n_pretrain_records = j.value("n_pretrain_records", cfg.n_pretrain_records);
        cfg.noise = j.value("noise", cfg.noise);
        cfg.style_only = j.value("style_only", cfg.style_only);
        cfg.min_records_per_user = j.value("min_records_per_user", cfg.min_records_per_user);
        cfg.seed = j.value("seed", cfg.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad world config: ") + e.what());
    }
    return cfg;
}

std::vector<int> prompt_token_ids(int prompt_id, int vocab, int len) {
    if (vocab <= 0 || len <= 0) throw ConfigError("vocab and prompt length must be positive");
    Rng rng(mix_seed(0x70726d74ULL, static_cast<uint64_t>(prompt_id)));
    std::vector<int> ids(len);
    for (auto& id : ids) id = rng.uniform_index(vocab);
    return ids;
}

RmExample to_rm_example(const GroupRecord& rec, int vocab, int prompt_len) {
    RmExample ex;
    ex.profile = UserProfile{rec.features};
    ex.prompt_tokens = prompt_token_ids(rec.prompt_id, vocab, prompt_len);
    for (const auto& item : rec.items) {
        std::vector<double> v = item;
        ex.items.push_back(Tensor::from_vector(std::move(v), {static_cast<int>(item.size())}));
    }
    ex.labels = rec.labels;
    return ex;
}

PreferenceGroup to_preference_group(const GroupRecord& rec) {
    PreferenceGroup g;
    g.user = UserProfile{rec.features};
    std::vector<double> c = rec.cond;
    g.cond = Tensor::from_vector(std::move(c), {static_cast<int>(rec.cond.size())});
    for (std::size_t i = 0; i < rec.items.size(); ++i) {
        std::vector<double> v = rec.items[i];
        Tensor t = Tensor::from_vector(std::move(v), {static_cast<int>(rec.items[i].size())});
        (rec.labels[i] == 1 ? g.positives : g.negatives).push_back(std::move(t));
    }
    return g;
}

std::vector<DiffusionExample> positive_examples(const std::vector<GroupRecord>& records,
                                                bool with_user) {
    std::vector<DiffusionExample> out;
    for (const auto& rec : records) {
        std::vector<double> c = rec.cond;
        Tensor cond = Tensor::from_vector(std::move(c), {static_cast<int>(rec.cond.size())});
        for (std::size_t i = 0; i < rec.items.size(); ++i) {
            if (rec.labels[i] != 1) continue;
            std::vector<double> v = rec.items[i];
            DiffusionExample ex;
            ex.z0 = Tensor::from_vector(std::move(v), {static_cast<int>(rec.items[i].size())});
            ex.cond = cond;
            if (with_user) ex.user = UserProfile{rec.features};
            out.push_back(std::move(ex));
        }
    }
    return out;
}

}  // namespace groupalign
