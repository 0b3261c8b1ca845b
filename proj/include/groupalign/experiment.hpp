#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "groupalign/synthdata.hpp"

namespace groupalign {

// Every knob of every command, as one flat key-value document. Commands read
// the part they need; the resolved whole is persisted next to each run's
// outputs.
struct ExperimentConfig {
    WorldConfig world;

    // Reward model geometry.
    int vocab = 32;
    int prompt_len = 6;
    int text_width = 16;
    int text_layers = 2;
    int text_heads = 2;
    int text_ffn = 32;
    int item_width = 16;
    int item_layers = 2;
    int item_heads = 2;
    int item_ffn = 32;
    int tower_out = 12;
    int item_chunks = 4;
    int plugin_embed = 8;
    int plugin_depth = 2;
    std::string rm_mode = "duplicated";

    // Diffusion geometry and schedule.
    int unet_w1 = 32;
    int unet_w2 = 24;
    int unet_w3 = 16;
    int unet_emb = 16;
    int t_steps = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    bool personalized = true;
    std::string mode = "group_dpo";  // sft | pairwise_dpo | group_dpo

    // Optimizers. rm_* follows the reference recipe (1e-3, 500 warmup, 1e-2
    // decay). The reference diffusion alignment rate is 1e-8 at industrial
    // scale; this toy uses 1e-4 or nothing moves in 100 steps.
    int pretrain_epochs = 6;
    int pretrain_batch = 16;
    double pretrain_lr = 1e-3;
    int pretrain_warmup = 50;
    double pretrain_wd = 1e-2;
    int rm_epochs = 8;
    int rm_batch = 16;
    double rm_lr = 1e-3;
    int rm_warmup = 500;
    double rm_wd = 1e-2;
    int sft_epochs = 4;
    int sft_batch = 16;
    double sft_lr = 1e-4;
    int sft_warmup = 0;
    double sft_wd = 0.0;
    int dpo_epochs = 2;
    int dpo_batch = 8;
    double dpo_lr = 1e-4;
    int dpo_warmup = 0;
    double dpo_wd = 0.0;
    double beta = 2000.0;

    // Sampling and evaluation.
    int n_eval_users = 16;
    int n_eval_prompts = 8;
    int n_samples_per_pair = 2;
    std::string scorer = "model";  // eval-rm: model | oracle
    std::string eval_splits = "train,valid,test";

    // Paths and run control.
    std::string out = "runs/out";
    std::string data_dir;
    std::string backbone_checkpoint;
    std::string rm_checkpoint;
    std::string diffusion_checkpoint;
    std::string ref_checkpoint;
    std::string samples;  // comma-separated sample jsonl paths (eval-gen)
    std::string preset;   // sweep: prm-ablation | pf-ablation
    bool pretrain_inline = false;
    bool parallel = false;
    std::uint64_t seed = 0;
};

// Strict parse: an unknown key is a config error, so typos cannot silently
// fall back to defaults. Absent keys keep their defaults.
ExperimentConfig experiment_config_from_json(const std::string& text);
void apply_config_json(ExperimentConfig& cfg, const std::string& text);
std::string experiment_config_to_json(const ExperimentConfig& cfg);

std::uint64_t fnv1a64(const std::string& text);

// manifest.json written next to every run's outputs. wall_clock_ms is the
// only field allowed to differ between identical re-runs.
struct RunManifest {
    std::string run_id;
    std::string config_hash;
    std::string revision;
    std::vector<std::string> artifacts;
    long long wall_clock_ms = 0;
};

std::string run_id_for(const std::string& command, const ExperimentConfig& cfg);

// Each command writes its artifacts plus config.json and manifest.json into
// cfg.out and returns the artifact paths (manifest/config included).
std::vector<std::string> cmd_gen_data(const ExperimentConfig& cfg);
std::vector<std::string> cmd_pretrain_backbone(const ExperimentConfig& cfg);
std::vector<std::string> cmd_train_rm(const ExperimentConfig& cfg);
std::vector<std::string> cmd_eval_rm(const ExperimentConfig& cfg);
std::vector<std::string> cmd_train_diffusion(const ExperimentConfig& cfg);
std::vector<std::string> cmd_sample(const ExperimentConfig& cfg);
std::vector<std::string> cmd_eval_gen(const ExperimentConfig& cfg);
std::vector<std::string> cmd_sweep(const ExperimentConfig& cfg);

// Dispatch by subcommand name; unknown name is a config error.
std::vector<std::string> run_command(const std::string& command, const ExperimentConfig& cfg);

// One row of eval-rm output, parsed back for tests and sweeps.
struct RmEvalRow {
    std::string run_id;
    std::string split;
    double map = 0.0;
    double gauc = 0.0;
    int n_groups = 0;
    int n_skipped = 0;
};
std::vector<RmEvalRow> read_rm_metrics(const std::string& path);

// One row of eval-gen output.
struct GenEvalRow {
    std::string run_id;
    std::string variant;
    double mean_oracle = 0.0;
    double mean_rm = 0.0;
    int n_samples = 0;
};
std::vector<GenEvalRow> read_gen_metrics(const std::string& path);

}  // namespace groupalign
