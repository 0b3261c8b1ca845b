#include "groupalign/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <thread>
#include <tuple>

#include "json.hpp"

#include "groupalign/checkpoint.hpp"
#include "groupalign/metrics.hpp"

namespace groupalign {

namespace {

constexpr uint64_t kTagRmInit = 0x726d696eULL;
constexpr uint64_t kTagDiffInit = 0x6466696eULL;
constexpr uint64_t kTagBranchInit = 0x6272696eULL;
constexpr uint64_t kTagSample = 0x73616d70ULL;

std::string fmt(double x) {
    std::ostringstream ss;
    ss << std::setprecision(17) << x;
    return ss.str();
}

std::vector<std::string> split_list(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream ss(s);
    while (std::getline(ss, item, sep))
        if (!item.empty()) out.push_back(item);
    return out;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory: " + dir);
}

// Appends rows, writing the header first when the file is new or empty.
void append_csv(const std::string& path, const std::string& header,
                const std::vector<std::string>& rows) {
    bool fresh = true;
    {
        std::ifstream probe(path, std::ios::binary);
        fresh = !probe.good() || probe.peek() == std::ifstream::traits_type::eof();
    }
    std::ofstream out(path, std::ios::binary | std::ios::app);
    if (!out) throw IoError("cannot open for writing: " + path);
    if (fresh) out << header << '\n';
    for (const auto& row : rows) out << row << '\n';
    if (!out.good()) throw IoError("write failed: " + path);
}

std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    auto e = s.find_last_not_of(" \t\r\n");
    return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

// Best-effort source revision for the manifest; stable within a checkout.
std::string read_revision() {
    std::ifstream head(".git/HEAD");
    if (!head) return "unknown";
    std::string line;
    std::getline(head, line);
    line = trim(line);
    if (line.rfind("ref: ", 0) == 0) {
        std::ifstream ref(".git/" + line.substr(5));
        if (!ref) return "unknown";
        std::getline(ref, line);
        line = trim(line);
    }
    return line.size() >= 12 ? line.substr(0, 12) : (line.empty() ? "unknown" : line);
}

using Clock = std::chrono::steady_clock;

// Writes the resolved config and the manifest, returning all artifacts.
std::vector<std::string> finish_run(const std::string& command, const ExperimentConfig& cfg,
                                    std::vector<std::string> artifacts, Clock::time_point t0) {
    ensure_dir(cfg.out);
    std::string config_path = cfg.out + "/config.json";
    {
        std::ofstream out(config_path, std::ios::binary);
        if (!out) throw IoError("cannot open for writing: " + config_path);
        out << experiment_config_to_json(cfg) << '\n';
        if (!out.good()) throw IoError("write failed: " + config_path);
    }
    artifacts.push_back(config_path);

    std::ostringstream hash;
    hash << std::hex << std::setfill('0') << std::setw(16)
         << fnv1a64(command + "\n" + experiment_config_to_json(cfg));

    auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - t0);
    nlohmann::ordered_json j;
    j["run_id"] = run_id_for(command, cfg);
    j["config_hash"] = hash.str();
    j["revision"] = read_revision();
    j["artifacts"] = artifacts;
    j["wall_clock_ms"] = ms.count();
    std::string manifest_path = cfg.out + "/manifest.json";
    std::ofstream out(manifest_path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + manifest_path);
    out << j.dump(2) << '\n';
    if (!out.good()) throw IoError("write failed: " + manifest_path);
    artifacts.push_back(manifest_path);
    return artifacts;
}

World load_world(const ExperimentConfig& cfg) {
    if (cfg.data_dir.empty()) throw ConfigError("data_dir is required");
    std::string path = cfg.data_dir + "/world.json";
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("world config not found: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return generate_world(world_config_from_json(ss.str()));
}

std::vector<GroupRecord> load_split(const ExperimentConfig& cfg, const std::string& split) {
    return read_records(cfg.data_dir + "/" + split + ".jsonl");
}

RewardModel build_rm(const ExperimentConfig& cfg, const World& world, Rng& rng) {
    RewardConfig rc;
    rc.text_tower.width = cfg.text_width;
    rc.text_tower.layers = cfg.text_layers;
    rc.text_tower.heads = cfg.text_heads;
    rc.text_tower.ffn_hidden = cfg.text_ffn;
    rc.text_tower.out_dim = cfg.tower_out;
    rc.text_tower.max_len = cfg.prompt_len;
    rc.text_tower.vocab = cfg.vocab;
    rc.item_tower.width = cfg.item_width;
    rc.item_tower.layers = cfg.item_layers;
    rc.item_tower.heads = cfg.item_heads;
    rc.item_tower.ffn_hidden = cfg.item_ffn;
    rc.item_tower.out_dim = cfg.tower_out;
    rc.item_tower.max_len = cfg.item_chunks;
    rc.item_tower.item_dim = world.cfg.item_dim;
    rc.item_tower.chunks = cfg.item_chunks;
    rc.plugin.cardinalities = world.cfg.cardinalities;
    rc.plugin.embed_dim = cfg.plugin_embed;
    rc.plugin.cross_depth = cfg.plugin_depth;
    rc.mode = wiring_mode_from_string(cfg.rm_mode);
    return RewardModel(rc, rng);
}

DiffusionModel build_diffusion(const ExperimentConfig& cfg, const World& world,
                               bool personalized, Rng& rng) {
    DiffusionConfig dc;
    dc.unet.item_dim = world.cfg.item_dim;
    dc.unet.cond_dim = world.cfg.cond_dim;
    dc.unet.w1 = cfg.unet_w1;
    dc.unet.w2 = cfg.unet_w2;
    dc.unet.w3 = cfg.unet_w3;
    dc.unet.emb_dim = cfg.unet_emb;
    dc.schedule.t_steps = cfg.t_steps;
    dc.schedule.beta_start = cfg.beta_start;
    dc.schedule.beta_end = cfg.beta_end;
    dc.user_plugin.cardinalities = world.cfg.cardinalities;
    dc.user_plugin.embed_dim = cfg.plugin_embed;
    dc.user_plugin.cross_depth = cfg.plugin_depth;
    dc.personalized = personalized;
    return DiffusionModel(dc, rng);
}

NamedParams filter_prefix(const NamedParams& all, const std::string& prefix) {
    NamedParams out;
    for (const auto& [name, t] : all)
        if (name.rfind(prefix, 0) == 0) out.emplace_back(name, t);
    return out;
}

bool file_has_prefix(const std::string& path, const std::string& prefix) {
    for (const auto& name : checkpoint_names(path))
        if (name.rfind(prefix, 0) == 0) return true;
    return false;
}

std::vector<RmExample> to_examples(const std::vector<GroupRecord>& records,
                                   const ExperimentConfig& cfg) {
    std::vector<RmExample> out;
    out.reserve(records.size());
    for (const auto& rec : records) out.push_back(to_rm_example(rec, cfg.vocab, cfg.prompt_len));
    return out;
}

void write_losses_csv(const std::string& path, const std::vector<double>& losses) {
    std::vector<std::string> rows;
    for (std::size_t i = 0; i < losses.size(); ++i)
        rows.push_back(std::to_string(i) + "," + fmt(losses[i]));
    append_csv(path, "epoch,loss", rows);
}

// Runs the closures, in threads when asked; the first failure wins.
void run_stage(std::vector<std::function<void()>> jobs, bool parallel) {
    if (!parallel) {
        for (auto& job : jobs) job();
        return;
    }
    std::vector<std::exception_ptr> errors(jobs.size());
    std::vector<std::thread> threads;
    threads.reserve(jobs.size());
    for (std::size_t i = 0; i < jobs.size(); ++i)
        threads.emplace_back([&, i] {
            try {
                jobs[i]();
            } catch (...) {
                errors[i] = std::current_exception();
            }
        });
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace

std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string run_id_for(const std::string& command, const ExperimentConfig& cfg) {
    std::ostringstream ss;
    ss << command << "-" << std::hex << std::setfill('0') << std::setw(8)
       << (fnv1a64(command + "\n" + experiment_config_to_json(cfg)) & 0xffffffffULL);
    return ss.str();
}

std::string experiment_config_to_json(const ExperimentConfig& cfg) {
    nlohmann::ordered_json j = nlohmann::ordered_json::parse(world_config_to_json(cfg.world));
    j["vocab"] = cfg.vocab;
    j["prompt_len"] = cfg.prompt_len;
    j["text_width"] = cfg.text_width;
    j["text_layers"] = cfg.text_layers;
    j["text_heads"] = cfg.text_heads;
    j["text_ffn"] = cfg.text_ffn;
    j["item_width"] = cfg.item_width;
    j["item_layers"] = cfg.item_layers;
    j["item_heads"] = cfg.item_heads;
    j["item_ffn"] = cfg.item_ffn;
    j["tower_out"] = cfg.tower_out;
    j["item_chunks"] = cfg.item_chunks;
    j["plugin_embed"] = cfg.plugin_embed;
    j["plugin_depth"] = cfg.plugin_depth;
    j["rm_mode"] = cfg.rm_mode;
    j["unet_w1"] = cfg.unet_w1;
    j["unet_w2"] = cfg.unet_w2;
    j["unet_w3"] = cfg.unet_w3;
    j["unet_emb"] = cfg.unet_emb;
    j["t_steps"] = cfg.t_steps;
    j["beta_start"] = cfg.beta_start;
    j["beta_end"] = cfg.beta_end;
    j["personalized"] = cfg.personalized;
    j["mode"] = cfg.mode;
    j["pretrain_epochs"] = cfg.pretrain_epochs;
    j["pretrain_batch"] = cfg.pretrain_batch;
    j["pretrain_lr"] = cfg.pretrain_lr;
    j["pretrain_warmup"] = cfg.pretrain_warmup;
    j["pretrain_wd"] = cfg.pretrain_wd;
    j["rm_epochs"] = cfg.rm_epochs;
    j["rm_batch"] = cfg.rm_batch;
    j["rm_lr"] = cfg.rm_lr;
    j["rm_warmup"] = cfg.rm_warmup;
    j["rm_wd"] = cfg.rm_wd;
    j["sft_epochs"] = cfg.sft_epochs;
    j["sft_batch"] = cfg.sft_batch;
    j["sft_lr"] = cfg.sft_lr;
    j["sft_warmup"] = cfg.sft_warmup;
    j["sft_wd"] = cfg.sft_wd;
    j["dpo_epochs"] = cfg.dpo_epochs;
    j["dpo_batch"] = cfg.dpo_batch;
    j["dpo_lr"] = cfg.dpo_lr;
    j["dpo_warmup"] = cfg.dpo_warmup;
    j["dpo_wd"] = cfg.dpo_wd;
    j["beta"] = cfg.beta;
    j["n_eval_users"] = cfg.n_eval_users;
    j["n_eval_prompts"] = cfg.n_eval_prompts;
    j["n_samples_per_pair"] = cfg.n_samples_per_pair;
    j["scorer"] = cfg.scorer;
    j["eval_splits"] = cfg.eval_splits;
    j["out"] = cfg.out;
    j["data_dir"] = cfg.data_dir;
    j["backbone_checkpoint"] = cfg.backbone_checkpoint;
    j["rm_checkpoint"] = cfg.rm_checkpoint;
    j["diffusion_checkpoint"] = cfg.diffusion_checkpoint;
    j["ref_checkpoint"] = cfg.ref_checkpoint;
    j["samples"] = cfg.samples;
    j["preset"] = cfg.preset;
    j["pretrain_inline"] = cfg.pretrain_inline;
    j["parallel"] = cfg.parallel;
    return j.dump(2);
}

void apply_config_json(ExperimentConfig& cfg, const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad config json: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a flat json object");
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "n_users") cfg.world.n_users = value.get<int>();
            else if (key == "cardinalities") cfg.world.cardinalities = value.get<std::vector<int>>();
            else if (key == "item_dim") cfg.world.item_dim = value.get<int>();
            else if (key == "cond_dim") cfg.world.cond_dim = value.get<int>();
            else if (key == "n_prompts") cfg.world.n_prompts = value.get<int>();
            else if (key == "group_size") cfg.world.group_size = value.get<int>();
            else if (key == "k_positives") cfg.world.k_positives = value.get<int>();
            else if (key == "n_records") cfg.world.n_records = value.get<int>();
            else if (key == "n_pretrain_records") cfg.world.n_pretrain_records = value.get<int>();
            else if (key == "noise") cfg.world.noise = value.get<double>();
            else if (key == "style_only") cfg.world.style_only = value.get<bool>();
            else if (key == "min_records_per_user") cfg.world.min_records_per_user = value.get<int>();
            else if (key == "seed") { cfg.seed = value.get<std::uint64_t>(); cfg.world.seed = cfg.seed; }
            else if (key == "vocab") cfg.vocab = value.get<int>();
            else if (key == "prompt_len") cfg.prompt_len = value.get<int>();
            else if (key == "text_width") cfg.text_width = value.get<int>();
            else if (key == "text_layers") cfg.text_layers = value.get<int>();
            else if (key == "text_heads") cfg.text_heads = value.get<int>();
            else if (key == "text_ffn") cfg.text_ffn = value.get<int>();
            else if (key == "item_width") cfg.item_width = value.get<int>();
            else if (key == "item_layers") cfg.item_layers = value.get<int>();
            else if (key == "item_heads") cfg.item_heads = value.get<int>();
            else if (key == "item_ffn") cfg.item_ffn = value.get<int>();
            else if (key == "tower_out") cfg.tower_out = value.get<int>();
            else if (key == "item_chunks") cfg.item_chunks = value.get<int>();
            else if (key == "plugin_embed") cfg.plugin_embed = value.get<int>();
            else if (key == "plugin_depth") cfg.plugin_depth = value.get<int>();
            else if (key == "rm_mode") cfg.rm_mode = value.get<std::string>();
            else if (key == "unet_w1") cfg.unet_w1 = value.get<int>();
            else if (key == "unet_w2") cfg.unet_w2 = value.get<int>();
            else if (key == "unet_w3") cfg.unet_w3 = value.get<int>();
            else if (key == "unet_emb") cfg.unet_emb = value.get<int>();
            else if (key == "t_steps") cfg.t_steps = value.get<int>();
            else if (key == "beta_start") cfg.beta_start = value.get<double>();
            else if (key == "beta_end") cfg.beta_end = value.get<double>();
            else if (key == "personalized") cfg.personalized = value.get<bool>();
            else if (key == "mode") cfg.mode = value.get<std::string>();
            else if (key == "pretrain_epochs") cfg.pretrain_epochs = value.get<int>();
            else if (key == "pretrain_batch") cfg.pretrain_batch = value.get<int>();
            else if (key == "pretrain_lr") cfg.pretrain_lr = value.get<double>();
            else if (key == "pretrain_warmup") cfg.pretrain_warmup = value.get<int>();
            else if (key == "pretrain_wd") cfg.pretrain_wd = value.get<double>();
            else if (key == "rm_epochs") cfg.rm_epochs = value.get<int>();
            else if (key == "rm_batch") cfg.rm_batch = value.get<int>();
            else if (key == "rm_lr") cfg.rm_lr = value.get<double>();
            else if (key == "rm_warmup") cfg.rm_warmup = value.get<int>();
            else if (key == "rm_wd") cfg.rm_wd = value.get<double>();
            else if (key == "sft_epochs") cfg.sft_epochs = value.get<int>();
            else if (key == "sft_batch") cfg.sft_batch = value.get<int>();
            else if (key == "sft_lr") cfg.sft_lr = value.get<double>();
            else if (key == "sft_warmup") cfg.sft_warmup = value.get<int>();
            else if (key == "sft_wd") cfg.sft_wd = value.get<double>();
            else if (key == "dpo_epochs") cfg.dpo_epochs = value.get<int>();
            else if (key == "dpo_batch") cfg.dpo_batch = value.get<int>();
            else if (key == "dpo_lr") cfg.dpo_lr = value.get<double>();
            else if (key == "dpo_warmup") cfg.dpo_warmup = value.get<int>();
            else if (key == "dpo_wd") cfg.dpo_wd = value.get<double>();
            else if (key == "beta") cfg.beta = value.get<double>();
            else if (key == "n_eval_users") cfg.n_eval_users = value.get<int>();
            else if (key == "n_eval_prompts") cfg.n_eval_prompts = value.get<int>();
            else if (key == "n_samples_per_pair") cfg.n_samples_per_pair = value.get<int>();
            else if (key == "scorer") cfg.scorer = value.get<std::string>();
            else if (key == "eval_splits") cfg.eval_splits = value.get<std::string>();
            else if (key == "out") cfg.out = value.get<std::string>();
            else if (key == "data_dir") cfg.data_dir = value.get<std::string>();
            else if (key == "backbone_checkpoint") cfg.backbone_checkpoint = value.get<std::string>();
            else if (key == "rm_checkpoint") cfg.rm_checkpoint = value.get<std::string>();
            else if (key == "diffusion_checkpoint") cfg.diffusion_checkpoint = value.get<std::string>();
            else if (key == "ref_checkpoint") cfg.ref_checkpoint = value.get<std::string>();
            else if (key == "samples") cfg.samples = value.get<std::string>();
            else if (key == "preset") cfg.preset = value.get<std::string>();
            else if (key == "pretrain_inline") cfg.pretrain_inline = value.get<bool>();
            else if (key == "parallel") cfg.parallel = value.get<bool>();
            else throw ConfigError("unknown config key: " + key);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }
}

ExperimentConfig experiment_config_from_json(const std::string& text) {
    ExperimentConfig cfg;
    apply_config_json(cfg, text);
    return cfg;
}

std::vector<std::string> cmd_gen_data(const ExperimentConfig& cfg) {
    auto t0 = Clock::now();
    World world = generate_world(cfg.world);
    ensure_dir(cfg.out);
    std::vector<std::string> artifacts = emit_dataset(world, cfg.out);
    return finish_run("gen-data", cfg, std::move(artifacts), t0);
}

std::vector<std::string> cmd_pretrain_backbone(const ExperimentConfig& cfg) {
    auto t0 = Clock::now();
    World world = load_world(cfg);
    Rng rng(mix_seed(cfg.seed, kTagRmInit));
    RewardModel model = build_rm(cfg, world, rng);

    std::vector<RmExample> examples = to_examples(load_split(cfg, "pretrain"), cfg);
    RmTrainConfig tc;
    tc.epochs = cfg.pretrain_epochs;
    tc.batch_size = cfg.pretrain_batch;
    tc.lr = cfg.pretrain_lr;
    tc.weight_decay = cfg.pretrain_wd;
    tc.warmup_steps = cfg.pretrain_warmup;
    tc.seed = cfg.seed;
    std::vector<double> losses = pretrain_backbone(model, examples, tc);

    ensure_dir(cfg.out);
    std::string ckpt = cfg.out + "/backbone.ckpt";
    save_checkpoint(ckpt, model.backbone_named_params());
    std::string csv = cfg.out + "/losses.csv";
    write_losses_csv(csv, losses);
    return finish_run("pretrain-backbone", cfg, {ckpt, csv}, t0);
}

std::vector<std::string> cmd_train_rm(const ExperimentConfig& cfg) {
    auto t0 = Clock::now();
    World world = load_world(cfg);
    Rng rng(mix_seed(cfg.seed, kTagRmInit));
    RewardModel model = build_rm(cfg, world, rng);

    if (!cfg.backbone_checkpoint.empty()) {
        NamedParams backbone = model.backbone_named_params();
        load_checkpoint(cfg.backbone_checkpoint, backbone);
    } else if (cfg.pretrain_inline) {
        std::vector<RmExample> pre = to_examples(load_split(cfg, "pretrain"), cfg);
        RmTrainConfig pc;
        pc.epochs = cfg.pretrain_epochs;
        pc.batch_size = cfg.pretrain_batch;
        pc.lr = cfg.pretrain_lr;
        pc.weight_decay = cfg.pretrain_wd;
        pc.warmup_steps = cfg.pretrain_warmup;
        pc.seed = cfg.seed;
        pretrain_backbone(model, pre, pc);
    } else {
        throw ConfigError("train-rm needs backbone_checkpoint or pretrain_inline");
    }

    model.freeze_backbone();
    std::vector<RmExample> examples = to_examples(load_split(cfg, "train"), cfg);
    RmTrainConfig tc;
    tc.epochs = cfg.rm_epochs;
    tc.batch_size = cfg.rm_batch;
    tc.lr = cfg.rm_lr;
    tc.weight_decay = cfg.rm_wd;
    tc.warmup_steps = cfg.rm_warmup;
    tc.seed = cfg.seed;
    std::vector<double> losses = train_rm(model, examples, tc);

    ensure_dir(cfg.out);
    std::string ckpt = cfg.out + "/rm.ckpt";
    save_checkpoint(ckpt, model.named_params());
    std::string csv = cfg.out + "/losses.csv";
    write_losses_csv(csv, losses);
    return finish_run("train-rm", cfg, {ckpt, csv}, t0);
}

std::vector<std::string> cmd_eval_rm(const ExperimentConfig& cfg) {
    auto t0 = Clock::now();
    World world = load_world(cfg);
    Rng rng(mix_seed(cfg.seed, kTagRmInit));
    RewardModel model = build_rm(cfg, world, rng);
    if (cfg.scorer == "model") {
        if (cfg.rm_checkpoint.empty()) throw ConfigError("eval-rm needs rm_checkpoint");
        NamedParams all = model.named_params();
        load_checkpoint(cfg.rm_checkpoint, all);
    } else if (cfg.scorer != "oracle") {
        throw ConfigError("scorer must be 'model' or 'oracle'");
    }

    std::string run_id = run_id_for("eval-rm", cfg);
    std::vector<std::string> rows;
    for (const std::string& split : split_list(cfg.eval_splits, ',')) {
        std::vector<GroupRecord> records = load_split(cfg, split);
        std::vector<ScoredGroup> groups;
        groups.reserve(records.size());
        NoGradGuard guard;
        for (const auto& rec : records) {
            ScoredGroup g;
            g.labels = rec.labels;
            if (cfg.scorer == "oracle") {
                for (const auto& item : rec.items)
                    g.scores.push_back(oracle_score(item, rec.cond,
                                                    world.users[rec.user_id], world.oracle));
            } else {
                RmExample ex = to_rm_example(rec, cfg.vocab, cfg.prompt_len);
                Tensor s = model.group_scores(ex.prompt_tokens, ex.items, ex.profile);
                g.scores = s.data();
            }
            groups.push_back(std::move(g));
        }
        MetricResult map = map_metric(groups);
        MetricResult gauc = gauc_metric(groups);
        // Group counts follow the gauc convention; with 0 < K < N both
        // metrics skip nothing and the counts coincide.
        rows.push_back(run_id + "," + split + "," + fmt(map.value) + "," + fmt(gauc.value) +
                       "," + std::to_string(gauc.n_groups) + "," +
                       std::to_string(gauc.n_skipped));
    }
    ensure_dir(cfg.out);
    std::string csv = cfg.out + "/metrics.csv";
    append_csv(csv, "run_id,split,map,gauc,n_groups,n_skipped", rows);
    return finish_run("eval-rm", cfg, {csv}, t0);
}

std::vector<std::string> cmd_train_diffusion(const ExperimentConfig& cfg) {
    auto t0 = Clock::now();
    if (cfg.mode != "sft" && cfg.mode != "pairwise_dpo" && cfg.mode != "group_dpo")
        throw ConfigError("mode must be sft, pairwise_dpo, or group_dpo");
    World world = load_world(cfg);
    std::vector<GroupRecord> records = load_split(cfg, "train");
    Rng rng(mix_seed(cfg.seed, kTagDiffInit));
    DiffusionModel model = build_diffusion(cfg, world, cfg.personalized, rng);

    ensure_dir(cfg.out);
    std::string ckpt = cfg.out + "/diffusion.ckpt";
    std::string csv = cfg.out + "/losses.csv";

    if (cfg.mode == "sft") {
        std::vector<DiffusionExample> data = positive_examples(records, cfg.personalized);
        DiffusionTrainConfig tc;
        tc.epochs = cfg.sft_epochs;
        tc.batch_size = cfg.sft_batch;
        tc.lr = cfg.sft_lr;
        tc.weight_decay = cfg.sft_wd;
        tc.warmup_steps = cfg.sft_warmup;
        tc.seed = cfg.seed;
        std::vector<double> losses = train_sft(model, data, tc);
        write_losses_csv(csv, losses);
    } else {
        if (cfg.ref_checkpoint.empty())
            throw ConfigError("dpo modes need ref_checkpoint (an sft checkpoint)");
        if (!std::filesystem::exists(cfg.ref_checkpoint))
            throw MissingArtifactError("reference checkpoint not found: " + cfg.ref_checkpoint);
        NamedParams backbone = filter_prefix(model.named_params(), "diffusion/backbone/");
        load_checkpoint(cfg.ref_checkpoint, backbone);
        if (cfg.personalized) {
            // Branch blocks must copy the loaded backbone, not the random
            // init it replaced.
            Rng brng(mix_seed(cfg.seed, kTagBranchInit));
            model.attach_branch(brng);
            if (file_has_prefix(cfg.ref_checkpoint, "diffusion/branch/")) {
                NamedParams branch = filter_prefix(model.named_params(), "diffusion/branch/");
                load_checkpoint(cfg.ref_checkpoint, branch);
            }
        }
        DiffusionModel ref = model.clone();
        ref.freeze_all();
        if (cfg.personalized) model.freeze_backbone();

        std::vector<PreferenceGroup> groups;
        groups.reserve(records.size());
        for (const auto& rec : records) groups.push_back(to_preference_group(rec));
        DpoTrainConfig tc;
        tc.epochs = cfg.dpo_epochs;
        tc.batch_size = cfg.dpo_batch;
        tc.lr = cfg.dpo_lr;
        tc.weight_decay = cfg.dpo_wd;
        tc.warmup_steps = cfg.dpo_warmup;
        tc.seed = cfg.seed;
        tc.dpo.beta = cfg.beta;
        tc.objective =
            cfg.mode == "group_dpo" ? DpoObjective::group : DpoObjective::pairwise;
        std::vector<DpoStepStats> stats = train_group_dpo(model, ref, groups, tc);
        std::vector<std::string> rows;
        for (const auto& s : stats)
            rows.push_back(std::to_string(s.step) + "," + fmt(s.mean_loss) + "," +
                           fmt(s.mean_s_pos) + "," + fmt(s.mean_s_neg));
        append_csv(csv, "step,mean_loss,mean_s_pos,mean_s_neg", rows);
    }
    save_checkpoint(ckpt, model.named_params());
    return finish_run("train-diffusion", cfg, {ckpt, csv}, t0);
}

std::vector<std::string> cmd_sample(const ExperimentConfig& cfg) {
    auto t0 = Clock::now();
    if (cfg.diffusion_checkpoint.empty()) throw ConfigError("sample needs diffusion_checkpoint");
    if (!std::filesystem::exists(cfg.diffusion_checkpoint))
        throw MissingArtifactError("diffusion checkpoint not found: " + cfg.diffusion_checkpoint);
    World world = load_world(cfg);
    // The checkpoint decides whether a personalized branch exists.
    bool branch = file_has_prefix(cfg.diffusion_checkpoint, "diffusion/branch/");
    Rng rng(mix_seed(cfg.seed, kTagDiffInit));
    DiffusionModel model = build_diffusion(cfg, world, branch, rng);
    NamedParams all = model.named_params();
    load_checkpoint(cfg.diffusion_checkpoint, all);

    int n_u = std::min(cfg.n_eval_users, world.cfg.n_users);
    int n_p = std::min(cfg.n_eval_prompts, world.cfg.n_prompts);
    if (n_u <= 0 || n_p <= 0 || cfg.n_samples_per_pair <= 0)
        throw ConfigError("sample counts must be positive");

    std::string run_id = run_id_for("sample", cfg);
    ensure_dir(cfg.out);
    std::string path = cfg.out + "/samples.jsonl";
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (int u = 0; u < n_u; ++u) {
        for (int p = 0; p < n_p; ++p) {
            std::vector<double> c = world.prompt_conds[p];
            Tensor cond = Tensor::from_vector(std::move(c), {world.cfg.cond_dim});
            for (int s = 0; s < cfg.n_samples_per_pair; ++s) {
                uint64_t sample_seed = mix_seed(
                    mix_seed(mix_seed(mix_seed(cfg.seed, kTagSample), u), p), s);
                Rng srng(sample_seed);
                Tensor item = sample_item(model, cond, world.users[u], srng);
                nlohmann::ordered_json row;
                row["run_id"] = run_id;
                row["user_id"] = u;
                row["prompt_id"] = p;
                row["seed"] = sample_seed;
                row["item"] = item.data();
                out << row.dump() << '\n';
            }
        }
    }
    if (!out.good()) throw IoError("write failed: " + path);
    out.close();
    return finish_run("sample", cfg, {path}, t0);
}

std::vector<std::string> cmd_eval_gen(const ExperimentConfig& cfg) {
    auto t0 = Clock::now();
    std::vector<std::string> files = split_list(cfg.samples, ',');
    if (files.empty()) throw ConfigError("eval-gen needs samples (comma-separated jsonl paths)");
    World world = load_world(cfg);
    if (cfg.rm_checkpoint.empty()) throw ConfigError("eval-gen needs rm_checkpoint");
    Rng rng(mix_seed(cfg.seed, kTagRmInit));
    RewardModel rm = build_rm(cfg, world, rng);
    NamedParams all = rm.named_params();
    load_checkpoint(cfg.rm_checkpoint, all);

    struct Sample {
        int user_id;
        int prompt_id;
        double oracle;
        double rm;
    };
    std::vector<std::string> variants;
    // variant -> (user, prompt, index within pair) -> oracle score
    std::map<std::string, std::map<std::tuple<int, int, int>, double>> paired;
    std::vector<std::string> metric_rows;
    std::string run_id = run_id_for("eval-gen", cfg);

    NoGradGuard guard;
    for (const std::string& file : files) {
        std::ifstream in(file, std::ios::binary);
        if (!in) throw MissingArtifactError("samples file not found: " + file);
        std::string line, variant;
        std::map<std::pair<int, int>, int> next_index;
        double sum_oracle = 0.0, sum_rm = 0.0;
        int n = 0;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            int user_id, prompt_id;
            std::vector<double> item;
            std::string row_run;
            try {
                nlohmann::json row = nlohmann::json::parse(line);
                row_run = row.at("run_id").get<std::string>();
                user_id = row.at("user_id").get<int>();
                prompt_id = row.at("prompt_id").get<int>();
                item = row.at("item").get<std::vector<double>>();
            } catch (const nlohmann::json::exception& e) {
                throw IoError("bad sample row at " + file + ":" + std::to_string(line_no) +
                              ": " + e.what());
            }
            if (variant.empty()) variant = row_run;
            if (row_run != variant)
                throw IoError("mixed run_ids in samples file: " + file);
            if (user_id < 0 || user_id >= world.cfg.n_users ||
                prompt_id < 0 || prompt_id >= world.cfg.n_prompts)
                throw IoError("sample row outside the world at " + file + ":" +
                              std::to_string(line_no));

            const UserProfile& user = world.users[user_id];
            const std::vector<double>& cond = world.prompt_conds[prompt_id];
            double oracle = oracle_score(item, cond, user, world.oracle);
            std::vector<double> copy = item;
            Tensor item_t =
                Tensor::from_vector(std::move(copy), {static_cast<int>(item.size())});
            double rm_score =
                rm.score(prompt_token_ids(prompt_id, cfg.vocab, cfg.prompt_len), item_t, user)
                    .item();
            sum_oracle += oracle;
            sum_rm += rm_score;
            ++n;
            int idx = next_index[{user_id, prompt_id}]++;
            paired[variant][{user_id, prompt_id, idx}] = oracle;
        }
        if (n == 0) throw DegenerateInputError("empty samples file: " + file);
        variants.push_back(variant);
        metric_rows.push_back(run_id + "," + variant + "," + fmt(sum_oracle / n) + "," +
                              fmt(sum_rm / n) + "," + std::to_string(n));
    }

    ensure_dir(cfg.out);
    std::string metrics_path = cfg.out + "/gen_metrics.csv";
    append_csv(metrics_path, "run_id,variant,mean_oracle,mean_rm,n_samples", metric_rows);

    // Paired comparison on the shared (user, prompt, draw) keys; a tie gives
    // each side half a win.
    std::vector<std::string> win_rows;
    for (std::size_t i = 0; i < variants.size(); ++i) {
        for (std::size_t j = i + 1; j < variants.size(); ++j) {
            const auto& a = paired[variants[i]];
            const auto& b = paired[variants[j]];
            double wins = 0.0;
            int pairs = 0;
            for (const auto& [key, score_a] : a) {
                auto it = b.find(key);
                if (it == b.end()) continue;
                ++pairs;
                if (score_a > it->second) wins += 1.0;
                else if (score_a == it->second) wins += 0.5;
            }
            double rate = pairs > 0 ? wins / pairs : 0.5;
            win_rows.push_back(run_id + "," + variants[i] + "," + variants[j] + "," +
                               std::to_string(pairs) + "," + fmt(rate));
        }
    }
    std::string win_path = cfg.out + "/winrates.csv";
    append_csv(win_path, "run_id,variant_a,variant_b,n_pairs,win_rate_a", win_rows);
    return finish_run("eval-gen", cfg, {metrics_path, win_path}, t0);
}

std::vector<std::string> cmd_sweep(const ExperimentConfig& cfg) {
    auto t0 = Clock::now();
    std::vector<std::string> artifacts;
    if (cfg.preset == "prm-ablation") {
        ExperimentConfig pre = cfg;
        pre.out = cfg.out + "/backbone";
        cmd_pretrain_backbone(pre);
        artifacts.push_back(pre.out);

        std::vector<std::function<void()>> jobs;
        for (const std::string mode :
             {"duplicated", "shared", "vision_only", "text_only"}) {
            ExperimentConfig train = cfg;
            train.rm_mode = mode;
            train.out = cfg.out + "/" + mode + "/train";
            train.backbone_checkpoint = pre.out + "/backbone.ckpt";
            ExperimentConfig eval = train;
            eval.out = cfg.out + "/" + mode + "/eval";
            eval.rm_checkpoint = train.out + "/rm.ckpt";
            artifacts.push_back(cfg.out + "/" + mode);
            jobs.push_back([train, eval] {
                cmd_train_rm(train);
                cmd_eval_rm(eval);
            });
        }
        run_stage(std::move(jobs), cfg.parallel);
    } else if (cfg.preset == "pf-ablation") {
        if (cfg.rm_checkpoint.empty())
            throw ConfigError("pf-ablation needs rm_checkpoint for eval-gen");

        ExperimentConfig wo_both = cfg;
        wo_both.mode = "sft";
        wo_both.personalized = false;
        wo_both.out = cfg.out + "/wo_both";
        ExperimentConfig wo_gobj = cfg;
        wo_gobj.mode = "sft";
        wo_gobj.personalized = true;
        wo_gobj.out = cfg.out + "/wo_gobj";
        run_stage({[wo_both] { cmd_train_diffusion(wo_both); },
                   [wo_gobj] { cmd_train_diffusion(wo_gobj); }},
                  cfg.parallel);

        std::string ref = wo_both.out + "/diffusion.ckpt";
        ExperimentConfig full = cfg;
        full.mode = "group_dpo";
        full.personalized = true;
        full.out = cfg.out + "/full";
        full.ref_checkpoint = ref;
        ExperimentConfig wo_pan = cfg;
        wo_pan.mode = "group_dpo";
        wo_pan.personalized = false;
        wo_pan.out = cfg.out + "/wo_pan";
        wo_pan.ref_checkpoint = ref;
        run_stage({[full] { cmd_train_diffusion(full); },
                   [wo_pan] { cmd_train_diffusion(wo_pan); }},
                  cfg.parallel);

        std::vector<std::function<void()>> sample_jobs;
        std::vector<std::string> sample_paths;
        for (const std::string variant : {"full", "wo_pan", "wo_gobj", "wo_both"}) {
            ExperimentConfig s = cfg;
            s.diffusion_checkpoint = cfg.out + "/" + variant + "/diffusion.ckpt";
            s.out = cfg.out + "/" + variant + "/sample";
            sample_paths.push_back(s.out + "/samples.jsonl");
            sample_jobs.push_back([s] { cmd_sample(s); });
            artifacts.push_back(cfg.out + "/" + variant);
        }
        run_stage(std::move(sample_jobs), cfg.parallel);

        ExperimentConfig eval = cfg;
        eval.out = cfg.out + "/eval";
        eval.samples = sample_paths[0] + "," + sample_paths[1] + "," + sample_paths[2] +
                       "," + sample_paths[3];
        cmd_eval_gen(eval);
        artifacts.push_back(eval.out);
    } else {
        throw ConfigError("preset must be prm-ablation or pf-ablation");
    }
    return finish_run("sweep", cfg, std::move(artifacts), t0);
}

std::vector<std::string> run_command(const std::string& command, const ExperimentConfig& cfg) {
    if (command == "gen-data") return cmd_gen_data(cfg);
    if (command == "pretrain-backbone") return cmd_pretrain_backbone(cfg);
    if (command == "train-rm") return cmd_train_rm(cfg);
    if (command == "eval-rm") return cmd_eval_rm(cfg);
    if (command == "train-diffusion") return cmd_train_diffusion(cfg);
    if (command == "sample") return cmd_sample(cfg);
    if (command == "eval-gen") return cmd_eval_gen(cfg);
    if (command == "sweep") return cmd_sweep(cfg);
    throw ConfigError("unknown command: " + command);
}

std::vector<RmEvalRow> read_rm_metrics(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("metrics file not found: " + path);
    std::vector<RmEvalRow> rows;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (first) {
            first = false;
            continue;
        }
        if (line.empty()) continue;
        auto parts = split_list(line, ',');
        if (parts.size() != 6) throw IoError("bad metrics row in " + path + ": " + line);
        RmEvalRow row;
        row.run_id = parts[0];
        row.split = parts[1];
        row.map = std::stod(parts[2]);
        row.gauc = std::stod(parts[3]);
        row.n_groups = std::stoi(parts[4]);
        row.n_skipped = std::stoi(parts[5]);
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<GenEvalRow> read_gen_metrics(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("metrics file not found: " + path);
    std::vector<GenEvalRow> rows;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (first) {
            first = false;
            continue;
        }
        if (line.empty()) continue;
        auto parts = split_list(line, ',');
        if (parts.size() != 5) throw IoError("bad metrics row in " + path + ": " + line);
        GenEvalRow row;
        row.run_id = parts[0];
        row.variant = parts[1];
        row.mean_oracle = std::stod(parts[2]);
        row.mean_rm = std::stod(parts[3]);
        row.n_samples = std::stoi(parts[4]);
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace groupalign
