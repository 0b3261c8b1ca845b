#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "groupalign/experiment.hpp"

namespace {

// --set values are json when they parse as json, plain strings otherwise, so
// --set beta=500 and --set scorer=oracle both do the expected thing.
nlohmann::json parse_set_value(const std::string& text) {
    nlohmann::json v = nlohmann::json::parse(text, nullptr, false);
    return v.is_discarded() ? nlohmann::json(text) : v;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic group-preference world: reward model and aligned diffusion runner"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> sets;
    std::string out, data_dir, mode, rm_mode, scorer, preset, samples;
    std::string ref_ckpt, backbone_ckpt, rm_ckpt, diffusion_ckpt;
    std::uint64_t seed = 0;
    double beta = 0.0;
    int n_records = 0;
    bool personalized = true;
    bool parallel = false;
    bool pretrain_inline = false;
    bool style_only = false;

    app.add_option("--config", config_path, "json file of config overrides");
    app.add_option("--set", sets, "KEY=VALUE config override, repeatable")
        ->allow_extra_args(false);
    auto* o_seed = app.add_option("--seed", seed, "world and training seed");
    auto* o_out = app.add_option("--out", out, "output directory");
    auto* o_data = app.add_option("--data", data_dir, "dataset directory written by gen-data");
    auto* o_mode =
        app.add_option("--mode", mode, "diffusion objective: sft | pairwise_dpo | group_dpo");
    auto* o_rm_mode = app.add_option(
        "--rm-mode", rm_mode, "plug-in wiring: duplicated | shared | vision_only | text_only");
    auto* o_scorer = app.add_option("--scorer", scorer, "eval-rm scorer: model | oracle");
    auto* o_preset = app.add_option("--preset", preset, "sweep preset: prm-ablation | pf-ablation");
    auto* o_samples =
        app.add_option("--samples", samples, "comma-separated sample jsonl paths for eval-gen");
    auto* o_ref = app.add_option("--ref", ref_ckpt, "reference (sft) checkpoint for dpo modes");
    auto* o_backbone =
        app.add_option("--backbone-ckpt", backbone_ckpt, "pretrained backbone checkpoint");
    auto* o_rm = app.add_option("--rm-ckpt", rm_ckpt, "reward model checkpoint");
    auto* o_diffusion = app.add_option("--diffusion-ckpt", diffusion_ckpt, "diffusion checkpoint");
    auto* o_beta = app.add_option("--beta", beta, "dpo inverse temperature");
    auto* o_n_records = app.add_option("--n-records", n_records, "preference groups to generate");
    auto* o_pers = app.add_flag("--personalized,!--no-personalized", personalized,
                                "attach the per-user branch (default on)");
    auto* o_parallel =
        app.add_flag("--parallel", parallel, "run independent sweep members in threads");
    auto* o_pretrain = app.add_flag("--pretrain-backbone", pretrain_inline,
                                    "pretrain the backbone inside train-rm");
    auto* o_style =
        app.add_flag("--style-only", style_only, "labels depend on user style alone");

    const std::pair<const char*, const char*> commands[] = {
        {"gen-data", "generate the synthetic world and dataset splits"},
        {"pretrain-backbone", "train the reward backbone on pooled consistency labels"},
        {"train-rm", "train personalized plug-ins on a frozen backbone"},
        {"eval-rm", "score dataset splits and append MAP/GAUC rows"},
        {"train-diffusion", "train the generator: sft, pairwise_dpo, or group_dpo"},
        {"sample", "draw items per (user, prompt) pair from a checkpoint"},
        {"eval-gen", "score sample files and append metric and win-rate rows"},
        {"sweep", "run a named ablation preset"},
    };
    for (const auto& [name, desc] : commands) app.add_subcommand(name, desc)->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        groupalign::ExperimentConfig cfg;
        if (!config_path.empty()) {
            std::ifstream in(config_path, std::ios::binary);
            if (!in) throw groupalign::ConfigError("config file not found: " + config_path);
            std::ostringstream ss;
            ss << in.rdbuf();
            groupalign::apply_config_json(cfg, ss.str());
        }

        nlohmann::json from_sets = nlohmann::json::object();
        for (const std::string& kv : sets) {
            auto eq = kv.find('=');
            if (eq == std::string::npos || eq == 0)
                throw groupalign::ConfigError("--set expects KEY=VALUE, got: " + kv);
            from_sets[kv.substr(0, eq)] = parse_set_value(kv.substr(eq + 1));
        }
        if (!from_sets.empty()) groupalign::apply_config_json(cfg, from_sets.dump());

        // Named flags outrank --set entries and the config file.
        nlohmann::json flags = nlohmann::json::object();
        if (o_seed->count()) flags["seed"] = seed;
        if (o_out->count()) flags["out"] = out;
        if (o_data->count()) flags["data_dir"] = data_dir;
        if (o_mode->count()) flags["mode"] = mode;
        if (o_rm_mode->count()) flags["rm_mode"] = rm_mode;
        if (o_scorer->count()) flags["scorer"] = scorer;
        if (o_preset->count()) flags["preset"] = preset;
        if (o_samples->count()) flags["samples"] = samples;
        if (o_ref->count()) flags["ref_checkpoint"] = ref_ckpt;
        if (o_backbone->count()) flags["backbone_checkpoint"] = backbone_ckpt;
        if (o_rm->count()) flags["rm_checkpoint"] = rm_ckpt;
        if (o_diffusion->count()) flags["diffusion_checkpoint"] = diffusion_ckpt;
        if (o_beta->count()) flags["beta"] = beta;
        if (o_n_records->count()) flags["n_records"] = n_records;
        if (o_pers->count()) flags["personalized"] = personalized;
        if (o_parallel->count()) flags["parallel"] = parallel;
        if (o_pretrain->count()) flags["pretrain_inline"] = pretrain_inline;
        if (o_style->count()) flags["style_only"] = style_only;
        if (!flags.empty()) groupalign::apply_config_json(cfg, flags.dump());

        const std::string command = app.get_subcommands().front()->get_name();
        for (const std::string& path : groupalign::run_command(command, cfg))
            std::cout << path << '\n';
        return 0;
    } catch (const groupalign::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const groupalign::MissingArtifactError& e) {
        std::cerr << "missing artifact: " << e.what() << '\n';
        return 3;
    } catch (const groupalign::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
