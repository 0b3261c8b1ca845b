#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "groupalign/checkpoint.hpp"
#include "groupalign/experiment.hpp"
#include "groupalign/groupdpo.hpp"
#include "groupalign/metrics.hpp"
#include "groupalign/synthdata.hpp"

namespace py = pybind11;
using namespace groupalign;

namespace {

std::vector<ScoredGroup> to_groups(
    const std::vector<std::pair<std::vector<int>, std::vector<double>>>& pairs) {
    std::vector<ScoredGroup> groups;
    groups.reserve(pairs.size());
    for (const auto& [labels, scores] : pairs) groups.push_back({labels, scores});
    return groups;
}

py::tuple to_py(const MetricResult& r) {
    return py::make_tuple(r.value, r.n_groups, r.n_skipped);
}

const UserProfile& user_at(const World& w, int user_id) {
    if (user_id < 0 || user_id >= w.cfg.n_users) throw IndexError("user_id outside the world");
    return w.users[user_id];
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "group-preference reward modeling and preference-aligned diffusion, native core";

    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<MissingArtifactError>(m, "MissingArtifactError");
    py::register_exception<NumericalError>(m, "NumericalError");
    py::register_exception<DegenerateInputError>(m, "DegenerateInputError");

    m.def("config_defaults", [] { return experiment_config_to_json(ExperimentConfig{}); },
          "Default experiment configuration as a flat json document.");
    m.def("world_defaults", [] { return world_config_to_json(WorldConfig{}); },
          "Default synthetic-world configuration as a json document.");
    m.def(
        "run_command",
        [](const std::string& command, const std::string& config_json) {
            return run_command(command, experiment_config_from_json(config_json));
        },
        py::arg("command"), py::arg("config_json"),
        "Run one experiment command (gen-data, pretrain-backbone, train-rm, eval-rm, "
        "train-diffusion, sample, eval-gen, sweep) and return its artifact paths.");
    m.def(
        "run_id_for",
        [](const std::string& command, const std::string& config_json) {
            return run_id_for(command, experiment_config_from_json(config_json));
        },
        py::arg("command"), py::arg("config_json"),
        "The run id a command would record for this resolved configuration.");

    m.def(
        "map_metric",
        [](const std::vector<std::pair<std::vector<int>, std::vector<double>>>& groups) {
            return to_py(map_metric(to_groups(groups)));
        },
        py::arg("groups"),
        "Mean average precision over (labels, scores) groups; returns "
        "(value, n_groups, n_skipped).");
    m.def(
        "gauc_metric",
        [](const std::vector<std::pair<std::vector<int>, std::vector<double>>>& groups) {
            return to_py(gauc_metric(to_groups(groups)));
        },
        py::arg("groups"),
        "Group-averaged AUC over (labels, scores) groups; returns "
        "(value, n_groups, n_skipped).");
    m.def("pl_probability", &pl_probability_closed, py::arg("rewards_pos"),
          py::arg("rewards_neg"),
          "Probability that every positive outranks every negative under the "
          "sequential-choice ranking model, closed form.");

    m.def("checkpoint_names", &checkpoint_names, py::arg("path"),
          "Parameter names stored in a checkpoint file.");
    m.def(
        "read_rm_metrics",
        [](const std::string& path) {
            py::list out;
            for (const auto& r : read_rm_metrics(path)) {
                py::dict d;
                d["run_id"] = r.run_id;
                d["split"] = r.split;
                d["map"] = r.map;
                d["gauc"] = r.gauc;
                d["n_groups"] = r.n_groups;
                d["n_skipped"] = r.n_skipped;
                out.append(d);
            }
            return out;
        },
        py::arg("path"), "Rows of an eval-rm metrics csv as dicts.");
    m.def(
        "read_gen_metrics",
        [](const std::string& path) {
            py::list out;
            for (const auto& r : read_gen_metrics(path)) {
                py::dict d;
                d["run_id"] = r.run_id;
                d["variant"] = r.variant;
                d["mean_oracle"] = r.mean_oracle;
                d["mean_rm"] = r.mean_rm;
                d["n_samples"] = r.n_samples;
                out.append(d);
            }
            return out;
        },
        py::arg("path"), "Rows of an eval-gen metrics csv as dicts.");

    py::class_<World>(m, "World",
                      "A generated synthetic preference world: users, prompts, and the "
                      "hidden scoring rule.")
        .def(py::init([](const std::string& config_json) {
                 return generate_world(world_config_from_json(config_json));
             }),
             py::arg("config_json"))
        .def_property_readonly("n_users", [](const World& w) { return w.cfg.n_users; })
        .def_property_readonly("n_prompts", [](const World& w) { return w.cfg.n_prompts; })
        .def_property_readonly("item_dim", [](const World& w) { return w.cfg.item_dim; })
        .def_property_readonly("config_json",
                               [](const World& w) { return world_config_to_json(w.cfg); })
        .def(
            "prompt_condition",
            [](const World& w, int prompt_id) {
                if (prompt_id < 0 || prompt_id >= w.cfg.n_prompts)
                    throw IndexError("prompt_id outside the prompt pool");
                return w.prompt_conds[prompt_id];
            },
            py::arg("prompt_id"))
        .def(
            "user_features",
            [](const World& w, int user_id) { return user_at(w, user_id).feature_ids; },
            py::arg("user_id"))
        .def(
            "oracle_score",
            [](const World& w, const std::vector<double>& item, int prompt_id, int user_id) {
                if (prompt_id < 0 || prompt_id >= w.cfg.n_prompts)
                    throw IndexError("prompt_id outside the prompt pool");
                return oracle_score(item, w.prompt_conds[prompt_id], user_at(w, user_id),
                                    w.oracle);
            },
            py::arg("item"), py::arg("prompt_id"), py::arg("user_id"),
            "Hidden preference score of an item for this user and prompt.")
        .def(
            "emit_dataset",
            [](const World& w, const std::string& out_dir) { return emit_dataset(w, out_dir); },
            py::arg("out_dir"),
            "Write train/valid/test/pretrain jsonl plus the world config; returns the paths.");
}
