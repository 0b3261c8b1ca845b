#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "fd_check.hpp"
#include "groupalign/metrics.hpp"
#include "groupalign/ops.hpp"
#include "groupalign/reward.hpp"

using namespace groupalign;

namespace {

TowerConfig small_text_tower() {
    TowerConfig cfg;
    cfg.width = 8;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.ffn_hidden = 16;
    cfg.out_dim = 6;
    cfg.max_len = 8;
    cfg.vocab = 12;
    return cfg;
}

TowerConfig small_item_tower() {
    TowerConfig cfg;
    cfg.width = 8;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.ffn_hidden = 16;
    cfg.out_dim = 6;
    cfg.max_len = 8;
    cfg.item_dim = 8;
    cfg.chunks = 4;
    return cfg;
}

RewardConfig small_rm_config(WiringMode mode) {
    RewardConfig cfg;
    cfg.text_tower = small_text_tower();
    cfg.item_tower = small_item_tower();
    cfg.plugin.cardinalities = {3, 4};
    cfg.plugin.embed_dim = 2;
    cfg.plugin.cross_depth = 1;
    cfg.mode = mode;
    return cfg;
}

Tensor random_item(Rng& rng, int dim) {
    std::vector<double> v(dim);
    for (auto& x : v) x = rng.uniform(-1, 1);
    return Tensor::from_vector(std::move(v), {dim});
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

// Kick the final layers of every adaptive network so injections become
// user-dependent without training.
void perturb_plugin_outputs(RewardModel& model, double value) {
    for (auto& [name, t] : model.named_params()) {
        if (name.find("/ada/") != std::string::npos && name.find("/layer1") != std::string::npos) {
            Tensor h = t;
            for (std::size_t i = 0; i < h.numel(); i += 3) h.data()[i] = value;
        }
    }
}

}  // namespace

TEST_CASE("fresh plug-ins leave the towers bitwise untouched") {
    for (WiringMode mode : {WiringMode::duplicated, WiringMode::shared, WiringMode::vision_only,
                            WiringMode::text_only}) {
        Rng rng(21);
        RewardModel model(small_rm_config(mode), rng);
        Rng data_rng(22);
        std::vector<int> tokens = {1, 5, 3};
        for (int user = 0; user < 4; ++user) {
            UserProfile profile{{user % 3, user % 4}};
            Tensor item = random_item(data_rng, 8);
            Tensor plain = model.backbone_score(tokens, item);
            Tensor personalized = model.score(tokens, item, profile);
            CHECK(plain.item() == personalized.item());
        }
    }
}

TEST_CASE("injection shifts every pre-attention coordinate by c") {
    Rng rng(23);
    TowerConfig cfg = small_text_tower();
    cfg.layers = 1;
    Tower tower(cfg, rng);
    std::vector<int> tokens = {0, 7, 2, 2};

    TowerTrace base_trace;
    tower.forward_tokens(tokens, {}, &base_trace);

    const double c = 0.375;
    Injections inj;
    inj.attn = {Tensor::full({cfg.width}, c)};
    TowerTrace trace;
    tower.forward_tokens(tokens, inj, &trace);

    REQUIRE(trace.pre_attn.size() == 1);
    const Tensor& before = base_trace.pre_attn[0];
    const Tensor& after = trace.pre_attn[0];
    for (std::size_t i = 0; i < before.numel(); ++i)
        CHECK(after.data()[i] == before.data()[i] + c);
}

TEST_CASE("tower rejects degenerate input") {
    Rng rng(24);
    Tower tower(small_text_tower(), rng);
    CHECK_THROWS_AS(tower.forward_tokens({}, {}), DegenerateInputError);
    CHECK_THROWS_AS(tower.forward_tokens({0, 1, 2, 3, 4, 5, 6, 7, 0}, {}), DimensionError);
    CHECK_THROWS_AS(tower.forward_tokens({12}, {}), IndexError);

    Injections bad;
    bad.attn = {Tensor::zeros({8})};  // one vector for a two-layer tower
    CHECK_THROWS_AS(tower.forward_tokens({0}, bad), DimensionError);
}

TEST_CASE("score is the cosine of the pooled tower outputs") {
    Rng rng(25);
    RewardModel model(small_rm_config(WiringMode::duplicated), rng);
    Rng data_rng(26);
    Tensor item = random_item(data_rng, 8);
    std::vector<int> tokens = {2, 9};
    Tensor expected = cosine_similarity(model.text_tower().forward_tokens(tokens, {}),
                                        model.item_tower().forward_item(item, {}));
    CHECK(model.backbone_score(tokens, item).item() == expected.item());
    double s = expected.item();
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);
}

TEST_CASE("users separate once plug-ins have nonzero output") {
    Rng rng(27);
    RewardModel model(small_rm_config(WiringMode::duplicated), rng);
    perturb_plugin_outputs(model, 0.05);
    Rng data_rng(28);
    Tensor item = random_item(data_rng, 8);
    std::vector<int> tokens = {1, 2, 3};
    double a = model.score(tokens, item, UserProfile{{0, 1}}).item();
    double b = model.score(tokens, item, UserProfile{{2, 3}}).item();
    CHECK(a != b);
}

TEST_CASE("wiring modes route the user vector to the right towers") {
    UserProfile user_a{{0, 1}};
    UserProfile user_b{{2, 3}};

    SUBCASE("text_only leaves the item tower user-independent") {
        Rng rng(29);
        RewardModel model(small_rm_config(WiringMode::text_only), rng);
        perturb_plugin_outputs(model, 0.05);
        CHECK(model.plugins().text_active());
        CHECK_FALSE(model.plugins().item_active());
        Rng data_rng(30);
        Tensor item = random_item(data_rng, 8);
        Injections ia = model.plugins().item_injections(user_a);
        CHECK(ia.attn.empty());
        double a = model.score({1, 2}, item, user_a).item();
        double b = model.score({1, 2}, item, user_b).item();
        CHECK(a != b);  // personalization via the text side only
    }

    SUBCASE("vision_only leaves the text tower user-independent") {
        Rng rng(31);
        RewardModel model(small_rm_config(WiringMode::vision_only), rng);
        perturb_plugin_outputs(model, 0.05);
        CHECK_FALSE(model.plugins().text_active());
        CHECK(model.plugins().item_active());
        Injections ta = model.plugins().text_injections(user_a);
        CHECK(ta.attn.empty());
        Rng data_rng(32);
        Tensor item = random_item(data_rng, 8);
        double a = model.score({1, 2}, item, user_a).item();
        double b = model.score({1, 2}, item, user_b).item();
        CHECK(a != b);
    }

    SUBCASE("duplicated towers own disjoint plugin parameters") {
        Rng rng(33);
        PluginSet plugins(WiringMode::duplicated, {{3, 4}, 2, 1}, 2, 8, rng);
        auto params = plugins.named_params("reward/plugin");
        std::size_t text_count = 0, item_count = 0;
        for (auto& [name, t] : params) {
            if (name.rfind("reward/plugin/text/", 0) == 0) ++text_count;
            if (name.rfind("reward/plugin/item/", 0) == 0) ++item_count;
        }
        CHECK(text_count == item_count);
        CHECK(text_count > 0);

        // Mutating a text-side tensor must not move any item-side tensor.
        UserProfile user{{1, 2}};
        Injections before = plugins.item_injections(user);
        for (auto& [name, t] : params)
            if (name.rfind("reward/plugin/text/", 0) == 0) {
                Tensor h = t;
                for (auto& x : h.data()) x += 1.0;
            }
        Injections after = plugins.item_injections(user);
        for (std::size_t l = 0; l < before.attn.size(); ++l)
            CHECK(bitwise_equal(before.attn[l], after.attn[l]));
    }

    SUBCASE("shared towers reference the same plugin parameters") {
        Rng rng(34);
        PluginSet plugins(WiringMode::shared, {{3, 4}, 2, 1}, 2, 8, rng);
        Rng rng2(34);
        PluginSet duplicated(WiringMode::duplicated, {{3, 4}, 2, 1}, 2, 8, rng2);
        CHECK(plugins.params().size() * 2 == duplicated.params().size());

        UserProfile user{{1, 2}};
        auto params = plugins.named_params("reward/plugin");
        Injections text_before = plugins.text_injections(user);
        (void)text_before;
        // Push the shared final layers away from zero through the text-side
        // names; the item injections must move too.
        for (auto& [name, t] : params)
            if (name.find("/layer1") != std::string::npos) {
                Tensor h = t;
                h.data()[0] = 0.25;
            }
        Injections text_after = plugins.text_injections(user);
        Injections item_after = plugins.item_injections(user);
        for (std::size_t l = 0; l < text_after.attn.size(); ++l)
            CHECK(bitwise_equal(text_after.attn[l], item_after.attn[l]));
        bool nonzero = false;
        for (double x : text_after.attn[0].data()) nonzero = nonzero || x != 0.0;
        CHECK(nonzero);
    }
}

TEST_CASE("ideal distribution splits mass over positives") {
    CHECK(ideal_distribution({1, 1, 0, 0, 0}) == std::vector<double>{0.5, 0.5, 0, 0, 0});
    CHECK(ideal_distribution({1, 0, 0}) == std::vector<double>{1, 0, 0});
    std::vector<double> thirds = ideal_distribution({1, 1, 1});
    for (double p : thirds) CHECK(p == doctest::Approx(1.0 / 3).epsilon(1e-15));

    CHECK_THROWS_AS(ideal_distribution({0, 0, 0}), DegenerateInputError);
    CHECK_THROWS_AS(ideal_distribution({}), DegenerateInputError);
    CHECK_THROWS_AS(ideal_distribution({1, 2}), ContractError);

    // Permutation equivariance.
    std::vector<int> labels = {1, 0, 1, 0, 0};
    std::vector<int> perm = {4, 2, 0, 1, 3};
    auto direct = ideal_distribution(labels);
    std::vector<int> permuted_labels(labels.size());
    for (std::size_t i = 0; i < perm.size(); ++i) permuted_labels[i] = labels[perm[i]];
    auto permuted = ideal_distribution(permuted_labels);
    for (std::size_t i = 0; i < perm.size(); ++i) CHECK(permuted[i] == direct[perm[i]]);
}

TEST_CASE("predicted distribution is a group softmax") {
    Tensor equal = Tensor::full({5}, 0.7);
    Tensor p = predicted_distribution(equal);
    for (double v : p.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));

    Tensor scores = Tensor::from_vector({std::log(1.0), std::log(2.0), std::log(3.0)}, {3});
    Tensor q = predicted_distribution(scores);
    CHECK(q.data()[0] == doctest::Approx(1.0 / 6).epsilon(1e-12));
    CHECK(q.data()[1] == doctest::Approx(2.0 / 6).epsilon(1e-12));
    CHECK(q.data()[2] == doctest::Approx(3.0 / 6).epsilon(1e-12));

    double total = 0.0;
    for (double v : q.data()) total += v;
    CHECK(std::abs(total - 1.0) < 1e-12);

    Tensor shifted = predicted_distribution(add_const(scores, 4.5));
    for (int i = 0; i < 3; ++i) CHECK(std::abs(shifted.data()[i] - q.data()[i]) < 1e-12);
}

TEST_CASE("group loss hand anchors") {
    SUBCASE("perfect match collapses to the clamp floor") {
        Tensor q = Tensor::from_vector({1.0, 0.0}, {2});
        double loss = rm_group_loss({1.0, 0.0}, q).item();
        CHECK(loss > 0.0);
        CHECK(loss < 1e-11);
        CHECK(loss == doctest::Approx(-2.0 * std::log1p(-1e-12)).epsilon(1e-6));
    }

    SUBCASE("two positives out of three, uniform prediction") {
        Tensor q = Tensor::full({3}, 1.0 / 3);
        double loss = rm_group_loss({0.5, 0.5, 0.0}, q).item();
        double closed_form = 3.0 * std::log(3.0) - 2.0 * std::log(2.0);
        CHECK(std::abs(loss - closed_form) < 1e-12);
        CHECK(std::abs(loss - 1.9095425048844384) < 1e-9);
    }

    SUBCASE("joint permutation symmetry") {
        std::vector<double> p = {0.5, 0.0, 0.5, 0.0};
        Tensor q = Tensor::from_vector({0.4, 0.1, 0.3, 0.2}, {4});
        double direct = rm_group_loss(p, q).item();
        std::vector<double> p2 = {0.0, 0.5, 0.0, 0.5};
        Tensor q2 = Tensor::from_vector({0.1, 0.4, 0.2, 0.3}, {4});
        CHECK(rm_group_loss(p2, q2).item() == direct);
    }

    SUBCASE("grid search confirms the minimum at q = p") {
        std::vector<double> p = {0.5, 0.3, 0.2};
        double at_p = rm_group_loss(p, Tensor::from_vector({0.5, 0.3, 0.2}, {3})).item();
        for (double a = 0.05; a < 1.0; a += 0.05)
            for (double b = 0.05; a + b < 1.0; b += 0.05) {
                Tensor q = Tensor::from_vector({a, b, 1.0 - a - b}, {3});
                CHECK(rm_group_loss(p, q).item() >= at_p - 1e-12);
            }
    }

    SUBCASE("length mismatch is rejected") {
        CHECK_THROWS_AS(rm_group_loss({1.0, 0.0}, Tensor::full({3}, 0.3)), DimensionError);
    }

    SUBCASE("loss gradient w.r.t. scores matches finite differences") {
        Tensor scores = Tensor::from_vector({0.2, -0.4, 0.9, 0.0}, {4}, true);
        std::vector<double> p = {0.5, 0.0, 0.5, 0.0};
        auto loss_fn = [&] { return rm_group_loss(p, predicted_distribution(scores)); };
        CHECK(fdtest::max_rel_grad_err(loss_fn, {scores}) < 1e-4);
    }
}

TEST_CASE("group loss gradient reaches the plug-ins through frozen towers") {
    Rng rng(35);
    RewardModel model(small_rm_config(WiringMode::duplicated), rng);
    model.freeze_backbone();
    Rng data_rng(36);
    RmExample ex;
    ex.profile = UserProfile{{1, 2}};
    ex.prompt_tokens = {3, 4, 5};
    for (int i = 0; i < 3; ++i) ex.items.push_back(random_item(data_rng, 8));
    ex.labels = {1, 0, 0};

    auto loss_fn = [&] {
        Tensor scores = model.group_scores(ex.prompt_tokens, ex.items, ex.profile);
        return rm_group_loss(ideal_distribution(ex.labels), predicted_distribution(scores));
    };
    CHECK(fdtest::max_rel_grad_err(loss_fn, model.plugin_params()) < 1e-4);
}

TEST_CASE("plugin training moves plug-ins only and lowers the loss") {
    Rng rng(37);
    RewardModel model(small_rm_config(WiringMode::duplicated), rng);
    model.freeze_backbone();

    // Planted signal: user field 0 decides which half of the item carries
    // the positive's mass.
    Rng data_rng(38);
    std::vector<RmExample> dataset;
    for (int g = 0; g < 24; ++g) {
        RmExample ex;
        int style = g % 3;
        ex.profile = UserProfile{{style, g % 4}};
        ex.prompt_tokens = {static_cast<int>(data_rng.uniform_int(12)),
                            static_cast<int>(data_rng.uniform_int(12))};
        for (int i = 0; i < 4; ++i) {
            Tensor item = random_item(data_rng, 8);
            if (i == 0) {
                for (int j = 0; j < 4; ++j)
                    item.data()[j + (style % 2 == 0 ? 0 : 4)] += 2.0 * (style == 2 ? -1 : 1);
            }
            ex.items.push_back(item);
        }
        ex.labels = {1, 0, 0, 0};
        dataset.push_back(std::move(ex));
    }

    auto backbone_before = model.backbone_named_params();
    std::vector<std::vector<double>> backbone_copy;
    for (auto& [n, t] : backbone_before) backbone_copy.push_back(t.data());

    RmTrainConfig cfg;
    cfg.epochs = 0;
    cfg.seed = 1;
    auto plugin_before = model.plugin_params();
    std::vector<std::vector<double>> plugin_copy;
    for (auto& t : plugin_before) plugin_copy.push_back(t.data());
    CHECK(train_rm(model, dataset, cfg).empty());
    for (std::size_t i = 0; i < plugin_before.size(); ++i)
        CHECK(plugin_before[i].data() == plugin_copy[i]);

    cfg.epochs = 10;
    cfg.lr = 5e-3;
    cfg.batch_size = 6;
    auto losses = train_rm(model, dataset, cfg);
    REQUIRE(losses.size() == 10);
    CHECK(losses[9] < losses[0]);

    auto backbone_after = model.backbone_named_params();
    for (std::size_t i = 0; i < backbone_after.size(); ++i)
        CHECK(backbone_after[i].second.data() == backbone_copy[i]);

    RewardModel unfrozen(small_rm_config(WiringMode::duplicated), rng);
    CHECK_THROWS_AS(train_rm(unfrozen, dataset, cfg), ContractError);
    CHECK_THROWS_AS(train_rm(model, {}, cfg), DegenerateInputError);
}

TEST_CASE("backbone pretraining trains towers and then freezes cleanly") {
    Rng rng(39);
    RewardConfig rc = small_rm_config(WiringMode::duplicated);
    RewardModel model(rc, rng);

    Rng data_rng(40);
    std::vector<RmExample> dataset;
    for (int g = 0; g < 12; ++g) {
        RmExample ex;
        ex.profile = UserProfile{{0, 0}};
        int tok = static_cast<int>(data_rng.uniform_int(12));
        ex.prompt_tokens = {tok};
        for (int i = 0; i < 3; ++i) {
            Tensor item = random_item(data_rng, 8);
            if (i == 0) item.data()[tok % 8] += 2.0;
            ex.items.push_back(item);
        }
        ex.labels = {1, 0, 0};
        dataset.push_back(std::move(ex));
    }

    RmTrainConfig cfg;
    cfg.epochs = 6;
    cfg.lr = 3e-3;
    cfg.seed = 2;
    auto losses = pretrain_backbone(model, dataset, cfg);
    CHECK(losses.back() < losses.front());

    model.freeze_backbone();
    CHECK(model.backbone_frozen());
    CHECK_THROWS_AS(pretrain_backbone(model, dataset, cfg), ContractError);
}

TEST_CASE("ranking metrics match the hand-ranked oracle") {
    ScoredGroup g{{1, 0, 1, 0}, {0.9, 0.8, 0.7, 0.1}};
    auto map_res = map_metric({g});
    CHECK(std::abs(map_res.value - 5.0 / 6.0) < 1e-15);
    auto gauc_res = gauc_metric({g});
    CHECK(gauc_res.value == 0.75);

    ScoredGroup perfect{{1, 1, 0}, {0.9, 0.8, 0.1}};
    CHECK(map_metric({perfect}).value == 1.0);
    CHECK(gauc_metric({perfect}).value == 1.0);

    ScoredGroup tied{{1, 0, 1}, {0.4, 0.4, 0.4}};
    CHECK(gauc_metric({tied}).value == 0.5);

    // MAP tie-break by candidate index: the negative at index 0 outranks
    // the tied positive at index 1.
    ScoredGroup tie_order{{0, 1}, {0.5, 0.5}};
    CHECK(map_metric({tie_order}).value == 0.5);
}

TEST_CASE("ranking metrics skip degenerate groups and stay argsort-invariant") {
    ScoredGroup no_pos{{0, 0}, {0.3, 0.2}};
    ScoredGroup no_neg{{1, 1}, {0.3, 0.2}};
    ScoredGroup ok{{1, 0}, {0.9, 0.1}};

    auto map_res = map_metric({no_pos, no_neg, ok});
    CHECK(map_res.n_groups == 2);  // all-positive groups still rank for MAP
    CHECK(map_res.n_skipped == 1);
    auto gauc_res = gauc_metric({no_pos, no_neg, ok});
    CHECK(gauc_res.n_groups == 1);
    CHECK(gauc_res.n_skipped == 2);
    CHECK(gauc_res.value == 1.0);

    Rng rng(41);
    std::vector<ScoredGroup> groups;
    for (int g = 0; g < 10; ++g) {
        ScoredGroup sg;
        for (int i = 0; i < 6; ++i) {
            sg.labels.push_back(static_cast<int>(rng.uniform_int(2)));
            sg.scores.push_back(rng.uniform(-2, 2));
        }
        sg.labels[0] = 1;
        sg.labels[1] = 0;
        groups.push_back(std::move(sg));
    }
    auto base_map = map_metric(groups);
    auto base_gauc = gauc_metric(groups);
    std::vector<ScoredGroup> transformed = groups;
    for (auto& sg : transformed)
        for (auto& s : sg.scores) s = std::exp(2.0 * s + 1.0);
    CHECK(map_metric(transformed).value == base_map.value);
    CHECK(gauc_metric(transformed).value == base_gauc.value);
}

TEST_CASE("reward model parameters roundtrip through a checkpoint") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "groupalign_rm_test";
    fs::create_directories(dir);
    std::string path = (dir / "rm.ckpt").string();

    Rng rng(43);
    RewardModel model(small_rm_config(WiringMode::duplicated), rng);
    perturb_plugin_outputs(model, 0.05);
    NamedParams params = model.named_params();
    save_checkpoint(path, params);

    Rng rng2(44);
    RewardModel other(small_rm_config(WiringMode::duplicated), rng2);
    NamedParams into = other.named_params();
    load_checkpoint(path, into);

    Rng data_rng(45);
    Tensor item = random_item(data_rng, 8);
    UserProfile user{{2, 1}};
    CHECK(model.score({4, 2}, item, user).item() == other.score({4, 2}, item, user).item());
    fs::remove_all(dir);
}
