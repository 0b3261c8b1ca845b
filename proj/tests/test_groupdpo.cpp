#include <cmath>

#include "doctest.h"
#include "fd_check.hpp"
#include "groupalign/groupdpo.hpp"
#include "groupalign/ops.hpp"

using namespace groupalign;

namespace {

UNetConfig tiny_unet() {
    UNetConfig cfg;
    cfg.item_dim = 4;
    cfg.cond_dim = 2;
    cfg.w1 = 6;
    cfg.w2 = 5;
    cfg.w3 = 4;
    cfg.emb_dim = 4;
    return cfg;
}

DiffusionConfig tiny_diffusion(bool personalized) {
    DiffusionConfig cfg;
    cfg.unet = tiny_unet();
    cfg.schedule.t_steps = 100;
    cfg.user_plugin.cardinalities = {3, 4};
    cfg.user_plugin.embed_dim = 2;
    cfg.user_plugin.cross_depth = 1;
    cfg.personalized = personalized;
    return cfg;
}

Tensor random_vec(Rng& rng, int dim) {
    std::vector<double> v(dim);
    for (auto& x : v) x = rng.uniform(-1, 1);
    return Tensor::from_vector(std::move(v), {dim});
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void zero_all_params(DiffusionModel& model) {
    for (auto& [name, t] : model.named_params()) {
        Tensor h = t;
        std::fill(h.data().begin(), h.data().end(), 0.0);
    }
}

// Shifts every coordinate of the denoiser output by `delta` through the
// head bias row.
void shift_head_bias(DiffusionModel& model, double delta) {
    for (auto& [name, t] : model.named_params())
        if (name == "diffusion/backbone/head") {
            Tensor h = t;
            int cols = h.cols();
            for (int c = 0; c < cols; ++c) h.data()[h.numel() - cols + c] += delta;
        }
}

PreferenceGroup make_random_group(Rng& rng, int n_pos, int n_neg) {
    PreferenceGroup g;
    g.user = UserProfile{{static_cast<int>(rng.uniform_int(3)),
                          static_cast<int>(rng.uniform_int(4))}};
    g.cond = random_vec(rng, 2);
    for (int i = 0; i < n_pos; ++i) g.positives.push_back(random_vec(rng, 4));
    for (int j = 0; j < n_neg; ++j) g.negatives.push_back(random_vec(rng, 4));
    return g;
}

}  // namespace

TEST_CASE("ranking probability closed form hits its anchors") {
    CHECK(pl_probability_closed({0.0}, {0.0}) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(pl_probability_closed({1.0}, {0.0, 0.0}) ==
          doctest::Approx(0.5761168847658291).epsilon(1e-14));
    CHECK(pl_probability_closed({2.0, 2.0}, {2.0}) == doctest::Approx(1.0).epsilon(1e-14));

    // Only reward differences matter.
    Rng rng(40);
    for (int k = 0; k < 50; ++k) {
        std::vector<double> rp = {rng.uniform(-5, 5), rng.uniform(-5, 5)};
        std::vector<double> rn = {rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
        double base = pl_probability_closed(rp, rn);
        double shift = rng.uniform(-100, 100);
        std::vector<double> rp2 = rp, rn2 = rn;
        for (auto& r : rp2) r += shift;
        for (auto& r : rn2) r += shift;
        CHECK(std::abs(pl_probability_closed(rp2, rn2) - base) < 1e-12);
    }

    // Single positive stays a probability; two positives may exceed 1.
    for (int k = 0; k < 50; ++k) {
        double p = pl_probability_closed({rng.uniform(-5, 5)},
                                         {rng.uniform(-5, 5), rng.uniform(-5, 5)});
        CHECK(p > 0.0);
        CHECK(p < 1.0);
    }
    CHECK(pl_probability_closed({10.0, 10.0}, {-10.0}) > 1.0);

    CHECK_THROWS_AS(pl_probability_closed({}, {0.0}), DegenerateInputError);
    CHECK_THROWS_AS(pl_probability_closed({0.0}, {}), DegenerateInputError);

    // Extreme rewards stay finite under the overflow-safe evaluation.
    CHECK(pl_probability_closed({-700.0}, {700.0}) == 0.0);
    CHECK(pl_probability_closed({700.0}, {-700.0}) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("ranking probability matches the permutation oracle") {
    // Two-item case reduces to the pairwise sigmoid.
    CHECK(std::abs(pl_probability_oracle({1.3}, {0.4}) - sigmoid(1.3 - 0.4)) < 1e-14);

    // Uniform weights, one positive against k negatives.
    for (int k = 1; k <= 4; ++k) {
        std::vector<double> rn(k, 0.7);
        CHECK(std::abs(pl_probability_oracle({0.7}, rn) - 1.0 / (k + 1)) < 1e-13);
    }

    Rng rng(41);
    for (int n_pos = 1; n_pos <= 2; ++n_pos)
        for (int n_neg = 1; n_neg <= 4; ++n_neg)
            for (int k = 0; k < 250; ++k) {
                std::vector<double> rp(n_pos), rn(n_neg);
                for (auto& r : rp) r = rng.uniform(-5, 5);
                for (auto& r : rn) r = rng.uniform(-5, 5);
                double closed = pl_probability_closed(rp, rn);
                double oracle = pl_probability_oracle(rp, rn);
                // Different summation orders cost a few ulps at exp(10) scale.
                CHECK(std::abs(closed - oracle) < 1e-11 * std::max(1.0, std::abs(oracle)));
            }

    CHECK_THROWS_AS(pl_probability_oracle({0.0}, std::vector<double>(7, 0.0)), ContractError);
    CHECK_THROWS_AS(pl_probability_oracle({}, {0.0}), DegenerateInputError);
}

TEST_CASE("per-candidate score vanishes at the reference point") {
    Rng rng(42);
    DiffusionModel model(tiny_diffusion(true), rng);
    DiffusionModel ref = model.clone();
    ref.freeze_all();

    Rng data_rng(43);
    for (int k = 0; k < 5; ++k) {
        Tensor item = random_vec(data_rng, 4);
        Tensor cond = random_vec(data_rng, 2);
        Tensor eps = Tensor::from_vector(data_rng.gaussian_vector(4), {4});
        int t = 1 + static_cast<int>(data_rng.uniform_int(100));
        Tensor s = per_sample_score(item, cond, t, eps, UserProfile{{1, 2}}, model, ref);
        CHECK(s.item() == 0.0);
    }
}

TEST_CASE("per-candidate score matches constant-offset algebra") {
    Rng rng(44);
    DiffusionModel model(tiny_diffusion(false), rng);
    zero_all_params(model);
    DiffusionModel ref = model.clone();
    shift_head_bias(ref, 1.0);

    Rng data_rng(45);
    Tensor item = random_vec(data_rng, 4);
    Tensor cond = random_vec(data_rng, 2);
    // Model output is 0 and eps is 0, so the trained error vanishes while
    // the reference error is the squared norm of the all-ones shift.
    Tensor s = per_sample_score(item, cond, 30, Tensor::zeros({4}), std::nullopt, model, ref);
    CHECK(s.item() == -4.0);
}

TEST_CASE("per-candidate score matches an independent two-pass evaluation") {
    Rng rng(46);
    DiffusionModel model(tiny_diffusion(true), rng);
    DiffusionModel ref = model.clone();
    shift_head_bias(ref, 0.25);
    ref.freeze_all();

    Rng data_rng(47);
    for (int k = 0; k < 10; ++k) {
        Tensor item = random_vec(data_rng, 4);
        Tensor cond = random_vec(data_rng, 2);
        Tensor eps = Tensor::from_vector(data_rng.gaussian_vector(4), {4});
        int t = 1 + static_cast<int>(data_rng.uniform_int(100));
        UserProfile user{{0, 3}};

        Tensor s = per_sample_score(item, cond, t, eps, user, model, ref);

        double abar = model.schedule().alpha_bar(t);
        std::vector<double> zt(4);
        for (int i = 0; i < 4; ++i)
            zt[i] = std::sqrt(abar) * item.data()[i] + std::sqrt(1.0 - abar) * eps.data()[i];
        Tensor zt_t = Tensor::from_vector(zt, {4});
        Tensor e_model = model.predict_noise(zt_t, t, cond, user);
        Tensor e_ref = ref.predict_noise(zt_t, t, cond, user);
        double expected = 0.0;
        for (int i = 0; i < 4; ++i) {
            double dm = eps.data()[i] - e_model.data()[i];
            double dr = eps.data()[i] - e_ref.data()[i];
            expected += dm * dm - dr * dr;
        }
        CHECK(std::abs(s.item() - expected) < 1e-12);
    }
}

TEST_CASE("group loss equals its closed form at the reference point") {
    Rng rng(48);
    DiffusionModel model(tiny_diffusion(true), rng);
    DiffusionModel ref = model.clone();
    ref.freeze_all();
    DpoConfig cfg;

    Rng data_rng(49);
    Rng draw_rng(50);
    for (auto [n_pos, n_neg] : {std::pair{1, 1}, {1, 2}, {2, 3}, {2, 4}}) {
        PreferenceGroup g = make_random_group(data_rng, n_pos, n_neg);
        GroupDraws draws = make_group_draws(g, model.schedule(), draw_rng);
        double loss = group_dpo_loss(g, draws, cfg, model, ref).item();
        double closed = n_pos * std::log(static_cast<double>(n_neg) + 1.0);
        CHECK(std::abs(loss - closed) < 1e-12);
    }
}

TEST_CASE("group loss matches a plain-double reimplementation and is monotone") {
    // Zeroed trained model vs all-ones reference turns each candidate score
    // into s = |eps|^2 - |eps - 1|^2, so the draws control the scores.
    Rng rng(51);
    DiffusionModel model(tiny_diffusion(false), rng);
    zero_all_params(model);
    DiffusionModel ref = model.clone();
    shift_head_bias(ref, 1.0);

    auto eps_for_score = [](double s) {
        // s = 2 * sum(eps) - dim with dim = 4; spread the mass evenly.
        double coord = (s + 4.0) / 8.0;
        return Tensor::full({4}, coord);
    };

    DpoConfig cfg;
    cfg.beta = 0.5;
    Rng data_rng(52);
    PreferenceGroup g = make_random_group(data_rng, 2, 2);

    auto loss_for = [&](std::vector<double> s_pos, std::vector<double> s_neg) {
        GroupDraws draws;
        draws.t = 60;
        for (double s : s_pos) draws.eps_pos.push_back(eps_for_score(s));
        for (double s : s_neg) draws.eps_neg.push_back(eps_for_score(s));
        return group_dpo_loss(g, draws, cfg, model, ref).item();
    };

    auto reference_loss = [&](std::vector<double> s_pos, std::vector<double> s_neg) {
        double total = 0.0;
        for (double sp : s_pos) {
            double hi = -1e300;
            for (double sn : s_neg) hi = std::max(hi, cfg.beta * (sp - sn));
            double acc = 0.0;
            for (double sn : s_neg) acc += std::exp(cfg.beta * (sp - sn) - hi);
            double lse = hi + std::log(acc);
            total += -std::log(sigmoid(-lse));
        }
        return total;
    };

    std::vector<double> sp = {-1.0, 0.5};
    std::vector<double> sn = {0.25, 1.5};
    CHECK(std::abs(loss_for(sp, sn) - reference_loss(sp, sn)) < 1e-11);

    double base = loss_for(sp, sn);
    // Raising a negative's score lowers the loss; raising a positive's
    // score raises it.
    CHECK(loss_for(sp, {0.25, 2.5}) < base);
    CHECK(loss_for({-1.0, 1.5}, sn) > base);
    CHECK(loss_for(sp, {1.25, 1.5}) < base);

    SUBCASE("group is permutation invariant") {
        double swapped_pos = loss_for({0.5, -1.0}, sn);
        double swapped_neg = loss_for(sp, {1.5, 0.25});
        CHECK(std::abs(swapped_pos - base) < 1e-12);
        CHECK(std::abs(swapped_neg - base) < 1e-12);
    }

    SUBCASE("degenerate groups are rejected") {
        PreferenceGroup empty_pos = g;
        empty_pos.positives.clear();
        GroupDraws draws;
        draws.t = 60;
        draws.eps_neg = {eps_for_score(0.0), eps_for_score(0.0)};
        CHECK_THROWS_AS(group_dpo_loss(empty_pos, draws, cfg, model, ref),
                        DegenerateInputError);

        GroupDraws short_draws;
        short_draws.t = 60;
        short_draws.eps_pos = {eps_for_score(0.0)};
        short_draws.eps_neg = {eps_for_score(0.0), eps_for_score(0.0)};
        CHECK_THROWS_AS(group_dpo_loss(g, short_draws, cfg, model, ref), DimensionError);

        DpoConfig bad;
        bad.beta = 0.0;
        GroupDraws ok_draws;
        ok_draws.t = 60;
        ok_draws.eps_pos = {eps_for_score(0.0), eps_for_score(0.0)};
        ok_draws.eps_neg = {eps_for_score(0.0), eps_for_score(0.0)};
        CHECK_THROWS_AS(group_dpo_loss(g, ok_draws, bad, model, ref), ConfigError);
    }
}

TEST_CASE("single-pair groups reduce to the pairwise objective") {
    Rng rng(53);
    DiffusionModel model(tiny_diffusion(true), rng);
    DiffusionModel ref = model.clone();
    ref.freeze_all();
    shift_head_bias(model, 0.1);  // move theta off the reference point

    DpoConfig cfg;
    cfg.beta = 100.0;
    Rng data_rng(54);
    Rng draw_rng(55);
    for (int k = 0; k < 50; ++k) {
        PreferenceGroup g = make_random_group(data_rng, 1, 1);
        GroupDraws draws = make_group_draws(g, model.schedule(), draw_rng);
        double group = group_dpo_loss(g, draws, cfg, model, ref).item();
        double pairwise = pairwise_dpo_loss(g.positives[0], g.negatives[0], g.cond, g.user,
                                            draws, cfg, model, ref)
                              .item();
        CHECK(std::abs(group - pairwise) < 1e-12);
        CHECK(group > 0.0);
    }

    SUBCASE("margin limits") {
        // Large positive margin for the negative drives the loss to zero.
        zero_all_params(model);
        DiffusionModel zref = model.clone();
        shift_head_bias(zref, 1.0);
        PreferenceGroup g = make_random_group(data_rng, 1, 1);
        GroupDraws draws;
        draws.t = 10;
        draws.eps_pos = {Tensor::full({4}, -2.0)};  // s_p = 2*(-8) - 4 = -20
        draws.eps_neg = {Tensor::full({4}, 3.0)};   // s_n = 2*12 - 4 = 20
        double loss =
            pairwise_dpo_loss(g.positives[0], g.negatives[0], g.cond, g.user, draws, cfg,
                              model, zref)
                .item();
        CHECK(loss < 1e-8);

        GroupDraws tied;
        tied.t = 10;
        tied.eps_pos = {Tensor::full({4}, 0.5)};
        tied.eps_neg = {Tensor::full({4}, 0.5)};
        double equal =
            pairwise_dpo_loss(g.positives[0], g.negatives[0], g.cond, g.user, tied, cfg,
                              model, zref)
                .item();
        CHECK(std::abs(equal - std::log(2.0)) < 1e-12);
    }
}

TEST_CASE("group loss gradients match finite differences with draws fixed") {
    Rng rng(56);
    DiffusionModel model(tiny_diffusion(true), rng);
    model.freeze_backbone();
    DiffusionModel ref = model.clone();
    ref.freeze_all();
    shift_head_bias(model, 0.05);

    DpoConfig cfg;
    cfg.beta = 2.0;
    Rng data_rng(57);
    Rng draw_rng(58);
    PreferenceGroup g = make_random_group(data_rng, 1, 2);
    GroupDraws draws = make_group_draws(g, model.schedule(), draw_rng);

    auto group_fn = [&] { return group_dpo_loss(g, draws, cfg, model, ref); };
    CHECK(fdtest::max_rel_grad_err(group_fn, model.trainable_params()) < 1e-4);

    GroupDraws pair_draws;
    pair_draws.t = draws.t;
    pair_draws.eps_pos = {draws.eps_pos[0]};
    pair_draws.eps_neg = {draws.eps_neg[0]};
    auto pair_fn = [&] {
        return pairwise_dpo_loss(g.positives[0], g.negatives[0], g.cond, g.user, pair_draws,
                                 cfg, model, ref);
    };
    CHECK(fdtest::max_rel_grad_err(pair_fn, model.trainable_params()) < 1e-4);
}

TEST_CASE("alignment training lowers the loss and spares the reference") {
    Rng rng(59);
    DiffusionModel model(tiny_diffusion(true), rng);
    model.freeze_backbone();
    DiffusionModel ref = model.clone();
    ref.freeze_all();

    // Planted signal: one user's positives sit in a fixed direction, the
    // negatives in the opposite one.
    Rng data_rng(60);
    std::vector<PreferenceGroup> dataset;
    for (int k = 0; k < 12; ++k) {
        PreferenceGroup g;
        g.user = UserProfile{{k % 3, k % 4}};
        g.cond = random_vec(data_rng, 2);
        Tensor dir = Tensor::from_vector({1.0, -1.0, 0.5, -0.5}, {4});
        for (int i = 0; i < 1; ++i) {
            Tensor item = random_vec(data_rng, 4);
            for (int d = 0; d < 4; ++d) item.data()[d] = 0.25 * item.data()[d] + dir.data()[d];
            g.positives.push_back(item);
        }
        for (int j = 0; j < 2; ++j) {
            Tensor item = random_vec(data_rng, 4);
            for (int d = 0; d < 4; ++d) item.data()[d] = 0.25 * item.data()[d] - dir.data()[d];
            g.negatives.push_back(item);
        }
        dataset.push_back(std::move(g));
    }

    auto ref_named = ref.named_params();
    std::vector<std::vector<double>> ref_before;
    for (auto& [n, t] : ref_named) ref_before.push_back(t.data());
    auto backbone_before_vec = model.backbone_params();
    std::vector<std::vector<double>> backbone_before;
    for (auto& t : backbone_before_vec) backbone_before.push_back(t.data());

    DpoTrainConfig cfg;
    cfg.epochs = 0;
    cfg.seed = 6;
    CHECK(train_group_dpo(model, ref, dataset, cfg).empty());

    cfg.epochs = 10;
    cfg.batch_size = 4;
    cfg.lr = 2e-3;
    cfg.dpo.beta = 50.0;
    auto stats = train_group_dpo(model, ref, dataset, cfg);
    REQUIRE(stats.size() == 30);

    // First batch is evaluated at theta = ref: the exact closed form.
    double baseline = std::log(3.0);  // one positive, two negatives
    CHECK(std::abs(stats[0].mean_loss - baseline) < 1e-12);
    CHECK(stats[0].mean_s_pos == 0.0);
    CHECK(stats[0].mean_s_neg == 0.0);

    double tail = 0.0;
    for (std::size_t i = stats.size() - 5; i < stats.size(); ++i) tail += stats[i].mean_loss;
    tail /= 5.0;
    CHECK(tail < baseline);

    // The trained model now denoises positives better than negatives.  The
    // per-step stats ride on that step's draws, so measure on fixed ones.
    double sum_pos = 0.0, sum_neg = 0.0;
    int n_pos = 0, n_neg = 0;
    Rng fixed(8);
    for (const auto& g : dataset)
        for (int rep = 0; rep < 4; ++rep) {
            GroupDraws d = make_group_draws(g, model.schedule(), fixed);
            for (std::size_t i = 0; i < g.positives.size(); ++i) {
                sum_pos += per_sample_score(g.positives[i], g.cond, d.t, d.eps_pos[i],
                                            g.user, model, ref)
                               .item();
                ++n_pos;
            }
            for (std::size_t j = 0; j < g.negatives.size(); ++j) {
                sum_neg += per_sample_score(g.negatives[j], g.cond, d.t, d.eps_neg[j],
                                            g.user, model, ref)
                               .item();
                ++n_neg;
            }
        }
    CHECK(sum_pos / n_pos < sum_neg / n_neg);

    for (std::size_t i = 0; i < ref_named.size(); ++i)
        CHECK(ref_named[i].second.data() == ref_before[i]);
    for (std::size_t i = 0; i < backbone_before_vec.size(); ++i)
        CHECK(backbone_before_vec[i].data() == backbone_before[i]);

    SUBCASE("contracts") {
        CHECK_THROWS_AS(train_group_dpo(model, ref, {}, cfg), DegenerateInputError);
        DiffusionModel frozen = model.clone();
        frozen.freeze_all();
        CHECK_THROWS_AS(train_group_dpo(frozen, ref, dataset, cfg), ContractError);
    }
}

TEST_CASE("pairwise objective reproduces the group curve on single pairs") {
    Rng rng(61);
    DiffusionModel base(tiny_diffusion(true), rng);
    base.freeze_backbone();
    DiffusionModel ref = base.clone();
    ref.freeze_all();

    Rng data_rng(62);
    std::vector<PreferenceGroup> dataset;
    for (int k = 0; k < 8; ++k) dataset.push_back(make_random_group(data_rng, 1, 1));

    DpoTrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.lr = 1e-3;
    cfg.seed = 7;
    cfg.dpo.beta = 20.0;

    DiffusionModel m_group = base.clone();
    cfg.objective = DpoObjective::group;
    auto group_stats = train_group_dpo(m_group, ref, dataset, cfg);

    DiffusionModel m_pair = base.clone();
    cfg.objective = DpoObjective::pairwise;
    auto pair_stats = train_group_dpo(m_pair, ref, dataset, cfg);

    REQUIRE(group_stats.size() == pair_stats.size());
    for (std::size_t i = 0; i < group_stats.size(); ++i)
        CHECK(std::abs(group_stats[i].mean_loss - pair_stats[i].mean_loss) < 1e-12);
}
