#include "groupalign/groupdpo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "groupalign/optimizer.hpp"

namespace groupalign {

namespace {

void check_rewards(const std::vector<double>& rp, const std::vector<double>& rn) {
    if (rp.empty() || rn.empty())
        throw DegenerateInputError("pl_probability: empty positive or negative set");
    for (double r : rp)
        if (!std::isfinite(r)) throw NumericalError("pl_probability: non-finite reward");
    for (double r : rn)
        if (!std::isfinite(r)) throw NumericalError("pl_probability: non-finite reward");
}

void check_group(const PreferenceGroup& group) {
    if (group.positives.empty() || group.negatives.empty())
        throw DegenerateInputError("group loss: empty positive or negative set");
}

void check_draws(const PreferenceGroup& group, const GroupDraws& draws) {
    if (draws.eps_pos.size() != group.positives.size() ||
        draws.eps_neg.size() != group.negatives.size())
        throw DimensionError("group loss: one noise draw per candidate required");
}

struct GroupScores {
    std::vector<Tensor> s_pos, s_neg;
    double sum_s_pos = 0.0;
    double sum_s_neg = 0.0;
};

GroupScores compute_scores(const PreferenceGroup& group, const GroupDraws& draws,
                           const DiffusionModel& model, const DiffusionModel& ref) {
    check_group(group);
    check_draws(group, draws);
    GroupScores scores;
    for (std::size_t i = 0; i < group.positives.size(); ++i) {
        scores.s_pos.push_back(per_sample_score(group.positives[i], group.cond, draws.t,
                                                draws.eps_pos[i], group.user, model, ref));
        scores.sum_s_pos += scores.s_pos.back().item();
    }
    for (std::size_t j = 0; j < group.negatives.size(); ++j) {
        scores.s_neg.push_back(per_sample_score(group.negatives[j], group.cond, draws.t,
                                                draws.eps_neg[j], group.user, model, ref));
        scores.sum_s_neg += scores.s_neg.back().item();
    }
    return scores;
}

// -sum_p log sigmoid(-logsumexp_n(beta (s_p - s_n))).
Tensor assemble_group_loss(const GroupScores& scores, double beta) {
    std::vector<Tensor> per_positive;
    per_positive.reserve(scores.s_pos.size());
    for (const Tensor& sp : scores.s_pos) {
        std::vector<Tensor> margins;
        margins.reserve(scores.s_neg.size());
        for (const Tensor& sn : scores.s_neg) margins.push_back(scale(sub(sp, sn), beta));
        per_positive.push_back(neg(log_sigmoid(neg(logsumexp(concat(margins))))));
    }
    return add_n(per_positive);
}

// sum over all pairs of -log sigmoid(beta (s_n - s_p)).
Tensor assemble_pairwise_loss(const GroupScores& scores, double beta) {
    std::vector<Tensor> pair_losses;
    pair_losses.reserve(scores.s_pos.size() * scores.s_neg.size());
    for (const Tensor& sp : scores.s_pos)
        for (const Tensor& sn : scores.s_neg)
            pair_losses.push_back(neg(log_sigmoid(scale(sub(sn, sp), beta))));
    return add_n(pair_losses);
}

void check_beta(double beta) {
    if (!(beta > 0.0)) throw ConfigError("dpo loss: beta must be positive");
}

}  // namespace

GroupDraws make_group_draws(const PreferenceGroup& group, const NoiseSchedule& sched, Rng& rng) {
    check_group(group);
    GroupDraws draws;
    draws.t = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(sched.t_steps())));
    for (const Tensor& x : group.positives)
        draws.eps_pos.push_back(Tensor::from_vector(rng.gaussian_vector(x.numel()), x.shape()));
    for (const Tensor& x : group.negatives)
        draws.eps_neg.push_back(Tensor::from_vector(rng.gaussian_vector(x.numel()), x.shape()));
    return draws;
}

double pl_probability_closed(const std::vector<double>& rewards_pos,
                             const std::vector<double>& rewards_neg) {
    check_rewards(rewards_pos, rewards_neg);
    double total = 0.0;
    for (double rp : rewards_pos) {
        // 1 / (1 + sum exp(r_n - r_p)) = exp(-logsumexp([0, r_n - r_p...]))
        double hi = 0.0;
        for (double rn : rewards_neg) hi = std::max(hi, rn - rp);
        double acc = std::exp(0.0 - hi);
        for (double rn : rewards_neg) acc += std::exp(rn - rp - hi);
        total += std::exp(-(hi + std::log(acc)));
    }
    return total;
}

double pl_probability_oracle(const std::vector<double>& rewards_pos,
                             const std::vector<double>& rewards_neg) {
    check_rewards(rewards_pos, rewards_neg);
    if (rewards_neg.size() > 6)
        throw ContractError("pl_probability_oracle: more than 6 negatives");

    std::vector<double> theta_neg(rewards_neg.size());
    for (std::size_t j = 0; j < rewards_neg.size(); ++j) theta_neg[j] = std::exp(rewards_neg[j]);
    double theta_neg_total = std::accumulate(theta_neg.begin(), theta_neg.end(), 0.0);

    double total = 0.0;
    for (double rp : rewards_pos) {
        double theta_p = std::exp(rp);
        std::vector<std::size_t> perm(rewards_neg.size());
        std::iota(perm.begin(), perm.end(), 0);
        double p_first = 0.0;
        do {
            double prob = theta_p / (theta_p + theta_neg_total);
            double remaining = theta_neg_total;
            for (std::size_t j : perm) {
                prob *= theta_neg[j] / remaining;
                remaining -= theta_neg[j];
            }
            p_first += prob;
        } while (std::next_permutation(perm.begin(), perm.end()));
        total += p_first;
    }
    return total;
}

Tensor per_sample_score(const Tensor& item, const Tensor& cond, int t, const Tensor& eps,
                        const std::optional<UserProfile>& user, const DiffusionModel& model,
                        const DiffusionModel& ref) {
    Tensor z_t = forward_diffuse(item, t, eps, model.schedule());
    Tensor err_model = sum(square(sub(eps, model.predict_noise(z_t, t, cond, user))));
    Tensor err_ref;
    {
        NoGradGuard guard;
        err_ref = sum(square(sub(eps, ref.predict_noise(z_t, t, cond, user))));
    }
    return sub(err_model, err_ref);
}

Tensor group_dpo_loss(const PreferenceGroup& group, const GroupDraws& draws, const DpoConfig& cfg,
                      const DiffusionModel& model, const DiffusionModel& ref) {
    check_beta(cfg.beta);
    return assemble_group_loss(compute_scores(group, draws, model, ref), cfg.beta);
}

Tensor pairwise_dpo_loss(const Tensor& positive, const Tensor& negative, const Tensor& cond,
                         const std::optional<UserProfile>& user, const GroupDraws& draws,
                         const DpoConfig& cfg, const DiffusionModel& model,
                         const DiffusionModel& ref) {
    check_beta(cfg.beta);
    if (draws.eps_pos.size() != 1 || draws.eps_neg.size() != 1)
        throw DimensionError("pairwise loss: exactly one draw per side required");
    Tensor s_p = per_sample_score(positive, cond, draws.t, draws.eps_pos[0], user, model, ref);
    Tensor s_n = per_sample_score(negative, cond, draws.t, draws.eps_neg[0], user, model, ref);
    return neg(log_sigmoid(scale(sub(s_n, s_p), cfg.beta)));
}

std::vector<DpoStepStats> train_group_dpo(DiffusionModel& model, const DiffusionModel& ref,
                                          const std::vector<PreferenceGroup>& dataset,
                                          const DpoTrainConfig& cfg) {
    if (dataset.empty()) throw DegenerateInputError("train_group_dpo: empty dataset");
    if (cfg.epochs < 0) throw ConfigError("train_group_dpo: negative epochs");
    if (cfg.batch_size <= 0) throw ConfigError("train_group_dpo: non-positive batch size");
    check_beta(cfg.dpo.beta);
    std::vector<Tensor> params = model.trainable_params();
    if (params.empty()) throw ContractError("train_group_dpo: no trainable parameters");

    AdamW::Config ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    ocfg.warmup_steps = cfg.warmup_steps;
    AdamW opt(params, ocfg);

    Rng rng(mix_seed(cfg.seed, 0x67647065ULL));
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);

    std::vector<DpoStepStats> stats;
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        std::size_t done = 0;
        while (done < order.size()) {
            std::size_t take = std::min<std::size_t>(cfg.batch_size, order.size() - done);
            opt.zero_grad();
            DpoStepStats row;
            std::size_t n_pos = 0, n_neg = 0;
            for (std::size_t k = 0; k < take; ++k) {
                const PreferenceGroup& group = dataset[order[done + k]];
                GroupDraws draws = make_group_draws(group, model.schedule(), rng);
                GroupScores scores = compute_scores(group, draws, model, ref);
                Tensor loss = cfg.objective == DpoObjective::pairwise
                                  ? assemble_pairwise_loss(scores, cfg.dpo.beta)
                                  : assemble_group_loss(scores, cfg.dpo.beta);
                scale(loss, 1.0 / static_cast<double>(take)).backward();
                row.mean_loss += loss.item();
                row.mean_s_pos += scores.sum_s_pos;
                row.mean_s_neg += scores.sum_s_neg;
                n_pos += group.positives.size();
                n_neg += group.negatives.size();
            }
            opt.step();
            done += take;
            row.step = ++step;
            row.mean_loss /= static_cast<double>(take);
            row.mean_s_pos /= static_cast<double>(n_pos);
            row.mean_s_neg /= static_cast<double>(n_neg);
            stats.push_back(row);
        }
    }
    return stats;
}

}  // namespace groupalign
