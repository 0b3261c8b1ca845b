#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "groupalign/diffusion.hpp"

namespace groupalign {

// One group-level preference record for alignment training: the user chose
// every item in positives over every item in negatives, under one prompt.
struct PreferenceGroup {
    UserProfile user;
    Tensor cond;
    std::vector<Tensor> positives;
    std::vector<Tensor> negatives;
};

// The stochastic draws a group loss is evaluated with: one shared timestep
// for the whole group, an independent noise vector per candidate.
struct GroupDraws {
    int t = 1;
    std::vector<Tensor> eps_pos;
    std::vector<Tensor> eps_neg;
};

GroupDraws make_group_draws(const PreferenceGroup& group, const NoiseSchedule& sched, Rng& rng);

// sum_p 1 / (1 + sum_n exp(r_n - r_p)), the probability (under the
// per-positive independence assumption) that each positive outranks every
// negative. With more than one positive the sum may exceed 1; it is a sum
// of per-positive probabilities, not a normalized distribution.
double pl_probability_closed(const std::vector<double>& rewards_pos,
                             const std::vector<double>& rewards_neg);

// Same quantity by brute force: for each positive, enumerate all orderings
// of the negatives behind it and sum the ranking probabilities, with item
// weights exp(r). Factorial in the negative count; refuses more than 6.
double pl_probability_oracle(const std::vector<double>& rewards_pos,
                             const std::vector<double>& rewards_neg);

struct DpoConfig {
    double beta = 2000.0;
};

// s = |eps - model(z_t)|^2 - |eps - ref(z_t)|^2, summed over coordinates,
// with z_t formed from this exact eps. Negative when the trained model
// denoises this candidate better than the reference.
Tensor per_sample_score(const Tensor& item, const Tensor& cond, int t, const Tensor& eps,
                        const std::optional<UserProfile>& user, const DiffusionModel& model,
                        const DiffusionModel& ref);

// -sum_p log sigmoid(-logsumexp_n(beta s_p - beta s_n)).
Tensor group_dpo_loss(const PreferenceGroup& group, const GroupDraws& draws, const DpoConfig& cfg,
                      const DiffusionModel& model, const DiffusionModel& ref);

// Classical two-candidate objective -log sigmoid(beta s_n - beta s_p); the
// group loss restricted to one positive and one negative.
Tensor pairwise_dpo_loss(const Tensor& pos, const Tensor& neg, const Tensor& cond,
                         const std::optional<UserProfile>& user, const GroupDraws& draws,
                         const DpoConfig& cfg, const DiffusionModel& model,
                         const DiffusionModel& ref);

enum class DpoObjective { group, pairwise };

struct DpoTrainConfig {
    int epochs = 1;
    int batch_size = 4;
    double lr = 1e-4;
    double weight_decay = 0.0;
    int warmup_steps = 0;
    std::uint64_t seed = 0;
    DpoConfig dpo;
    DpoObjective objective = DpoObjective::group;
};

struct DpoStepStats {
    int step = 0;
    double mean_loss = 0.0;
    double mean_s_pos = 0.0;
    double mean_s_neg = 0.0;
};

// Minibatch AdamW on the model's trainable parameters against the frozen
// reference; fresh draws per group visit, deterministic given the seed.
std::vector<DpoStepStats> train_group_dpo(DiffusionModel& model, const DiffusionModel& ref,
                                          const std::vector<PreferenceGroup>& dataset,
                                          const DpoTrainConfig& cfg);

}  // namespace groupalign
