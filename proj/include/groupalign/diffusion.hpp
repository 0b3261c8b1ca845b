#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "groupalign/checkpoint.hpp"
#include "groupalign/ops.hpp"
#include "groupalign/personalization.hpp"
#include "groupalign/rng.hpp"

namespace groupalign {

struct ScheduleConfig {
    int t_steps = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;
};

// Linear variance schedule. Timesteps are 1-based: t in [1, t_steps].
class NoiseSchedule {
  public:
    explicit NoiseSchedule(ScheduleConfig cfg = {});

    int t_steps() const { return static_cast<int>(betas_.size()); }
    double beta(int t) const { return betas_[index(t)]; }
    double alpha(int t) const { return 1.0 - betas_[index(t)]; }
    double alpha_bar(int t) const { return alpha_bars_[index(t)]; }
    // Std-dev of the reverse-step posterior; 0 at t = 1 by convention
    // (alpha_bar before the first step is 1).
    double posterior_sigma(int t) const;

  private:
    std::size_t index(int t) const;

    std::vector<double> betas_;
    std::vector<double> alpha_bars_;
};

// z_t = sqrt(abar) z0 + sqrt(1 - abar) eps, for any abar in [0, 1].
Tensor diffuse_with_alpha_bar(const Tensor& z0, double alpha_bar, const Tensor& eps);
Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched);

// Parameter-free sin/cos features of the integer timestep; dim must be even.
Tensor sinusoidal_embedding(int t, int dim);

struct UNetConfig {
    int item_dim = 32;
    int cond_dim = 8;
    int w1 = 32;
    int w2 = 24;
    int w3 = 16;
    int emb_dim = 16;
};

// Backbone deltas produced by the personalized branch, each already passed
// through its zero-initialized bridge. Added to the input of the consuming
// block: Dk's skip component for the encoder copies, the middle block's
// input for the middle copy.
struct BridgeDeltas {
    Tensor skip1, skip2, skip3, mid_in;
};

// Vector-input denoiser: narrowing encoder, middle block, skip-connected
// widening decoder, all affine + GeLU. Timestep and condition enter every
// block by addition of a learned projection to the block input.
class ToyUNet {
  public:
    struct Block {
        AffineAug main;
        AffineAug tproj;
        AffineAug cproj;

        Block() = default;
        Block(int in, int out, int emb_dim, int cond_dim, Rng& rng);
        Block deep_copy() const;

        Tensor forward(const Tensor& x, const Tensor& temb, const Tensor& cond) const;
        std::vector<Tensor> params() const;
        NamedParams named_params(const std::string& prefix) const;
    };

    ToyUNet() = default;
    ToyUNet(UNetConfig cfg, Rng& rng);

    Tensor forward(const Tensor& z_t, int t, const Tensor& cond,
                   const BridgeDeltas* deltas = nullptr) const;

    void set_frozen(bool frozen);
    bool frozen() const { return frozen_; }
    const UNetConfig& config() const { return cfg_; }
    const Block& encoder(int k) const;  // k = 1..3
    const Block& middle() const { return mid_; }
    const AffineAug& temb_affine() const { return temb_; }
    const AffineAug& cemb_affine() const { return cemb_; }

    std::vector<Tensor> params() const;
    NamedParams named_params(const std::string& prefix) const;

  private:
    UNetConfig cfg_;
    bool frozen_ = false;
    AffineAug temb_;  // sinusoidal features -> emb_dim
    AffineAug cemb_;  // raw condition -> emb_dim
    Block e1_, e2_, e3_, mid_, d3_, d2_, d1_;
    AffineAug head_;
};

// Trainable copies of the encoder and middle blocks (and their embedding
// affines), fed the u-fused latent. Every path back into the backbone and
// the u-fusion itself start at exactly zero, so a fresh branch is inert.
class PersonalizedBranch {
  public:
    PersonalizedBranch() = default;
    PersonalizedBranch(const ToyUNet& backbone, const PluginConfig& pc, Rng& rng);

    BridgeDeltas deltas(const Tensor& z_t, int t, const Tensor& cond,
                        const UserProfile& profile) const;

    std::vector<Tensor> params() const;
    NamedParams named_params(const std::string& prefix) const;

  private:
    UNetConfig cfg_;
    CrossNetwork cross_;
    AffineAug uproj_;   // user vector -> item_dim, random init
    AffineAug fusion_;  // item_dim -> item_dim, zero init
    AffineAug temb_, cemb_;
    ToyUNet::Block e1_, e2_, e3_, mid_;
    AffineAug bridge1_, bridge2_, bridge3_, bridge_mid_;  // all zero init
};

struct DiffusionConfig {
    UNetConfig unet;
    ScheduleConfig schedule;
    PluginConfig user_plugin;
    bool personalized = true;  // build the branch at construction
};

// Denoiser plus optional personalized branch and the schedule they share.
class DiffusionModel {
  public:
    DiffusionModel() = default;
    DiffusionModel(DiffusionConfig cfg, Rng& rng);

    Tensor predict_noise(const Tensor& z_t, int t, const Tensor& cond) const;
    // With a branch and a user: personalized prediction. Without a branch
    // the user is ignored.
    Tensor predict_noise(const Tensor& z_t, int t, const Tensor& cond,
                         const std::optional<UserProfile>& user) const;

    // (Re)creates the branch from copies of the current backbone blocks.
    void attach_branch(Rng& rng);
    bool has_branch() const { return branch_.has_value(); }

    void freeze_backbone();
    bool backbone_frozen() const { return backbone_.frozen(); }
    void freeze_all();

    const NoiseSchedule& schedule() const { return sched_; }
    const DiffusionConfig& config() const { return cfg_; }
    const ToyUNet& backbone() const { return backbone_; }

    std::vector<Tensor> backbone_params() const { return backbone_.params(); }
    std::vector<Tensor> branch_params() const;
    // Every parameter that currently requires gradients.
    std::vector<Tensor> trainable_params() const;
    NamedParams named_params() const;

    // Structural deep copy: same values, fresh storage, same freeze state.
    DiffusionModel clone() const;

  private:
    DiffusionConfig cfg_;
    NoiseSchedule sched_;
    ToyUNet backbone_;
    std::optional<PersonalizedBranch> branch_;
};

// One training sample: a clean item, its prompt condition, and optionally
// the user it belongs to.
struct DiffusionExample {
    Tensor z0;
    Tensor cond;
    std::optional<UserProfile> user;
};

struct NoiseDraw {
    int t = 1;
    Tensor eps;
};

std::vector<NoiseDraw> make_noise_draws(const std::vector<DiffusionExample>& batch,
                                        const NoiseSchedule& sched, Rng& rng);

// Mean over batch and coordinates of (eps - predicted)^2 with the given
// draws; the random-draw overload samples t uniform in [1, T] and eps
// standard normal per sample.
Tensor sft_loss_with_draws(const DiffusionModel& model, const std::vector<DiffusionExample>& batch,
                           const std::vector<NoiseDraw>& draws);
Tensor sft_loss(const DiffusionModel& model, const std::vector<DiffusionExample>& batch, Rng& rng);

// Ancestral sampling from pure noise, deterministic given the rng state.
Tensor sample_item(const DiffusionModel& model, const Tensor& cond,
                   const std::optional<UserProfile>& user, Rng& rng);

struct DiffusionTrainConfig {
    int epochs = 1;
    int batch_size = 8;
    double lr = 1e-4;
    double weight_decay = 0.0;
    int warmup_steps = 0;
    std::uint64_t seed = 0;
};

// Minibatch AdamW on whatever parameters require gradients; returns the
// mean loss per epoch.
std::vector<double> train_sft(DiffusionModel& model, const std::vector<DiffusionExample>& data,
                              const DiffusionTrainConfig& cfg);

}  // namespace groupalign
