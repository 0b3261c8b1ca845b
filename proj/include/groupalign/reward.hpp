#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "groupalign/checkpoint.hpp"
#include "groupalign/personalization.hpp"

namespace groupalign {

// Geometry of one encoder tower. Exactly one of vocab and chunks is set:
// a token tower embeds ids, an item tower projects contiguous chunks of the
// item vector into token positions.
struct TowerConfig {
    int width = 32;
    int layers = 2;
    int heads = 2;
    int ffn_hidden = 64;
    int out_dim = 16;
    int max_len = 16;
    int vocab = 0;     // > 0: token-input tower
    int item_dim = 0;  // > 0 with chunks: vector-input tower
    int chunks = 0;
};

// Hidden states entering each attention and FFN sub-block, for tests that
// watch the injection point.
struct TowerTrace {
    std::vector<Tensor> pre_attn;
    std::vector<Tensor> pre_ffn;
};

// Per-layer injection vectors added element-wise to every token's hidden
// state, attention site and FFN site separately. Empty = no injection.
struct Injections {
    std::vector<Tensor> attn;
    std::vector<Tensor> ffn;
};

// Pre-norm transformer encoder: per layer, x += u_attn; x += MHA(LN(x));
// x += u_ffn; x += FFN(LN(x)). Pooling is the token mean followed by a
// linear projection.
class Tower {
  public:
    Tower() = default;
    Tower(TowerConfig cfg, Rng& rng);

    Tensor forward_tokens(const std::vector<int>& ids, const Injections& inj,
                          TowerTrace* trace = nullptr) const;
    Tensor forward_item(const Tensor& item, const Injections& inj,
                        TowerTrace* trace = nullptr) const;

    // Freezing drops requires_grad so training cannot touch the weights;
    // gradients still flow through them into injected vectors.
    void set_frozen(bool frozen);
    bool frozen() const { return frozen_; }

    const TowerConfig& config() const { return cfg_; }
    std::vector<Tensor> params() const;
    NamedParams named_params(const std::string& prefix) const;

  private:
    Tensor encode(Tensor x, const Injections& inj, TowerTrace* trace) const;

    TowerConfig cfg_;
    bool frozen_ = false;
    Tensor token_table_;  // token tower
    AffineAug patch_;     // item tower
    Tensor pos_;
    struct Layer {
        AffineAug q, k, v, o;
        AffineAug ffn0, ffn1;
        Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    };
    std::vector<Layer> layers_;
    AffineAug pool_;
};

enum class WiringMode { duplicated, shared, vision_only, text_only };

WiringMode wiring_mode_from_string(const std::string& s);
std::string to_string(WiringMode mode);

// The personalization stack for a two-tower model: per active tower, one
// cross network plus per-layer adaptive networks for the attention and FFN
// sites. In shared mode both towers hold handles to the same parameters.
class PluginSet {
  public:
    PluginSet() = default;
    PluginSet(WiringMode mode, const PluginConfig& pc, int layers, int width, Rng& rng);

    bool text_active() const;
    bool item_active() const;

    Injections text_injections(const UserProfile& profile) const;
    Injections item_injections(const UserProfile& profile) const;

    WiringMode mode() const { return mode_; }
    // Deduplicated in shared mode.
    std::vector<Tensor> params() const;
    NamedParams named_params(const std::string& prefix) const;

  private:
    struct Side {
        CrossNetwork cross;
        std::vector<AdaptiveNetwork> attn;
        std::vector<AdaptiveNetwork> ffn;
        Injections injections(const UserProfile& profile) const;
        std::vector<Tensor> params() const;
        NamedParams named_params(const std::string& prefix) const;
    };
    WiringMode mode_ = WiringMode::duplicated;
    std::optional<Side> text_;
    std::optional<Side> item_;
};

struct RewardConfig {
    TowerConfig text_tower;
    TowerConfig item_tower;
    PluginConfig plugin;
    WiringMode mode = WiringMode::duplicated;
};

// Two frozen-backbone towers scored by cosine similarity, personalized by
// per-layer plug-in injections.
class RewardModel {
  public:
    RewardModel() = default;
    RewardModel(RewardConfig cfg, Rng& rng);

    // Plugin-free forward, the pretraining and baseline path.
    Tensor backbone_score(const std::vector<int>& prompt_tokens, const Tensor& item) const;
    // Personalized forward per the wiring mode.
    Tensor score(const std::vector<int>& prompt_tokens, const Tensor& item,
                 const UserProfile& profile) const;
    // Rank-1 tensor of per-candidate scores.
    Tensor group_scores(const std::vector<int>& prompt_tokens, const std::vector<Tensor>& items,
                        const UserProfile& profile) const;
    // Plugin-free counterpart.
    Tensor backbone_group_scores(const std::vector<int>& prompt_tokens,
                                 const std::vector<Tensor>& items) const;

    void freeze_backbone();
    bool backbone_frozen() const;

    const RewardConfig& config() const { return cfg_; }
    Tower& text_tower() { return text_tower_; }
    Tower& item_tower() { return item_tower_; }
    const PluginSet& plugins() const { return plugins_; }

    std::vector<Tensor> backbone_params() const;
    std::vector<Tensor> plugin_params() const;
    // reward/backbone/... and reward/plugin/...
    NamedParams named_params() const;
    NamedParams backbone_named_params() const;

  private:
    RewardConfig cfg_;
    Tower text_tower_;
    Tower item_tower_;
    PluginSet plugins_;
};

// Positives split the mass evenly, negatives get zero. All-zero labels are
// degenerate.
std::vector<double> ideal_distribution(const std::vector<int>& labels);

// Softmax over the group's scores.
Tensor predicted_distribution(const Tensor& group_scores);

// -sum_i [p_i log q_i + (1 - p_i) log(1 - q_i)] with q clamped to
// [1e-12, 1 - 1e-12] before the logs.
Tensor rm_group_loss(const std::vector<double>& ideal, const Tensor& predicted);

// One training example: a user, a prompt, and the group's candidates.
struct RmExample {
    UserProfile profile;
    std::vector<int> prompt_tokens;
    std::vector<Tensor> items;
    std::vector<int> labels;
};

struct RmTrainConfig {
    int epochs = 10;
    int batch_size = 8;
    double lr = 1e-3;
    double weight_decay = 1e-2;
    int warmup_steps = 0;
    std::uint64_t seed = 0;
};

// Plugin training against a frozen backbone: only plug-in parameters move.
// Returns the per-epoch mean loss.
std::vector<double> train_rm(RewardModel& model, const std::vector<RmExample>& dataset,
                             const RmTrainConfig& cfg);

// Backbone pretraining with the same group objective and no plug-ins.
std::vector<double> pretrain_backbone(RewardModel& model, const std::vector<RmExample>& dataset,
                                      const RmTrainConfig& cfg);

}  // namespace groupalign
