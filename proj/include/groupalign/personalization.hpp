#pragma once

#include <string>
#include <vector>

#include "groupalign/checkpoint.hpp"
#include "groupalign/ops.hpp"
#include "groupalign/rng.hpp"
#include "groupalign/tensor.hpp"

namespace groupalign {

// Categorical feature indices, one per feature field.
struct UserProfile {
    std::vector<int> feature_ids;
};

// Geometry of one cross-network personalization stack.
struct PluginConfig {
    std::vector<int> cardinalities;  // one per user feature field
    int embed_dim = 8;
    int cross_depth = 2;
};

// Affine layer stored as one (in+1) x out tensor whose last row is the
// bias; the forward pass appends a constant 1 to the input. One tensor per
// layer keeps checkpoint fragments flat.
class AffineAug {
  public:
    AffineAug() = default;
    // Weights and bias uniform in (-1/sqrt(in), 1/sqrt(in)).
    AffineAug(int in, int out, Rng& rng);
    static AffineAug zeros(int in, int out);

    // Rank-1 input of length in, or rank-2 with in columns.
    Tensor forward(const Tensor& x) const;

    int in_dim() const { return w_.rows() - 1; }
    int out_dim() const { return w_.cols(); }
    const Tensor& weight() const { return w_; }
    Tensor& weight() { return w_; }

  private:
    Tensor w_;
};

// Two affine layers with GeLU between; the final layer starts exactly zero
// so a fresh network maps every input to the zero vector.
class AdaptiveNetwork {
  public:
    AdaptiveNetwork() = default;
    AdaptiveNetwork(int in, int out, Rng& rng);

    Tensor forward(const Tensor& u) const;

    int in_dim() const { return layer0_.in_dim(); }
    int out_dim() const { return layer1_.out_dim(); }

    std::vector<Tensor> params() const;
    NamedParams named_params(const std::string& prefix) const;

  private:
    AffineAug layer0_;
    AffineAug layer1_;
};

// Per-field embeddings concatenated into u_0, refined by residual
// feature-crossing layers: u_{l+1} = u_0 * <u_l, w_l> + b_l + u_l.
class CrossNetwork {
  public:
    CrossNetwork() = default;
    CrossNetwork(std::vector<int> cardinalities, int embed_dim, int depth, Rng& rng);

    // Concatenated embedding rows, length F * embed_dim.
    Tensor embed(const UserProfile& profile) const;
    // Crossing layers on top of u0.
    Tensor forward(const Tensor& u0) const;
    // embed + forward.
    Tensor user_vector(const UserProfile& profile) const;

    int dim() const { return static_cast<int>(cardinalities_.size()) * embed_dim_; }
    int fields() const { return static_cast<int>(cardinalities_.size()); }
    int depth() const { return depth_; }

    std::vector<Tensor> params() const;
    NamedParams named_params(const std::string& prefix) const;

  private:
    std::vector<int> cardinalities_;
    int embed_dim_ = 0;
    int depth_ = 0;
    std::vector<Tensor> tables_;  // per field: cardinality x embed_dim
    std::vector<Tensor> w_;       // per layer, length F * embed_dim
    std::vector<Tensor> b_;
};

}  // namespace groupalign
