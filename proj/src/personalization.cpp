#include "groupalign/personalization.hpp"

#include <cmath>

namespace groupalign {

namespace {

Tensor uniform_init(std::vector<int> shape, double bound, Rng& rng) {
    std::size_t n = shape_numel(shape);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor::from_vector(std::move(v), std::move(shape), true);
}

}  // namespace

AffineAug::AffineAug(int in, int out, Rng& rng) {
    if (in <= 0 || out <= 0) throw DimensionError("AffineAug: non-positive dimension");
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    w_ = uniform_init({in + 1, out}, bound, rng);
}

AffineAug AffineAug::zeros(int in, int out) {
    if (in <= 0 || out <= 0) throw DimensionError("AffineAug: non-positive dimension");
    AffineAug a;
    a.w_ = Tensor::zeros({in + 1, out}, true);
    return a;
}

Tensor AffineAug::forward(const Tensor& x) const {
    if (x.cols() != in_dim())
        throw DimensionError("AffineAug: input " + shape_str(x.shape()) + ", expected width " +
                             std::to_string(in_dim()));
    if (x.rank() == 1) return matmul(concat({x, Tensor::scalar(1.0)}), w_);
    return matmul(concat({x, Tensor::full({x.rows(), 1}, 1.0)}), w_);
}

AdaptiveNetwork::AdaptiveNetwork(int in, int out, Rng& rng)
    : layer0_(in, std::max(in, out), rng), layer1_(AffineAug::zeros(std::max(in, out), out)) {}

Tensor AdaptiveNetwork::forward(const Tensor& u) const {
    return layer1_.forward(gelu(layer0_.forward(u)));
}

std::vector<Tensor> AdaptiveNetwork::params() const { return {layer0_.weight(), layer1_.weight()}; }

NamedParams AdaptiveNetwork::named_params(const std::string& prefix) const {
    return {{prefix + "/layer0", layer0_.weight()}, {prefix + "/layer1", layer1_.weight()}};
}

CrossNetwork::CrossNetwork(std::vector<int> cardinalities, int embed_dim, int depth, Rng& rng)
    : cardinalities_(std::move(cardinalities)), embed_dim_(embed_dim), depth_(depth) {
    if (cardinalities_.empty()) throw ConfigError("CrossNetwork: no feature fields");
    if (embed_dim_ <= 0) throw ConfigError("CrossNetwork: non-positive embed_dim");
    if (depth_ < 0) throw ConfigError("CrossNetwork: negative depth");
    for (int card : cardinalities_) {
        if (card <= 0) throw ConfigError("CrossNetwork: non-positive field cardinality");
        double bound = 1.0 / std::sqrt(static_cast<double>(embed_dim_));
        tables_.push_back(uniform_init({card, embed_dim_}, bound, rng));
    }
    int n = dim();
    double bound = 1.0 / std::sqrt(static_cast<double>(n));
    for (int l = 0; l < depth_; ++l) {
        w_.push_back(uniform_init({n}, bound, rng));
        b_.push_back(Tensor::zeros({n}, true));
    }
}

Tensor CrossNetwork::embed(const UserProfile& profile) const {
    if (static_cast<int>(profile.feature_ids.size()) != fields())
        throw DimensionError("embed: profile has " + std::to_string(profile.feature_ids.size()) +
                             " features, expected " + std::to_string(fields()));
    std::vector<Tensor> rows;
    rows.reserve(tables_.size());
    for (std::size_t i = 0; i < tables_.size(); ++i)
        rows.push_back(embedding_rows(tables_[i], {profile.feature_ids[i]}));
    return reshape(concat(rows), {dim()});
}

Tensor CrossNetwork::forward(const Tensor& u0) const {
    if (u0.rank() != 1 || u0.cols() != dim())
        throw DimensionError("cross forward: input " + shape_str(u0.shape()) + ", expected [" +
                             std::to_string(dim()) + "]");
    Tensor u = u0;
    for (int l = 0; l < depth_; ++l)
        u = add(add(mul_scalar(u0, dot(u, w_[l])), b_[l]), u);
    return u;
}

Tensor CrossNetwork::user_vector(const UserProfile& profile) const {
    return forward(embed(profile));
}

std::vector<Tensor> CrossNetwork::params() const {
    std::vector<Tensor> out(tables_.begin(), tables_.end());
    for (int l = 0; l < depth_; ++l) {
        out.push_back(w_[l]);
        out.push_back(b_[l]);
    }
    return out;
}

NamedParams CrossNetwork::named_params(const std::string& prefix) const {
    NamedParams out;
    for (std::size_t i = 0; i < tables_.size(); ++i)
        out.emplace_back(prefix + "/embed/" + std::to_string(i), tables_[i]);
    for (int l = 0; l < depth_; ++l) {
        out.emplace_back(prefix + "/cross/" + std::to_string(l) + "/w", w_[l]);
        out.emplace_back(prefix + "/cross/" + std::to_string(l) + "/b", b_[l]);
    }
    return out;
}

}  // namespace groupalign
