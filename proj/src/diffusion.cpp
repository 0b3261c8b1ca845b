#include "groupalign/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "groupalign/optimizer.hpp"

namespace groupalign {

namespace {

Tensor deep_copy_tensor(const Tensor& t) {
    Tensor c = Tensor::from_vector(t.data(), t.shape(), t.requires_grad());
    return c;
}

AffineAug deep_copy_affine(const AffineAug& a) {
    AffineAug c = a;
    c.weight() = deep_copy_tensor(a.weight());
    return c;
}

void set_all_requires_grad(const std::vector<Tensor>& params, bool on) {
    for (Tensor t : params) t.set_requires_grad(on);
}

}  // namespace

NoiseSchedule::NoiseSchedule(ScheduleConfig cfg) {
    if (cfg.t_steps < 1) throw ConfigError("schedule: t_steps must be >= 1");
    betas_.resize(cfg.t_steps);
    for (int t = 0; t < cfg.t_steps; ++t) {
        double frac = cfg.t_steps == 1 ? 0.0 : static_cast<double>(t) / (cfg.t_steps - 1);
        betas_[t] = cfg.beta_start + frac * (cfg.beta_end - cfg.beta_start);
    }
    double prev = 2.0;
    for (double b : betas_) {
        if (!(b > 0.0 && b < 1.0)) throw ConfigError("schedule: beta outside (0, 1)");
        if (prev != 2.0 && b < prev) throw ConfigError("schedule: beta must be non-decreasing");
        prev = b;
    }
    alpha_bars_.resize(betas_.size());
    double abar = 1.0;
    for (std::size_t i = 0; i < betas_.size(); ++i) {
        abar *= 1.0 - betas_[i];
        alpha_bars_[i] = abar;
    }
}

std::size_t NoiseSchedule::index(int t) const {
    if (t < 1 || t > t_steps())
        throw IndexError("schedule: t = " + std::to_string(t) + " outside [1, " +
                         std::to_string(t_steps()) + "]");
    return static_cast<std::size_t>(t - 1);
}

double NoiseSchedule::posterior_sigma(int t) const {
    std::size_t i = index(t);
    double abar_prev = i == 0 ? 1.0 : alpha_bars_[i - 1];
    double var = (1.0 - abar_prev) / (1.0 - alpha_bars_[i]) * betas_[i];
    return std::sqrt(var);
}

Tensor diffuse_with_alpha_bar(const Tensor& z0, double alpha_bar, const Tensor& eps) {
    if (z0.shape() != eps.shape())
        throw DimensionError("diffuse: z0 " + shape_str(z0.shape()) + " vs eps " +
                             shape_str(eps.shape()));
    if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0))
        throw ContractError("diffuse: alpha_bar outside [0, 1]");
    return add(scale(z0, std::sqrt(alpha_bar)), scale(eps, std::sqrt(1.0 - alpha_bar)));
}

Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    return diffuse_with_alpha_bar(z0, sched.alpha_bar(t), eps);
}

Tensor sinusoidal_embedding(int t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw ConfigError("sinusoidal_embedding: dim must be even");
    int half = dim / 2;
    std::vector<double> v(dim);
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        v[i] = std::sin(t * freq);
        v[half + i] = std::cos(t * freq);
    }
    return Tensor::from_vector(std::move(v), {dim});
}

ToyUNet::Block::Block(int in, int out, int emb_dim, int cond_dim, Rng& rng)
    : main(in, out, rng), tproj(emb_dim, in, rng), cproj(cond_dim, in, rng) {}

ToyUNet::Block ToyUNet::Block::deep_copy() const {
    Block c;
    c.main = deep_copy_affine(main);
    c.tproj = deep_copy_affine(tproj);
    c.cproj = deep_copy_affine(cproj);
    return c;
}

Tensor ToyUNet::Block::forward(const Tensor& x, const Tensor& temb, const Tensor& cond) const {
    Tensor in = add(add(x, tproj.forward(temb)), cproj.forward(cond));
    return gelu(main.forward(in));
}

std::vector<Tensor> ToyUNet::Block::params() const {
    return {main.weight(), tproj.weight(), cproj.weight()};
}

NamedParams ToyUNet::Block::named_params(const std::string& prefix) const {
    return {{prefix + "/main", main.weight()},
            {prefix + "/tproj", tproj.weight()},
            {prefix + "/cproj", cproj.weight()}};
}

ToyUNet::ToyUNet(UNetConfig cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.item_dim < 1 || cfg.cond_dim < 1 || cfg.w1 < 1 || cfg.w2 < 1 || cfg.w3 < 1)
        throw ConfigError("unet: non-positive width");
    if (cfg.emb_dim < 2 || cfg.emb_dim % 2 != 0) throw ConfigError("unet: emb_dim must be even");
    temb_ = AffineAug(cfg.emb_dim, cfg.emb_dim, rng);
    cemb_ = AffineAug(cfg.cond_dim, cfg.emb_dim, rng);
    e1_ = Block(cfg.item_dim, cfg.w1, cfg.emb_dim, cfg.emb_dim, rng);
    e2_ = Block(cfg.w1, cfg.w2, cfg.emb_dim, cfg.emb_dim, rng);
    e3_ = Block(cfg.w2, cfg.w3, cfg.emb_dim, cfg.emb_dim, rng);
    mid_ = Block(cfg.w3, cfg.w3, cfg.emb_dim, cfg.emb_dim, rng);
    d3_ = Block(2 * cfg.w3, cfg.w2, cfg.emb_dim, cfg.emb_dim, rng);
    d2_ = Block(2 * cfg.w2, cfg.w1, cfg.emb_dim, cfg.emb_dim, rng);
    d1_ = Block(2 * cfg.w1, cfg.w1, cfg.emb_dim, cfg.emb_dim, rng);
    head_ = AffineAug(cfg.w1, cfg.item_dim, rng);
}

const ToyUNet::Block& ToyUNet::encoder(int k) const {
    switch (k) {
        case 1: return e1_;
        case 2: return e2_;
        case 3: return e3_;
        default: throw IndexError("unet: encoder index " + std::to_string(k));
    }
}

Tensor ToyUNet::forward(const Tensor& z_t, int t, const Tensor& cond,
                        const BridgeDeltas* deltas) const {
    if (z_t.rank() != 1 || static_cast<int>(z_t.numel()) != cfg_.item_dim)
        throw DimensionError("unet: z_t " + shape_str(z_t.shape()) + ", expected [" +
                             std::to_string(cfg_.item_dim) + "]");
    if (cond.rank() != 1 || static_cast<int>(cond.numel()) != cfg_.cond_dim)
        throw DimensionError("unet: cond " + shape_str(cond.shape()) + ", expected [" +
                             std::to_string(cfg_.cond_dim) + "]");
    Tensor temb = temb_.forward(sinusoidal_embedding(t, cfg_.emb_dim));
    Tensor cemb = cemb_.forward(cond);

    Tensor h1 = e1_.forward(z_t, temb, cemb);
    Tensor h2 = e2_.forward(h1, temb, cemb);
    Tensor h3 = e3_.forward(h2, temb, cemb);

    Tensor mid_in = deltas ? add(h3, deltas->mid_in) : h3;
    Tensor m = mid_.forward(mid_in, temb, cemb);

    Tensor s3 = deltas ? add(h3, deltas->skip3) : h3;
    Tensor s2 = deltas ? add(h2, deltas->skip2) : h2;
    Tensor s1 = deltas ? add(h1, deltas->skip1) : h1;

    Tensor x = d3_.forward(concat({m, s3}), temb, cemb);
    x = d2_.forward(concat({x, s2}), temb, cemb);
    x = d1_.forward(concat({x, s1}), temb, cemb);
    return head_.forward(x);
}

void ToyUNet::set_frozen(bool frozen) {
    frozen_ = frozen;
    set_all_requires_grad(params(), !frozen);
}

std::vector<Tensor> ToyUNet::params() const {
    std::vector<Tensor> out = {temb_.weight(), cemb_.weight()};
    for (const Block* b : {&e1_, &e2_, &e3_, &mid_, &d3_, &d2_, &d1_})
        for (const Tensor& t : b->params()) out.push_back(t);
    out.push_back(head_.weight());
    return out;
}

NamedParams ToyUNet::named_params(const std::string& prefix) const {
    NamedParams out = {{prefix + "/temb", temb_.weight()}, {prefix + "/cemb", cemb_.weight()}};
    const std::pair<const Block*, const char*> blocks[] = {
        {&e1_, "e1"}, {&e2_, "e2"}, {&e3_, "e3"}, {&mid_, "mid"},
        {&d3_, "d3"}, {&d2_, "d2"}, {&d1_, "d1"}};
    for (auto& [b, name] : blocks)
        for (auto& kv : b->named_params(prefix + "/" + name)) out.push_back(kv);
    out.emplace_back(prefix + "/head", head_.weight());
    return out;
}

PersonalizedBranch::PersonalizedBranch(const ToyUNet& backbone, const PluginConfig& pc, Rng& rng)
    : cfg_(backbone.config()) {
    cross_ = CrossNetwork(pc.cardinalities, pc.embed_dim, pc.cross_depth, rng);
    uproj_ = AffineAug(cross_.dim(), cfg_.item_dim, rng);
    fusion_ = AffineAug::zeros(cfg_.item_dim, cfg_.item_dim);
    temb_ = deep_copy_affine(backbone.temb_affine());
    cemb_ = deep_copy_affine(backbone.cemb_affine());
    e1_ = backbone.encoder(1).deep_copy();
    e2_ = backbone.encoder(2).deep_copy();
    e3_ = backbone.encoder(3).deep_copy();
    mid_ = backbone.middle().deep_copy();
    bridge1_ = AffineAug::zeros(cfg_.w1, cfg_.w1);
    bridge2_ = AffineAug::zeros(cfg_.w2, cfg_.w2);
    bridge3_ = AffineAug::zeros(cfg_.w3, cfg_.w3);
    bridge_mid_ = AffineAug::zeros(cfg_.w3, cfg_.w3);
    // The backbone may already be frozen; copies always train.
    set_all_requires_grad(params(), true);
}

BridgeDeltas PersonalizedBranch::deltas(const Tensor& z_t, int t, const Tensor& cond,
                                        const UserProfile& profile) const {
    Tensor u = cross_.user_vector(profile);
    Tensor z_fused = add(z_t, fusion_.forward(uproj_.forward(u)));
    Tensor temb = temb_.forward(sinusoidal_embedding(t, cfg_.emb_dim));
    Tensor cemb = cemb_.forward(cond);
    Tensor h1 = e1_.forward(z_fused, temb, cemb);
    Tensor h2 = e2_.forward(h1, temb, cemb);
    Tensor h3 = e3_.forward(h2, temb, cemb);
    Tensor m = mid_.forward(h3, temb, cemb);
    BridgeDeltas out;
    out.skip1 = bridge1_.forward(h1);
    out.skip2 = bridge2_.forward(h2);
    out.skip3 = bridge3_.forward(h3);
    out.mid_in = bridge_mid_.forward(m);
    return out;
}

std::vector<Tensor> PersonalizedBranch::params() const {
    std::vector<Tensor> out = cross_.params();
    for (const AffineAug* a : {&uproj_, &fusion_, &temb_, &cemb_})
        out.push_back(a->weight());
    for (const ToyUNet::Block* b : {&e1_, &e2_, &e3_, &mid_})
        for (const Tensor& t : b->params()) out.push_back(t);
    for (const AffineAug* a : {&bridge1_, &bridge2_, &bridge3_, &bridge_mid_})
        out.push_back(a->weight());
    return out;
}

NamedParams PersonalizedBranch::named_params(const std::string& prefix) const {
    NamedParams out = cross_.named_params(prefix + "/user");
    out.emplace_back(prefix + "/uproj", uproj_.weight());
    out.emplace_back(prefix + "/fusion", fusion_.weight());
    out.emplace_back(prefix + "/temb", temb_.weight());
    out.emplace_back(prefix + "/cemb", cemb_.weight());
    const std::pair<const ToyUNet::Block*, const char*> blocks[] = {
        {&e1_, "e1"}, {&e2_, "e2"}, {&e3_, "e3"}, {&mid_, "mid"}};
    for (auto& [b, name] : blocks)
        for (auto& kv : b->named_params(prefix + "/" + name)) out.push_back(kv);
    out.emplace_back(prefix + "/bridge1", bridge1_.weight());
    out.emplace_back(prefix + "/bridge2", bridge2_.weight());
    out.emplace_back(prefix + "/bridge3", bridge3_.weight());
    out.emplace_back(prefix + "/bridge_mid", bridge_mid_.weight());
    return out;
}

DiffusionModel::DiffusionModel(DiffusionConfig cfg, Rng& rng)
    : cfg_(cfg), sched_(cfg.schedule), backbone_(cfg.unet, rng) {
    if (cfg.personalized) attach_branch(rng);
}

Tensor DiffusionModel::predict_noise(const Tensor& z_t, int t, const Tensor& cond) const {
    return backbone_.forward(z_t, t, cond);
}

Tensor DiffusionModel::predict_noise(const Tensor& z_t, int t, const Tensor& cond,
                                     const std::optional<UserProfile>& user) const {
    if (!branch_ || !user) return backbone_.forward(z_t, t, cond);
    BridgeDeltas deltas = branch_->deltas(z_t, t, cond, *user);
    return backbone_.forward(z_t, t, cond, &deltas);
}

void DiffusionModel::attach_branch(Rng& rng) {
    if (cfg_.user_plugin.cardinalities.empty())
        throw ConfigError("attach_branch: no user feature fields configured");
    branch_.emplace(backbone_, cfg_.user_plugin, rng);
    cfg_.personalized = true;
}

void DiffusionModel::freeze_backbone() { backbone_.set_frozen(true); }

void DiffusionModel::freeze_all() {
    backbone_.set_frozen(true);
    if (branch_) set_all_requires_grad(branch_->params(), false);
}

std::vector<Tensor> DiffusionModel::branch_params() const {
    return branch_ ? branch_->params() : std::vector<Tensor>{};
}

std::vector<Tensor> DiffusionModel::trainable_params() const {
    std::vector<Tensor> out;
    for (const Tensor& t : backbone_.params())
        if (t.requires_grad()) out.push_back(t);
    for (const Tensor& t : branch_params())
        if (t.requires_grad()) out.push_back(t);
    return out;
}

NamedParams DiffusionModel::named_params() const {
    NamedParams out = backbone_.named_params("diffusion/backbone");
    if (branch_)
        for (auto& kv : branch_->named_params("diffusion/branch")) out.push_back(kv);
    return out;
}

DiffusionModel DiffusionModel::clone() const {
    DiffusionModel out;
    out.cfg_ = cfg_;
    out.sched_ = sched_;
    Rng scratch(0);
    out.backbone_ = ToyUNet(cfg_.unet, scratch);
    if (branch_) out.branch_.emplace(out.backbone_, cfg_.user_plugin, scratch);

    out.backbone_.set_frozen(backbone_.frozen());
    NamedParams src = named_params();
    NamedParams dst = out.named_params();
    if (src.size() != dst.size()) throw ContractError("clone: parameter sets differ");
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (src[i].first != dst[i].first) throw ContractError("clone: parameter names differ");
        dst[i].second.data() = src[i].second.data();
        dst[i].second.set_requires_grad(src[i].second.requires_grad());
    }
    return out;
}

std::vector<NoiseDraw> make_noise_draws(const std::vector<DiffusionExample>& batch,
                                        const NoiseSchedule& sched, Rng& rng) {
    std::vector<NoiseDraw> draws;
    draws.reserve(batch.size());
    for (const auto& ex : batch) {
        NoiseDraw d;
        d.t = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(sched.t_steps())));
        d.eps = Tensor::from_vector(rng.gaussian_vector(ex.z0.numel()), ex.z0.shape());
        draws.push_back(std::move(d));
    }
    return draws;
}

Tensor sft_loss_with_draws(const DiffusionModel& model, const std::vector<DiffusionExample>& batch,
                           const std::vector<NoiseDraw>& draws) {
    if (batch.empty()) throw DegenerateInputError("sft_loss: empty batch");
    if (draws.size() != batch.size())
        throw DimensionError("sft_loss: one draw per example required");
    std::vector<Tensor> per_sample;
    per_sample.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Tensor z_t = forward_diffuse(batch[i].z0, draws[i].t, draws[i].eps, model.schedule());
        Tensor pred = model.predict_noise(z_t, draws[i].t, batch[i].cond, batch[i].user);
        per_sample.push_back(mean(square(sub(draws[i].eps, pred))));
    }
    return scale(add_n(per_sample), 1.0 / static_cast<double>(per_sample.size()));
}

Tensor sft_loss(const DiffusionModel& model, const std::vector<DiffusionExample>& batch, Rng& rng) {
    if (batch.empty()) throw DegenerateInputError("sft_loss: empty batch");
    return sft_loss_with_draws(model, batch, make_noise_draws(batch, model.schedule(), rng));
}

Tensor sample_item(const DiffusionModel& model, const Tensor& cond,
                   const std::optional<UserProfile>& user, Rng& rng) {
    NoGradGuard guard;
    const NoiseSchedule& sched = model.schedule();
    int dim = model.config().unet.item_dim;
    std::vector<double> z = rng.gaussian_vector(static_cast<std::size_t>(dim));
    for (int t = sched.t_steps(); t >= 1; --t) {
        Tensor zt = Tensor::from_vector(z, {dim});
        Tensor eps_hat = model.predict_noise(zt, t, cond, user);
        double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(t));
        double eps_coef = sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t));
        double sigma = t > 1 ? sched.posterior_sigma(t) : 0.0;
        for (int i = 0; i < dim; ++i) {
            double mu = inv_sqrt_alpha * (z[i] - eps_coef * eps_hat.data()[i]);
            z[i] = t > 1 ? mu + sigma * rng.gaussian() : mu;
        }
    }
    return Tensor::from_vector(std::move(z), {dim});
}

std::vector<double> train_sft(DiffusionModel& model, const std::vector<DiffusionExample>& data,
                              const DiffusionTrainConfig& cfg) {
    if (data.empty()) throw DegenerateInputError("train_sft: empty dataset");
    if (cfg.epochs < 0) throw ConfigError("train_sft: negative epochs");
    if (cfg.batch_size <= 0) throw ConfigError("train_sft: non-positive batch size");
    std::vector<Tensor> params = model.trainable_params();
    if (params.empty()) throw ContractError("train_sft: no trainable parameters");

    AdamW::Config ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    ocfg.warmup_steps = cfg.warmup_steps;
    AdamW opt(params, ocfg);

    Rng rng(mix_seed(cfg.seed, 0x73667464ULL));
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);

    std::vector<double> epoch_losses;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_sum = 0.0;
        std::size_t done = 0;
        while (done < order.size()) {
            std::size_t take = std::min<std::size_t>(cfg.batch_size, order.size() - done);
            std::vector<DiffusionExample> batch;
            batch.reserve(take);
            for (std::size_t k = 0; k < take; ++k) batch.push_back(data[order[done + k]]);
            done += take;
            opt.zero_grad();
            Tensor loss = sft_loss(model, batch, rng);
            loss.backward();
            opt.step();
            epoch_sum += loss.item() * static_cast<double>(take);
        }
        epoch_losses.push_back(epoch_sum / static_cast<double>(order.size()));
    }
    return epoch_losses;
}

}  // namespace groupalign
