#include "groupalign/reward.hpp"

#include <cmath>
#include <numeric>

#include "groupalign/optimizer.hpp"

namespace groupalign {

namespace {

Tensor uniform_init(std::vector<int> shape, double bound, Rng& rng) {
    std::size_t n = shape_numel(shape);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor::from_vector(std::move(v), std::move(shape), true);
}

std::vector<int> iota_ids(int n) {
    std::vector<int> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    return ids;
}

}  // namespace

Tower::Tower(TowerConfig cfg, Rng& rng) : cfg_(cfg) {
    bool token_mode = cfg_.vocab > 0;
    bool item_mode = cfg_.item_dim > 0 || cfg_.chunks > 0;
    if (token_mode == item_mode)
        throw ConfigError("Tower: configure exactly one of vocab or item_dim/chunks");
    if (item_mode && (cfg_.item_dim <= 0 || cfg_.chunks <= 0 || cfg_.item_dim % cfg_.chunks != 0))
        throw ConfigError("Tower: item_dim must be a positive multiple of chunks");
    if (cfg_.width <= 0 || cfg_.heads <= 0 || cfg_.width % cfg_.heads != 0)
        throw ConfigError("Tower: width must be a positive multiple of heads");
    if (cfg_.layers <= 0 || cfg_.ffn_hidden <= 0 || cfg_.out_dim <= 0 || cfg_.max_len <= 0)
        throw ConfigError("Tower: non-positive geometry field");
    if (item_mode && cfg_.chunks > cfg_.max_len)
        throw ConfigError("Tower: chunks exceed max_len");

    double bound = 1.0 / std::sqrt(static_cast<double>(cfg_.width));
    if (token_mode)
        token_table_ = uniform_init({cfg_.vocab, cfg_.width}, bound, rng);
    else
        patch_ = AffineAug(cfg_.item_dim / cfg_.chunks, cfg_.width, rng);
    pos_ = uniform_init({cfg_.max_len, cfg_.width}, bound, rng);

    layers_.reserve(cfg_.layers);
    for (int l = 0; l < cfg_.layers; ++l) {
        Layer layer;
        layer.q = AffineAug(cfg_.width, cfg_.width, rng);
        layer.k = AffineAug(cfg_.width, cfg_.width, rng);
        layer.v = AffineAug(cfg_.width, cfg_.width, rng);
        layer.o = AffineAug(cfg_.width, cfg_.width, rng);
        layer.ffn0 = AffineAug(cfg_.width, cfg_.ffn_hidden, rng);
        layer.ffn1 = AffineAug(cfg_.ffn_hidden, cfg_.width, rng);
        layer.ln1_g = Tensor::full({cfg_.width}, 1.0, true);
        layer.ln1_b = Tensor::zeros({cfg_.width}, true);
        layer.ln2_g = Tensor::full({cfg_.width}, 1.0, true);
        layer.ln2_b = Tensor::zeros({cfg_.width}, true);
        layers_.push_back(std::move(layer));
    }
    pool_ = AffineAug(cfg_.width, cfg_.out_dim, rng);
}

Tensor Tower::forward_tokens(const std::vector<int>& ids, const Injections& inj,
                             TowerTrace* trace) const {
    if (cfg_.vocab <= 0) throw ContractError("Tower: not a token tower");
    if (ids.empty()) throw DegenerateInputError("Tower: empty token sequence");
    if (static_cast<int>(ids.size()) > cfg_.max_len)
        throw DimensionError("Tower: sequence longer than max_len");
    Tensor x = embedding_rows(token_table_, ids);
    x = add(x, embedding_rows(pos_, iota_ids(static_cast<int>(ids.size()))));
    return encode(x, inj, trace);
}

Tensor Tower::forward_item(const Tensor& item, const Injections& inj, TowerTrace* trace) const {
    if (cfg_.item_dim <= 0) throw ContractError("Tower: not an item tower");
    if (item.rank() != 1 || item.cols() != cfg_.item_dim)
        throw DimensionError("Tower: item " + shape_str(item.shape()) + ", expected [" +
                             std::to_string(cfg_.item_dim) + "]");
    Tensor x = patch_.forward(reshape(item, {cfg_.chunks, cfg_.item_dim / cfg_.chunks}));
    x = add(x, embedding_rows(pos_, iota_ids(cfg_.chunks)));
    return encode(x, inj, trace);
}

Tensor Tower::encode(Tensor x, const Injections& inj, TowerTrace* trace) const {
    auto check_inj = [&](const std::vector<Tensor>& site) {
        if (!site.empty() && static_cast<int>(site.size()) != cfg_.layers)
            throw DimensionError("Tower: injection count does not match layer count");
    };
    check_inj(inj.attn);
    check_inj(inj.ffn);

    int dh = cfg_.width / cfg_.heads;
    double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int l = 0; l < cfg_.layers; ++l) {
        const Layer& layer = layers_[l];
        if (!inj.attn.empty()) x = add(x, inj.attn[l]);
        if (trace) trace->pre_attn.push_back(x);

        Tensor xa = layernorm(x, layer.ln1_g, layer.ln1_b);
        Tensor q = layer.q.forward(xa);
        Tensor k = layer.k.forward(xa);
        Tensor v = layer.v.forward(xa);
        std::vector<Tensor> heads;
        heads.reserve(cfg_.heads);
        for (int h = 0; h < cfg_.heads; ++h) {
            Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
            Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
            Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
            Tensor probs = softmax(scale(matmul(qh, transpose(kh)), att_scale));
            heads.push_back(matmul(probs, vh));
        }
        x = add(x, layer.o.forward(concat(heads)));

        if (!inj.ffn.empty()) x = add(x, inj.ffn[l]);
        if (trace) trace->pre_ffn.push_back(x);

        Tensor xf = layernorm(x, layer.ln2_g, layer.ln2_b);
        x = add(x, layer.ffn1.forward(gelu(layer.ffn0.forward(xf))));
    }
    return pool_.forward(mean_axis0(x));
}

void Tower::set_frozen(bool frozen) {
    frozen_ = frozen;
    for (auto p : params()) p.set_requires_grad(!frozen);
}

std::vector<Tensor> Tower::params() const {
    std::vector<Tensor> out;
    if (cfg_.vocab > 0)
        out.push_back(token_table_);
    else
        out.push_back(patch_.weight());
    out.push_back(pos_);
    for (const auto& layer : layers_) {
        out.push_back(layer.q.weight());
        out.push_back(layer.k.weight());
        out.push_back(layer.v.weight());
        out.push_back(layer.o.weight());
        out.push_back(layer.ffn0.weight());
        out.push_back(layer.ffn1.weight());
        out.push_back(layer.ln1_g);
        out.push_back(layer.ln1_b);
        out.push_back(layer.ln2_g);
        out.push_back(layer.ln2_b);
    }
    out.push_back(pool_.weight());
    return out;
}

NamedParams Tower::named_params(const std::string& prefix) const {
    NamedParams out;
    if (cfg_.vocab > 0)
        out.emplace_back(prefix + "/tokens", token_table_);
    else
        out.emplace_back(prefix + "/patch", patch_.weight());
    out.emplace_back(prefix + "/pos", pos_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& layer = layers_[l];
        std::string lp = prefix + "/layer/" + std::to_string(l);
        out.emplace_back(lp + "/q", layer.q.weight());
        out.emplace_back(lp + "/k", layer.k.weight());
        out.emplace_back(lp + "/v", layer.v.weight());
        out.emplace_back(lp + "/o", layer.o.weight());
        out.emplace_back(lp + "/ffn0", layer.ffn0.weight());
        out.emplace_back(lp + "/ffn1", layer.ffn1.weight());
        out.emplace_back(lp + "/ln1_g", layer.ln1_g);
        out.emplace_back(lp + "/ln1_b", layer.ln1_b);
        out.emplace_back(lp + "/ln2_g", layer.ln2_g);
        out.emplace_back(lp + "/ln2_b", layer.ln2_b);
    }
    out.emplace_back(prefix + "/pool", pool_.weight());
    return out;
}

WiringMode wiring_mode_from_string(const std::string& s) {
    if (s == "duplicated") return WiringMode::duplicated;
    if (s == "shared") return WiringMode::shared;
    if (s == "vision_only") return WiringMode::vision_only;
    if (s == "text_only") return WiringMode::text_only;
    throw ConfigError("unknown wiring mode '" + s + "'");
}

std::string to_string(WiringMode mode) {
    switch (mode) {
        case WiringMode::duplicated: return "duplicated";
        case WiringMode::shared: return "shared";
        case WiringMode::vision_only: return "vision_only";
        case WiringMode::text_only: return "text_only";
    }
    throw ContractError("to_string: bad wiring mode");
}

Injections PluginSet::Side::injections(const UserProfile& profile) const {
    Tensor u = cross.user_vector(profile);
    Injections inj;
    inj.attn.reserve(attn.size());
    inj.ffn.reserve(ffn.size());
    for (const auto& net : attn) inj.attn.push_back(net.forward(u));
    for (const auto& net : ffn) inj.ffn.push_back(net.forward(u));
    return inj;
}

std::vector<Tensor> PluginSet::Side::params() const {
    std::vector<Tensor> out = cross.params();
    for (const auto& net : attn)
        for (const auto& p : net.params()) out.push_back(p);
    for (const auto& net : ffn)
        for (const auto& p : net.params()) out.push_back(p);
    return out;
}

NamedParams PluginSet::Side::named_params(const std::string& prefix) const {
    NamedParams out = cross.named_params(prefix);
    for (std::size_t l = 0; l < attn.size(); ++l)
        for (auto& p : attn[l].named_params(prefix + "/ada/attn/" + std::to_string(l)))
            out.push_back(p);
    for (std::size_t l = 0; l < ffn.size(); ++l)
        for (auto& p : ffn[l].named_params(prefix + "/ada/ffn/" + std::to_string(l)))
            out.push_back(p);
    return out;
}

PluginSet::PluginSet(WiringMode mode, const PluginConfig& pc, int layers, int width, Rng& rng)
    : mode_(mode) {
    auto make_side = [&]() {
        Side side;
        side.cross = CrossNetwork(pc.cardinalities, pc.embed_dim, pc.cross_depth, rng);
        for (int l = 0; l < layers; ++l) side.attn.emplace_back(side.cross.dim(), width, rng);
        for (int l = 0; l < layers; ++l) side.ffn.emplace_back(side.cross.dim(), width, rng);
        return side;
    };
    switch (mode_) {
        case WiringMode::duplicated:
            text_ = make_side();
            item_ = make_side();
            break;
        case WiringMode::shared:
            // Copies share the underlying tensors: one parameter set, two
            // injection points.
            text_ = make_side();
            item_ = *text_;
            break;
        case WiringMode::vision_only: item_ = make_side(); break;
        case WiringMode::text_only: text_ = make_side(); break;
    }
}

bool PluginSet::text_active() const { return text_.has_value(); }
bool PluginSet::item_active() const { return item_.has_value(); }

Injections PluginSet::text_injections(const UserProfile& profile) const {
    if (!text_) return {};
    return text_->injections(profile);
}

Injections PluginSet::item_injections(const UserProfile& profile) const {
    if (!item_) return {};
    return item_->injections(profile);
}

std::vector<Tensor> PluginSet::params() const {
    std::vector<Tensor> out;
    if (text_)
        for (auto& p : text_->params()) out.push_back(p);
    if (item_ && mode_ != WiringMode::shared)
        for (auto& p : item_->params()) out.push_back(p);
    return out;
}

NamedParams PluginSet::named_params(const std::string& prefix) const {
    NamedParams out;
    // Shared mode keeps its single parameter set under the text name.
    if (text_)
        for (auto& p : text_->named_params(prefix + "/text")) out.push_back(p);
    if (item_ && mode_ != WiringMode::shared)
        for (auto& p : item_->named_params(prefix + "/item")) out.push_back(p);
    return out;
}

RewardModel::RewardModel(RewardConfig cfg, Rng& rng) : cfg_(cfg) {
    if (cfg_.text_tower.vocab <= 0) throw ConfigError("RewardModel: text tower needs a vocab");
    if (cfg_.item_tower.item_dim <= 0) throw ConfigError("RewardModel: item tower needs item_dim");
    if (cfg_.text_tower.out_dim != cfg_.item_tower.out_dim)
        throw ConfigError("RewardModel: tower output dimensions differ");
    if (cfg_.text_tower.layers != cfg_.item_tower.layers)
        throw ConfigError("RewardModel: towers must have equal depth for the plugin set");
    text_tower_ = Tower(cfg_.text_tower, rng);
    item_tower_ = Tower(cfg_.item_tower, rng);
    plugins_ = PluginSet(cfg_.mode, cfg_.plugin, cfg_.text_tower.layers, cfg_.text_tower.width, rng);
}

Tensor RewardModel::backbone_score(const std::vector<int>& prompt_tokens,
                                   const Tensor& item) const {
    return cosine_similarity(text_tower_.forward_tokens(prompt_tokens, {}),
                             item_tower_.forward_item(item, {}));
}

Tensor RewardModel::score(const std::vector<int>& prompt_tokens, const Tensor& item,
                          const UserProfile& profile) const {
    Injections text_inj = plugins_.text_injections(profile);
    Injections item_inj = plugins_.item_injections(profile);
    return cosine_similarity(text_tower_.forward_tokens(prompt_tokens, text_inj),
                             item_tower_.forward_item(item, item_inj));
}

Tensor RewardModel::group_scores(const std::vector<int>& prompt_tokens,
                                 const std::vector<Tensor>& items,
                                 const UserProfile& profile) const {
    if (items.empty()) throw DegenerateInputError("group_scores: empty group");
    Injections text_inj = plugins_.text_injections(profile);
    Injections item_inj = plugins_.item_injections(profile);
    Tensor text_vec = text_tower_.forward_tokens(prompt_tokens, text_inj);
    std::vector<Tensor> scores;
    scores.reserve(items.size());
    for (const auto& item : items)
        scores.push_back(cosine_similarity(text_vec, item_tower_.forward_item(item, item_inj)));
    return concat(scores);
}

Tensor RewardModel::backbone_group_scores(const std::vector<int>& prompt_tokens,
                                          const std::vector<Tensor>& items) const {
    if (items.empty()) throw DegenerateInputError("backbone_group_scores: empty group");
    Tensor text_vec = text_tower_.forward_tokens(prompt_tokens, {});
    std::vector<Tensor> scores;
    scores.reserve(items.size());
    for (const auto& item : items)
        scores.push_back(cosine_similarity(text_vec, item_tower_.forward_item(item, {})));
    return concat(scores);
}

void RewardModel::freeze_backbone() {
    text_tower_.set_frozen(true);
    item_tower_.set_frozen(true);
}

bool RewardModel::backbone_frozen() const { return text_tower_.frozen() && item_tower_.frozen(); }

std::vector<Tensor> RewardModel::backbone_params() const {
    std::vector<Tensor> out = text_tower_.params();
    for (auto& p : item_tower_.params()) out.push_back(p);
    return out;
}

std::vector<Tensor> RewardModel::plugin_params() const { return plugins_.params(); }

NamedParams RewardModel::backbone_named_params() const {
    NamedParams out = text_tower_.named_params("reward/backbone/text");
    for (auto& p : item_tower_.named_params("reward/backbone/item")) out.push_back(p);
    return out;
}

NamedParams RewardModel::named_params() const {
    NamedParams out = backbone_named_params();
    for (auto& p : plugins_.named_params("reward/plugin")) out.push_back(p);
    return out;
}

std::vector<double> ideal_distribution(const std::vector<int>& labels) {
    if (labels.empty()) throw DegenerateInputError("ideal_distribution: empty labels");
    int positives = 0;
    for (int y : labels) {
        if (y != 0 && y != 1) throw ContractError("ideal_distribution: labels must be 0 or 1");
        positives += y;
    }
    if (positives == 0) throw DegenerateInputError("ideal_distribution: no positive label");
    std::vector<double> p(labels.size(), 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == 1) p[i] = 1.0 / positives;
    return p;
}

Tensor predicted_distribution(const Tensor& group_scores) {
    if (group_scores.rank() != 1)
        throw DimensionError("predicted_distribution: rank-1 scores required");
    return softmax(group_scores);
}

Tensor rm_group_loss(const std::vector<double>& ideal, const Tensor& predicted) {
    if (predicted.rank() != 1 || predicted.numel() != ideal.size())
        throw DimensionError("rm_group_loss: distribution lengths differ");
    int n = static_cast<int>(ideal.size());
    std::vector<double> comp(ideal.size());
    for (std::size_t i = 0; i < ideal.size(); ++i) comp[i] = 1.0 - ideal[i];
    Tensor p = Tensor::from_vector(std::vector<double>(ideal), {n});
    Tensor omp = Tensor::from_vector(std::move(comp), {n});
    Tensor ones = Tensor::full({n}, 1.0);
    Tensor q = clamp(predicted, 1e-12, 1.0 - 1e-12);
    Tensor ll = add(mul(p, log(q)), mul(omp, log(sub(ones, q))));
    return neg(sum(ll));
}

namespace {

std::vector<double> run_group_training(const std::vector<RmExample>& dataset,
                                       const RmTrainConfig& cfg, AdamW& opt,
                                       const std::function<Tensor(const RmExample&)>& loss_of) {
    if (dataset.empty()) throw DegenerateInputError("training: empty dataset");
    if (cfg.epochs < 0) throw ConfigError("training: negative epochs");
    if (cfg.batch_size <= 0) throw ConfigError("training: non-positive batch size");

    std::vector<int> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed(cfg.seed, 0x72657764u));

    std::vector<double> epoch_losses;
    epoch_losses.reserve(cfg.epochs);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double total = 0.0;
        std::size_t done = 0;
        while (done < order.size()) {
            std::size_t batch = std::min<std::size_t>(cfg.batch_size, order.size() - done);
            opt.zero_grad();
            for (std::size_t b = 0; b < batch; ++b) {
                Tensor loss = loss_of(dataset[order[done + b]]);
                total += loss.item();
                scale(loss, 1.0 / static_cast<double>(batch)).backward();
            }
            opt.step();
            done += batch;
        }
        epoch_losses.push_back(total / static_cast<double>(dataset.size()));
    }
    return epoch_losses;
}

}  // namespace

std::vector<double> train_rm(RewardModel& model, const std::vector<RmExample>& dataset,
                             const RmTrainConfig& cfg) {
    if (!model.backbone_frozen()) throw ContractError("train_rm: backbone must be frozen");
    AdamW opt(model.plugin_params(),
              {cfg.lr, cfg.weight_decay, cfg.warmup_steps, 0.9, 0.999, 1e-8});
    return run_group_training(dataset, cfg, opt, [&](const RmExample& ex) {
        Tensor scores = model.group_scores(ex.prompt_tokens, ex.items, ex.profile);
        return rm_group_loss(ideal_distribution(ex.labels), predicted_distribution(scores));
    });
}

std::vector<double> pretrain_backbone(RewardModel& model, const std::vector<RmExample>& dataset,
                                      const RmTrainConfig& cfg) {
    if (model.backbone_frozen()) throw ContractError("pretrain_backbone: backbone is frozen");
    AdamW opt(model.backbone_params(),
              {cfg.lr, cfg.weight_decay, cfg.warmup_steps, 0.9, 0.999, 1e-8});
    return run_group_training(dataset, cfg, opt, [&](const RmExample& ex) {
        Tensor scores = model.backbone_group_scores(ex.prompt_tokens, ex.items);
        return rm_group_loss(ideal_distribution(ex.labels), predicted_distribution(scores));
    });
}

}  // namespace groupalign
