#pragma once

// Two-stream vision-language encoder. A BERT-style text stream and a region
// stream run side by side; at each co-attention placement the streams swap
// keys/values in a pair of cross-attention blocks. Heads: a masked-token head
// tied to the word embeddings (serves MLM and the three scene-graph tasks),
// a region-class head and an image-text matching score.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sgvl/corpus.hpp"
#include "sgvl/error.hpp"
#include "sgvl/masking.hpp"
#include "sgvl/nn/ops.hpp"
#include "sgvl/nn/optim.hpp"
#include "sgvl/nn/tensor.hpp"
#include "sgvl/util.hpp"

namespace sgvl {

struct StreamConfig {
  std::size_t layers = 4;
  std::size_t hidden = 128;
  std::size_t heads = 4;
  std::size_t ffn = 256;

  friend bool operator==(const StreamConfig&, const StreamConfig&) = default;
};

struct CoAttention {
  std::size_t text_layer = 0;    // block runs after this text layer
  std::size_t visual_layer = 0;  // ... and after this visual layer

  friend bool operator==(const CoAttention&, const CoAttention&) = default;
};

struct ModelConfig {
  StreamConfig text{4, 128, 4, 256};
  StreamConfig visual{2, 128, 4, 256};
  std::vector<CoAttention> coattention{{1, 0}, {3, 1}};
  std::size_t vocab_size = 0;
  std::size_t feature_dim = 64;
  std::size_t region_classes = 24;
  std::size_t max_text = 64;
  std::size_t max_regions = kMaxRegions;
  double dropout = 0.1;

  void validate() const {
    for (auto* s : {&text, &visual}) {
      if (s->layers == 0 || s->hidden == 0 || s->heads == 0 || s->ffn == 0)
        throw ConfigError("stream sizes must be positive");
      if (s->hidden % s->heads != 0)
        throw ConfigError("hidden size " + std::to_string(s->hidden) + " is not divisible by " +
                          std::to_string(s->heads) + " heads");
    }
    if (coattention.empty()) throw ConfigError("need at least one co-attention block");
    for (std::size_t i = 0; i < coattention.size(); ++i) {
      const auto& c = coattention[i];
      if (c.text_layer >= text.layers || c.visual_layer >= visual.layers)
        throw ConfigError("co-attention block " + std::to_string(i) + " placed after a missing layer");
      if (i > 0 && (c.text_layer <= coattention[i - 1].text_layer ||
                    c.visual_layer <= coattention[i - 1].visual_layer))
        throw ConfigError("co-attention placements must increase in both streams");
    }
    if (vocab_size <= 5) throw ConfigError("vocab_size must exceed the special tokens");
    if (feature_dim == 0 || region_classes == 0) throw ConfigError("feature_dim and region_classes must be positive");
    if (max_text < 2 || max_regions == 0) throw ConfigError("max lengths too small");
    if (!(dropout >= 0 && dropout < 1)) throw ConfigError("dropout must lie in [0, 1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const StreamConfig& s) {
  j = {{"layers", s.layers}, {"hidden", s.hidden}, {"heads", s.heads}, {"ffn", s.ffn}};
}
inline void from_json(const nlohmann::json& j, StreamConfig& s) {
  if (j.contains("layers")) j.at("layers").get_to(s.layers);
  if (j.contains("hidden")) j.at("hidden").get_to(s.hidden);
  if (j.contains("heads")) j.at("heads").get_to(s.heads);
  if (j.contains("ffn")) j.at("ffn").get_to(s.ffn);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  nlohmann::json co = nlohmann::json::array();
  for (auto& p : c.coattention) co.push_back({p.text_layer, p.visual_layer});
  j = {{"text", c.text},
       {"visual", c.visual},
       {"coattention", co},
       {"vocab_size", c.vocab_size},
       {"feature_dim", c.feature_dim},
       {"region_classes", c.region_classes},
       {"max_text", c.max_text},
       {"max_regions", c.max_regions},
       {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("text")) j.at("text").get_to(c.text);
  if (j.contains("visual")) j.at("visual").get_to(c.visual);
  if (j.contains("coattention")) {
    c.coattention.clear();
    for (auto& p : j.at("coattention"))
      c.coattention.push_back({p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>()});
  }
  auto get = [&](const char* k, auto& v) {
    if (j.contains(k)) j.at(k).get_to(v);
  };
  get("vocab_size", c.vocab_size);
  get("feature_dim", c.feature_dim);
  get("region_classes", c.region_classes);
  get("max_text", c.max_text);
  get("max_regions", c.max_regions);
  get("dropout", c.dropout);
}

// Names of top-level fields that differ between two configs.
inline std::vector<std::string> config_diff(const ModelConfig& a, const ModelConfig& b) {
  nlohmann::json ja = a, jb = b;
  std::vector<std::string> out;
  for (auto& [k, v] : ja.items())
    if (!jb.contains(k) || jb.at(k) != v) out.push_back(k);
  return out;
}

enum class Mode { train, eval };

namespace detail {

template <class T>
struct LinearP {
  nn::Tensor<T> w, b;
};
template <class T>
struct NormP {
  nn::Tensor<T> g, b;
};
template <class T>
struct AttentionP {
  LinearP<T> q, k, v, o;
};
// Attention (self or cross) followed by the feed-forward sublayer, both
// post-norm.
template <class T>
struct BlockP {
  AttentionP<T> attn;
  NormP<T> ln1;
  LinearP<T> ff1, ff2;
  NormP<T> ln2;
};

}  // namespace detail

template <class T>
struct ModelOutput {
  nn::Tensor<T> text_hidden;    // B x T x Ht
  nn::Tensor<T> visual_hidden;  // B x (I+1) x Hv
  nn::Tensor<T> h_cls;          // B x Ht
  nn::Tensor<T> h_img;          // B x Hv
  nn::Tensor<T> mlm_logits;     // B x T x V
  nn::Tensor<T> region_logits;  // B x (I+1) x C
  nn::Tensor<T> itm_score;      // B
  std::vector<nn::Tensor<T>> attention;  // every attention probability tensor, when recorded
  // When non-empty, mlm_logits holds only these flattened b*T+t positions
  // (rows x V) instead of the full B x T x V block.
  std::vector<std::size_t> mlm_rows;
};

struct ForwardOptions {
  bool record_attention = false;
  bool labeled_mlm_only = false;  // skip the vocabulary projection at unlabeled positions
};

template <class T>
struct LossBreakdown {
  T l_obj{}, l_attr{}, l_rel{}, l_mlm{}, l_region{}, l_itm{};
  nn::Tensor<T> total;

  T total_value() const { return total.item(); }
  nlohmann::json to_json() const {
    return {{"l_obj", l_obj},   {"l_attr", l_attr},     {"l_rel", l_rel}, {"l_mlm", l_mlm},
            {"l_region", l_region}, {"l_itm", l_itm}, {"total", total_value()}};
  }
};

template <class T>
class Model {
 public:
  using Tensor = nn::Tensor<T>;

  explicit Model(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0x5EEDF00DULL));
    build(rng);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }

  // word + segment + position embeddings, B x T x Ht (no normalization).
  Tensor embed_text(std::span<const TokenId> ids, std::span<const TokenId> segments,
                    std::size_t batch) const {
    const std::size_t Tn = batch == 0 ? 0 : ids.size() / batch;
    if (Tn > cfg_.max_text)
      throw DataError("text of " + std::to_string(Tn) + " tokens exceeds max_text " +
                      std::to_string(cfg_.max_text));
    for (auto id : ids)
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size)
        throw DataError("token id " + std::to_string(id) + " outside vocabulary of " +
                        std::to_string(cfg_.vocab_size));
    std::vector<std::int32_t> pos(ids.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int32_t>(i % Tn);
    auto w = nn::embedding(word_, ids, {batch, Tn});
    auto s = nn::embedding(segment_, segments, {batch, Tn});
    auto p = nn::embedding(position_, std::span<const std::int32_t>(pos), {batch, Tn});
    return nn::add(nn::add(w, s), p);
  }

  // Region sequence with the leading whole-image slot, B x (I+1) x Hv (no
  // normalization). `features` is B x I x D, `locations` B x I x 5 and
  // `valid` B x I; slot 0 projects the mean of the valid features plus the
  // whole-image box.
  Tensor embed_regions(std::span<const double> features, std::span<const double> locations,
                       std::span<const std::uint8_t> valid, std::size_t batch) const {
    const std::size_t D = cfg_.feature_dim;
    const std::size_t I = batch == 0 ? 0 : valid.size() / batch;
    if (I > cfg_.max_regions)
      throw DataError(std::to_string(I) + " regions exceed max_regions " + std::to_string(cfg_.max_regions));
    if (features.size() != batch * I * D)
      throw DataError("region features have dimension " +
                      std::to_string(batch * I == 0 ? 0 : features.size() / (batch * I)) +
                      ", model expects " + std::to_string(D));
    if (locations.size() != batch * I * 5) throw DataError("location features must be 5-dimensional");
    std::vector<T> f(batch * (I + 1) * D, T{}), l(batch * (I + 1) * 5, T{});
    for (std::size_t b = 0; b < batch; ++b) {
      std::vector<double> mean(D, 0.0);
      std::size_t n = 0;
      for (std::size_t i = 0; i < I; ++i) {
        if (!valid[b * I + i]) continue;
        ++n;
        for (std::size_t d = 0; d < D; ++d) mean[d] += features[(b * I + i) * D + d];
      }
      for (std::size_t d = 0; d < D; ++d)
        f[b * (I + 1) * D + d] = static_cast<T>(n ? mean[d] / static_cast<double>(n) : 0.0);
      const double full[5] = {0, 0, 1, 1, 1};
      for (std::size_t k = 0; k < 5; ++k) l[b * (I + 1) * 5 + k] = static_cast<T>(full[k]);
      for (std::size_t i = 0; i < I; ++i) {
        for (std::size_t d = 0; d < D; ++d)
          f[(b * (I + 1) + i + 1) * D + d] = static_cast<T>(features[(b * I + i) * D + d]);
        for (std::size_t k = 0; k < 5; ++k)
          l[(b * (I + 1) + i + 1) * 5 + k] = static_cast<T>(locations[(b * I + i) * 5 + k]);
      }
    }
    auto ft = Tensor::from({batch, I + 1, D}, std::move(f));
    auto lt = Tensor::from({batch, I + 1, 5}, std::move(l));
    return nn::add(linear(ft, feat_proj_), linear(lt, loc_proj_));
  }

  ModelOutput<T> forward(const Batch& batch, Mode mode, Rng* rng = nullptr,
                         ForwardOptions opts = {}) const {
    if (mode == Mode::train && cfg_.dropout > 0 && rng == nullptr)
      throw ConfigError("training-mode forward needs an rng");
    const std::size_t B = batch.size, I = batch.num_regions;
    if (batch.feature_dim != cfg_.feature_dim && B * I > 0)
      throw DataError("batch feature dimension " + std::to_string(batch.feature_dim) +
                      " does not match model " + std::to_string(cfg_.feature_dim));
    Ctx ctx{mode == Mode::train ? cfg_.dropout : 0.0, rng, opts.record_attention, {}};

    std::vector<std::uint8_t> text_valid(batch.text_mask);
    std::vector<std::uint8_t> vis_valid(B * (I + 1), 0);
    for (std::size_t b = 0; b < B; ++b) {
      vis_valid[b * (I + 1)] = 1;
      for (std::size_t i = 0; i < I; ++i) vis_valid[b * (I + 1) + i + 1] = batch.region_mask[b * I + i];
    }

    auto t = embed_text(batch.ids, batch.segments, B);
    t = drop(ctx, norm(t, text_emb_ln_));
    auto v = embed_regions(batch.features, batch.locations, batch.region_mask, B);
    v = drop(ctx, norm(v, vis_emb_ln_));

    std::size_t ti = 0, vi = 0;
    for (std::size_t c = 0; c < cfg_.coattention.size(); ++c) {
      for (; ti <= cfg_.coattention[c].text_layer; ++ti)
        t = block(ctx, text_layers_[ti], t, t, text_valid, cfg_.text.heads);
      for (; vi <= cfg_.coattention[c].visual_layer; ++vi)
        v = block(ctx, vis_layers_[vi], v, v, vis_valid, cfg_.visual.heads);
      auto t2 = block(ctx, co_text_[c], t, v, vis_valid, cfg_.text.heads);
      auto v2 = block(ctx, co_vis_[c], v, t, text_valid, cfg_.visual.heads);
      t = t2;
      v = v2;
    }
    for (; ti < cfg_.text.layers; ++ti) t = block(ctx, text_layers_[ti], t, t, text_valid, cfg_.text.heads);
    for (; vi < cfg_.visual.layers; ++vi) v = block(ctx, vis_layers_[vi], v, v, vis_valid, cfg_.visual.heads);

    ModelOutput<T> out;
    out.text_hidden = t;
    out.visual_hidden = v;
    out.h_cls = nn::reshape(nn::slice(t, 1, 0, 1), {B, cfg_.text.hidden});
    out.h_img = nn::reshape(nn::slice(v, 1, 0, 1), {B, cfg_.visual.hidden});

    Tensor ht = t;
    if (opts.labeled_mlm_only) {
      for (std::size_t i = 0; i < batch.token_labels.size(); ++i)
        if (batch.token_labels[i] != kIgnoreLabel) out.mlm_rows.push_back(i);
      ht = nn::gather_rows(t, std::span<const std::size_t>(out.mlm_rows));
    }
    auto hm = norm(nn::gelu(linear(ht, mlm_dense_)), mlm_ln_);
    out.mlm_logits = nn::add(nn::matmul(hm, word_, true), mlm_bias_);
    out.region_logits = linear(v, region_head_);
    auto pt = nn::tanh(linear(out.h_cls, pool_text_));
    auto pv = nn::tanh(linear(out.h_img, pool_vis_));
    out.itm_score = nn::reshape(linear(nn::mul(pt, pv), itm_), {B});
    out.attention = std::move(ctx.attention);
    return out;
  }

  // Per-task losses. Token positions are split by their task tag; region
  // labels apply to slots 1..I; every pair contributes to ITM.
  LossBreakdown<T> loss(const ModelOutput<T>& out, const Batch& batch) const {
    const std::size_t n = batch.size * batch.text_len;
    const Task order[4] = {Task::object, Task::attribute, Task::relationship, Task::mlm};
    // logit row r corresponds to flattened position pos(r)
    const bool sparse = !out.mlm_rows.empty() || out.mlm_logits.dim(0) != batch.size;
    const std::size_t rows = sparse ? out.mlm_rows.size() : n;
    auto pos = [&](std::size_t r) { return sparse ? out.mlm_rows[r] : r; };
    Tensor parts[6];
    for (int k = 0; k < 4; ++k) {
      std::vector<TokenId> labels(rows, kIgnoreLabel);
      for (std::size_t r = 0; r < rows; ++r)
        if (batch.tags[pos(r)] == order[k]) labels[r] = batch.token_labels[pos(r)];
      parts[k] = nn::cross_entropy(out.mlm_logits, std::span<const TokenId>(labels));
    }
    const std::size_t I = batch.num_regions;
    std::vector<std::int32_t> rl(batch.size * (I + 1), -1);
    for (std::size_t b = 0; b < batch.size; ++b)
      for (std::size_t i = 0; i < I; ++i) rl[b * (I + 1) + i + 1] = batch.region_labels[b * I + i];
    parts[4] = nn::cross_entropy(out.region_logits, std::span<const std::int32_t>(rl));
    parts[5] = nn::bce_with_logits(out.itm_score, std::span<const double>(batch.itm_labels));

    LossBreakdown<T> lb;
    lb.l_obj = parts[0].item();
    lb.l_attr = parts[1].item();
    lb.l_rel = parts[2].item();
    lb.l_mlm = parts[3].item();
    lb.l_region = parts[4].item();
    lb.l_itm = parts[5].item();
    Tensor total = parts[0];
    for (int k = 1; k < 6; ++k) total = nn::add(total, parts[k]);
    lb.total = total;
    return lb;
  }

 private:
  struct Ctx {
    double dropout;
    Rng* rng;
    bool record;
    std::vector<Tensor> attention;
  };

  static Tensor linear(const Tensor& x, const detail::LinearP<T>& p) {
    return nn::add(nn::matmul(x, p.w), p.b);
  }
  static Tensor norm(const Tensor& x, const detail::NormP<T>& p) { return nn::layer_norm(x, p.g, p.b); }
  static Tensor drop(Ctx& ctx, const Tensor& x) {
    if (ctx.dropout <= 0) return x;
    return nn::dropout(x, ctx.dropout, *ctx.rng);
  }

  // q: B x Sq x Hq, kv: B x Sk x Hk; keys are masked by `valid` (B x Sk).
  static Tensor attention(Ctx& ctx, const detail::AttentionP<T>& p, const Tensor& q_in,
                          const Tensor& kv_in, std::span<const std::uint8_t> valid,
                          std::size_t heads) {
    const std::size_t B = q_in.dim(0), Sq = q_in.dim(1), Sk = kv_in.dim(1);
    const std::size_t H = p.q.w.dim(1), dh = H / heads;
    auto split = [&](const Tensor& x, std::size_t S) {
      return nn::permute(nn::reshape(x, {B, S, heads, dh}), {0, 2, 1, 3});
    };
    auto q = split(linear(q_in, p.q), Sq);
    auto k = split(linear(kv_in, p.k), Sk);
    auto v = split(linear(kv_in, p.v), Sk);
    auto scores = nn::scale(nn::bmm(q, k, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    auto probs = nn::masked_softmax(scores, valid);
    if (ctx.record) ctx.attention.push_back(probs);
    probs = drop(ctx, probs);
    auto c = nn::reshape(nn::permute(nn::bmm(probs, v), {0, 2, 1, 3}), {B, Sq, H});
    return linear(c, p.o);
  }

  static Tensor block(Ctx& ctx, const detail::BlockP<T>& p, const Tensor& x, const Tensor& kv,
                      std::span<const std::uint8_t> valid, std::size_t heads) {
    auto a = attention(ctx, p.attn, x, kv, valid, heads);
    auto h = norm(nn::add(x, drop(ctx, a)), p.ln1);
    auto f = linear(nn::gelu(linear(h, p.ff1)), p.ff2);
    return norm(nn::add(h, drop(ctx, f)), p.ln2);
  }

  Tensor normal_param(Rng& rng, const std::string& name, nn::Shape shape) {
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<T> v(nn::numel_of(shape));
    for (auto& x : v) {
      double z;
      do z = nd(rng);
      while (std::abs(z) > 2.0);
      x = static_cast<T>(0.02 * z);
    }
    return store_.add(name, Tensor::from(std::move(shape), std::move(v)));
  }
  Tensor const_param(const std::string& name, nn::Shape shape, T value) {
    std::vector<T> v(nn::numel_of(shape), value);
    return store_.add(name, Tensor::from(std::move(shape), std::move(v)));
  }
  detail::LinearP<T> make_linear(Rng& rng, const std::string& name, std::size_t in, std::size_t out) {
    return {normal_param(rng, name + ".w", {in, out}), const_param(name + ".b", {out}, T{})};
  }
  detail::NormP<T> make_norm(const std::string& name, std::size_t h) {
    return {const_param(name + ".g", {h}, T(1)), const_param(name + ".b", {h}, T{})};
  }
  // Attention with queries of width hq over keys/values of width hk; the block
  // keeps the query stream's width.
  detail::BlockP<T> make_block(Rng& rng, const std::string& name, std::size_t hq, std::size_t hk,
                               std::size_t ffn) {
    detail::BlockP<T> b;
    b.attn.q = make_linear(rng, name + ".attn.q", hq, hq);
    b.attn.k = make_linear(rng, name + ".attn.k", hk, hq);
    b.attn.v = make_linear(rng, name + ".attn.v", hk, hq);
    b.attn.o = make_linear(rng, name + ".attn.o", hq, hq);
    b.ln1 = make_norm(name + ".ln1", hq);
    b.ff1 = make_linear(rng, name + ".ff1", hq, ffn);
    b.ff2 = make_linear(rng, name + ".ff2", ffn, hq);
    b.ln2 = make_norm(name + ".ln2", hq);
    return b;
  }

  void build(Rng& rng) {
    const auto Ht = cfg_.text.hidden, Hv = cfg_.visual.hidden;
    word_ = normal_param(rng, "text.word", {cfg_.vocab_size, Ht});
    segment_ = normal_param(rng, "text.segment", {2, Ht});
    position_ = normal_param(rng, "text.position", {cfg_.max_text, Ht});
    text_emb_ln_ = make_norm("text.emb_ln", Ht);
    feat_proj_ = make_linear(rng, "visual.feature", cfg_.feature_dim, Hv);
    loc_proj_ = make_linear(rng, "visual.location", 5, Hv);
    vis_emb_ln_ = make_norm("visual.emb_ln", Hv);
    for (std::size_t i = 0; i < cfg_.text.layers; ++i)
      text_layers_.push_back(make_block(rng, "text.layer" + std::to_string(i), Ht, Ht, cfg_.text.ffn));
    for (std::size_t i = 0; i < cfg_.visual.layers; ++i)
      vis_layers_.push_back(make_block(rng, "visual.layer" + std::to_string(i), Hv, Hv, cfg_.visual.ffn));
    for (std::size_t i = 0; i < cfg_.coattention.size(); ++i) {
      co_text_.push_back(make_block(rng, "co" + std::to_string(i) + ".text", Ht, Hv, cfg_.text.ffn));
      co_vis_.push_back(make_block(rng, "co" + std::to_string(i) + ".visual", Hv, Ht, cfg_.visual.ffn));
    }
    mlm_dense_ = make_linear(rng, "head.mlm.dense", Ht, Ht);
    mlm_ln_ = make_norm("head.mlm.ln", Ht);
    mlm_bias_ = const_param("head.mlm.bias", {cfg_.vocab_size}, T{});
    region_head_ = make_linear(rng, "head.region", Hv, cfg_.region_classes);
    pool_text_ = make_linear(rng, "head.itm.pool_text", Ht, Ht);
    pool_vis_ = make_linear(rng, "head.itm.pool_visual", Hv, Ht);
    itm_ = make_linear(rng, "head.itm.score", Ht, 1);
  }

  ModelConfig cfg_;
  nn::ParamStore<T> store_;
  Tensor word_, segment_, position_;
  detail::NormP<T> text_emb_ln_, vis_emb_ln_, mlm_ln_;
  detail::LinearP<T> feat_proj_, loc_proj_, mlm_dense_, region_head_, pool_text_, pool_vis_, itm_;
  Tensor mlm_bias_;
  std::vector<detail::BlockP<T>> text_layers_, vis_layers_, co_text_, co_vis_;
};

// ---- checkpoints ----------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'S', 'G', 'V', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : s_(std::move(bytes)) {}
  template <class U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, s_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string r = s_.substr(pos_, n);
    pos_ += n;
    return r;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (s_.size() - pos_ < n) throw DataError("checkpoint is truncated");
  }
  std::string s_;
  std::size_t pos_ = 0;
};

template <class T>
void put_tensor(std::string& out, const std::string& name, const nn::Shape& shape, std::span<const T> data) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put<std::uint64_t>(out, d);
  out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(T));
}

}  // namespace detail

// Training state saved next to the weights.
template <class T>
struct TrainState {
  std::uint64_t step = 0;
  nlohmann::json extra = nlohmann::json::object();
  std::optional<nn::AdamState<T>> adam;
};

template <class T>
std::string serialize_checkpoint(const Model<T>& model, const TrainState<T>& state) {
  nlohmann::json header = {{"config", model.config()},
                           {"dtype", dtype_name<T>()},
                           {"step", state.step},
                           {"extra", state.extra}};
  if (state.adam) header["adam_t"] = state.adam->t;
  std::string out(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  const std::string hj = header.dump();
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(hj.size()));
  out += hj;
  const auto& ps = model.params();
  std::uint32_t count = static_cast<std::uint32_t>(ps.size() * (state.adam ? 3 : 1));
  detail::put<std::uint32_t>(out, count);
  for (std::size_t i = 0; i < ps.size(); ++i)
    detail::put_tensor<T>(out, ps.name(i), ps[i].shape(), ps[i].data());
  if (state.adam) {
    if (state.adam->m.size() != ps.size()) throw ShapeError("adam state does not cover every parameter");
    for (std::size_t i = 0; i < ps.size(); ++i)
      detail::put_tensor<T>(out, "adam.m." + ps.name(i), ps[i].shape(), state.adam->m[i]);
    for (std::size_t i = 0; i < ps.size(); ++i)
      detail::put_tensor<T>(out, "adam.v." + ps.name(i), ps[i].shape(), state.adam->v[i]);
  }
  return out;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const TrainState<T>& state) {
  write_file_atomic(path, serialize_checkpoint(model, state));
}

template <class T>
struct Checkpoint {
  Model<T> model;
  TrainState<T> state;
};

// Reads a checkpoint, converting element precision if needed. When `expect`
// is given the stored config must match it.
template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig* expect = nullptr) {
  detail::Reader r(read_file(path));
  if (r.bytes(4) != std::string(kCheckpointMagic, 4)) throw DataError(path.string() + " is not a checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.bytes(r.get<std::uint32_t>()));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
  ModelConfig cfg = header.at("config").get<ModelConfig>();
  if (expect && !(cfg == *expect)) {
    std::string fields;
    for (auto& f : config_diff(cfg, *expect)) fields += (fields.empty() ? "" : ", ") + f;
    throw ConfigError("checkpoint config differs in: " + fields);
  }
  const std::string dtype = header.at("dtype").get<std::string>();
  if (dtype != "f32" && dtype != "f64") throw DataError("unknown checkpoint dtype " + dtype);
  const std::size_t esize = dtype == "f32" ? 4 : 8;

  Checkpoint<T> ck{Model<T>(cfg), {}};
  ck.state.step = header.value("step", std::uint64_t{0});
  ck.state.extra = header.value("extra", nlohmann::json::object());
  auto& ps = ck.model.params();
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < ps.size(); ++i) index[ps.name(i)] = i;
  const bool has_adam = header.contains("adam_t");
  if (has_adam) {
    ck.state.adam.emplace();
    ck.state.adam->init(ps);
    ck.state.adam->t = header.at("adam_t").get<std::uint64_t>();
  }
  std::vector<char> seen(ps.size() * 3, 0);
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank > 4) throw DataError("tensor " + name + " has rank " + std::to_string(rank));
    nn::Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    int slot = 0;
    std::string base = name;
    if (name.starts_with("adam.m.")) slot = 1, base = name.substr(7);
    else if (name.starts_with("adam.v.")) slot = 2, base = name.substr(7);
    auto it = index.find(base);
    if (it == index.end() || (slot > 0 && !has_adam)) throw DataError("unexpected tensor " + name + " in checkpoint");
    const auto i = it->second;
    if (shape != ps[i].shape())
      throw ShapeError("tensor " + name + " has shape " + nn::shape_str(shape) + ", config implies " +
                       nn::shape_str(ps[i].shape()));
    if (seen[i * 3 + slot]++) throw DataError("tensor " + name + " appears twice");
    const std::size_t n = nn::numel_of(shape);
    std::string raw = r.bytes(n * esize);
    std::vector<T> vals(n);
    for (std::size_t e = 0; e < n; ++e) {
      if (esize == 4) {
        float f;
        std::memcpy(&f, raw.data() + e * 4, 4);
        vals[e] = static_cast<T>(f);
      } else {
        double d;
        std::memcpy(&d, raw.data() + e * 8, 8);
        vals[e] = static_cast<T>(d);
      }
    }
    if (slot == 0) ps[i].values() = std::move(vals);
    else if (slot == 1) ck.state.adam->m[i] = std::move(vals);
    else ck.state.adam->v[i] = std::move(vals);
  }
  if (!r.done()) throw DataError("trailing bytes after checkpoint tensors");
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (int slot = 0; slot < (has_adam ? 3 : 1); ++slot)
      if (!seen[i * 3 + slot]) throw DataError("checkpoint lacks tensor for " + ps.name(i));
  return ck;
}

}  // namespace sgvl
