#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "hskd/common.hpp"
#include "hskd/serialize.hpp"
#include "hskd/tensor.hpp"

namespace hskd {

struct ModelConfig {
  int num_layers = 4;
  int hidden_dim = 32;
  int num_heads = 2;
  int ffn_dim = 128;
  int vocab_size = 32;
  int max_seq_len = 32;
  int num_segments = 2;
  int num_classes = 2;
  double dropout_rate = 0.0;
  bool use_relu_ffn = false;  // default FFN activation is tanh-approximated GELU

  void validate() const {
    require(num_layers >= 1, "model: num_layers must be positive");
    require(hidden_dim >= 2, "model: hidden_dim must be at least 2");
    require(num_heads >= 1, "model: num_heads must be positive");
    require(hidden_dim % num_heads == 0, "model: hidden_dim must divide evenly over heads");
    require(ffn_dim >= 1, "model: ffn_dim must be positive");
    require(vocab_size >= 1, "model: vocab_size must be positive");
    require(max_seq_len >= 1, "model: max_seq_len must be positive");
    require(num_segments >= 1, "model: num_segments must be at least 1");
    require(num_classes >= 2, "model: num_classes must be at least 2");
  }

  int head_dim() const { return hidden_dim / num_heads; }

  nlohmann::json to_json() const {
    return {{"num_layers", num_layers},   {"hidden_dim", hidden_dim},
            {"num_heads", num_heads},     {"ffn_dim", ffn_dim},
            {"vocab_size", vocab_size},   {"max_seq_len", max_seq_len},
            {"num_segments", num_segments}, {"num_classes", num_classes},
            {"dropout_rate", dropout_rate}, {"use_relu_ffn", use_relu_ffn}};
  }
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.num_layers = j.at("num_layers").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.num_segments = j.value("num_segments", 2);
    c.num_classes = j.value("num_classes", 2);
    c.dropout_rate = j.value("dropout_rate", 0.0);
    c.use_relu_ffn = j.value("use_relu_ffn", false);
    c.validate();
    return c;
  }
};

enum class Mark : uint8_t { Ordinary = 0, Cls = 1, Sep = 2 };

struct TokenSequence {
  std::vector<int> token_ids;
  std::vector<int> segment_ids;
  std::vector<Mark> marks;
  int label = -1;     // optional supervision
  uint64_t id = 0;    // stable sample identity for feature stores

  int length() const { return static_cast<int>(token_ids.size()); }

  void validate(const ModelConfig& cfg) const {
    const size_t n = token_ids.size();
    require(n >= 1, "sequence: must contain at least one token");
    require(n <= static_cast<size_t>(cfg.max_seq_len), "sequence: longer than max_seq_len");
    require(segment_ids.size() == n && marks.size() == n,
            "sequence: parallel arrays must agree in length");
    require(marks[0] == Mark::Cls, "sequence: position 0 must be the CLS token");
    bool uses_segments = false;
    for (size_t i = 0; i < n; ++i) {
      require(token_ids[i] >= 0 && token_ids[i] < cfg.vocab_size,
              "sequence: token id out of range");
      require(segment_ids[i] >= 0 && segment_ids[i] < cfg.num_segments,
              "sequence: segment id out of range");
      if (segment_ids[i] > 0) uses_segments = true;
    }
    if (uses_segments) {
      bool has_sep = false;
      for (Mark m : marks) has_sep = has_sep || (m == Mark::Sep);
      require(has_sep, "sequence: segmented input requires a SEP token");
    }
  }

  std::vector<int> sep_positions() const {
    std::vector<int> out;
    for (size_t i = 0; i < marks.size(); ++i)
      if (marks[i] == Mark::Sep) out.push_back(static_cast<int>(i));
    return out;
  }
};

// Everything a forward pass exposes: all hidden layers (index 0 is the
// embedding output), every per-head attention distribution, and the
// classifier logits read from the CLS position of the top layer.
struct ForwardTrace {
  std::vector<Tensor> hidden;                     // (L+1) x [|x| x d]
  std::vector<std::vector<Tensor>> attentions;    // L x heads x [|x| x |x|]
  Tensor logits;                                  // [1 x num_classes]
};

class Transformer {
 public:
  struct LayerParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln1_g, ln1_b;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor ln2_g, ln2_b;
  };

  Transformer(ModelConfig cfg, uint64_t seed) : cfg_(cfg), seed_(seed) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0xC0DE));
    const int d = cfg_.hidden_dim;
    token_emb_ = init_matrix(cfg_.vocab_size, d, rng);
    pos_emb_ = init_matrix(cfg_.max_seq_len, d, rng);
    seg_emb_ = init_matrix(cfg_.num_segments, d, rng);
    layers_.reserve(static_cast<size_t>(cfg_.num_layers));
    for (int l = 0; l < cfg_.num_layers; ++l) {
      LayerParams p;
      p.wq = init_matrix(d, d, rng);
      p.bq = zeros_param(d);
      p.wk = init_matrix(d, d, rng);
      p.bk = zeros_param(d);
      p.wv = init_matrix(d, d, rng);
      p.bv = zeros_param(d);
      p.wo = init_matrix(d, d, rng);
      p.bo = zeros_param(d);
      p.ln1_g = ones_param(d);
      p.ln1_b = zeros_param(d);
      p.ffn_w1 = init_matrix(d, cfg_.ffn_dim, rng);
      p.ffn_b1 = zeros_param(cfg_.ffn_dim);
      p.ffn_w2 = init_matrix(cfg_.ffn_dim, d, rng);
      p.ffn_b2 = zeros_param(d);
      p.ln2_g = ones_param(d);
      p.ln2_b = zeros_param(d);
      layers_.push_back(std::move(p));
    }
    cls_w_ = init_matrix(d, cfg_.num_classes, rng);
    cls_b_ = zeros_param(cfg_.num_classes);
  }

  const ModelConfig& config() const { return cfg_; }
  uint64_t init_seed() const { return seed_; }
  uint64_t forward_count() const {
    return std::atomic_ref<const uint64_t>(forward_count_).load(std::memory_order_relaxed);
  }

  // Sum of the three embedding lookups.
  Tensor embed(const TokenSequence& seq) const {
    seq.validate(cfg_);
    std::vector<int> positions(static_cast<size_t>(seq.length()));
    for (int i = 0; i < seq.length(); ++i) positions[static_cast<size_t>(i)] = i;
    auto tok = gather_rows(token_emb_, seq.token_ids);
    auto pos = gather_rows(pos_emb_, positions);
    auto seg = gather_rows(seg_emb_, seq.segment_ids);
    return add(add(tok, pos), seg);
  }

  // Thread-safe inference: concurrent const forwards only race on the
  // invocation counter, which is updated atomically.
  ForwardTrace forward(const TokenSequence& seq, Rng* dropout_rng = nullptr) const {
    std::atomic_ref<uint64_t>(forward_count_).fetch_add(1, std::memory_order_relaxed);
    ForwardTrace trace;
    const int n = seq.length();
    const int heads = cfg_.num_heads;
    const int hd = cfg_.head_dim();
    const float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(hd));
    const bool use_dropout = dropout_rng != nullptr && cfg_.dropout_rate > 0.0;

    Tensor h = embed(seq);
    check_finite(h, 0);
    trace.hidden.push_back(h);
    trace.attentions.resize(static_cast<size_t>(cfg_.num_layers));

    for (int l = 0; l < cfg_.num_layers; ++l) {
      const auto& p = layers_[static_cast<size_t>(l)];
      auto q = add_rowvec(matmul(h, p.wq), p.bq);
      auto k = add_rowvec(matmul(h, p.wk), p.bk);
      auto v = add_rowvec(matmul(h, p.wv), p.bv);

      std::vector<Tensor> head_ctx;
      head_ctx.reserve(static_cast<size_t>(heads));
      for (int a = 0; a < heads; ++a) {
        auto qa = slice_cols(q, a * hd, hd);
        auto ka = slice_cols(k, a * hd, hd);
        auto va = slice_cols(v, a * hd, hd);
        auto scores = scale(matmul(qa, transpose(ka)), inv_sqrt_hd);
        auto attn = softmax_rows(scores);  // [n x n], rows sum to 1
        trace.attentions[static_cast<size_t>(l)].push_back(attn);
        head_ctx.push_back(matmul(attn, va));
      }
      auto ctx = heads == 1 ? head_ctx[0] : concat_cols(head_ctx);
      auto attn_out = add_rowvec(matmul(ctx, p.wo), p.bo);
      if (use_dropout) attn_out = dropout(attn_out, cfg_.dropout_rate, *dropout_rng);
      auto h1 = layernorm(add(h, attn_out), p.ln1_g, p.ln1_b);

      auto mid = add_rowvec(matmul(h1, p.ffn_w1), p.ffn_b1);
      auto act = cfg_.use_relu_ffn ? relu(mid) : gelu(mid);
      auto ffn_out = add_rowvec(matmul(act, p.ffn_w2), p.ffn_b2);
      if (use_dropout) ffn_out = dropout(ffn_out, cfg_.dropout_rate, *dropout_rng);
      h = layernorm(add(h1, ffn_out), p.ln2_g, p.ln2_b);
      check_finite(h, l + 1);
      trace.hidden.push_back(h);
      (void)n;
    }

    trace.logits = logits_from_hidden(h);
    return trace;
  }

  // Classifier head over the CLS position of a top-layer hidden state. Kept
  // public so the CLS-only dependence can be probed directly.
  Tensor logits_from_hidden(const Tensor& top_hidden) const {
    auto cls = gather_rows(top_hidden, {0});
    return add_rowvec(matmul(cls, cls_w_), cls_b_);
  }

  int predict(const TokenSequence& seq) const {
    NoGradGuard guard;
    auto trace = forward(seq);
    const auto logits = trace.logits.data();
    int best = 0;
    for (int c = 1; c < cfg_.num_classes; ++c)
      if (logits[static_cast<size_t>(c)] > logits[static_cast<size_t>(best)]) best = c;
    return best;
  }

  Tensor& token_embedding() { return token_emb_; }
  Tensor& position_embedding() { return pos_emb_; }
  Tensor& segment_embedding() { return seg_emb_; }
  LayerParams& layer(int l) { return layers_.at(static_cast<size_t>(l)); }
  Tensor& classifier_weight() { return cls_w_; }
  Tensor& classifier_bias() { return cls_b_; }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out = {&token_emb_, &pos_emb_, &seg_emb_};
    for (auto& p : layers_) {
      for (Tensor* t : {&p.wq, &p.bq, &p.wk, &p.bk, &p.wv, &p.bv, &p.wo, &p.bo,
                        &p.ln1_g, &p.ln1_b, &p.ffn_w1, &p.ffn_b1, &p.ffn_w2, &p.ffn_b2,
                        &p.ln2_g, &p.ln2_b})
        out.push_back(t);
    }
    out.push_back(&cls_w_);
    out.push_back(&cls_b_);
    return out;
  }
  std::vector<const Tensor*> parameters() const {
    auto* self = const_cast<Transformer*>(this);
    auto ps = self->parameters();
    return {ps.begin(), ps.end()};
  }

  // ---- checkpointing -------------------------------------------------------

  static constexpr char kMagic[5] = "HSKC";
  static constexpr uint16_t kVersion = 1;

  void save(const std::string& path) const {
    ByteWriter w;
    w.bytes(kMagic, 4);
    w.u16(kVersion);
    w.u8(1);  // little-endian
    w.str(cfg_.to_json().dump());
    w.u64(seed_);
    auto params = parameters();
    w.u32(static_cast<uint32_t>(params.size()));
    for (const Tensor* t : params) {
      w.u32(static_cast<uint32_t>(t->shape().size()));
      for (int d : t->shape()) w.u32(static_cast<uint32_t>(d));
      for (float v : t->data()) w.f32(v);
    }
    w.u64(digest());
    write_file(path, w.data());
  }

  static Transformer load(const std::string& path) {
    auto bytes = read_file(path);
    ByteReader r(bytes.data(), bytes.size());
    char magic[4];
    r.bytes(magic, 4);
    if (std::string(magic, 4) != "HSKC") throw FormatError("checkpoint: bad magic");
    if (r.u16() != kVersion) throw FormatError("checkpoint: unsupported version");
    if (r.u8() != 1) throw FormatError("checkpoint: unsupported byte order");
    auto cfg = ModelConfig::from_json(nlohmann::json::parse(r.str()));
    const uint64_t seed = r.u64();
    Transformer model(cfg, seed);
    auto params = model.parameters();
    const uint32_t count = r.u32();
    if (count != params.size()) throw FormatError("checkpoint: parameter count mismatch");
    for (Tensor* t : params) {
      const uint32_t nd = r.u32();
      std::vector<int> shape(nd);
      for (auto& d : shape) d = static_cast<int>(r.u32());
      if (shape != t->shape()) throw FormatError("checkpoint: parameter shape mismatch");
      auto dst = t->raw_data();
      for (auto& v : dst) v = r.f32();
    }
    const uint64_t stored = r.u64();
    if (stored != model.digest()) throw FormatError("checkpoint: digest mismatch");
    return model;
  }

  // Fingerprint over config and parameter bytes; stored in feature-store
  // headers so a store can be tied back to the teacher that produced it.
  uint64_t digest() const {
    uint64_t h = fnv1a(nullptr, 0);
    const auto dump = cfg_.to_json().dump();
    h = fnv1a(dump.data(), dump.size(), h);
    for (const Tensor* t : parameters()) {
      const auto d = t->data();
      h = fnv1a(d.data(), d.size() * sizeof(float), h);
    }
    return h;
  }

 private:
  static void check_finite(const Tensor& t, int layer) {
    if (!t.all_finite())
      throw NumericError("forward: non-finite hidden state at layer " + std::to_string(layer));
  }

  Tensor init_matrix(int rows, int cols, Rng& rng) {
    std::vector<float> data(static_cast<size_t>(rows) * static_cast<size_t>(cols));
    for (auto& v : data) v = static_cast<float>(rng.truncated_normal(0.02));
    return Tensor::from({rows, cols}, std::move(data), true);
  }
  static Tensor zeros_param(int n) { return Tensor::zeros({n}, true); }
  static Tensor ones_param(int n) { return Tensor::filled({n}, 1.0f, true); }

  ModelConfig cfg_;
  uint64_t seed_;
  Tensor token_emb_, pos_emb_, seg_emb_;
  std::vector<LayerParams> layers_;
  Tensor cls_w_, cls_b_;
  mutable uint64_t forward_count_ = 0;
};

}  // namespace hskd
