#pragma once

// Selection machinery for compressing a teacher's hidden-state stack along
// depth (layers), length (token positions) and width (activations), the
// amount metric over the three axes, and the configuration sampler.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "hskd/common.hpp"
#include "hskd/model.hpp"

namespace hskd {

enum class DepthMapMode { LiteralEq5, PerLayerRound };
enum class LengthStrategy { Att, AttNoSep, AttNoSepTop12, Left };
enum class WidthStrategy { Rand, Uniform, Mag };

inline std::string to_string(DepthMapMode m) {
  return m == DepthMapMode::LiteralEq5 ? "literal_eq5" : "per_layer_round";
}
inline DepthMapMode depth_map_mode_from_string(const std::string& s) {
  if (s == "literal_eq5") return DepthMapMode::LiteralEq5;
  if (s == "per_layer_round") return DepthMapMode::PerLayerRound;
  throw ContractError("unknown depth_map_mode: " + s);
}
inline std::string to_string(LengthStrategy s) {
  switch (s) {
    case LengthStrategy::Att: return "Att";
    case LengthStrategy::AttNoSep: return "AttNoSep";
    case LengthStrategy::AttNoSepTop12: return "AttNoSepTop12";
    case LengthStrategy::Left: return "Left";
  }
  throw ContractError("unknown length strategy");
}
inline LengthStrategy length_strategy_from_string(const std::string& s) {
  if (s == "Att") return LengthStrategy::Att;
  if (s == "AttNoSep") return LengthStrategy::AttNoSep;
  if (s == "AttNoSepTop12") return LengthStrategy::AttNoSepTop12;
  if (s == "Left") return LengthStrategy::Left;
  throw ContractError("unknown length_strategy: " + s);
}
inline std::string to_string(WidthStrategy s) {
  switch (s) {
    case WidthStrategy::Rand: return "Rand";
    case WidthStrategy::Uniform: return "Uniform";
    case WidthStrategy::Mag: return "Mag";
  }
  throw ContractError("unknown width strategy");
}
inline WidthStrategy width_strategy_from_string(const std::string& s) {
  if (s == "Rand") return WidthStrategy::Rand;
  if (s == "Uniform") return WidthStrategy::Uniform;
  if (s == "Mag") return WidthStrategy::Mag;
  throw ContractError("unknown width_strategy: " + s);
}

constexpr int kMaxLengthBudget = 50;  // box bound on the length axis
constexpr int kLengthGridMax = 49;    // sampler grid cap for the length axis

struct CompressionConfig {
  int n_depth = 1;
  int n_length = 1;
  double width_fraction = 1.0;  // one of 0.1 .. 1.0 in tenths
  int l_top = 1;                // teacher layer paired with the top student layer
  DepthMapMode depth_map_mode = DepthMapMode::PerLayerRound;
  LengthStrategy length_strategy = LengthStrategy::AttNoSepTop12;
  WidthStrategy width_strategy = WidthStrategy::Mag;
  uint64_t seed = 1;

  int width_decile() const { return static_cast<int>(std::lround(width_fraction * 10.0)); }

  void validate() const {
    require(n_depth >= 1, "config: n_depth must be at least 1");
    require(n_length >= 1 && n_length <= kMaxLengthBudget, "config: n_length out of range");
    const int dec = width_decile();
    require(dec >= 1 && dec <= 10 && std::fabs(width_fraction - dec / 10.0) < 1e-9,
            "config: width_fraction must be a tenth in (0, 1]");
    require(l_top >= 1, "config: l_top must be at least 1");
  }

  nlohmann::json to_json() const {
    return {{"n_depth", n_depth},
            {"n_length", n_length},
            {"width_fraction", width_fraction},
            {"l_top", l_top},
            {"depth_map_mode", to_string(depth_map_mode)},
            {"length_strategy", to_string(length_strategy)},
            {"width_strategy", to_string(width_strategy)},
            {"seed", seed}};
  }
  static CompressionConfig from_json(const nlohmann::json& j) {
    CompressionConfig c;
    c.n_depth = j.at("n_depth").get<int>();
    c.n_length = j.at("n_length").get<int>();
    c.width_fraction = j.at("width_fraction").get<double>();
    c.l_top = j.at("l_top").get<int>();
    c.depth_map_mode = depth_map_mode_from_string(j.value("depth_map_mode", "per_layer_round"));
    c.length_strategy = length_strategy_from_string(j.value("length_strategy", "AttNoSepTop12"));
    c.width_strategy = width_strategy_from_string(j.value("width_strategy", "Mag"));
    c.seed = j.value("seed", uint64_t(1));
    c.validate();
    return c;
  }

  std::string label() const {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "(%d,%d,%.1f)", n_depth, n_length, width_fraction);
    return std::string(buf) + "/" + to_string(length_strategy) + "/" + to_string(width_strategy);
  }
};

// ---------------------------------------------------------------------------
// Layer mapping
// ---------------------------------------------------------------------------

// Evenly spaced mapping: student layer l pairs with teacher layer l*L/L'.
inline int layer_map_uniform(int l, int teacher_layers, int student_layers) {
  require(student_layers >= 1 && teacher_layers >= 1, "layer map: layer counts must be positive");
  require(teacher_layers % student_layers == 0,
          "layer map: teacher depth must be a multiple of student depth");
  require(l >= 0 && l <= student_layers, "layer map: student layer out of range");
  return l * (teacher_layers / student_layers);
}

// Mapping that lets the top student layer pair with an arbitrary teacher
// layer l_top. The literal mode applies one rounded stride to every layer;
// the per-layer mode rounds each product separately, which is the only
// variant that actually lands the top student layer on l_top for every
// (student depth, l_top) combination. Rounding is half away from zero.
inline int layer_map_redesigned(int l, int student_layers, int l_top, DepthMapMode mode) {
  require(student_layers >= 1, "layer map: student depth must be positive");
  require(l >= 0 && l <= student_layers, "layer map: student layer out of range");
  require(l_top >= 1, "layer map: l_top must be at least 1");
  if (l == 0) return 0;
  if (mode == DepthMapMode::LiteralEq5) return l * round_div(l_top, student_layers);
  return round_div(static_cast<int64_t>(l) * l_top, student_layers);
}

// Keep the top n_depth feature pairs: student layers L'-N+1 .. L'.
inline std::vector<int> select_depth(int student_layers, int n_depth) {
  require(n_depth >= 1 && n_depth <= student_layers + 1, "select_depth: n_depth out of range");
  std::vector<int> kept;
  for (int l = student_layers - n_depth + 1; l <= student_layers; ++l) kept.push_back(l);
  return kept;
}

// ---------------------------------------------------------------------------
// Token importance and selection
// ---------------------------------------------------------------------------

using ImportanceScores = std::vector<float>;

// CLS-row attention averaged over heads for one teacher layer (1-based; the
// embedding layer has no attention and is resolved by the caller).
inline ImportanceScores importance_scores(const std::vector<std::vector<Tensor>>& attentions,
                                          int teacher_layer) {
  require(teacher_layer >= 1 && teacher_layer <= static_cast<int>(attentions.size()),
          "importance_scores: teacher layer out of range");
  const auto& heads = attentions[static_cast<size_t>(teacher_layer - 1)];
  require(!heads.empty(), "importance_scores: no attention heads recorded");
  const int n = heads[0].cols();
  ImportanceScores s(static_cast<size_t>(n), 0.0f);
  for (const auto& head : heads)
    for (int j = 0; j < n; ++j) s[static_cast<size_t>(j)] += head.at(0, j);
  const float inv = 1.0f / static_cast<float>(heads.size());
  for (auto& v : s) v *= inv;
  return s;
}

// Rank positions by score, higher first, ties to the lower index; returns the
// kept positions in ascending order.
inline std::vector<int> select_tokens(const ImportanceScores& scores, const TokenSequence& seq,
                                      int n_length, LengthStrategy strategy) {
  require(n_length >= 1, "select_tokens: n_length must be at least 1");
  const int n = seq.length();
  std::vector<int> kept;
  if (strategy == LengthStrategy::Left) {
    const int k = std::min(n_length, n);
    kept.resize(static_cast<size_t>(k));
    std::iota(kept.begin(), kept.end(), 0);
    return kept;
  }
  require(static_cast<int>(scores.size()) == n, "select_tokens: score length mismatch");
  std::vector<int> candidates;
  for (int i = 0; i < n; ++i) {
    if (strategy != LengthStrategy::Att && seq.marks[static_cast<size_t>(i)] == Mark::Sep) continue;
    candidates.push_back(i);
  }
  std::sort(candidates.begin(), candidates.end(), [&](int a, int b) {
    const float sa = scores[static_cast<size_t>(a)];
    const float sb = scores[static_cast<size_t>(b)];
    if (sa != sb) return sa > sb;
    return a < b;
  });
  const int k = std::min<int>(n_length, static_cast<int>(candidates.size()));
  kept.assign(candidates.begin(), candidates.begin() + k);
  std::sort(kept.begin(), kept.end());
  return kept;
}

// ---------------------------------------------------------------------------
// Width masks
// ---------------------------------------------------------------------------

enum class MaskKind : uint8_t { Static = 0, Dynamic = 1 };

struct WidthMask {
  int dim = 0;
  MaskKind kind = MaskKind::Static;
  std::vector<uint8_t> bytes;  // LSB-first bit packing, ceil(dim/8) bytes

  static WidthMask empty(int dim, MaskKind kind) {
    WidthMask m;
    m.dim = dim;
    m.kind = kind;
    m.bytes.assign(static_cast<size_t>((dim + 7) / 8), 0);
    return m;
  }
  bool test(int i) const {
    return (bytes[static_cast<size_t>(i / 8)] >> (i % 8)) & 1;
  }
  void set(int i) { bytes[static_cast<size_t>(i / 8)] |= static_cast<uint8_t>(1u << (i % 8)); }
  int popcount() const {
    int c = 0;
    for (int i = 0; i < dim; ++i) c += test(i) ? 1 : 0;
    return c;
  }
  std::vector<int> kept_dims() const {
    std::vector<int> out;
    for (int i = 0; i < dim; ++i)
      if (test(i)) out.push_back(i);
    return out;
  }
  bool operator==(const WidthMask& other) const = default;
};

// Retained activation count for a width fraction, half away from zero.
inline int width_count(double width_fraction, int dim) {
  const int dec = static_cast<int>(std::lround(width_fraction * 10.0));
  const int n = static_cast<int>((static_cast<int64_t>(dec) * dim + 5) / 10);
  return std::max(1, n);
}

inline WidthMask width_mask_rand(int dim, int n_width, uint64_t seed) {
  require(n_width >= 1 && n_width <= dim, "width_mask: n_width out of range");
  auto m = WidthMask::empty(dim, MaskKind::Static);
  Rng rng(mix_seed(seed, 0x3A5C));
  for (int i : rng.sample_without_replacement(dim, n_width)) m.set(i);
  return m;
}

// Ones at 1-based positions round(i*dim/n_width), i = 1..n_width.
inline WidthMask width_mask_uniform(int dim, int n_width) {
  require(n_width >= 1 && n_width <= dim, "width_mask: n_width out of range");
  auto m = WidthMask::empty(dim, MaskKind::Static);
  for (int i = 1; i <= n_width; ++i)
    m.set(round_div(static_cast<int64_t>(i) * dim, n_width) - 1);
  return m;
}

// Keep the n_width largest-magnitude entries; magnitude ties go to the lower
// index so the mask is a pure function of the vector.
inline WidthMask width_mask_magnitude(std::span<const float> values, int n_width) {
  const int dim = static_cast<int>(values.size());
  require(n_width >= 1 && n_width <= dim, "width_mask: n_width out of range");
  std::vector<int> order(static_cast<size_t>(dim));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const float ma = std::fabs(values[static_cast<size_t>(a)]);
    const float mb = std::fabs(values[static_cast<size_t>(b)]);
    if (ma != mb) return ma > mb;
    return a < b;
  });
  auto m = WidthMask::empty(dim, MaskKind::Dynamic);
  for (int i = 0; i < n_width; ++i) m.set(order[static_cast<size_t>(i)]);
  return m;
}

inline WidthMask static_width_mask(const CompressionConfig& config, int dim) {
  const int nw = width_count(config.width_fraction, dim);
  switch (config.width_strategy) {
    case WidthStrategy::Rand: return width_mask_rand(dim, nw, config.seed);
    case WidthStrategy::Uniform: return width_mask_uniform(dim, nw);
    case WidthStrategy::Mag: throw ContractError("static_width_mask: Mag masks are per vector");
  }
  throw ContractError("unknown width strategy");
}

// ---------------------------------------------------------------------------
// Amount of hidden-state knowledge
// ---------------------------------------------------------------------------

// One unit is one token-layer vector; a compressed stack carries
// n_depth * n_length * width_fraction units. Computed from the integer
// decile so the grid values come out exact.
inline double a_hsk(const CompressionConfig& c) {
  return static_cast<double>(c.n_depth * c.n_length * c.width_decile()) / 10.0;
}

// Effective amount for a concrete sequence: the length axis saturates at the
// sequence length.
inline double a_hsk(const CompressionConfig& c, int seq_len) {
  const int nl = std::min(c.n_length, seq_len);
  return static_cast<double>(c.n_depth * nl * c.width_decile()) / 10.0;
}

inline double a_hsk_full(int student_layers, int seq_len) {
  return static_cast<double>((student_layers + 1) * seq_len);
}

inline double a_hsk_normalized(const CompressionConfig& c, int student_layers, int seq_len) {
  return a_hsk(c, seq_len) / a_hsk_full(student_layers, seq_len);
}

// ---------------------------------------------------------------------------
// Configuration sampling over the (n_depth, n_length, width) grid
// ---------------------------------------------------------------------------

inline bool in_amount_band(double amount, double target, double tolerance_pct) {
  return std::fabs(amount - target) <= target * (tolerance_pct / 100.0);
}

// Every grid triple whose amount lies inside the band, in grid order. The
// strategy fields are copied from the prototype.
inline std::vector<CompressionConfig> enumerate_configs(double target, double tolerance_pct,
                                                        int student_layers,
                                                        const CompressionConfig& prototype) {
  require(target > 0.0, "enumerate_configs: target must be positive");
  require(tolerance_pct > 0.0, "enumerate_configs: tolerance must be positive");
  std::vector<CompressionConfig> out;
  for (int nd = 1; nd <= student_layers + 1; ++nd)
    for (int nl = 1; nl <= kLengthGridMax; ++nl)
      for (int dec = 1; dec <= 10; ++dec) {
        const double amount = static_cast<double>(nd * nl * dec) / 10.0;
        if (!in_amount_band(amount, target, tolerance_pct)) continue;
        CompressionConfig c = prototype;
        c.n_depth = nd;
        c.n_length = nl;
        c.width_fraction = dec / 10.0;
        out.push_back(c);
      }
  return out;
}

struct SampledConfigs {
  std::vector<CompressionConfig> configs;
  bool exhausted = false;  // feasible set was smaller than the request
};

inline SampledConfigs sample_configs(double target, double tolerance_pct, int student_layers,
                                     int count, uint64_t seed,
                                     const CompressionConfig& prototype = {}) {
  auto feasible = enumerate_configs(target, tolerance_pct, student_layers, prototype);
  SampledConfigs out;
  if (static_cast<int>(feasible.size()) <= count) {
    out.configs = std::move(feasible);
    out.exhausted = static_cast<int>(out.configs.size()) < count;
    return out;
  }
  Rng rng(mix_seed(seed, 0x5A11));
  for (int idx : rng.sample_without_replacement(static_cast<int>(feasible.size()), count))
    out.configs.push_back(feasible[static_cast<size_t>(idx)]);
  return out;
}

// ---------------------------------------------------------------------------
// Compression of one forward trace
// ---------------------------------------------------------------------------

struct CompressedHsk {
  std::vector<std::pair<int, int>> layer_pairs;       // (student layer, teacher layer)
  std::vector<std::vector<int>> token_indices;        // per pair, ascending
  MaskKind mask_kind = MaskKind::Static;
  WidthMask static_mask;                              // valid when mask_kind == Static
  std::vector<std::vector<WidthMask>> token_masks;    // per pair per token when Dynamic
  std::vector<float> values;                          // (pair, token, dim) order
  int teacher_dim = 0;

  const WidthMask& mask_for(size_t pair_idx, size_t token_idx) const {
    return mask_kind == MaskKind::Static ? static_mask : token_masks[pair_idx][token_idx];
  }

  size_t value_count() const { return values.size(); }

  // Amount actually carried: pairs x tokens x popcount/dim.
  double amount() const {
    int64_t kept = 0;
    for (size_t p = 0; p < layer_pairs.size(); ++p)
      for (size_t t = 0; t < token_indices[p].size(); ++t)
        kept += mask_for(p, t).popcount();
    return static_cast<double>(kept) / static_cast<double>(teacher_dim);
  }

  bool operator==(const CompressedHsk& other) const = default;
};

namespace detail {

// Teacher layers that provide token scores for each kept pair. A pair mapped
// to the embedding layer borrows the lowest attention-bearing mapped layer
// among the kept pairs (teacher layer 1 if none exists).
inline std::vector<int> resolve_score_layers(const std::vector<int>& raw, int teacher_layers) {
  int lowest = 0;
  for (int g : raw)
    if (g >= 1 && (lowest == 0 || g < lowest)) lowest = g;
  if (lowest == 0) lowest = 1;
  std::vector<int> out;
  out.reserve(raw.size());
  for (int g : raw) out.push_back(std::min(teacher_layers, g >= 1 ? g : lowest));
  return out;
}

}  // namespace detail

inline CompressedHsk compress(const ForwardTrace& trace, const TokenSequence& seq,
                              const CompressionConfig& config, int student_layers) {
  config.validate();
  const int teacher_layers = static_cast<int>(trace.attentions.size());
  require(static_cast<int>(trace.hidden.size()) == teacher_layers + 1,
          "compress: trace is missing hidden layers");
  require(config.l_top <= teacher_layers, "compress: l_top exceeds teacher depth");
  require(config.n_depth <= student_layers + 1, "compress: n_depth exceeds student depth");
  const int d = trace.hidden[0].cols();
  const int n = seq.length();
  require(trace.hidden[0].rows() == n, "compress: trace length disagrees with sequence");

  CompressedHsk out;
  out.teacher_dim = d;
  out.mask_kind = config.width_strategy == WidthStrategy::Mag ? MaskKind::Dynamic : MaskKind::Static;

  const auto kept_layers = select_depth(student_layers, config.n_depth);
  std::vector<int> raw_score_layers;
  for (int l : kept_layers) {
    const int g = layer_map_redesigned(l, student_layers, config.l_top, config.depth_map_mode);
    require(g <= teacher_layers, "compress: layer mapping exceeds teacher depth");
    out.layer_pairs.emplace_back(l, g);
    const int g_score = config.length_strategy == LengthStrategy::AttNoSepTop12
                            ? layer_map_redesigned(l, student_layers, teacher_layers,
                                                   config.depth_map_mode)
                            : g;
    raw_score_layers.push_back(g_score);
  }
  const auto score_layers = detail::resolve_score_layers(raw_score_layers, teacher_layers);

  const int n_width = width_count(config.width_fraction, d);
  if (out.mask_kind == MaskKind::Static) out.static_mask = static_width_mask(config, d);

  for (size_t pi = 0; pi < out.layer_pairs.size(); ++pi) {
    std::vector<int> tokens;
    if (config.length_strategy == LengthStrategy::Left) {
      tokens = select_tokens({}, seq, config.n_length, config.length_strategy);
    } else {
      const auto scores = importance_scores(trace.attentions, score_layers[pi]);
      tokens = select_tokens(scores, seq, config.n_length, config.length_strategy);
    }
    out.token_indices.push_back(tokens);

    const auto& hidden = trace.hidden[static_cast<size_t>(out.layer_pairs[pi].second)];
    if (out.mask_kind == MaskKind::Dynamic) out.token_masks.emplace_back();
    for (int tok : tokens) {
      std::vector<float> row(static_cast<size_t>(d));
      for (int j = 0; j < d; ++j) row[static_cast<size_t>(j)] = hidden.at(tok, j);
      const WidthMask* mask;
      if (out.mask_kind == MaskKind::Dynamic) {
        out.token_masks.back().push_back(width_mask_magnitude(row, n_width));
        mask = &out.token_masks.back().back();
      } else {
        mask = &out.static_mask;
      }
      for (int j = 0; j < d; ++j)
        if (mask->test(j)) out.values.push_back(row[static_cast<size_t>(j)]);
    }
  }
  return out;
}

// Dense reconstruction of one pair's kept-token matrix (zero-filled outside
// the mask), the exact target the distillation loss compares against.
inline std::vector<float> dense_pair_rows(const CompressedHsk& c, size_t pair_idx) {
  const int d = c.teacher_dim;
  const auto& tokens = c.token_indices[pair_idx];
  std::vector<float> out(tokens.size() * static_cast<size_t>(d), 0.0f);
  size_t cursor = 0;
  for (size_t p = 0; p < pair_idx; ++p)
    for (size_t t = 0; t < c.token_indices[p].size(); ++t)
      cursor += static_cast<size_t>(c.mask_for(p, t).popcount());
  for (size_t t = 0; t < tokens.size(); ++t) {
    const auto& mask = c.mask_for(pair_idx, t);
    for (int j = 0; j < d; ++j)
      if (mask.test(j)) out[t * static_cast<size_t>(d) + static_cast<size_t>(j)] = c.values[cursor++];
  }
  return out;
}

// ---------------------------------------------------------------------------
// SEP attention-rank statistics
// ---------------------------------------------------------------------------

struct SepRankStats {
  std::vector<double> top1_fraction;  // indexed by teacher layer - 1
  std::vector<double> top3_fraction;
};

// True when any SEP-marked position ranks within the top k by score, ties
// resolved toward the lower index.
inline bool sep_in_top_k(const ImportanceScores& scores, const std::vector<Mark>& marks, int k) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)])
      return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
    return a < b;
  });
  const int limit = std::min<int>(k, static_cast<int>(order.size()));
  for (int r = 0; r < limit; ++r)
    if (marks[static_cast<size_t>(order[static_cast<size_t>(r)])] == Mark::Sep) return true;
  return false;
}

// For each teacher layer, the fraction of samples whose highest-scored token
// is SEP-marked, and the fraction where any of the top three is.
inline SepRankStats sep_rank_stats(const std::vector<TokenSequence>& samples,
                                   const Transformer& teacher) {
  require(!samples.empty(), "sep_rank_stats: empty sample set");
  bool any_sep = false;
  for (const auto& s : samples) any_sep = any_sep || !s.sep_positions().empty();
  require(any_sep, "sep_rank_stats: no sample contains a SEP token");

  const int layers = teacher.config().num_layers;
  SepRankStats stats;
  stats.top1_fraction.assign(static_cast<size_t>(layers), 0.0);
  stats.top3_fraction.assign(static_cast<size_t>(layers), 0.0);

  NoGradGuard guard;
  for (const auto& seq : samples) {
    auto trace = teacher.forward(seq);
    for (int l = 1; l <= layers; ++l) {
      const auto scores = importance_scores(trace.attentions, l);
      if (sep_in_top_k(scores, seq.marks, 1)) stats.top1_fraction[static_cast<size_t>(l - 1)] += 1.0;
      if (sep_in_top_k(scores, seq.marks, 3)) stats.top3_fraction[static_cast<size_t>(l - 1)] += 1.0;
    }
  }
  const double inv = 1.0 / static_cast<double>(samples.size());
  for (auto& v : stats.top1_fraction) v *= inv;
  for (auto& v : stats.top3_fraction) v *= inv;
  return stats;
}

}  // namespace hskd
