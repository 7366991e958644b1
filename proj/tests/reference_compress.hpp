#pragma once

// Brute-force reference for the compression pipeline, used by the unit and
// acceptance suites. It materializes the full stacked teacher tensor, applies
// every elimination step densely, and only then gathers survivors. Shares no
// selection code with the library implementation.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "hskd/compress.hpp"
#include "hskd/model.hpp"

namespace testutil {

inline int ref_round_half_away(double x) {
  return static_cast<int>(std::floor(x + 0.5));  // non-negative inputs only
}

inline int ref_layer_map(int l, int student_layers, int l_top, hskd::DepthMapMode mode) {
  if (l == 0) return 0;
  if (mode == hskd::DepthMapMode::LiteralEq5)
    return l * ref_round_half_away(static_cast<double>(l_top) / student_layers);
  return ref_round_half_away(static_cast<double>(l) * l_top / student_layers);
}

// Full ranking by (score desc, index asc) over all positions.
inline std::vector<int> ref_full_ranking(const std::vector<float>& scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
  });
  return order;
}

inline hskd::CompressedHsk reference_compress(const hskd::ForwardTrace& trace,
                                              const hskd::TokenSequence& seq,
                                              const hskd::CompressionConfig& config,
                                              int student_layers) {
  using namespace hskd;
  const int teacher_layers = static_cast<int>(trace.attentions.size());
  const int n = seq.length();
  const int d = trace.hidden[0].cols();

  // 1. materialize the (student_layers+1) x n x d stacked tensor
  std::vector<int> mapped(static_cast<size_t>(student_layers) + 1);
  for (int l = 0; l <= student_layers; ++l)
    mapped[static_cast<size_t>(l)] = ref_layer_map(l, student_layers, config.l_top,
                                                   config.depth_map_mode);
  std::vector<std::vector<std::vector<double>>> stacked(
      static_cast<size_t>(student_layers) + 1,
      std::vector<std::vector<double>>(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(d))));
  for (int l = 0; l <= student_layers; ++l)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j)
        stacked[static_cast<size_t>(l)][static_cast<size_t>(i)][static_cast<size_t>(j)] =
            trace.hidden[static_cast<size_t>(mapped[static_cast<size_t>(l)])].at(i, j);

  // 2. depth: drop all but the top n_depth layers
  std::vector<int> kept_layers;
  for (int l = 0; l <= student_layers; ++l)
    if (l >= student_layers - config.n_depth + 1) kept_layers.push_back(l);

  // 3. per kept layer, score tokens and keep the best n_length
  std::vector<int> score_layers;
  for (int l : kept_layers) {
    int g = config.length_strategy == LengthStrategy::AttNoSepTop12
                ? ref_layer_map(l, student_layers, teacher_layers, config.depth_map_mode)
                : mapped[static_cast<size_t>(l)];
    score_layers.push_back(g);
  }
  {
    int lowest = 0;
    for (int g : score_layers)
      if (g >= 1 && (lowest == 0 || g < lowest)) lowest = g;
    if (lowest == 0) lowest = 1;
    for (auto& g : score_layers) g = std::min(teacher_layers, g >= 1 ? g : lowest);
  }

  CompressedHsk out;
  out.teacher_dim = d;
  out.mask_kind = config.width_strategy == WidthStrategy::Mag ? MaskKind::Dynamic : MaskKind::Static;
  const int n_width = width_count(config.width_fraction, d);
  if (out.mask_kind == MaskKind::Static) {
    if (config.width_strategy == WidthStrategy::Uniform) {
      out.static_mask = WidthMask::empty(d, MaskKind::Static);
      for (int i = 1; i <= n_width; ++i)
        out.static_mask.set(ref_round_half_away(static_cast<double>(i) * d / n_width) - 1);
    } else {
      // the random mask is seed-defined; reproduce it through the same derivation
      out.static_mask = width_mask_rand(d, n_width, config.seed);
    }
  }

  for (size_t ki = 0; ki < kept_layers.size(); ++ki) {
    const int l = kept_layers[ki];
    out.layer_pairs.emplace_back(l, mapped[static_cast<size_t>(l)]);

    std::vector<int> tokens;
    if (config.length_strategy == LengthStrategy::Left) {
      for (int i = 0; i < std::min(config.n_length, n); ++i) tokens.push_back(i);
    } else {
      std::vector<float> scores(static_cast<size_t>(n), 0.0f);
      const auto& heads = trace.attentions[static_cast<size_t>(score_layers[ki] - 1)];
      for (const auto& h : heads)
        for (int j = 0; j < n; ++j) scores[static_cast<size_t>(j)] += h.at(0, j);
      for (auto& v : scores) v /= static_cast<float>(heads.size());

      auto ranking = ref_full_ranking(scores);
      std::vector<int> filtered;
      for (int pos : ranking) {
        if (config.length_strategy != LengthStrategy::Att &&
            seq.marks[static_cast<size_t>(pos)] == Mark::Sep)
          continue;
        filtered.push_back(pos);
      }
      filtered.resize(std::min<size_t>(filtered.size(), static_cast<size_t>(config.n_length)));
      tokens = filtered;
      std::sort(tokens.begin(), tokens.end());
    }
    out.token_indices.push_back(tokens);

    // 4. width: zero the dropped activations densely, then gather survivors
    if (out.mask_kind == MaskKind::Dynamic) out.token_masks.emplace_back();
    for (int tok : tokens) {
      const auto& vec = stacked[static_cast<size_t>(l)][static_cast<size_t>(tok)];
      WidthMask mask;
      if (out.mask_kind == MaskKind::Dynamic) {
        // rank by |value| with ties to the lower index
        std::vector<int> order(static_cast<size_t>(d));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
          return std::fabs(static_cast<float>(vec[static_cast<size_t>(a)])) >
                 std::fabs(static_cast<float>(vec[static_cast<size_t>(b)]));
        });
        mask = WidthMask::empty(d, MaskKind::Dynamic);
        for (int i = 0; i < n_width; ++i) mask.set(order[static_cast<size_t>(i)]);
        out.token_masks.back().push_back(mask);
      } else {
        mask = out.static_mask;
      }
      std::vector<double> zeroed(vec);
      for (int j = 0; j < d; ++j)
        if (!mask.test(j)) zeroed[static_cast<size_t>(j)] = 0.0;
      for (int j = 0; j < d; ++j)
        if (mask.test(j)) out.values.push_back(static_cast<float>(zeroed[static_cast<size_t>(j)]));
    }
  }
  return out;
}

// Random forward traces for selection tests: row-stochastic attentions and
// arbitrary hidden values, no model involved.
inline hskd::ForwardTrace random_trace(int teacher_layers, int heads, int n, int d,
                                       hskd::Rng& rng) {
  hskd::ForwardTrace trace;
  for (int l = 0; l <= teacher_layers; ++l) {
    std::vector<float> data(static_cast<size_t>(n) * static_cast<size_t>(d));
    for (auto& v : data) v = static_cast<float>(rng.canonical() * 4.0 - 2.0);
    trace.hidden.push_back(hskd::Tensor::from({n, d}, std::move(data)));
  }
  trace.attentions.resize(static_cast<size_t>(teacher_layers));
  for (int l = 0; l < teacher_layers; ++l)
    for (int a = 0; a < heads; ++a) {
      std::vector<float> rows(static_cast<size_t>(n) * static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) {
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
          const double v = rng.canonical() + 1e-3;
          rows[static_cast<size_t>(i) * n + j] = static_cast<float>(v);
          sum += v;
        }
        for (int j = 0; j < n; ++j) rows[static_cast<size_t>(i) * n + j] /= static_cast<float>(sum);
      }
      trace.attentions[static_cast<size_t>(l)].push_back(hskd::Tensor::from({n, n}, std::move(rows)));
    }
  return trace;
}

inline hskd::TokenSequence random_marked_sequence(int n, int vocab, hskd::Rng& rng) {
  hskd::TokenSequence seq;
  seq.token_ids.push_back(0);
  seq.segment_ids.push_back(0);
  seq.marks.push_back(hskd::Mark::Cls);
  for (int i = 1; i < n; ++i) {
    const bool sep = rng.canonical() < 0.2;
    seq.token_ids.push_back(sep ? 1 : 2 + static_cast<int>(rng.below(static_cast<uint64_t>(vocab - 2))));
    seq.segment_ids.push_back(0);
    seq.marks.push_back(sep ? hskd::Mark::Sep : hskd::Mark::Ordinary);
  }
  return seq;
}

}  // namespace testutil
