#pragma once

// Two-phase knowledge distillation: hidden-state matching against compressed
// teacher features, then prediction matching against teacher logits. Both
// phases run online (teacher in memory, features compressed on the fly) or
// offline (features replayed from a store, the teacher never loaded).

#include <chrono>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "hskd/common.hpp"
#include "hskd/compress.hpp"
#include "hskd/data.hpp"
#include "hskd/feature_store.hpp"
#include "hskd/model.hpp"
#include "hskd/trainer.hpp"

namespace hskd {

// One trainable projection per student layer, mapping student width onto
// teacher width. Created on first use; initialization depends only on
// (seed, layer) so creation order cannot change a run.
class ProjectionSet {
 public:
  ProjectionSet(int student_dim, int teacher_dim, uint64_t seed)
      : student_dim_(student_dim), teacher_dim_(teacher_dim), seed_(seed) {}

  int student_dim() const { return student_dim_; }
  int teacher_dim() const { return teacher_dim_; }

  Tensor& projection(int student_layer) {
    auto it = w_.find(student_layer);
    if (it != w_.end()) return it->second;
    Rng rng(mix_seed(seed_, 0xB0B0 + static_cast<uint64_t>(student_layer)));
    std::vector<float> data(static_cast<size_t>(student_dim_) * static_cast<size_t>(teacher_dim_));
    for (auto& v : data) v = static_cast<float>(rng.truncated_normal(0.02));
    auto [pos, inserted] =
        w_.emplace(student_layer, Tensor::from({student_dim_, teacher_dim_}, std::move(data), true));
    return pos->second;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& [l, t] : w_) out.push_back(&t);
    return out;
  }

 private:
  int student_dim_;
  int teacher_dim_;
  uint64_t seed_;
  std::map<int, Tensor> w_;
};

// Layer-wise MSE between projected student hidden states and the stored
// teacher values, restricted to the kept tokens. both_sides applies the
// width mask to the projected student rows too, so eliminated activations
// drop out of the comparison; teacher_only leaves the student rows unmasked
// and pulls the eliminated coordinates toward zero. The mean runs over every
// compared element (pairs x kept tokens x teacher width).
inline Tensor hsk_loss(const ForwardTrace& student_trace, const CompressedHsk& compressed,
                       ProjectionSet& projections, MaskApplication mask_application) {
  require(compressed.teacher_dim == projections.teacher_dim(),
          "hsk_loss: projection teacher width disagrees with the compressed features");
  const int d_t = compressed.teacher_dim;
  Tensor acc;
  int64_t compared = 0;
  for (size_t pi = 0; pi < compressed.layer_pairs.size(); ++pi) {
    const int student_layer = compressed.layer_pairs[pi].first;
    require(student_layer >= 0 &&
                static_cast<size_t>(student_layer) < student_trace.hidden.size(),
            "hsk_loss: student trace does not cover layer " + std::to_string(student_layer));
    const auto& tokens = compressed.token_indices[pi];
    if (tokens.empty()) continue;
    const auto& hidden = student_trace.hidden[static_cast<size_t>(student_layer)];
    require(hidden.cols() == projections.student_dim(),
            "hsk_loss: student width disagrees with the projections");

    auto rows = gather_rows(hidden, tokens);
    auto projected = matmul(rows, projections.projection(student_layer));

    const int k = static_cast<int>(tokens.size());
    auto teacher = Tensor::from({k, d_t}, dense_pair_rows(compressed, pi));
    Tensor diff;
    if (mask_application == MaskApplication::BothSides) {
      std::vector<float> mask_data(static_cast<size_t>(k) * static_cast<size_t>(d_t));
      for (int t = 0; t < k; ++t) {
        const auto& m = compressed.mask_for(pi, static_cast<size_t>(t));
        for (int j = 0; j < d_t; ++j)
          mask_data[static_cast<size_t>(t) * static_cast<size_t>(d_t) + static_cast<size_t>(j)] =
              m.test(j) ? 1.0f : 0.0f;
      }
      auto mask = Tensor::from({k, d_t}, std::move(mask_data));
      diff = sub(mul(projected, mask), teacher);
    } else {
      diff = sub(projected, teacher);
    }
    auto pair_sum = sum_all(mul(diff, diff));
    acc = acc.defined() ? add(acc, pair_sum) : pair_sum;
    compared += static_cast<int64_t>(k) * d_t;
  }
  if (!acc.defined()) return Tensor::scalar(0.0f);
  return scale(acc, 1.0f / static_cast<float>(compared));
}

// Cross-entropy between the teacher's softened distribution and the
// student's softened prediction.
inline Tensor prediction_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                              double temperature = 1.0) {
  require(student_logits.numel() == teacher_logits.numel(),
          "prediction_loss: class counts disagree");
  require(temperature > 0.0, "prediction_loss: temperature must be positive");
  const float inv_t = static_cast<float>(1.0 / temperature);
  Tensor target;
  {
    NoGradGuard guard;
    auto flat = Tensor::from({1, static_cast<int>(teacher_logits.numel())},
                             std::vector<float>(teacher_logits.data().begin(),
                                                teacher_logits.data().end()));
    target = softmax_rows(scale(flat, inv_t));
  }
  return cross_entropy_soft(scale(student_logits, inv_t), target);
}

// ---------------------------------------------------------------------------
// Distillation driver
// ---------------------------------------------------------------------------

struct DistillSource {
  const Transformer* teacher = nullptr;
  const StoreReader* store = nullptr;

  static DistillSource online(const Transformer& t) { return {&t, nullptr}; }
  static DistillSource offline(const StoreReader& s) { return {nullptr, &s}; }
  bool is_online() const { return teacher != nullptr; }
};

struct DistillMetrics {
  std::vector<EpochStats> epochs;
  std::vector<double> phase1_step_losses;  // one entry per optimization step
  double final_dev_accuracy = 0.0;
};

inline void write_metrics_csv(const std::string& path, const std::vector<EpochStats>& epochs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "epoch,phase,loss,dev_acc,ms_per_step\n";
  for (const auto& e : epochs)
    out << e.epoch << "," << e.phase << "," << e.mean_loss << "," << e.dev_accuracy << ","
        << e.ms_per_step << "\n";
}

inline DistillMetrics distill(Transformer& student, const DistillSource& source,
                              const CompressionConfig& config, const Dataset& data,
                              const TrainSpec& spec_hsk, const TrainSpec& spec_pred) {
  config.validate();
  spec_hsk.validate();
  spec_pred.validate();
  require(source.teacher != nullptr || source.store != nullptr,
          "distill: a teacher or a feature store is required");
  require(!data.train.empty(), "distill: dataset is empty");
  for (const auto& s : data.train)
    require(s.length() <= spec_hsk.max_seq_len && s.length() <= spec_pred.max_seq_len,
            "distill: sequence exceeds spec max_seq_len");

  const int student_layers = student.config().num_layers;
  int teacher_dim = 0;
  if (source.is_online()) {
    teacher_dim = source.teacher->config().hidden_dim;
    require(config.l_top <= source.teacher->config().num_layers,
            "distill: l_top exceeds teacher depth");
  } else {
    // the store is compression-specific: replaying a different configuration
    // than was extracted is a contract violation
    require(source.store->header().config.to_json() == config.to_json(),
            "distill: store was extracted with a different configuration");
    teacher_dim = static_cast<int>(source.store->header().teacher_dim);
    for (const auto& s : data.train)
      require(source.store->contains(s.id),
              "distill: store is missing sample " + std::to_string(s.id));
  }

  const auto expected_layers = select_depth(student_layers, config.n_depth);
  ProjectionSet projections(student.config().hidden_dim, teacher_dim, spec_hsk.seed);
  for (int l : expected_layers) (void)projections.projection(l);

  std::vector<Tensor*> params = student.parameters();
  for (Tensor* w : projections.parameters()) params.push_back(w);
  Adam opt(params);

  DistillMetrics metrics;

  auto fetch_features = [&](const TokenSequence& sample,
                            bool want_hsk) -> std::pair<CompressedHsk, std::vector<float>> {
    if (source.is_online()) {
      NoGradGuard guard;
      auto trace = source.teacher->forward(sample);
      CompressedHsk hsk;
      if (want_hsk) hsk = compress(trace, sample, config, student_layers);
      return {std::move(hsk),
              std::vector<float>(trace.logits.data().begin(), trace.logits.data().end())};
    }
    auto rec = source.store->read_record(sample.id);
    if (want_hsk) {
      require(rec.hsk.layer_pairs.size() == expected_layers.size(),
              "distill: store was extracted for a different student depth");
      for (size_t i = 0; i < expected_layers.size(); ++i)
        require(rec.hsk.layer_pairs[i].first == expected_layers[i],
                "distill: store was extracted for a different student depth");
    }
    return {std::move(rec.hsk), std::move(rec.teacher_logits)};
  };

  // ---- phase 1: hidden-state distillation ---------------------------------
  {
    Rng shuffle_rng(mix_seed(spec_hsk.seed, 0x11A5));
    const int steps_per_epoch =
        static_cast<int>((data.train.size() + static_cast<size_t>(spec_hsk.batch_size) - 1) /
                         static_cast<size_t>(spec_hsk.batch_size));
    const int total_steps = steps_per_epoch * spec_hsk.num_epochs;
    int step = 0;
    for (int epoch = 0; epoch < spec_hsk.num_epochs; ++epoch) {
      auto batches = detail::make_batches(data.train.size(), spec_hsk.batch_size, shuffle_rng);
      double loss_sum = 0.0;
      const auto t0 = std::chrono::steady_clock::now();
      for (const auto& batch : batches) {
        opt.zero_grad();
        Tensor loss;
        for (size_t idx : batch) {
          const auto& sample = data.train[idx];
          auto [hsk, logits] = fetch_features(sample, true);
          auto trace = student.forward(sample);
          auto sample_loss = hsk_loss(trace, hsk, projections, spec_hsk.mask_application);
          loss = loss.defined() ? add(loss, sample_loss) : sample_loss;
        }
        loss = scale(loss, 1.0f / static_cast<float>(batch.size()));
        const double value = static_cast<double>(loss.item());
        if (!std::isfinite(value))
          throw NumericError("distill: phase-1 loss diverged at step " + std::to_string(step));
        loss.backward();
        opt.step(scheduled_lr(spec_hsk.schedule, spec_hsk.learning_rate, step, total_steps));
        metrics.phase1_step_losses.push_back(value);
        loss_sum += value;
        ++step;
      }
      const auto t1 = std::chrono::steady_clock::now();
      EpochStats st;
      st.epoch = epoch;
      st.phase = "hsk";
      st.mean_loss = loss_sum / static_cast<double>(batches.size());
      st.dev_accuracy = evaluate_accuracy(student, data.dev);
      st.ms_per_step = std::chrono::duration<double, std::milli>(t1 - t0).count() /
                       static_cast<double>(batches.size());
      metrics.epochs.push_back(st);
    }
  }

  // ---- phase 2: prediction distillation ------------------------------------
  {
    Rng shuffle_rng(mix_seed(spec_pred.seed, 0x22B6));
    const int steps_per_epoch =
        static_cast<int>((data.train.size() + static_cast<size_t>(spec_pred.batch_size) - 1) /
                         static_cast<size_t>(spec_pred.batch_size));
    const int total_steps = steps_per_epoch * spec_pred.num_epochs;
    int step = 0;
    for (int epoch = 0; epoch < spec_pred.num_epochs; ++epoch) {
      auto batches = detail::make_batches(data.train.size(), spec_pred.batch_size, shuffle_rng);
      double loss_sum = 0.0;
      const auto t0 = std::chrono::steady_clock::now();
      for (const auto& batch : batches) {
        opt.zero_grad();
        Tensor loss;
        for (size_t idx : batch) {
          const auto& sample = data.train[idx];
          auto [hsk, teacher_logits] = fetch_features(sample, false);
          auto trace = student.forward(sample);
          const int classes = static_cast<int>(teacher_logits.size());
          auto logits = Tensor::from({1, classes}, std::move(teacher_logits));
          auto sample_loss = prediction_loss(trace.logits, logits);
          loss = loss.defined() ? add(loss, sample_loss) : sample_loss;
        }
        loss = scale(loss, 1.0f / static_cast<float>(batch.size()));
        const double value = static_cast<double>(loss.item());
        if (!std::isfinite(value))
          throw NumericError("distill: phase-2 loss diverged at step " + std::to_string(step));
        loss.backward();
        opt.step(scheduled_lr(spec_pred.schedule, spec_pred.learning_rate, step, total_steps));
        loss_sum += value;
        ++step;
      }
      const auto t1 = std::chrono::steady_clock::now();
      EpochStats st;
      st.epoch = epoch;
      st.phase = "prediction";
      st.mean_loss = loss_sum / static_cast<double>(batches.size());
      st.dev_accuracy = evaluate_accuracy(student, data.dev);
      st.ms_per_step = std::chrono::duration<double, std::milli>(t1 - t0).count() /
                       static_cast<double>(batches.size());
      metrics.epochs.push_back(st);
    }
  }

  metrics.final_dev_accuracy =
      metrics.epochs.empty() ? evaluate_accuracy(student, data.dev) : metrics.epochs.back().dev_accuracy;
  return metrics;
}

// Extraction pass: run the teacher over the training split once, compress
// every trace, and persist the records plus teacher logits.
inline uint64_t extract_store(const std::string& path, const Transformer& teacher,
                              const Dataset& data, const CompressionConfig& config,
                              int student_layers, bool rle_masks = false) {
  std::vector<FeatureRecord> records;
  records.reserve(data.train.size());
  NoGradGuard guard;
  for (const auto& sample : data.train) {
    auto trace = teacher.forward(sample);
    auto hsk = compress(trace, sample, config, student_layers);
    records.push_back(make_feature_record(sample.id, sample, hsk, trace.logits));
  }
  return write_store(path, records, config, teacher.digest(),
                     static_cast<uint32_t>(teacher.config().num_classes),
                     static_cast<uint32_t>(teacher.config().hidden_dim), rle_masks);
}

}  // namespace hskd
