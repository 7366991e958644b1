#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "hskd/common.hpp"
#include "hskd/data.hpp"
#include "hskd/model.hpp"
#include "hskd/tensor.hpp"

namespace hskd {

enum class Schedule { Constant, LinearDecay };

inline std::string to_string(Schedule s) {
  return s == Schedule::Constant ? "constant" : "linear_decay";
}
inline Schedule schedule_from_string(const std::string& s) {
  if (s == "constant") return Schedule::Constant;
  if (s == "linear_decay") return Schedule::LinearDecay;
  throw ContractError("unknown schedule: " + s);
}

enum class MaskApplication { BothSides, TeacherOnly };

inline std::string to_string(MaskApplication m) {
  return m == MaskApplication::BothSides ? "both_sides" : "teacher_only";
}
inline MaskApplication mask_application_from_string(const std::string& s) {
  if (s == "both_sides") return MaskApplication::BothSides;
  if (s == "teacher_only") return MaskApplication::TeacherOnly;
  throw ContractError("unknown mask_application: " + s);
}

struct TrainSpec {
  std::string phase = "hsk";  // "hsk" or "prediction"
  double learning_rate = 1e-3;
  Schedule schedule = Schedule::Constant;
  int batch_size = 8;
  int max_seq_len = 32;
  int num_epochs = 5;
  uint64_t seed = 1;
  MaskApplication mask_application = MaskApplication::BothSides;

  void validate() const {
    require(phase == "hsk" || phase == "prediction", "train spec: unknown phase");
    require(learning_rate >= 0.0, "train spec: learning rate must be non-negative");
    require(batch_size >= 1, "train spec: batch size must be positive");
    require(max_seq_len >= 1, "train spec: max_seq_len must be positive");
    require(num_epochs >= 0, "train spec: epochs must be non-negative");
  }

  nlohmann::json to_json() const {
    return {{"phase", phase},
            {"learning_rate", learning_rate},
            {"schedule", to_string(schedule)},
            {"batch_size", batch_size},
            {"max_seq_len", max_seq_len},
            {"num_epochs", num_epochs},
            {"seed", seed},
            {"mask_application", to_string(mask_application)}};
  }
  static TrainSpec from_json(const nlohmann::json& j) {
    TrainSpec s;
    s.phase = j.value("phase", "hsk");
    s.learning_rate = j.at("learning_rate").get<double>();
    s.schedule = schedule_from_string(j.value("schedule", "constant"));
    s.batch_size = j.at("batch_size").get<int>();
    s.max_seq_len = j.value("max_seq_len", 32);
    s.num_epochs = j.at("num_epochs").get<int>();
    s.seed = j.value("seed", uint64_t(1));
    s.mask_application = mask_application_from_string(j.value("mask_application", "both_sides"));
    s.validate();
    return s;
  }
};

inline double scheduled_lr(Schedule s, double base, int step, int total_steps) {
  if (s == Schedule::Constant || total_steps <= 0) return base;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return base * std::max(0.0, 1.0 - frac);
}

class Adam {
 public:
  explicit Adam(std::vector<Tensor*> params, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i]->numel(), 0.0f);
      v_[i].assign(params_[i]->numel(), 0.0f);
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
      auto* p = params_[i];
      if (!p->has_grad()) continue;
      auto vals = p->raw_data();
      auto grads = p->grad();
      for (size_t k = 0; k < vals.size(); ++k) {
        const double g = static_cast<double>(grads[k]);
        const double m = beta1_ * m_[i][k] + (1.0 - beta1_) * g;
        const double v = beta2_ * v_[i][k] + (1.0 - beta2_) * g * g;
        m_[i][k] = static_cast<float>(m);
        v_[i][k] = static_cast<float>(v);
        vals[k] -= static_cast<float>(lr * (m / bc1) / (std::sqrt(v / bc2) + eps_));
      }
    }
  }

 private:
  std::vector<Tensor*> params_;
  double beta1_, beta2_, eps_;
  std::vector<std::vector<float>> m_, v_;
  int64_t t_ = 0;
};

// Cross-entropy of a predicted logit row against an explicit target
// distribution (soft labels and one-hot labels go through the same path).
inline Tensor cross_entropy_soft(const Tensor& logits, const Tensor& target_probs) {
  if (logits.numel() != target_probs.numel())
    throw ContractError("cross_entropy: class counts disagree");
  auto lsm = log_softmax_rows(logits);
  return scale(sum_all(mul(target_probs, lsm)), -1.0f);
}

inline Tensor one_hot_row(int label, int num_classes) {
  auto t = Tensor::zeros({1, num_classes});
  t.raw_data()[static_cast<size_t>(label)] = 1.0f;
  return t;
}

struct EpochStats {
  int epoch = 0;
  std::string phase;
  double mean_loss = 0.0;
  double dev_accuracy = 0.0;
  double ms_per_step = 0.0;
};

inline double evaluate_accuracy(const Transformer& model,
                                const std::vector<TokenSequence>& samples) {
  if (samples.empty()) throw ContractError("evaluate: empty sample set");
  int hits = 0;
  for (const auto& s : samples)
    if (model.predict(s) == s.label) ++hits;
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

namespace detail {

inline std::vector<std::vector<size_t>> make_batches(size_t n, int batch_size, Rng& rng) {
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<size_t>> batches;
  for (size_t start = 0; start < n; start += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(n, start + static_cast<size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<long>(start),
                         order.begin() + static_cast<long>(end));
  }
  return batches;
}

}  // namespace detail

// Supervised fine-tuning of the classifier (the teacher-producing step).
// Mini-batch Adam over the hard labels; per-epoch dev accuracy recorded.
inline std::vector<EpochStats> train_classifier(Transformer& model, const Dataset& data,
                                                const TrainSpec& spec) {
  spec.validate();
  require(!data.train.empty(), "train: dataset is empty");
  for (const auto& s : data.train)
    require(s.length() <= spec.max_seq_len, "train: sequence exceeds spec max_seq_len");

  Adam opt(model.parameters());
  Rng shuffle_rng(mix_seed(spec.seed, 0x5AFF));
  Rng dropout_rng(mix_seed(spec.seed, 0xD909));
  const int steps_per_epoch =
      static_cast<int>((data.train.size() + static_cast<size_t>(spec.batch_size) - 1) /
                       static_cast<size_t>(spec.batch_size));
  const int total_steps = steps_per_epoch * spec.num_epochs;
  int step = 0;
  std::vector<EpochStats> history;

  for (int epoch = 0; epoch < spec.num_epochs; ++epoch) {
    auto batches = detail::make_batches(data.train.size(), spec.batch_size, shuffle_rng);
    double loss_sum = 0.0;
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& batch : batches) {
      opt.zero_grad();
      Tensor loss;
      for (size_t idx : batch) {
        const auto& sample = data.train[idx];
        auto trace = model.forward(sample, &dropout_rng);
        auto sample_loss =
            cross_entropy_soft(trace.logits, one_hot_row(sample.label, model.config().num_classes));
        loss = loss.defined() ? add(loss, sample_loss) : sample_loss;
      }
      loss = scale(loss, 1.0f / static_cast<float>(batch.size()));
      const double loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value))
        throw NumericError("train: loss diverged at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(step));
      loss.backward();
      opt.step(scheduled_lr(spec.schedule, spec.learning_rate, step, total_steps));
      loss_sum += loss_value;
      ++step;
    }
    const auto t1 = std::chrono::steady_clock::now();
    EpochStats st;
    st.epoch = epoch;
    st.phase = "classifier";
    st.mean_loss = loss_sum / static_cast<double>(batches.size());
    st.dev_accuracy = evaluate_accuracy(model, data.dev);
    st.ms_per_step = std::chrono::duration<double, std::milli>(t1 - t0).count() /
                     static_cast<double>(batches.size());
    history.push_back(st);
  }
  return history;
}

}  // namespace hskd
