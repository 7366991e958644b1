#pragma once

// Experiment driver: sweeps of compression configurations across target
// knowledge amounts, baseline runs, aggregation, and the online/offline
// training throughput benchmark.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "hskd/common.hpp"
#include "hskd/compress.hpp"
#include "hskd/distill.hpp"

namespace hskd {

struct SweepTarget {
  double amount = 1.0;
  double tolerance_pct = 10.0;
};

struct SweepPlan {
  std::vector<SweepTarget> targets;
  int configs_per_target = 4;
  int repetitions = 3;
  uint64_t seed = 1;
  TrainSpec hsk_spec;
  TrainSpec pred_spec;
  CompressionConfig prototype;  // strategy selectors, mapping mode, l_top
  bool offline = true;
  std::string work_dir = ".";
  bool include_baselines = true;

  void validate() const {
    require(!targets.empty(), "sweep: no targets");
    require(configs_per_target >= 1, "sweep: configs_per_target must be positive");
    require(repetitions >= 1, "sweep: repetitions must be positive");
    hsk_spec.validate();
    pred_spec.validate();
  }
};

struct SweepRow {
  std::string group;      // "target:<amount>" or a baseline name
  std::string config_label;
  double target = 0.0;
  uint64_t seed = 0;
  double dev_accuracy = 0.0;
  double normalized_amount = 0.0;
  bool failed = false;
  std::string error;

  nlohmann::json to_json() const {
    return {{"group", group},
            {"config", config_label},
            {"target", target},
            {"seed", seed},
            {"dev_accuracy", dev_accuracy},
            {"normalized_amount", normalized_amount},
            {"failed", failed},
            {"error", error}};
  }
};

struct SweepAggregate {
  std::string group;
  int runs = 0;
  double avg = 0.0;
  double best = 0.0;
  double stddev = 0.0;

  nlohmann::json to_json() const {
    return {{"group", group}, {"runs", runs}, {"avg", avg}, {"best", best}, {"stddev", stddev}};
  }
};

struct SweepResults {
  std::vector<SweepRow> rows;
  std::vector<SweepAggregate> aggregates;

  nlohmann::json to_json() const {
    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& r : rows) rows_json.push_back(r.to_json());
    nlohmann::json agg_json = nlohmann::json::array();
    for (const auto& a : aggregates) agg_json.push_back(a.to_json());
    return {{"rows", rows_json}, {"aggregates", agg_json}};
  }

  const SweepAggregate& aggregate(const std::string& group) const {
    for (const auto& a : aggregates)
      if (a.group == group) return a;
    throw NotFoundError("sweep: no aggregate for group " + group);
  }
};

inline void write_sweep_csv(const std::string& path, const SweepResults& results) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "group,config,target,seed,dev_accuracy,normalized_amount,failed,error\n";
  for (const auto& r : results.rows) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    out << r.group << "," << r.config_label << "," << r.target << "," << r.seed << ","
        << r.dev_accuracy << "," << r.normalized_amount << "," << (r.failed ? 1 : 0) << ","
        << err << "\n";
  }
  out << "\ngroup,runs,avg,best,stddev\n";
  for (const auto& a : results.aggregates)
    out << a.group << "," << a.runs << "," << a.avg << "," << a.best << "," << a.stddev << "\n";
}

namespace detail {

struct PlannedRun {
  std::string group;
  std::string config_label;
  double target = 0.0;
  CompressionConfig config;
  bool prediction_only = false;
  int store_index = -1;  // shared extraction per distinct configuration
  uint64_t student_seed = 0;
  uint64_t train_seed = 0;
};

// Fixed-size worker pool over an indexed task list; results land by index so
// the output order never depends on scheduling.
inline void run_indexed(size_t count, int jobs, const std::function<void(size_t)>& fn) {
  if (jobs <= 1) {
    for (size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  const int n = std::min<int>(jobs, static_cast<int>(count));
  for (int t = 0; t < n; ++t)
    pool.emplace_back([&] {
      for (;;) {
        const size_t i = next.fetch_add(1);
        if (i >= count) return;
        fn(i);
      }
    });
  for (auto& th : pool) th.join();
}

}  // namespace detail

// Mean sequence length of the training split, the scale used to normalize
// knowledge amounts in reports.
inline double mean_train_length(const Dataset& data) {
  double s = 0.0;
  for (const auto& seq : data.train) s += seq.length();
  return s / static_cast<double>(data.train.size());
}

inline SweepResults run_sweep(const SweepPlan& plan, const Transformer& teacher,
                              const ModelConfig& student_cfg, const Dataset& data, int jobs = 1) {
  plan.validate();
  const int student_layers = student_cfg.num_layers;
  const double mean_len = mean_train_length(data);
  const int full_length = std::min<int>(kMaxLengthBudget, student_cfg.max_seq_len);

  // Full-budget reference configuration (prototype mapping) and the
  // uniform-map full baseline with the top teacher layer.
  CompressionConfig full_cfg = plan.prototype;
  full_cfg.n_depth = student_layers + 1;
  full_cfg.n_length = full_length;
  full_cfg.width_fraction = 1.0;
  full_cfg.length_strategy = LengthStrategy::Left;
  full_cfg.width_strategy = WidthStrategy::Uniform;
  CompressionConfig uniform_cfg = full_cfg;
  uniform_cfg.l_top = teacher.config().num_layers;

  std::vector<detail::PlannedRun> runs;
  std::vector<CompressionConfig> store_configs;
  auto add_config_runs = [&](const std::string& group, double target,
                             const CompressionConfig& cfg, bool prediction_only) {
    const int store_index = prediction_only ? -1 : static_cast<int>(store_configs.size());
    if (!prediction_only) store_configs.push_back(cfg);
    for (int rep = 0; rep < plan.repetitions; ++rep) {
      detail::PlannedRun run;
      run.group = group;
      run.config_label = prediction_only ? "prediction-only" : cfg.label();
      run.target = target;
      run.config = cfg;
      run.prediction_only = prediction_only;
      run.store_index = store_index;
      run.student_seed = mix_seed(plan.seed, 1000 + static_cast<uint64_t>(rep));
      run.train_seed = mix_seed(plan.seed, 2000 + static_cast<uint64_t>(rep));
      runs.push_back(run);
    }
  };

  for (size_t ti = 0; ti < plan.targets.size(); ++ti) {
    const auto& target = plan.targets[ti];
    auto sampled = sample_configs(target.amount, target.tolerance_pct, student_layers,
                                  plan.configs_per_target, mix_seed(plan.seed, 100 + ti),
                                  plan.prototype);
    const std::string group = "target:" + std::to_string(target.amount);
    for (const auto& cfg : sampled.configs) add_config_runs(group, target.amount, cfg, false);
  }
  if (plan.include_baselines) {
    add_config_runs("prediction-only", 0.0, plan.prototype, true);
    add_config_runs("full-tensor", 0.0, full_cfg, false);
    add_config_runs("uniform-full", 0.0, uniform_cfg, false);
  }

  // One extraction per distinct configuration, shared by every repetition. A
  // configuration whose extraction fails poisons only its own runs.
  std::vector<std::unique_ptr<StoreReader>> stores(store_configs.size());
  std::vector<std::string> store_errors(store_configs.size());
  if (plan.offline) {
    for (size_t i = 0; i < store_configs.size(); ++i) {
      const auto path = plan.work_dir + "/sweep_store_" + std::to_string(i) + ".hskf";
      try {
        extract_store(path, teacher, data, store_configs[i], student_layers);
        stores[i] = std::make_unique<StoreReader>(path);
      } catch (const std::exception& e) {
        store_errors[i] = e.what();
      }
    }
  }

  std::vector<SweepRow> rows(runs.size());
  detail::run_indexed(runs.size(), jobs, [&](size_t i) {
    const auto& run = runs[i];
    SweepRow row;
    row.group = run.group;
    row.config_label = run.config_label;
    row.target = run.target;
    row.seed = run.student_seed;
    row.normalized_amount =
        run.prediction_only
            ? 0.0
            : a_hsk(run.config, static_cast<int>(mean_len)) /
                  a_hsk_full(student_layers, static_cast<int>(mean_len));
    try {
      Transformer student(student_cfg, run.student_seed);
      TrainSpec hsk = plan.hsk_spec;
      TrainSpec pred = plan.pred_spec;
      hsk.seed = run.train_seed;
      pred.seed = run.train_seed;
      if (run.prediction_only) hsk.num_epochs = 0;
      DistillMetrics metrics;
      if (run.prediction_only || !plan.offline) {
        metrics = distill(student, DistillSource::online(teacher), run.config, data, hsk, pred);
      } else {
        const auto si = static_cast<size_t>(run.store_index);
        if (!stores[si]) throw ContractError("feature extraction failed: " + store_errors[si]);
        metrics = distill(student, DistillSource::offline(*stores[si]), run.config, data, hsk, pred);
      }
      row.dev_accuracy = metrics.final_dev_accuracy;
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
    }
    rows[i] = std::move(row);
  });

  SweepResults results;
  results.rows = std::move(rows);

  // Aggregates pool every successful run in a group.
  std::vector<std::string> group_order;
  for (const auto& r : results.rows)
    if (std::find(group_order.begin(), group_order.end(), r.group) == group_order.end())
      group_order.push_back(r.group);
  for (const auto& group : group_order) {
    SweepAggregate agg;
    agg.group = group;
    double sum = 0.0, best = 0.0;
    std::vector<double> vals;
    for (const auto& r : results.rows) {
      if (r.group != group || r.failed) continue;
      vals.push_back(r.dev_accuracy);
      sum += r.dev_accuracy;
      best = std::max(best, r.dev_accuracy);
    }
    agg.runs = static_cast<int>(vals.size());
    if (!vals.empty()) {
      agg.avg = sum / static_cast<double>(vals.size());
      agg.best = best;
      double var = 0.0;
      for (double v : vals) var += (v - agg.avg) * (v - agg.avg);
      agg.stddev = std::sqrt(var / static_cast<double>(vals.size()));
    }
    results.aggregates.push_back(agg);
  }
  return results;
}

// ---------------------------------------------------------------------------
// Training throughput benchmark
// ---------------------------------------------------------------------------

struct BenchResult {
  std::string device_label;
  int steps = 0;
  int warmup = 0;
  double online_steps_per_sec = 0.0;
  double offline_steps_per_sec = 0.0;
  double speedup = 0.0;

  nlohmann::json to_json() const {
    return {{"device_label", device_label},
            {"steps", steps},
            {"warmup", warmup},
            {"online_steps_per_sec", online_steps_per_sec},
            {"offline_steps_per_sec", offline_steps_per_sec},
            {"speedup", speedup}};
  }
};

// Wall-clock of `steps` phase-1 training steps after `warmup` unmeasured
// ones. The batch schedule cycles the training split deterministically.
inline double measure_steps_per_sec(const DistillSource& source, const CompressionConfig& config,
                                    const ModelConfig& student_cfg, const Dataset& data,
                                    const TrainSpec& spec, int steps, int warmup) {
  Transformer student(student_cfg, spec.seed);
  const int student_layers = student_cfg.num_layers;
  int teacher_dim = source.is_online() ? source.teacher->config().hidden_dim
                                       : static_cast<int>(source.store->header().teacher_dim);
  ProjectionSet projections(student_cfg.hidden_dim, teacher_dim, spec.seed);
  for (int l : select_depth(student_layers, config.n_depth)) (void)projections.projection(l);
  std::vector<Tensor*> params = student.parameters();
  for (Tensor* w : projections.parameters()) params.push_back(w);
  Adam opt(params);

  size_t cursor = 0;
  auto run_step = [&] {
    opt.zero_grad();
    Tensor loss;
    for (int b = 0; b < spec.batch_size; ++b) {
      const auto& sample = data.train[cursor];
      cursor = (cursor + 1) % data.train.size();
      CompressedHsk hsk;
      if (source.is_online()) {
        NoGradGuard guard;
        auto trace = source.teacher->forward(sample);
        hsk = compress(trace, sample, config, student_layers);
      } else {
        hsk = source.store->read_record(sample.id).hsk;
      }
      auto trace = student.forward(sample);
      auto sample_loss = hsk_loss(trace, hsk, projections, spec.mask_application);
      loss = loss.defined() ? add(loss, sample_loss) : sample_loss;
    }
    loss = scale(loss, 1.0f / static_cast<float>(spec.batch_size));
    loss.backward();
    opt.step(spec.learning_rate);
  };

  for (int i = 0; i < warmup; ++i) run_step();
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < steps; ++i) run_step();
  const auto t1 = std::chrono::steady_clock::now();
  const double seconds = std::chrono::duration<double>(t1 - t0).count();
  return static_cast<double>(steps) / seconds;
}

inline BenchResult bench_timing(const Transformer& teacher, const ModelConfig& student_cfg,
                                const Dataset& data, const CompressionConfig& config,
                                const TrainSpec& spec, const std::string& store_path,
                                const std::string& device_label, int steps = 500,
                                int warmup = 50) {
  extract_store(store_path, teacher, data, config, student_cfg.num_layers);
  StoreReader store(store_path);
  BenchResult res;
  res.device_label = device_label;
  res.steps = steps;
  res.warmup = warmup;
  res.online_steps_per_sec = measure_steps_per_sec(DistillSource::online(teacher), config,
                                                   student_cfg, data, spec, steps, warmup);
  res.offline_steps_per_sec = measure_steps_per_sec(DistillSource::offline(store), config,
                                                    student_cfg, data, spec, steps, warmup);
  res.speedup = res.offline_steps_per_sec / res.online_steps_per_sec;
  return res;
}

}  // namespace hskd
