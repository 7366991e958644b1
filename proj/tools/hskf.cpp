// hskf: experiment driver for hidden-state knowledge distillation.
//
// Subcommands: gen-data, train-teacher, extract, distill, sweep, bench,
// inspect, sep-stats. Exit codes: 0 success, 2 contract error, 3 I/O error.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>

#include "hskd/compress.hpp"
#include "hskd/data.hpp"
#include "hskd/distill.hpp"
#include "hskd/feature_store.hpp"
#include "hskd/model.hpp"
#include "hskd/sweep.hpp"
#include "hskd/trainer.hpp"

namespace {

using nlohmann::json;

struct GlobalOpts {
  uint64_t seed = 1;
  std::string out = ".";
  std::string config_path;

  json config() const {
    if (config_path.empty()) return json::object();
    std::ifstream in(config_path);
    if (!in) throw hskd::IoError("cannot open config: " + config_path);
    return json::parse(in);
  }
};

hskd::CompressionConfig compress_config_from(const json& cfg, uint64_t seed) {
  json section;
  if (cfg.contains("compress"))
    section = cfg.at("compress");
  else if (cfg.contains("n_depth"))
    section = cfg;  // the file is the flat config object itself
  else
    throw hskd::ContractError("no compression configuration given (expected a JSON file with "
                              "n_depth/n_length/width_fraction/... fields)");
  if (!section.contains("seed")) section["seed"] = seed;
  return hskd::CompressionConfig::from_json(section);
}

hskd::TrainSpec train_spec_from(const json& cfg, const std::string& key, hskd::TrainSpec fallback,
                                uint64_t seed) {
  fallback.seed = seed;
  if (!cfg.contains(key)) return fallback;
  json section = cfg.at(key);
  if (!section.contains("seed")) section["seed"] = seed;
  return hskd::TrainSpec::from_json(section);
}

struct ModelFlags {
  int layers = 0;
  int hidden_dim = 0;
  int heads = 0;
  int ffn_dim = 0;

  void add(CLI::App* cmd, const std::string& prefix) {
    cmd->add_option("--" + prefix + "layers", layers, "transformer layer count");
    cmd->add_option("--" + prefix + "hidden-dim", hidden_dim, "hidden width");
    cmd->add_option("--" + prefix + "heads", heads, "attention heads");
    cmd->add_option("--" + prefix + "ffn-dim", ffn_dim, "feed-forward width");
  }
  hskd::ModelConfig apply(hskd::ModelConfig base) const {
    if (layers > 0) base.num_layers = layers;
    if (hidden_dim > 0) base.hidden_dim = hidden_dim;
    if (heads > 0) base.num_heads = heads;
    if (ffn_dim > 0) base.ffn_dim = ffn_dim;
    return base;
  }
};

hskd::ModelConfig model_config_for(const hskd::SyntheticTask& task, const json& cfg,
                                   const std::string& key, const ModelFlags& flags,
                                   hskd::ModelConfig defaults) {
  defaults.vocab_size = task.vocab_size;
  defaults.num_classes = task.num_classes;
  defaults.max_seq_len = task.max_sequence_length() + 1;
  defaults.num_segments = 2;
  if (cfg.contains(key)) defaults = hskd::ModelConfig::from_json(cfg.at(key));
  return flags.apply(defaults);
}

void ensure_out_dir(const std::string& out) {
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw hskd::IoError("cannot create output directory: " + out);
}

// Desk-scale defaults: teacher well above the student but trainable in
// minutes on a CPU.
hskd::ModelConfig default_teacher() {
  hskd::ModelConfig cfg;
  cfg.num_layers = 8;
  cfg.hidden_dim = 64;
  cfg.num_heads = 4;
  cfg.ffn_dim = 256;
  return cfg;
}
hskd::ModelConfig default_student() {
  hskd::ModelConfig cfg;
  cfg.num_layers = 4;
  cfg.hidden_dim = 32;
  cfg.num_heads = 2;
  cfg.ffn_dim = 128;
  return cfg;
}

int run(int argc, char** argv) {
  CLI::App app{"hidden-state knowledge distillation toolkit"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--seed", g.seed, "global random seed")->capture_default_str();
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_option("--config", g.config_path, "JSON config file");

  // ---- gen-data -----------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic task dataset");
  std::string task_name = "pair-entailment";
  hskd::SyntheticTask task;
  gen->add_option("--task", task_name, "majority-class | pattern-containment | pair-entailment")
      ->capture_default_str();
  gen->add_option("--vocab-size", task.vocab_size)->capture_default_str();
  gen->add_option("--min-len", task.min_content_len, "content tokens per segment, lower bound")
      ->capture_default_str();
  gen->add_option("--max-len", task.max_content_len, "content tokens per segment, upper bound")
      ->capture_default_str();
  gen->add_option("--num-classes", task.num_classes)->capture_default_str();
  gen->add_option("--train-size", task.train_size)->capture_default_str();
  gen->add_option("--dev-size", task.dev_size)->capture_default_str();
  gen->callback([&] {
    task.kind = hskd::task_kind_from_string(task_name);
    task.seed = g.seed;
    ensure_out_dir(g.out);
    auto data = hskd::gen_dataset(task);
    hskd::write_dataset(g.out, data);
    std::cout << json{{"out", g.out},
                      {"train_size", data.train.size()},
                      {"dev_size", data.dev.size()}}
                     .dump(2)
              << "\n";
  });

  // ---- train-teacher --------------------------------------------------------
  auto* tt = app.add_subcommand("train-teacher", "fine-tune a teacher on a dataset");
  std::string tt_data;
  ModelFlags tt_flags;
  double tt_lr = 3e-3;
  int tt_epochs = 20;
  int tt_batch = 16;
  std::string tt_schedule = "constant";
  tt->add_option("--data", tt_data, "dataset directory")->required();
  tt_flags.add(tt, "");
  tt->add_option("--lr", tt_lr)->capture_default_str();
  tt->add_option("--epochs", tt_epochs)->capture_default_str();
  tt->add_option("--batch-size", tt_batch)->capture_default_str();
  tt->add_option("--schedule", tt_schedule, "constant | linear_decay")->capture_default_str();
  tt->callback([&] {
    auto cfg_json = g.config();
    auto data = hskd::read_dataset(tt_data);
    auto model_cfg = model_config_for(data.task, cfg_json, "model", tt_flags, default_teacher());
    hskd::TrainSpec spec;
    spec.phase = "prediction";
    spec.learning_rate = tt_lr;
    spec.schedule = hskd::schedule_from_string(tt_schedule);
    spec.batch_size = tt_batch;
    spec.num_epochs = tt_epochs;
    spec.max_seq_len = model_cfg.max_seq_len;
    spec = train_spec_from(cfg_json, "train", spec, g.seed);
    ensure_out_dir(g.out);

    hskd::Transformer model(model_cfg, g.seed);
    auto history = hskd::train_classifier(model, data, spec);
    model.save(g.out + "/teacher.ckpt");
    hskd::write_metrics_csv(g.out + "/teacher_metrics.csv", history);
    std::cout << json{{"checkpoint", g.out + "/teacher.ckpt"},
                      {"dev_accuracy", history.empty() ? 0.0 : history.back().dev_accuracy},
                      {"epochs", history.size()}}
                     .dump(2)
              << "\n";
  });

  // ---- extract --------------------------------------------------------------
  auto* ex = app.add_subcommand("extract", "run the teacher once and store compressed features");
  std::string ex_data, ex_teacher;
  int ex_student_layers = 4;
  bool ex_rle = false;
  ex->add_option("--data", ex_data, "dataset directory")->required();
  ex->add_option("--teacher", ex_teacher, "teacher checkpoint")->required();
  ex->add_option("--student-layers", ex_student_layers, "student depth the features will pair with")
      ->capture_default_str();
  ex->add_flag("--rle", ex_rle, "run-length encode dynamic masks");
  ex->callback([&] {
    auto cfg_json = g.config();
    auto data = hskd::read_dataset(ex_data);
    auto teacher = hskd::Transformer::load(ex_teacher);
    auto ccfg = compress_config_from(cfg_json, g.seed);
    ensure_out_dir(g.out);
    const std::string path = g.out + "/features.hskf";
    const auto bytes = hskd::extract_store(path, teacher, data, ccfg, ex_student_layers, ex_rle);
    hskd::StoreReader reader(path);
    std::cout << json{{"store", path},
                      {"bytes", bytes},
                      {"records", reader.header().record_count},
                      {"size_report", reader.size_report().to_json()}}
                     .dump(2)
              << "\n";
  });

  // ---- distill ---------------------------------------------------------------
  auto* di = app.add_subcommand("distill", "train a student against teacher knowledge");
  std::string di_data, di_teacher, di_store, di_mode = "online";
  ModelFlags di_flags;
  di->add_option("--data", di_data, "dataset directory")->required();
  di->add_option("--mode", di_mode, "online | offline")->capture_default_str();
  di->add_option("--teacher", di_teacher, "teacher checkpoint (online mode)");
  di->add_option("--store", di_store, "feature store (offline mode)");
  di_flags.add(di, "student-");
  di->callback([&] {
    auto cfg_json = g.config();
    auto data = hskd::read_dataset(di_data);
    auto student_cfg =
        model_config_for(data.task, cfg_json, "student_model", di_flags, default_student());

    hskd::TrainSpec hsk_default;
    hsk_default.phase = "hsk";
    hsk_default.learning_rate = 3e-3;
    hsk_default.schedule = hskd::Schedule::Constant;
    hsk_default.batch_size = 8;
    hsk_default.num_epochs = 10;
    hsk_default.max_seq_len = student_cfg.max_seq_len;
    auto hsk_spec = train_spec_from(cfg_json, "hsk", hsk_default, g.seed);
    hskd::TrainSpec pred_default = hsk_default;
    pred_default.phase = "prediction";
    pred_default.learning_rate = 1e-3;
    pred_default.schedule = hskd::Schedule::LinearDecay;
    pred_default.num_epochs = 5;
    auto pred_spec = train_spec_from(cfg_json, "prediction", pred_default, g.seed);
    auto ccfg = compress_config_from(cfg_json, g.seed);
    ensure_out_dir(g.out);

    hskd::Transformer student(student_cfg, g.seed);
    hskd::DistillMetrics metrics;
    if (di_mode == "online") {
      if (di_teacher.empty()) throw hskd::ContractError("online mode needs --teacher");
      auto teacher = hskd::Transformer::load(di_teacher);
      metrics = hskd::distill(student, hskd::DistillSource::online(teacher), ccfg, data, hsk_spec,
                              pred_spec);
    } else if (di_mode == "offline") {
      if (di_store.empty()) throw hskd::ContractError("offline mode needs --store");
      hskd::StoreReader store(di_store);
      metrics = hskd::distill(student, hskd::DistillSource::offline(store), ccfg, data, hsk_spec,
                              pred_spec);
    } else {
      throw hskd::ContractError("unknown mode: " + di_mode);
    }
    student.save(g.out + "/student.ckpt");
    hskd::write_metrics_csv(g.out + "/student_metrics.csv", metrics.epochs);
    std::cout << json{{"checkpoint", g.out + "/student.ckpt"},
                      {"dev_accuracy", metrics.final_dev_accuracy},
                      {"metrics_csv", g.out + "/student_metrics.csv"}}
                     .dump(2)
              << "\n";
  });

  // ---- sweep -----------------------------------------------------------------
  auto* sw = app.add_subcommand("sweep", "distill across sampled compression configurations");
  std::string sw_data, sw_teacher;
  ModelFlags sw_flags;
  std::vector<double> sw_targets = {1.0, 3.0, 5.0};
  double sw_tolerance = 10.0;
  int sw_configs = 4, sw_reps = 3, sw_jobs = 1, sw_l_top = 0;
  bool sw_online = false;
  int sw_hsk_epochs = 10, sw_pred_epochs = 5;
  sw->add_option("--data", sw_data, "dataset directory")->required();
  sw->add_option("--teacher", sw_teacher, "teacher checkpoint")->required();
  sw_flags.add(sw, "student-");
  sw->add_option("--targets", sw_targets, "knowledge amounts to sweep")->capture_default_str();
  sw->add_option("--tolerance-pct", sw_tolerance, "band half-width around each target, percent")
      ->capture_default_str();
  sw->add_option("--configs-per-target", sw_configs)->capture_default_str();
  sw->add_option("--repetitions", sw_reps, "seeds per configuration")->capture_default_str();
  sw->add_option("--jobs", sw_jobs, "worker threads")->capture_default_str();
  sw->add_option("--l-top", sw_l_top, "teacher layer paired with the top student layer");
  sw->add_option("--hsk-epochs", sw_hsk_epochs)->capture_default_str();
  sw->add_option("--pred-epochs", sw_pred_epochs)->capture_default_str();
  sw->add_flag("--online", sw_online, "compress on the fly instead of extracting stores");
  sw->callback([&] {
    auto cfg_json = g.config();
    auto data = hskd::read_dataset(sw_data);
    auto teacher = hskd::Transformer::load(sw_teacher);
    auto student_cfg =
        model_config_for(data.task, cfg_json, "student_model", sw_flags, default_student());
    ensure_out_dir(g.out);

    hskd::SweepPlan plan;
    for (double t : sw_targets) plan.targets.push_back({t, sw_tolerance});
    plan.configs_per_target = sw_configs;
    plan.repetitions = sw_reps;
    plan.seed = g.seed;
    plan.offline = !sw_online;
    plan.work_dir = g.out;
    plan.prototype.l_top = sw_l_top > 0 ? sw_l_top : std::max(1, teacher.config().num_layers - 2);
    if (cfg_json.contains("compress"))
      plan.prototype = hskd::CompressionConfig::from_json(cfg_json.at("compress"));

    hskd::TrainSpec hsk_default;
    hsk_default.phase = "hsk";
    hsk_default.learning_rate = 3e-3;
    hsk_default.batch_size = 8;
    hsk_default.num_epochs = sw_hsk_epochs;
    hsk_default.max_seq_len = student_cfg.max_seq_len;
    plan.hsk_spec = train_spec_from(cfg_json, "hsk", hsk_default, g.seed);
    hskd::TrainSpec pred_default = hsk_default;
    pred_default.phase = "prediction";
    pred_default.learning_rate = 1e-3;
    pred_default.schedule = hskd::Schedule::LinearDecay;
    pred_default.num_epochs = sw_pred_epochs;
    plan.pred_spec = train_spec_from(cfg_json, "prediction", pred_default, g.seed);

    auto results = hskd::run_sweep(plan, teacher, student_cfg, data, sw_jobs);
    hskd::write_sweep_csv(g.out + "/sweep.csv", results);
    std::ofstream js(g.out + "/sweep.json", std::ios::trunc);
    js << results.to_json().dump(2) << "\n";
    std::cout << results.to_json()["aggregates"].dump(2) << "\n";
  });

  // ---- bench -----------------------------------------------------------------
  auto* be = app.add_subcommand("bench", "time online vs offline distillation steps");
  std::string be_data, be_teacher, be_label = "cpu";
  ModelFlags be_flags;
  int be_steps = 500, be_warmup = 50, be_batch = 8;
  be->add_option("--data", be_data, "dataset directory")->required();
  be->add_option("--teacher", be_teacher, "teacher checkpoint")->required();
  be_flags.add(be, "student-");
  be->add_option("--steps", be_steps)->capture_default_str();
  be->add_option("--warmup", be_warmup)->capture_default_str();
  be->add_option("--batch-size", be_batch)->capture_default_str();
  be->add_option("--device-label", be_label)->capture_default_str();
  be->callback([&] {
    auto cfg_json = g.config();
    auto data = hskd::read_dataset(be_data);
    auto teacher = hskd::Transformer::load(be_teacher);
    auto student_cfg =
        model_config_for(data.task, cfg_json, "student_model", be_flags, default_student());
    auto ccfg = compress_config_from(cfg_json, g.seed);
    ensure_out_dir(g.out);
    hskd::TrainSpec spec;
    spec.learning_rate = 1e-3;
    spec.batch_size = be_batch;
    spec.seed = g.seed;
    spec.max_seq_len = student_cfg.max_seq_len;
    auto res = hskd::bench_timing(teacher, student_cfg, data, ccfg, spec,
                                  g.out + "/bench_features.hskf", be_label, be_steps, be_warmup);
    std::ofstream js(g.out + "/bench.json", std::ios::trunc);
    js << res.to_json().dump(2) << "\n";
    std::cout << res.to_json().dump(2) << "\n";
  });

  // ---- inspect ---------------------------------------------------------------
  auto* in = app.add_subcommand("inspect", "dump a feature store header and size report");
  std::string in_store;
  in->add_option("--store", in_store, "feature store path")->required();
  in->callback([&] {
    hskd::StoreReader reader(in_store);
    std::cout << json{{"header", reader.header().to_json()},
                      {"size_report", reader.size_report().to_json()}}
                     .dump(2)
              << "\n";
  });

  // ---- sep-stats -------------------------------------------------------------
  auto* ss = app.add_subcommand("sep-stats", "per-layer SEP attention-rank fractions");
  std::string ss_data, ss_teacher, ss_split = "train";
  ss->add_option("--data", ss_data, "dataset directory")->required();
  ss->add_option("--teacher", ss_teacher, "teacher checkpoint")->required();
  ss->add_option("--split", ss_split, "train | dev")->capture_default_str();
  ss->callback([&] {
    auto data = hskd::read_dataset(ss_data);
    auto teacher = hskd::Transformer::load(ss_teacher);
    const auto& split = ss_split == "dev" ? data.dev : data.train;
    auto stats = hskd::sep_rank_stats(split, teacher);
    json layers = json::array();
    for (size_t l = 0; l < stats.top1_fraction.size(); ++l)
      layers.push_back({{"layer", l + 1},
                        {"top1_fraction", stats.top1_fraction[l]},
                        {"top3_fraction", stats.top3_fraction[l]}});
    std::cout << layers.dump(2) << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const hskd::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const hskd::ContractError& e) {
    std::cerr << "contract error: " << e.what() << "\n";
    return 2;
  } catch (const hskd::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
