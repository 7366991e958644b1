#pragma once

// Synthetic classification tasks with labels that are exact functions of the
// token content, so any accuracy shortfall is a modeling gap rather than
// label noise. Token id 0 is CLS, id 1 is SEP, content ids start at 2.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "hskd/common.hpp"
#include "hskd/model.hpp"

namespace hskd {

constexpr int kClsTokenId = 0;
constexpr int kSepTokenId = 1;
constexpr int kFirstContentId = 2;

enum class TaskKind { MajorityClass, PatternContainment, PairEntailment };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::MajorityClass: return "majority-class";
    case TaskKind::PatternContainment: return "pattern-containment";
    case TaskKind::PairEntailment: return "pair-entailment";
  }
  throw ContractError("unknown task kind");
}

inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "majority-class") return TaskKind::MajorityClass;
  if (s == "pattern-containment") return TaskKind::PatternContainment;
  if (s == "pair-entailment") return TaskKind::PairEntailment;
  throw ContractError("unknown task kind: " + s);
}

struct SyntheticTask {
  TaskKind kind = TaskKind::PairEntailment;
  int vocab_size = 32;
  int min_content_len = 4;   // content tokens per sequence (per segment for pairs)
  int max_content_len = 7;
  int num_classes = 2;
  int train_size = 256;
  int dev_size = 128;
  uint64_t seed = 1;

  void validate() const {
    require(vocab_size > kFirstContentId + num_classes, "task: vocab too small");
    require(min_content_len >= 1 && max_content_len >= min_content_len, "task: bad length range");
    require(num_classes >= 2, "task: need at least two classes");
    require(train_size >= 1 && dev_size >= 1, "task: split sizes must be positive");
    if (kind == TaskKind::PairEntailment)
      require(vocab_size - kFirstContentId >= 4,
              "task: pair task needs a few content tokens besides the marker");
    if (kind == TaskKind::PatternContainment)
      require(min_content_len >= 2, "task: pattern task needs at least two content tokens");
  }

  nlohmann::json to_json() const {
    return {{"kind", to_string(kind)},
            {"vocab_size", vocab_size},
            {"min_content_len", min_content_len},
            {"max_content_len", max_content_len},
            {"num_classes", num_classes},
            {"train_size", train_size},
            {"dev_size", dev_size},
            {"seed", seed}};
  }
  static SyntheticTask from_json(const nlohmann::json& j) {
    SyntheticTask t;
    t.kind = task_kind_from_string(j.at("kind").get<std::string>());
    t.vocab_size = j.at("vocab_size").get<int>();
    t.min_content_len = j.at("min_content_len").get<int>();
    t.max_content_len = j.at("max_content_len").get<int>();
    t.num_classes = j.at("num_classes").get<int>();
    t.train_size = j.at("train_size").get<int>();
    t.dev_size = j.at("dev_size").get<int>();
    t.seed = j.at("seed").get<uint64_t>();
    t.validate();
    return t;
  }

  // Worst-case sequence length this task can emit, for sizing max_seq_len.
  int max_sequence_length() const {
    if (kind == TaskKind::PairEntailment) return 3 + 2 * max_content_len;
    return 1 + max_content_len;
  }
};

struct Dataset {
  SyntheticTask task;
  std::vector<TokenSequence> train;
  std::vector<TokenSequence> dev;
};

// ---------------------------------------------------------------------------
// Label rules (pure functions of the tokens)
// ---------------------------------------------------------------------------

// Majority vote over content-token classes; class of a token is
// (id - first_content) mod num_classes, ties resolved to the lower class.
inline int majority_label(const TokenSequence& seq, int num_classes) {
  std::vector<int> counts(static_cast<size_t>(num_classes), 0);
  for (size_t i = 0; i < seq.token_ids.size(); ++i) {
    if (seq.marks[i] != Mark::Ordinary) continue;
    ++counts[static_cast<size_t>((seq.token_ids[i] - kFirstContentId) % num_classes)];
  }
  int best = 0;
  for (int c = 1; c < num_classes; ++c)
    if (counts[static_cast<size_t>(c)] > counts[static_cast<size_t>(best)]) best = c;
  return best;
}

// 1 iff the adjacent ordinary-token pair (first_content, first_content+1)
// occurs anywhere in the sequence.
inline int pattern_label(const TokenSequence& seq) {
  for (size_t i = 0; i + 1 < seq.token_ids.size(); ++i) {
    if (seq.marks[i] == Mark::Ordinary && seq.marks[i + 1] == Mark::Ordinary &&
        seq.token_ids[i] == kFirstContentId && seq.token_ids[i + 1] == kFirstContentId + 1)
      return 1;
  }
  return 0;
}

// 1 iff the marker token (the first content id) occurs in the second segment
// and not in the first. The same surface token flips the label depending on
// which side of the SEP it lands, so segment identity carries real signal.
inline int entailment_label(const TokenSequence& seq) {
  bool in_first = false, in_second = false;
  for (size_t i = 0; i < seq.token_ids.size(); ++i) {
    if (seq.marks[i] != Mark::Ordinary || seq.token_ids[i] != kFirstContentId) continue;
    (seq.segment_ids[i] == 0 ? in_first : in_second) = true;
  }
  return (in_second && !in_first) ? 1 : 0;
}

inline int label_of(const SyntheticTask& task, const TokenSequence& seq) {
  switch (task.kind) {
    case TaskKind::MajorityClass: return majority_label(seq, task.num_classes);
    case TaskKind::PatternContainment: return pattern_label(seq);
    case TaskKind::PairEntailment: return entailment_label(seq);
  }
  throw ContractError("unknown task kind");
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail {

inline int random_content_token(const SyntheticTask& task, Rng& rng) {
  return kFirstContentId +
         static_cast<int>(rng.below(static_cast<uint64_t>(task.vocab_size - kFirstContentId)));
}

inline TokenSequence raw_single_segment(const SyntheticTask& task, Rng& rng) {
  TokenSequence seq;
  const int len = task.min_content_len +
                  static_cast<int>(rng.below(static_cast<uint64_t>(
                      task.max_content_len - task.min_content_len + 1)));
  seq.token_ids.push_back(kClsTokenId);
  seq.segment_ids.push_back(0);
  seq.marks.push_back(Mark::Cls);
  for (int i = 0; i < len; ++i) {
    seq.token_ids.push_back(random_content_token(task, rng));
    seq.segment_ids.push_back(0);
    seq.marks.push_back(Mark::Ordinary);
  }
  return seq;
}

inline TokenSequence raw_pair(const SyntheticTask& task, Rng& rng, bool positive) {
  TokenSequence seq;
  auto push = [&seq](int tok, int segment, Mark m) {
    seq.token_ids.push_back(tok);
    seq.segment_ids.push_back(segment);
    seq.marks.push_back(m);
  };
  const auto seg_len = [&] {
    return task.min_content_len + static_cast<int>(rng.below(static_cast<uint64_t>(
                                      task.max_content_len - task.min_content_len + 1)));
  };
  std::vector<int> a(static_cast<size_t>(seg_len()));
  std::vector<int> b(static_cast<size_t>(seg_len()));
  for (auto& t : a) t = random_content_token(task, rng);
  for (auto& t : b) t = random_content_token(task, rng);
  if (positive) {
    for (auto& t : a)
      while (t == kFirstContentId) t = random_content_token(task, rng);
    b[rng.below(b.size())] = kFirstContentId;
  } else if (rng.canonical() < 0.5) {
    // hard negative: the marker sits in both segments, so only the segment
    // assignment separates this from a positive
    a[rng.below(a.size())] = kFirstContentId;
    b[rng.below(b.size())] = kFirstContentId;
  }
  push(kClsTokenId, 0, Mark::Cls);
  for (int t : a) push(t, 0, Mark::Ordinary);
  push(kSepTokenId, 0, Mark::Sep);
  for (int t : b) push(t, 1, Mark::Ordinary);
  push(kSepTokenId, 1, Mark::Sep);
  return seq;
}

}  // namespace detail

// Class-balanced split: sample targets round-robin and rejection-sample
// sequences until the label rule agrees.
inline std::vector<TokenSequence> generate_split(const SyntheticTask& task, int count,
                                                 Rng& rng, uint64_t first_id) {
  std::vector<TokenSequence> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int target = i % task.num_classes;
    TokenSequence seq;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 100000) throw ContractError("dataset: rejection sampling stalled");
      switch (task.kind) {
        case TaskKind::MajorityClass: seq = detail::raw_single_segment(task, rng); break;
        case TaskKind::PatternContainment: {
          seq = detail::raw_single_segment(task, rng);
          if (target == 1 && pattern_label(seq) == 0 && seq.length() >= 3) {
            // plant the motif at a random interior position
            const int pos = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(seq.length() - 2)));
            seq.token_ids[static_cast<size_t>(pos)] = kFirstContentId;
            seq.token_ids[static_cast<size_t>(pos + 1)] = kFirstContentId + 1;
          }
          break;
        }
        case TaskKind::PairEntailment: seq = detail::raw_pair(task, rng, target == 1); break;
      }
      if (label_of(task, seq) == target) break;
    }
    seq.label = label_of(task, seq);
    seq.id = first_id + static_cast<uint64_t>(i);
    out.push_back(std::move(seq));
  }
  return out;
}

inline Dataset gen_dataset(const SyntheticTask& task) {
  task.validate();
  Dataset d;
  d.task = task;
  Rng train_rng(mix_seed(task.seed, 0x7121));
  Rng dev_rng(mix_seed(task.seed, 0xDE7));
  d.train = generate_split(task, task.train_size, train_rng, 0);
  d.dev = generate_split(task, task.dev_size, dev_rng, 1ULL << 32);
  return d;
}

// ---------------------------------------------------------------------------
// File format: task.json plus one JSON object per line for each split.
// ---------------------------------------------------------------------------

inline nlohmann::json sequence_to_json(const TokenSequence& seq) {
  std::vector<int> marks(seq.marks.size());
  for (size_t i = 0; i < seq.marks.size(); ++i) marks[i] = static_cast<int>(seq.marks[i]);
  return {{"id", seq.id},
          {"label", seq.label},
          {"tokens", seq.token_ids},
          {"segments", seq.segment_ids},
          {"marks", marks}};
}

inline TokenSequence sequence_from_json(const nlohmann::json& j) {
  TokenSequence seq;
  seq.id = j.at("id").get<uint64_t>();
  seq.label = j.at("label").get<int>();
  seq.token_ids = j.at("tokens").get<std::vector<int>>();
  seq.segment_ids = j.at("segments").get<std::vector<int>>();
  for (int m : j.at("marks").get<std::vector<int>>()) seq.marks.push_back(static_cast<Mark>(m));
  return seq;
}

inline void write_split(const std::string& path, const std::vector<TokenSequence>& split) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const auto& seq : split) out << sequence_to_json(seq).dump() << "\n";
  if (!out) throw IoError("write failed: " + path);
}

inline std::vector<TokenSequence> read_split(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::vector<TokenSequence> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(sequence_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

inline void write_dataset(const std::string& dir, const Dataset& d) {
  std::ofstream meta(dir + "/task.json", std::ios::trunc);
  if (!meta) throw IoError("cannot open for writing: " + dir + "/task.json");
  meta << d.task.to_json().dump(2) << "\n";
  write_split(dir + "/train.jsonl", d.train);
  write_split(dir + "/dev.jsonl", d.dev);
}

inline Dataset read_dataset(const std::string& dir) {
  std::ifstream meta(dir + "/task.json");
  if (!meta) throw IoError("cannot open for reading: " + dir + "/task.json");
  Dataset d;
  d.task = SyntheticTask::from_json(nlohmann::json::parse(meta));
  d.train = read_split(dir + "/train.jsonl");
  d.dev = read_split(dir + "/dev.jsonl");
  return d;
}

}  // namespace hskd
