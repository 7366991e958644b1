#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "hskd/data.hpp"
#include "hskd/model.hpp"
#include "hskd/trainer.hpp"

using namespace hskd;

namespace {

TokenSequence make_seq(std::vector<int> tokens, std::vector<int> segments,
                       std::vector<Mark> marks, int label = 0) {
  TokenSequence s;
  s.token_ids = std::move(tokens);
  s.segment_ids = std::move(segments);
  s.marks = std::move(marks);
  s.label = label;
  return s;
}

ModelConfig tiny_config(int layers = 2, int d = 8, int heads = 2) {
  ModelConfig cfg;
  cfg.num_layers = layers;
  cfg.hidden_dim = d;
  cfg.num_heads = heads;
  cfg.ffn_dim = 2 * d;
  cfg.vocab_size = 12;
  cfg.max_seq_len = 10;
  cfg.num_segments = 2;
  cfg.num_classes = 2;
  return cfg;
}

void zero_tensor(Tensor& t) {
  for (auto& v : t.raw_data()) v = 0.0f;
}

}  // namespace

TEST_CASE("embed is the sum of the three lookups") {
  auto cfg = tiny_config(1, 4, 1);
  Transformer model(cfg, 42);
  auto seq = make_seq({0, 5, 7}, {0, 0, 0}, {Mark::Cls, Mark::Ordinary, Mark::Ordinary});

  SUBCASE("token table alone once position/segment tables are zeroed") {
    zero_tensor(model.position_embedding());
    zero_tensor(model.segment_embedding());
    auto e = model.embed(seq);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 4; ++j)
        CHECK(e.at(i, j) == model.token_embedding().at(seq.token_ids[static_cast<size_t>(i)], j));
  }

  SUBCASE("permuting tokens permutes rows identically") {
    zero_tensor(model.position_embedding());
    zero_tensor(model.segment_embedding());
    auto e1 = model.embed(seq);
    auto seq2 = make_seq({0, 7, 5}, {0, 0, 0}, {Mark::Cls, Mark::Ordinary, Mark::Ordinary});
    auto e2 = model.embed(seq2);
    for (int j = 0; j < 4; ++j) {
      CHECK(e1.at(1, j) == e2.at(2, j));
      CHECK(e1.at(2, j) == e2.at(1, j));
    }
  }

  SUBCASE("manual lookup-and-add for a 2-token sequence") {
    auto seq2 = make_seq({0, 3}, {0, 1}, {Mark::Cls, Mark::Sep});
    auto e = model.embed(seq2);
    for (int j = 0; j < 4; ++j) {
      const float expect0 = model.token_embedding().at(0, j) + model.position_embedding().at(0, j) +
                            model.segment_embedding().at(0, j);
      const float expect1 = model.token_embedding().at(3, j) + model.position_embedding().at(1, j) +
                            model.segment_embedding().at(1, j);
      CHECK(e.at(0, j) == expect0);
      CHECK(e.at(1, j) == expect1);
    }
  }

  SUBCASE("out-of-range ids are rejected") {
    auto bad = make_seq({0, 99}, {0, 0}, {Mark::Cls, Mark::Ordinary});
    CHECK_THROWS_AS((void)model.embed(bad), ContractError);
  }
}

TEST_CASE("forward trace shapes and attention stochasticity") {
  auto cfg = tiny_config(2, 8, 2);
  Transformer model(cfg, 7);
  auto seq = make_seq({0, 4, 5, 6, 1}, {0, 0, 0, 0, 0},
                      {Mark::Cls, Mark::Ordinary, Mark::Ordinary, Mark::Ordinary, Mark::Sep});
  NoGradGuard guard;
  auto trace = model.forward(seq);

  REQUIRE(trace.hidden.size() == 3);
  for (const auto& h : trace.hidden) {
    CHECK(h.rows() == 5);
    CHECK(h.cols() == 8);
  }
  REQUIRE(trace.attentions.size() == 2);
  for (const auto& per_layer : trace.attentions) {
    REQUIRE(per_layer.size() == 2);
    for (const auto& a : per_layer) {
      CHECK(a.rows() == 5);
      CHECK(a.cols() == 5);
      for (int i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int j = 0; j < 5; ++j) s += a.at(i, j);
        CHECK(std::fabs(s - 1.0) < 1e-5);
      }
    }
  }
  CHECK(trace.logits.numel() == 2);

  // embedding output is the base of the hidden stack
  auto e = model.embed(seq);
  for (size_t i = 0; i < e.numel(); ++i) CHECK(e.data()[i] == trace.hidden[0].data()[i]);
}

// Independent plain-double reference for a single-layer single-head model.
// No library ops: straight loops over hand-set weights.
namespace {

struct RefOut {
  std::vector<std::vector<double>> attn;
  std::vector<std::vector<double>> h1;  // final hidden layer
};

RefOut reference_forward(const std::vector<std::vector<double>>& E,
                         const std::vector<std::vector<double>>& Wq, const std::vector<double>& bq,
                         const std::vector<std::vector<double>>& Wk, const std::vector<double>& bk,
                         const std::vector<std::vector<double>>& Wv, const std::vector<double>& bv,
                         const std::vector<std::vector<double>>& Wo, const std::vector<double>& bo,
                         const std::vector<std::vector<double>>& W1, const std::vector<double>& b1,
                         const std::vector<std::vector<double>>& W2, const std::vector<double>& b2) {
  const size_t n = E.size(), d = E[0].size(), f = b1.size();
  auto matvec = [](const std::vector<std::vector<double>>& M, const std::vector<double>& x,
                   const std::vector<double>& b) {
    std::vector<double> out(b.size(), 0.0);
    for (size_t j = 0; j < b.size(); ++j) {
      for (size_t i = 0; i < x.size(); ++i) out[j] += x[i] * M[i][j];
      out[j] += b[j];
    }
    return out;
  };
  auto ln = [](std::vector<double> x) {
    double mu = 0.0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(x.size());
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (auto& v : x) v = (v - mu) * inv;  // unit gain, zero bias
    return x;
  };

  std::vector<std::vector<double>> Q(n), K(n), V(n);
  for (size_t i = 0; i < n; ++i) {
    Q[i] = matvec(Wq, E[i], bq);
    K[i] = matvec(Wk, E[i], bk);
    V[i] = matvec(Wv, E[i], bv);
  }
  RefOut out;
  out.attn.assign(n, std::vector<double>(n, 0.0));
  std::vector<std::vector<double>> ctx(n, std::vector<double>(d, 0.0));
  for (size_t i = 0; i < n; ++i) {
    std::vector<double> scores(n, 0.0);
    double mx = -1e300;
    for (size_t j = 0; j < n; ++j) {
      for (size_t t = 0; t < d; ++t) scores[j] += Q[i][t] * K[j][t];
      scores[j] /= std::sqrt(static_cast<double>(d));
      mx = std::max(mx, scores[j]);
    }
    double denom = 0.0;
    for (size_t j = 0; j < n; ++j) denom += std::exp(scores[j] - mx);
    for (size_t j = 0; j < n; ++j) {
      out.attn[i][j] = std::exp(scores[j] - mx) / denom;
      for (size_t t = 0; t < d; ++t) ctx[i][t] += out.attn[i][j] * V[j][t];
    }
  }
  out.h1.resize(n);
  for (size_t i = 0; i < n; ++i) {
    auto attn_out = matvec(Wo, ctx[i], bo);
    std::vector<double> res(d);
    for (size_t t = 0; t < d; ++t) res[t] = E[i][t] + attn_out[t];
    auto h1 = ln(res);
    std::vector<double> mid = matvec(W1, h1, b1);
    for (size_t t = 0; t < f; ++t) {
      const double x = mid[t];
      mid[t] = 0.5 * x * (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
    }
    auto ffn = matvec(W2, mid, b2);
    for (size_t t = 0; t < d; ++t) ffn[t] += h1[t];
    out.h1[i] = ln(ffn);
  }
  return out;
}

}  // namespace

TEST_CASE("single-layer single-head forward matches a manual computation") {
  ModelConfig cfg;
  cfg.num_layers = 1;
  cfg.hidden_dim = 4;
  cfg.num_heads = 1;
  cfg.ffn_dim = 6;
  cfg.vocab_size = 8;
  cfg.max_seq_len = 4;
  cfg.num_segments = 1;
  cfg.num_classes = 2;
  Transformer model(cfg, 1);

  // hand-set small weights with a fixed deterministic pattern
  auto fill = [](Tensor& t, double base, double step) {
    auto d = t.raw_data();
    for (size_t i = 0; i < d.size(); ++i)
      d[i] = static_cast<float>(base + step * static_cast<double>(i % 7) -
                                0.1 * static_cast<double>(i % 3));
  };
  auto& L = model.layer(0);
  fill(model.token_embedding(), 0.05, 0.04);
  fill(model.position_embedding(), -0.02, 0.03);
  zero_tensor(model.segment_embedding());
  fill(L.wq, 0.02, 0.05);
  fill(L.wk, -0.03, 0.04);
  fill(L.wv, 0.01, 0.06);
  fill(L.wo, 0.04, -0.02);
  fill(L.ffn_w1, 0.03, 0.02);
  fill(L.ffn_w2, -0.01, 0.03);
  fill(L.bq, 0.01, 0.01);
  fill(L.bk, -0.01, 0.02);
  fill(L.bv, 0.02, 0.01);
  fill(L.bo, 0.0, 0.01);
  fill(L.ffn_b1, 0.01, 0.0);
  fill(L.ffn_b2, 0.0, 0.02);
  // layernorm affine stays identity (gain 1, bias 0) to match the reference

  auto seq = make_seq({0, 3, 5}, {0, 0, 0}, {Mark::Cls, Mark::Ordinary, Mark::Ordinary});
  NoGradGuard guard;
  auto trace = model.forward(seq);

  // mirror the inputs into plain double arrays
  const int d = 4, f = 6, n = 3;
  auto as_mat = [](const Tensor& t) {
    std::vector<std::vector<double>> m(static_cast<size_t>(t.rows()),
                                       std::vector<double>(static_cast<size_t>(t.cols())));
    for (int i = 0; i < t.rows(); ++i)
      for (int j = 0; j < t.cols(); ++j) m[static_cast<size_t>(i)][static_cast<size_t>(j)] = t.at(i, j);
    return m;
  };
  auto as_vec = [](const Tensor& t) {
    return std::vector<double>(t.data().begin(), t.data().end());
  };
  std::vector<std::vector<double>> E(n, std::vector<double>(d));
  auto emb = model.embed(seq);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) E[static_cast<size_t>(i)][static_cast<size_t>(j)] = emb.at(i, j);

  auto ref = reference_forward(E, as_mat(L.wq), as_vec(L.bq), as_mat(L.wk), as_vec(L.bk),
                               as_mat(L.wv), as_vec(L.bv), as_mat(L.wo), as_vec(L.bo),
                               as_mat(L.ffn_w1), as_vec(L.ffn_b1), as_mat(L.ffn_w2),
                               as_vec(L.ffn_b2));
  (void)f;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      CHECK(trace.attentions[0][0].at(i, j) ==
            doctest::Approx(ref.attn[static_cast<size_t>(i)][static_cast<size_t>(j)]).epsilon(1e-5));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      CHECK(trace.hidden[1].at(i, j) ==
            doctest::Approx(ref.h1[static_cast<size_t>(i)][static_cast<size_t>(j)]).epsilon(1e-5));
}

TEST_CASE("classifier logits depend only on the CLS row") {
  auto cfg = tiny_config(2, 8, 2);
  Transformer model(cfg, 13);
  auto seq = make_seq({0, 4, 5, 6}, {0, 0, 0, 0},
                      {Mark::Cls, Mark::Ordinary, Mark::Ordinary, Mark::Ordinary});
  NoGradGuard guard;
  auto trace = model.forward(seq);
  auto base = model.logits_from_hidden(trace.hidden.back());

  auto perturbed = Tensor::from(trace.hidden.back().shape(),
                                std::vector<float>(trace.hidden.back().data().begin(),
                                                   trace.hidden.back().data().end()));
  auto vals = perturbed.raw_data();
  for (int i = 1; i < perturbed.rows(); ++i)
    for (int j = 0; j < perturbed.cols(); ++j)
      vals[static_cast<size_t>(i) * perturbed.cols() + static_cast<size_t>(j)] += 3.5f;
  auto after = model.logits_from_hidden(perturbed);
  for (size_t i = 0; i < base.numel(); ++i) CHECK(base.data()[i] == after.data()[i]);
}

TEST_CASE("forward reports a numeric error with the offending layer") {
  auto cfg = tiny_config(2, 8, 2);
  Transformer model(cfg, 3);
  // poison a second-layer weight so the first layer is still clean
  model.layer(1).wq.raw_data()[0] = std::numeric_limits<float>::quiet_NaN();
  auto seq = make_seq({0, 4}, {0, 0}, {Mark::Cls, Mark::Ordinary});
  NoGradGuard guard;
  try {
    (void)model.forward(seq);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer 2") != std::string::npos);
  }
}

TEST_CASE("gradients of a 2-layer model loss agree with finite differences") {
  auto cfg = tiny_config(2, 6, 2);
  cfg.ffn_dim = 8;
  Transformer model(cfg, 19);
  auto seq = make_seq({0, 4, 7}, {0, 0, 0}, {Mark::Cls, Mark::Ordinary, Mark::Ordinary}, 1);

  auto loss_fn = [&]() {
    auto trace = model.forward(seq);
    return cross_entropy_soft(trace.logits, one_hot_row(1, 2));
  };
  auto params = model.parameters();
  auto rep = testutil::grad_check<float>(params, loss_fn, 1e-3, 1e-3, 1e-4);
  INFO(rep.detail);
  CHECK(rep.ok);
}

TEST_CASE("teacher reaches a separable toy task and training is deterministic") {
  SyntheticTask task;
  task.kind = TaskKind::MajorityClass;
  task.vocab_size = 16;
  task.min_content_len = 5;
  task.max_content_len = 7;
  task.train_size = 96;
  task.dev_size = 48;
  task.seed = 5;
  auto data = gen_dataset(task);

  ModelConfig cfg = tiny_config(2, 16, 2);
  cfg.vocab_size = task.vocab_size;
  cfg.max_seq_len = 16;
  cfg.ffn_dim = 32;

  TrainSpec spec;
  spec.phase = "prediction";
  spec.learning_rate = 3e-3;
  spec.schedule = Schedule::Constant;
  spec.batch_size = 16;
  spec.max_seq_len = 16;
  spec.num_epochs = 20;
  spec.seed = 11;

  Transformer model(cfg, 23);
  auto history = train_classifier(model, data, spec);
  REQUIRE(history.size() == 20);

  double train_acc = evaluate_accuracy(model, data.train);
  CHECK(train_acc >= 0.99);

  SUBCASE("fixed seed reproduces the accuracy history") {
    Transformer model2(cfg, 23);
    auto history2 = train_classifier(model2, data, spec);
    REQUIRE(history2.size() == history.size());
    for (size_t i = 0; i < history.size(); ++i) {
      CHECK(history[i].dev_accuracy == history2[i].dev_accuracy);
      CHECK(history[i].mean_loss == history2[i].mean_loss);
    }
  }

  SUBCASE("zero learning rate leaves parameters unchanged") {
    Transformer frozen(cfg, 23);
    std::vector<std::vector<float>> before;
    for (auto* p : frozen.parameters()) before.emplace_back(p->data().begin(), p->data().end());
    TrainSpec zero = spec;
    zero.learning_rate = 0.0;
    zero.num_epochs = 2;
    (void)train_classifier(frozen, data, zero);
    auto params = frozen.parameters();
    for (size_t i = 0; i < params.size(); ++i) {
      auto d = params[i]->data();
      CHECK(std::equal(d.begin(), d.end(), before[i].begin()));
    }
  }
}

TEST_CASE("checkpoint round-trips the model bit-exactly") {
  auto cfg = tiny_config(2, 8, 2);
  Transformer model(cfg, 77);
  const std::string path = "/tmp/hskd_test_ckpt.bin";
  model.save(path);
  auto loaded = Transformer::load(path);
  CHECK(loaded.digest() == model.digest());
  auto a = model.parameters();
  auto b = loaded.parameters();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    auto da = a[i]->data();
    auto db = b[i]->data();
    CHECK(std::equal(da.begin(), da.end(), db.begin()));
  }
}
