#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "hskd/common.hpp"
#include "hskd/tensor.hpp"

using hskd::Rng;
using hskd::Tensor;
using hskd::TensorT;

namespace {

template <typename S>
TensorT<S> random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = false,
                         double span = 1.0) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  std::vector<S> data(n);
  for (auto& v : data) v = static_cast<S>((rng.canonical() * 2.0 - 1.0) * span);
  return TensorT<S>::from(std::move(shape), std::move(data), requires_grad);
}

// Plain triple-loop product, no shared code with the library kernel.
template <typename S>
std::vector<S> reference_matmul(const TensorT<S>& a, const TensorT<S>& b) {
  const int m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<S> out(static_cast<size_t>(m) * n, S(0));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int t = 0; t < k; ++t)
        acc += static_cast<double>(a.at(i, t)) * static_cast<double>(b.at(t, j));
      out[static_cast<size_t>(i) * n + j] = static_cast<S>(acc);
    }
  return out;
}

}  // namespace

TEST_CASE("matmul identity and zero cases") {
  auto I = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Rng rng(7);
  auto B = random_tensor<float>({3, 4}, rng);
  auto P = hskd::matmul(I, B);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) CHECK(P.at(i, j) == doctest::Approx(B.at(i, j)).epsilon(1e-7));

  auto Z = Tensor::zeros({2, 3});
  auto B2 = random_tensor<float>({3, 4}, rng);
  auto P2 = hskd::matmul(Z, B2);
  for (float v : P2.data()) CHECK(v == 0.0f);
}

TEST_CASE("matmul matches triple-loop reference") {
  Rng rng(11);
  auto A = random_tensor<float>({3, 4}, rng);
  auto B = random_tensor<float>({4, 2}, rng);
  auto P = hskd::matmul(A, B);
  auto ref = reference_matmul(A, B);
  for (size_t i = 0; i < ref.size(); ++i) CHECK(P.data()[i] == doctest::Approx(ref[i]).epsilon(1e-6));
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  auto A = Tensor::zeros({2, 3});
  auto B = Tensor::zeros({4, 2});
  CHECK_THROWS_AS((void)hskd::matmul(A, B), hskd::ContractError);
}

TEST_CASE("softmax_rows basic contracts") {
  auto C = Tensor::from({1, 4}, {2.5f, 2.5f, 2.5f, 2.5f});
  auto S = hskd::softmax_rows(C);
  for (float v : S.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-6));

  // shift invariance
  Rng rng(3);
  auto X = random_tensor<float>({2, 5}, rng, false, 3.0);
  auto Y1 = hskd::softmax_rows(X);
  std::vector<float> shifted(X.data().begin(), X.data().end());
  for (auto& v : shifted) v += 7.0f;
  auto Y2 = hskd::softmax_rows(Tensor::from({2, 5}, shifted));
  for (size_t i = 0; i < Y1.numel(); ++i)
    CHECK(std::fabs(Y1.data()[i] - Y2.data()[i]) < 1e-6f);

  // closed form: [0, ln 3] -> [1/4, 3/4]
  auto L = Tensor::from({1, 2}, {0.0f, std::log(3.0f)});
  auto SL = hskd::softmax_rows(L);
  CHECK(SL.data()[0] == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(SL.data()[1] == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("softmax_rows rows sum to one for random finite inputs") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(4));
    const int n = 1 + static_cast<int>(rng.below(9));
    auto X = random_tensor<float>({m, n}, rng, false, 20.0);
    auto Y = hskd::softmax_rows(X);
    for (int i = 0; i < m; ++i) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) {
        CHECK(Y.at(i, j) >= 0.0f);
        s += Y.at(i, j);
      }
      CHECK(std::fabs(s - 1.0) < 1e-5);
    }
  }
}

TEST_CASE("layernorm constant vector maps to bias") {
  auto X = Tensor::from({1, 4}, {3.f, 3.f, 3.f, 3.f});
  auto g = Tensor::filled({4}, 1.0f);
  auto b = Tensor::zeros({4});
  auto Y = hskd::layernorm(X, g, b);
  for (float v : Y.data()) CHECK(std::fabs(v) < 1e-6f);
}

TEST_CASE("layernorm output statistics") {
  Rng rng(23);
  auto X = random_tensor<float>({6, 16}, rng, false, 2.0);
  auto g = Tensor::filled({16}, 1.5f);
  auto b = Tensor::filled({16}, 0.25f);
  auto Y = hskd::layernorm(X, g, b);
  for (int i = 0; i < 6; ++i) {
    double mu = 0.0;
    for (int j = 0; j < 16; ++j) mu += Y.at(i, j);
    mu /= 16;
    double var = 0.0;
    for (int j = 0; j < 16; ++j) var += (Y.at(i, j) - mu) * (Y.at(i, j) - mu);
    var /= 16;
    CHECK(mu == doctest::Approx(0.25).epsilon(1e-3));
    CHECK(var == doctest::Approx(1.5 * 1.5).epsilon(1e-2));
  }
}

TEST_CASE("layernorm rejects size-one vectors") {
  auto X = Tensor::zeros({3, 1});
  auto g = Tensor::filled({1}, 1.0f);
  auto b = Tensor::zeros({1});
  CHECK_THROWS_AS((void)hskd::layernorm(X, g, b), hskd::ContractError);
}

TEST_CASE("backward on sum gives all-ones gradient") {
  Rng rng(5);
  auto x = random_tensor<float>({3, 3}, rng, true);
  auto loss = hskd::sum_all(x);
  loss.backward();
  for (float v : x.grad()) CHECK(v == doctest::Approx(1.0f));
}

TEST_CASE("backward on mse against zero gives 2x/n") {
  Rng rng(6);
  auto x = random_tensor<float>({2, 4}, rng, true);
  auto zero = Tensor::zeros({2, 4});
  auto loss = hskd::mse(x, zero);
  loss.backward();
  for (size_t i = 0; i < x.numel(); ++i)
    CHECK(x.grad()[i] == doctest::Approx(2.0f * x.data()[i] / 8.0f).epsilon(1e-5));
}

TEST_CASE("backward rejects non-scalar loss") {
  auto x = Tensor::zeros({2, 2}, true);
  auto y = hskd::scale(x, 2.0f);
  CHECK_THROWS_AS(y.backward(), hskd::ContractError);
}

TEST_CASE("shared subexpression gradients accumulate once per use") {
  // y = x*x + x  =>  dy/dx = 2x + 1
  auto x = Tensor::from({1}, {1.75f}, true);
  auto y = hskd::add(hskd::mul(x, x), x);
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(2.0f * 1.75f + 1.0f).epsilon(1e-6));
}

namespace {

// Exercises every differentiable op in one composite scalar function.
template <typename S>
hskd::TensorT<S> composite_loss(hskd::TensorT<S>& A, hskd::TensorT<S>& B, hskd::TensorT<S>& g,
                                hskd::TensorT<S>& b) {
  using namespace hskd;
  auto M = matmul(A, B);                      // 4x6
  auto L = layernorm(M, g, b);                // 4x6
  auto Sf = softmax_rows(slice_cols(L, 0, 4));
  auto Ls = log_softmax_rows(slice_cols(L, 2, 4));
  auto G = gelu(L);
  auto R = relu(scale(L, S(0.5)));
  auto T = transpose(matmul(Sf, transpose(slice_cols(G, 0, 4))));  // 4x4
  auto picked = gather_rows(L, {0, 2, 2});
  auto cat = concat_cols(std::vector<TensorT<S>>{Sf, Ls});
  auto t1 = sum_all(mul(T, T));
  auto t2 = sum_all(add_rowvec(R, b));
  auto t3 = mse(picked, gather_rows(L, {1, 3, 3}));
  auto t4 = mean_all(cat);
  return add(add(t1, t2), add(t3, t4));
}

}  // namespace

TEST_CASE("finite differences agree with recorded gradients (64-bit mode)") {
  Rng rng(41);
  auto A = random_tensor<double>({4, 5}, rng, true);
  auto B = random_tensor<double>({5, 6}, rng, true);
  auto g = random_tensor<double>({6}, rng, true);
  auto b = random_tensor<double>({6}, rng, true);
  // keep gain away from zero so layernorm stays well conditioned
  for (auto& v : g.raw_data()) v += (v >= 0 ? 1.0 : -1.0);
  auto rep = testutil::grad_check<double>(
      {&A, &B, &g, &b}, [&] { return composite_loss(A, B, g, b); }, 1e-6, 1e-6, 1e-9);
  INFO(rep.detail);
  CHECK(rep.ok);
}

TEST_CASE("finite differences agree per operation (32-bit mode)") {
  Rng rng(43);
  auto A = random_tensor<float>({4, 5}, rng, true);
  auto B = random_tensor<float>({5, 6}, rng, true);
  auto C = random_tensor<float>({4, 5}, rng, true);
  auto g = random_tensor<float>({5}, rng, true);
  auto b = random_tensor<float>({5}, rng, true);
  for (auto& v : g.raw_data()) v += (v >= 0 ? 1.0f : -1.0f);

  using T = hskd::TensorT<float>;
  struct Case {
    const char* name;
    std::vector<T*> params;
    std::function<T()> loss;
  };
  std::vector<Case> cases;
  // Losses stay near unit scale: central differences on 32-bit values lose
  // precision once the loss dwarfs the per-element gradient.
  cases.push_back({"matmul", {&A, &B}, [&] { return hskd::mean_all(hskd::mul(hskd::matmul(A, B), hskd::matmul(A, B))); }});
  cases.push_back({"softmax_rows", {&A}, [&] {
    auto y = hskd::softmax_rows(A);
    return hskd::mean_all(hskd::mul(y, hskd::scale(y, 2.0f)));
  }});
  cases.push_back({"log_softmax_rows", {&A}, [&] {
    auto y = hskd::log_softmax_rows(A);
    return hskd::scale(hskd::mean_all(hskd::mul(y, y)), 0.25f);
  }});
  cases.push_back({"layernorm", {&A, &g, &b}, [&] {
    auto y = hskd::layernorm(A, g, b);
    return hskd::scale(hskd::mean_all(hskd::mul(y, y)), 0.25f);
  }});
  cases.push_back({"gelu", {&A}, [&] { return hskd::mean_all(hskd::gelu(A)); }});
  cases.push_back({"relu", {&A}, [&] { return hskd::mean_all(hskd::mul(hskd::relu(A), A)); }});
  cases.push_back({"transpose", {&A}, [&] { return hskd::mean_all(hskd::mul(hskd::transpose(A), hskd::transpose(A))); }});
  cases.push_back({"add/sub/mul/scale", {&A, &C}, [&] {
    return hskd::mean_all(hskd::mul(hskd::add(A, C), hskd::scale(hskd::sub(A, C), 0.5f)));
  }});
  cases.push_back({"gather/slice/concat", {&A}, [&] {
    auto picked = hskd::gather_rows(A, {0, 2, 2, 3});
    auto cat = hskd::concat_cols(std::vector<T>{hskd::slice_cols(picked, 0, 2), hskd::slice_cols(picked, 2, 3)});
    return hskd::mse(cat, hskd::scale(cat, 0.0f));
  }});
  cases.push_back({"add_rowvec", {&A, &g}, [&] {
    return hskd::scale(hskd::mean_all(hskd::mul(hskd::add_rowvec(A, g), hskd::add_rowvec(A, g))), 0.25f);
  }});

  for (auto& c : cases) {
    CAPTURE(c.name);
    auto rep = testutil::grad_check<float>(c.params, c.loss, 1e-3, 1e-3, 1e-4);
    INFO(c.name << ": " << rep.detail);
    CHECK(rep.ok);
  }
}

TEST_CASE("dropout keeps scale and masks gradients") {
  Rng rng(51);
  auto x = Tensor::filled({64, 16}, 1.0f, true);
  Rng drop_rng(99);
  auto y = hskd::dropout(x, 0.5, drop_rng);
  double mean = 0.0;
  for (float v : y.data()) mean += v;
  mean /= static_cast<double>(y.numel());
  CHECK(mean == doctest::Approx(1.0).epsilon(0.15));  // inverted scaling keeps expectation
  auto loss = hskd::sum_all(y);
  loss.backward();
  for (size_t i = 0; i < x.numel(); ++i) {
    const bool dropped = y.data()[i] == 0.0f;
    CHECK(x.grad()[i] == (dropped ? 0.0f : 2.0f));
  }
  // rate zero is the identity
  Rng r2(1);
  auto same = hskd::dropout(x, 0.0, r2);
  CHECK(same.node() == x.node());
}

TEST_CASE("identical seed gives bitwise-identical op pipelines") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    auto A = random_tensor<float>({5, 5}, rng);
    auto B = random_tensor<float>({5, 5}, rng);
    auto C = hskd::softmax_rows(hskd::matmul(A, hskd::gelu(B)));
    return std::vector<float>(C.data().begin(), C.data().end());
  };
  auto a = run(1234);
  auto b = run(1234);
  CHECK(std::equal(a.begin(), a.end(), b.begin(),
                   [](float x, float y) { return std::memcmp(&x, &y, sizeof(float)) == 0; }));
}

TEST_CASE("no-grad mode records no graph") {
  auto x = Tensor::filled({2, 2}, 1.0f, true);
  hskd::NoGradGuard guard;
  auto y = hskd::scale(x, 3.0f);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->parents.empty());
}
