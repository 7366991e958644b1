#pragma once

// Central finite-difference gradient checker. Lives with the tests and stays
// independent of the autodiff path it verifies: it only pokes parameter
// values and re-runs the supplied forward closure.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hskd/tensor.hpp"

namespace testutil {

template <typename S>
struct GradCheckReport {
  double worst_gap = 0.0;    // |fd - analytic| at the worst element
  double worst_tol = 0.0;    // allowed gap at that element
  bool ok = true;
  std::string detail;
};

// loss_fn must rebuild the graph from the current parameter values on every
// call. rtol/atol follow the usual |fd - g| <= atol + rtol*max(|fd|,|g|).
template <typename S>
GradCheckReport<S> grad_check(std::vector<hskd::TensorT<S>*> params,
                              const std::function<hskd::TensorT<S>()>& loss_fn,
                              double h, double rtol, double atol) {
  GradCheckReport<S> rep;
  for (auto* p : params) p->zero_grad();
  auto loss = loss_fn();
  loss.backward();

  std::vector<std::vector<S>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) {
    auto g = p->raw_grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto vals = params[pi]->raw_data();
    for (size_t i = 0; i < vals.size(); ++i) {
      const S orig = vals[i];
      vals[i] = static_cast<S>(static_cast<double>(orig) + h);
      const double lp = static_cast<double>(loss_fn().item());
      vals[i] = static_cast<S>(static_cast<double>(orig) - h);
      const double lm = static_cast<double>(loss_fn().item());
      vals[i] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double g = static_cast<double>(analytic[pi][i]);
      const double gap = std::fabs(fd - g);
      const double tol = atol + rtol * std::max(std::fabs(fd), std::fabs(g));
      if (gap > rep.worst_gap) {
        rep.worst_gap = gap;
        rep.worst_tol = tol;
      }
      if (gap > tol) {
        rep.ok = false;
        rep.detail = "param " + std::to_string(pi) + " elem " + std::to_string(i) +
                     ": fd=" + std::to_string(fd) + " analytic=" + std::to_string(g);
        return rep;
      }
    }
  }
  return rep;
}

}  // namespace testutil
