#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "versreid/rng.hpp"
#include "versreid/tensor.hpp"

namespace testsupport {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;

  bool ok(double tol = 1e-4) const { return max_rel_err < tol; }
};

// Central finite differences in double against the analytic tape gradients.
// `fn(tape, inputs)` must produce a scalar deterministically from `inputs`;
// it is re-invoked with a null tape for the perturbed forward evaluations.
template <typename F>
GradCheckResult check_gradients(F&& fn, std::vector<versreid::TensorT<double>>& inputs,
                                double step = 1e-3) {
  versreid::GradTapeT<double> tape;
  auto loss = fn(&tape, inputs);
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs) {
    analytic.push_back(in.requires_grad() ? in.grad() : std::vector<double>());
  }

  GradCheckResult res;
  for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
    if (!inputs[ii].requires_grad()) continue;
    for (std::size_t j = 0; j < inputs[ii].size(); ++j) {
      const double orig = inputs[ii].data()[j];
      inputs[ii].data()[j] = orig + step;
      const double lp = fn(nullptr, inputs).at(0);
      inputs[ii].data()[j] = orig - step;
      const double lm = fn(nullptr, inputs).at(0);
      inputs[ii].data()[j] = orig;
      const double fd = (lp - lm) / (2.0 * step);
      const double rel = std::abs(analytic[ii][j] - fd) / std::max(1.0, std::abs(fd));
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "input " + std::to_string(ii) + " element " + std::to_string(j) +
                    " analytic " + std::to_string(analytic[ii][j]) + " fd " + std::to_string(fd);
      }
    }
  }
  return res;
}

inline versreid::TensorT<double> random_tensor(versreid::Rng& rng, std::vector<std::size_t> shape,
                                               bool requires_grad = true, double scale = 1.0) {
  auto t = versreid::TensorT<double>::zeros(std::move(shape), requires_grad);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal() * scale;
  return t;
}

// Fixed random weights turn a tensor output into a scalar with a gradient
// that exercises every element.
inline versreid::TensorT<double> weights_like(versreid::Rng& rng,
                                              const std::vector<std::size_t>& shape) {
  auto t = versreid::TensorT<double>::zeros(shape, false);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal();
  return t;
}

inline versreid::TensorT<double> weighted_sum(versreid::GradTapeT<double>* tape,
                                              const versreid::TensorT<double>& x,
                                              const versreid::TensorT<double>& w) {
  return versreid::sum_all(tape, versreid::mul(tape, x, w));
}

}  // namespace testsupport
