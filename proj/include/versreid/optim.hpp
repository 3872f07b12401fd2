#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "versreid/tensor.hpp"

namespace versreid {

// SGD with momentum and coupled L2 weight decay:
//   v <- mu * v + (g + wd * p)
//   p <- p - lr * lr_scale * v
// Velocity buffers are created on registration and persist across steps.
// lr_scale lets a parameter group (e.g. a freshly initialized classifier
// head) train faster than the shared backbone under one schedule.
template <typename T>
class SgdT {
 public:
  SgdT(T momentum, T weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void add_parameter(const std::string& name, TensorT<T> param, T lr_scale = T(1)) {
    names_.push_back(name);
    params_.push_back(param);
    velocity_.emplace_back(param.size(), T(0));
    lr_scale_.push_back(lr_scale);
  }

  std::size_t parameter_count() const { return params_.size(); }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(T lr) {
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      auto& p = params_[pi];
      auto& v = velocity_[pi];
      const T group_lr = lr * lr_scale_[pi];
      const std::vector<T>& g = p.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (!std::isfinite(g[i])) {
          throw std::runtime_error("sgd: non-finite gradient in parameter " + names_[pi]);
        }
        v[i] = momentum_ * v[i] + (g[i] + weight_decay_ * p.data()[i]);
        p.data()[i] -= group_lr * v[i];
      }
    }
  }

 private:
  T momentum_;
  T weight_decay_;
  std::vector<std::string> names_;
  std::vector<TensorT<T>> params_;
  std::vector<std::vector<T>> velocity_;
  std::vector<T> lr_scale_;
};

using Sgd = SgdT<float>;

}  // namespace versreid
