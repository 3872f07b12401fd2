#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace versreid {

namespace detail {

template <typename T>
struct TensorNodeT {
  std::vector<std::size_t> shape;
  std::vector<T> value;
  std::vector<T> grad;  // sized lazily on first backward touch
  bool requires_grad = false;

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Reverse-mode autodiff tensor. Copies share the underlying node, so passing
// tensors by value is cheap and gradient accumulation is visible through
// every copy. The scalar type is a template parameter: the training pipeline
// runs float, the gradient checks replay the same graph in double.
template <typename T>
class TensorT {
 public:
  using Node = detail::TensorNodeT<T>;

  TensorT() = default;

  static TensorT zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
    TensorT t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value.assign(count(t.node_->shape), T(0));
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static TensorT from(std::vector<std::size_t> shape, std::vector<T> data,
                      bool requires_grad = false) {
    if (count(shape) != data.size()) {
      throw std::runtime_error("tensor: data size does not match shape");
    }
    TensorT t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static TensorT scalar(T v) { return from({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rank() const { return node_->shape.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  // Rank-2 accessors; rank-1 tensors read as a single row.
  std::size_t rows() const {
    if (rank() == 1) return 1;
    if (rank() == 2) return node_->shape[0];
    throw std::runtime_error("tensor: rows() needs rank 1 or 2");
  }
  std::size_t cols() const {
    if (rank() == 1) return node_->shape[0];
    if (rank() == 2) return node_->shape[1];
    throw std::runtime_error("tensor: cols() needs rank 1 or 2");
  }

  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }
  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  T& at(std::size_t i) { return node_->value.at(i); }
  T at(std::size_t i) const { return node_->value.at(i); }
  T& at(std::size_t r, std::size_t c) { return node_->value.at(r * cols() + c); }
  T at(std::size_t r, std::size_t c) const { return node_->value.at(r * cols() + c); }

  std::vector<T>& grad() { return node_->grad_buffer(); }
  const std::vector<T>& grad_view() const { return node_->grad; }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
  }

  std::shared_ptr<Node> node() const { return node_; }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }

 private:
  std::shared_ptr<Node> node_;
};

// Records backward closures in execution order; backward() replays them in
// reverse. One tape per optimization step.
template <typename T>
class GradTapeT {
 public:
  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

  std::size_t size() const { return ops_.size(); }

  void clear() { ops_.clear(); }

  void backward(TensorT<T>& loss) {
    if (loss.size() != 1) {
      throw std::runtime_error("backward: loss must be a scalar");
    }
    if (!loss.requires_grad()) {
      throw std::runtime_error("backward: loss does not require grad");
    }
    loss.grad()[0] = T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> ops_;
};

using Tensor = TensorT<float>;
using GradTape = GradTapeT<float>;

namespace detail {

template <typename T>
bool track(const GradTapeT<T>* tape, bool any_input_requires) {
  return tape != nullptr && any_input_requires;
}

inline void check(bool ok, const char* msg) {
  if (!ok) throw std::runtime_error(msg);
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace detail

// ---- ops -------------------------------------------------------------------
// Each op computes the forward value eagerly and, when a tape is supplied and
// some input requires grad, records a closure that accumulates (+=) into the
// input gradients. Passing tape == nullptr runs pure inference.

template <typename T>
TensorT<T> matmul(GradTapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::check(a.rank() == 2 && b.rank() == 2, "matmul: inputs must be rank 2");
  if (a.cols() != b.rows()) {
    throw std::runtime_error("matmul: inner dimensions differ, " + detail::shape_str(a.shape()) +
                             " vs " + detail::shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  bool req = a.requires_grad() || b.requires_grad();
  auto out = TensorT<T>::zeros({m, n}, detail::track(tape, req));
  {
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = out.data();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T av = pa[i * k + kk];
        if (av == T(0)) continue;
        const T* pbr = pb + kk * n;
        T* pcr = pc + i * n;
        for (std::size_t j = 0; j < n; ++j) pcr[j] += av * pbr[j];
      }
    }
  }
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node(), cn = out.node();
    tape->record([an, bn, cn, m, k, n] {
      const std::vector<T>& gc = cn->grad_buffer();
      if (an->requires_grad) {
        std::vector<T>& ga = an->grad_buffer();
        const T* pb = bn->value.data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const T g = gc[i * n + j];
            if (g == T(0)) continue;
            for (std::size_t kk = 0; kk < k; ++kk) ga[i * k + kk] += g * pb[kk * n + j];
          }
        }
      }
      if (bn->requires_grad) {
        std::vector<T>& gb = bn->grad_buffer();
        const T* pa = an->value.data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t kk = 0; kk < k; ++kk) {
            const T av = pa[i * k + kk];
            if (av == T(0)) continue;
            for (std::size_t j = 0; j < n; ++j) gb[kk * n + j] += av * gc[i * n + j];
          }
        }
      }
    });
  }
  return out;
}

// add/mul accept equal shapes, or a rank-1 right operand broadcast across the
// rows of a rank-2 left operand.
template <typename T>
TensorT<T> add(GradTapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  const bool broadcast = (a.rank() == 2 && b.rank() == 1 && b.size() == a.cols());
  detail::check(broadcast || a.shape() == b.shape(), "add: shape mismatch");
  bool req = a.requires_grad() || b.requires_grad();
  auto out = TensorT<T>::zeros(a.shape(), detail::track(tape, req));
  const std::size_t rows = broadcast ? a.rows() : 1;
  const std::size_t cols = broadcast ? a.cols() : a.size();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out.data()[r * cols + c] = a.data()[r * cols + c] + b.data()[c];
    }
  }
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node(), cn = out.node();
    tape->record([an, bn, cn, rows, cols] {
      const std::vector<T>& gc = cn->grad_buffer();
      if (an->requires_grad) {
        std::vector<T>& ga = an->grad_buffer();
        for (std::size_t i = 0; i < gc.size(); ++i) ga[i] += gc[i];
      }
      if (bn->requires_grad) {
        std::vector<T>& gb = bn->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) gb[c] += gc[r * cols + c];
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> mul(GradTapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  const bool broadcast = (a.rank() == 2 && b.rank() == 1 && b.size() == a.cols());
  detail::check(broadcast || a.shape() == b.shape(), "mul: shape mismatch");
  bool req = a.requires_grad() || b.requires_grad();
  auto out = TensorT<T>::zeros(a.shape(), detail::track(tape, req));
  const std::size_t rows = broadcast ? a.rows() : 1;
  const std::size_t cols = broadcast ? a.cols() : a.size();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out.data()[r * cols + c] = a.data()[r * cols + c] * b.data()[c];
    }
  }
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node(), cn = out.node();
    tape->record([an, bn, cn, rows, cols] {
      const std::vector<T>& gc = cn->grad_buffer();
      if (an->requires_grad) {
        std::vector<T>& ga = an->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            ga[r * cols + c] += gc[r * cols + c] * bn->value[c];
          }
        }
      }
      if (bn->requires_grad) {
        std::vector<T>& gb = bn->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            gb[c] += gc[r * cols + c] * an->value[r * cols + c];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> scale(GradTapeT<T>* tape, const TensorT<T>& a, T factor) {
  auto out = TensorT<T>::zeros(a.shape(), detail::track(tape, a.requires_grad()));
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * factor;
  if (out.requires_grad()) {
    auto an = a.node(), cn = out.node();
    tape->record([an, cn, factor] {
      const std::vector<T>& gc = cn->grad_buffer();
      std::vector<T>& ga = an->grad_buffer();
      for (std::size_t i = 0; i < gc.size(); ++i) ga[i] += gc[i] * factor;
    });
  }
  return out;
}

template <typename T>
TensorT<T> reshape(GradTapeT<T>* tape, const TensorT<T>& a, std::vector<std::size_t> shape) {
  detail::check(TensorT<T>::count(shape) == a.size(), "reshape: element count differs");
  auto out = TensorT<T>::from(std::move(shape), a.values(), detail::track(tape, a.requires_grad()));
  if (out.requires_grad()) {
    auto an = a.node(), cn = out.node();
    tape->record([an, cn] {
      const std::vector<T>& gc = cn->grad_buffer();
      std::vector<T>& ga = an->grad_buffer();
      for (std::size_t i = 0; i < gc.size(); ++i) ga[i] += gc[i];
    });
  }
  return out;
}

template <typename T>
TensorT<T> transpose(GradTapeT<T>* tape, const TensorT<T>& a) {
  detail::check(a.rank() == 2, "transpose: input must be rank 2");
  const std::size_t r = a.rows(), c = a.cols();
  auto out = TensorT<T>::zeros({c, r}, detail::track(tape, a.requires_grad()));
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out.data()[j * r + i] = a.data()[i * c + j];
  }
  if (out.requires_grad()) {
    auto an = a.node(), cn = out.node();
    tape->record([an, cn, r, c] {
      const std::vector<T>& gc = cn->grad_buffer();
      std::vector<T>& ga = an->grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += gc[j * r + i];
      }
    });
  }
  return out;
}

// Concatenates rank-2 tensors along rows (axis 0) or columns (axis 1).
template <typename T>
TensorT<T> concat(GradTapeT<T>* tape, const std::vector<TensorT<T>>& parts, int axis) {
  detail::check(!parts.empty(), "concat: no inputs");
  detail::check(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
  bool req = false;
  for (const auto& p : parts) {
    detail::check(p.rank() == 2, "concat: inputs must be rank 2");
    req = req || p.requires_grad();
  }
  std::size_t rows = parts[0].rows(), cols = parts[0].cols();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    if (axis == 0) {
      detail::check(parts[i].cols() == cols, "concat: column count differs");
      rows += parts[i].rows();
    } else {
      detail::check(parts[i].rows() == rows, "concat: row count differs");
      cols += parts[i].cols();
    }
  }
  auto out = TensorT<T>::zeros({rows, cols}, detail::track(tape, req));
  if (axis == 0) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      for (std::size_t i = 0; i < p.size(); ++i) out.data()[off + i] = p.data()[i];
      off += p.size();
    }
  } else {
    std::size_t coff = 0;
    for (const auto& p : parts) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < p.cols(); ++c) {
          out.data()[r * cols + coff + c] = p.data()[r * p.cols() + c];
        }
      }
      coff += p.cols();
    }
  }
  if (out.requires_grad()) {
    std::vector<std::shared_ptr<detail::TensorNodeT<T>>> nodes;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
      nodes.push_back(p.node());
      widths.push_back(axis == 0 ? p.rows() : p.cols());
    }
    auto cn = out.node();
    tape->record([nodes, widths, cn, rows, cols, axis] {
      const std::vector<T>& gc = cn->grad_buffer();
      std::size_t off = 0;
      for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
        auto& node = nodes[pi];
        if (node->requires_grad) {
          std::vector<T>& g = node->grad_buffer();
          if (axis == 0) {
            const std::size_t n = widths[pi] * cols;
            for (std::size_t i = 0; i < n; ++i) g[i] += gc[off * cols + i];
          } else {
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t c = 0; c < widths[pi]; ++c) {
                g[r * widths[pi] + c] += gc[r * cols + off + c];
              }
            }
          }
        }
        off += widths[pi];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> slice_rows(GradTapeT<T>* tape, const TensorT<T>& a, std::size_t start,
                      std::size_t count) {
  detail::check(a.rank() == 2, "slice_rows: input must be rank 2");
  detail::check(start + count <= a.rows(), "slice_rows: range out of bounds");
  const std::size_t cols = a.cols();
  auto out = TensorT<T>::zeros({count, cols}, detail::track(tape, a.requires_grad()));
  for (std::size_t i = 0; i < count * cols; ++i) out.data()[i] = a.data()[start * cols + i];
  if (out.requires_grad()) {
    auto an = a.node(), cn = out.node();
    tape->record([an, cn, start, count, cols] {
      const std::vector<T>& gc = cn->grad_buffer();
      std::vector<T>& ga = an->grad_buffer();
      for (std::size_t i = 0; i < count * cols; ++i) ga[start * cols + i] += gc[i];
    });
  }
  return out;
}

template <typename T>
TensorT<T> slice_cols(GradTapeT<T>* tape, const TensorT<T>& a, std::size_t start,
                      std::size_t count) {
  detail::check(a.rank() == 2, "slice_cols: input must be rank 2");
  detail::check(start + count <= a.cols(), "slice_cols: range out of bounds");
  const std::size_t rows = a.rows(), cols = a.cols();
  auto out = TensorT<T>::zeros({rows, count}, detail::track(tape, a.requires_grad()));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < count; ++c) out.data()[r * count + c] = a.data()[r * cols + start + c];
  }
  if (out.requires_grad()) {
    auto an = a.node(), cn = out.node();
    tape->record([an, cn, start, count, rows, cols] {
      const std::vector<T>& gc = cn->grad_buffer();
      std::vector<T>& ga = an->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < count; ++c) ga[r * cols + start + c] += gc[r * count + c];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> softmax_rows(GradTapeT<T>* tape, const TensorT<T>& a) {
  detail::check(a.rank() == 2, "softmax_rows: input must be rank 2");
  const std::size_t rows = a.rows(), cols = a.cols();
  auto out = TensorT<T>::zeros({rows, cols}, detail::track(tape, a.requires_grad()));
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data() + r * cols;
    T* y = out.data() + r * cols;
    T mx = x[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    T sum = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      sum += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= sum;
  }
  if (out.requires_grad()) {
    auto an = a.node(), cn = out.node();
    tape->record([an, cn, rows, cols] {
      const std::vector<T>& gc = cn->grad_buffer();
      const std::vector<T>& y = cn->value;
      std::vector<T>& ga = an->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = T(0);
        for (std::size_t c = 0; c < cols; ++c) dot += gc[r * cols + c] * y[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
          ga[r * cols + c] += y[r * cols + c] * (gc[r * cols + c] - dot);
        }
      }
    });
  }
  return out;
}

// Per-row layer normalization with learnable affine parameters.
template <typename T>
TensorT<T> layer_norm_rows(GradTapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& gamma,
                           const TensorT<T>& beta, T eps = T(1e-5)) {
  detail::check(x.rank() == 2, "layer_norm_rows: input must be rank 2");
  const std::size_t rows = x.rows(), cols = x.cols();
  detail::check(gamma.rank() == 1 && gamma.size() == cols, "layer_norm_rows: gamma size mismatch");
  detail::check(beta.rank() == 1 && beta.size() == cols, "layer_norm_rows: beta size mismatch");
  bool req = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  auto out = TensorT<T>::zeros({rows, cols}, detail::track(tape, req));
  // Normalized values and inverse stddev are stashed for the backward pass.
  auto norm = std::make_shared<std::vector<T>>(rows * cols);
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* px = x.data() + r * cols;
    T mean = T(0);
    for (std::size_t c = 0; c < cols; ++c) mean += px[c];
    mean /= static_cast<T>(cols);
    T var = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      const T d = px[c] - mean;
      var += d * d;
    }
    var /= static_cast<T>(cols);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const T nh = (px[c] - mean) * is;
      (*norm)[r * cols + c] = nh;
      out.data()[r * cols + c] = nh * gamma.data()[c] + beta.data()[c];
    }
  }
  if (out.requires_grad()) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), cn = out.node();
    tape->record([xn, gn, bn, cn, norm, inv_std, rows, cols] {
      const std::vector<T>& gc = cn->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        if (gn->requires_grad) {
          std::vector<T>& gg = gn->grad_buffer();
          for (std::size_t c = 0; c < cols; ++c) {
            gg[c] += gc[r * cols + c] * (*norm)[r * cols + c];
          }
        }
        if (bn->requires_grad) {
          std::vector<T>& gb = bn->grad_buffer();
          for (std::size_t c = 0; c < cols; ++c) gb[c] += gc[r * cols + c];
        }
        if (xn->requires_grad) {
          std::vector<T>& gx = xn->grad_buffer();
          // dnorm = gc * gamma; dx = (dnorm - mean(dnorm) - norm * mean(dnorm*norm)) * inv_std
          T sum_d = T(0), sum_dn = T(0);
          for (std::size_t c = 0; c < cols; ++c) {
            const T d = gc[r * cols + c] * gn->value[c];
            sum_d += d;
            sum_dn += d * (*norm)[r * cols + c];
          }
          const T inv_n = T(1) / static_cast<T>(cols);
          for (std::size_t c = 0; c < cols; ++c) {
            const T d = gc[r * cols + c] * gn->value[c];
            gx[r * cols + c] +=
                ((*inv_std)[r]) * (d - sum_d * inv_n - (*norm)[r * cols + c] * sum_dn * inv_n);
          }
        }
      }
    });
  }
  return out;
}

// GELU, tanh approximation.
template <typename T>
TensorT<T> gelu(GradTapeT<T>* tape, const TensorT<T>& a) {
  auto out = TensorT<T>::zeros(a.shape(), detail::track(tape, a.requires_grad()));
  const T k = std::sqrt(T(2) / T(3.14159265358979323846));
  const T c3 = T(0.044715);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T x = a.data()[i];
    out.data()[i] = T(0.5) * x * (T(1) + std::tanh(k * (x + c3 * x * x * x)));
  }
  if (out.requires_grad()) {
    auto an = a.node(), cn = out.node();
    tape->record([an, cn, k, c3] {
      const std::vector<T>& gc = cn->grad_buffer();
      std::vector<T>& ga = an->grad_buffer();
      for (std::size_t i = 0; i < gc.size(); ++i) {
        const T x = an->value[i];
        const T u = k * (x + c3 * x * x * x);
        const T t = std::tanh(u);
        const T du = k * (T(1) + T(3) * c3 * x * x);
        ga[i] += gc[i] * (T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du);
      }
    });
  }
  return out;
}

// Gathers rows of a table by index. The backward pass scatter-adds into the
// selected rows only, so unselected rows receive an exact zero gradient.
template <typename T>
TensorT<T> gather_rows(GradTapeT<T>* tape, const TensorT<T>& table,
                       const std::vector<std::size_t>& indices) {
  detail::check(table.rank() == 2, "gather_rows: table must be rank 2");
  const std::size_t cols = table.cols();
  for (std::size_t idx : indices) {
    detail::check(idx < table.rows(), "gather_rows: index out of range");
  }
  auto out = TensorT<T>::zeros({indices.size(), cols}, detail::track(tape, table.requires_grad()));
  for (std::size_t r = 0; r < indices.size(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out.data()[r * cols + c] = table.data()[indices[r] * cols + c];
    }
  }
  if (out.requires_grad()) {
    auto tn = table.node(), cn = out.node();
    tape->record([tn, cn, indices, cols] {
      const std::vector<T>& gc = cn->grad_buffer();
      std::vector<T>& gt = tn->grad_buffer();
      for (std::size_t r = 0; r < indices.size(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) gt[indices[r] * cols + c] += gc[r * cols + c];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> mean_all(GradTapeT<T>* tape, const TensorT<T>& a) {
  detail::check(a.size() > 0, "mean_all: empty input");
  T sum = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) sum += a.data()[i];
  const T inv_n = T(1) / static_cast<T>(a.size());
  auto out = TensorT<T>::zeros({1}, detail::track(tape, a.requires_grad()));
  out.data()[0] = sum * inv_n;
  if (out.requires_grad()) {
    auto an = a.node(), cn = out.node();
    tape->record([an, cn, inv_n] {
      const T g = cn->grad_buffer()[0] * inv_n;
      std::vector<T>& ga = an->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }
  return out;
}

template <typename T>
TensorT<T> sum_all(GradTapeT<T>* tape, const TensorT<T>& a) {
  T sum = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) sum += a.data()[i];
  auto out = TensorT<T>::zeros({1}, detail::track(tape, a.requires_grad()));
  out.data()[0] = sum;
  if (out.requires_grad()) {
    auto an = a.node(), cn = out.node();
    tape->record([an, cn] {
      const T g = cn->grad_buffer()[0];
      std::vector<T>& ga = an->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }
  return out;
}

// Scalar squared Euclidean distance between two equally shaped tensors.
template <typename T>
TensorT<T> squared_l2(GradTapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::check(a.shape() == b.shape(), "squared_l2: shape mismatch");
  T sum = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T d = a.data()[i] - b.data()[i];
    sum += d * d;
  }
  bool req = a.requires_grad() || b.requires_grad();
  auto out = TensorT<T>::zeros({1}, detail::track(tape, req));
  out.data()[0] = sum;
  if (out.requires_grad()) {
    auto an = a.node(), bn = b.node(), cn = out.node();
    tape->record([an, bn, cn] {
      const T g = cn->grad_buffer()[0];
      for (std::size_t i = 0; i < an->value.size(); ++i) {
        const T d = T(2) * (an->value[i] - bn->value[i]) * g;
        if (an->requires_grad) an->grad_buffer()[i] += d;
        if (bn->requires_grad) bn->grad_buffer()[i] -= d;
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> log_elem(GradTapeT<T>* tape, const TensorT<T>& a) {
  auto out = TensorT<T>::zeros(a.shape(), detail::track(tape, a.requires_grad()));
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = std::log(a.data()[i]);
  if (out.requires_grad()) {
    auto an = a.node(), cn = out.node();
    tape->record([an, cn] {
      const std::vector<T>& gc = cn->grad_buffer();
      std::vector<T>& ga = an->grad_buffer();
      for (std::size_t i = 0; i < gc.size(); ++i) ga[i] += gc[i] / an->value[i];
    });
  }
  return out;
}

// Normalizes every row to unit Euclidean length.
template <typename T>
TensorT<T> l2_normalize_rows(GradTapeT<T>* tape, const TensorT<T>& a, T eps = T(1e-12)) {
  detail::check(a.rank() == 2, "l2_normalize_rows: input must be rank 2");
  const std::size_t rows = a.rows(), cols = a.cols();
  auto out = TensorT<T>::zeros({rows, cols}, detail::track(tape, a.requires_grad()));
  auto inv_norm = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T sq = T(0);
    for (std::size_t c = 0; c < cols; ++c) sq += a.data()[r * cols + c] * a.data()[r * cols + c];
    const T in = T(1) / std::max(std::sqrt(sq), eps);
    (*inv_norm)[r] = in;
    for (std::size_t c = 0; c < cols; ++c) out.data()[r * cols + c] = a.data()[r * cols + c] * in;
  }
  if (out.requires_grad()) {
    auto an = a.node(), cn = out.node();
    tape->record([an, cn, inv_norm, rows, cols] {
      const std::vector<T>& gc = cn->grad_buffer();
      const std::vector<T>& y = cn->value;
      std::vector<T>& ga = an->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = T(0);
        for (std::size_t c = 0; c < cols; ++c) dot += gc[r * cols + c] * y[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
          ga[r * cols + c] += (gc[r * cols + c] - y[r * cols + c] * dot) * (*inv_norm)[r];
        }
      }
    });
  }
  return out;
}

}  // namespace versreid
