#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "versreid/errors.hpp"
#include "versreid/logging.hpp"
#include "versreid/tensor.hpp"

namespace versreid {

enum class DistillKind { rkd, l1, l2, kl };

inline DistillKind parse_distill_kind(const std::string& s) {
  if (s == "rkd") return DistillKind::rkd;
  if (s == "l1") return DistillKind::l1;
  if (s == "l2") return DistillKind::l2;
  if (s == "kl") return DistillKind::kl;
  throw UsageError("distill: unknown kind '" + s + "'");
}

inline const char* distill_kind_name(DistillKind k) {
  switch (k) {
    case DistillKind::rkd: return "rkd";
    case DistillKind::l1: return "l1";
    case DistillKind::l2: return "l2";
    case DistillKind::kl: return "kl";
  }
  return "?";
}

struct LossConfig {
  float margin = 0.3f;
  float alpha = 1.0f;
  DistillKind distill = DistillKind::rkd;
  float kl_tau = 1.0f;
};

// Mean of -log p[y] over the batch. Probabilities at or below zero are
// clamped to 1e-12 (with a warning); the clamped region contributes zero
// gradient.
template <typename T>
TensorT<T> cross_entropy(GradTapeT<T>* tape, const TensorT<T>& probs,
                         const std::vector<int>& labels) {
  detail::check(probs.rank() == 2, "cross_entropy: probs must be rank 2");
  const std::size_t b = probs.rows(), c = probs.cols();
  detail::check(labels.size() == b, "cross_entropy: label count mismatch");
  const T floor = T(1e-12);
  T sum = T(0);
  for (std::size_t i = 0; i < b; ++i) {
    const int y = labels[i];
    detail::check(y >= 0 && static_cast<std::size_t>(y) < c, "cross_entropy: label out of range");
    T p = probs.at(i, static_cast<std::size_t>(y));
    if (p < floor) {
      warn("cross_entropy: probability " + std::to_string(static_cast<double>(p)) +
           " clamped to 1e-12 for sample " + std::to_string(i));
      p = floor;
    }
    sum -= std::log(p);
  }
  auto out = TensorT<T>::zeros({1}, detail::track(tape, probs.requires_grad()));
  out.data()[0] = sum / static_cast<T>(b);
  if (out.requires_grad()) {
    auto pn = probs.node(), cn = out.node();
    tape->record([pn, cn, labels, b, c, floor] {
      const T g = cn->grad_buffer()[0] / static_cast<T>(b);
      std::vector<T>& gp = pn->grad_buffer();
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t y = static_cast<std::size_t>(labels[i]);
        const T p = pn->value[i * c + y];
        if (p >= floor) gp[i * c + y] -= g / p;
      }
    });
  }
  return out;
}

// Batch-hard triplet: per anchor, hinge on (furthest same-id distance minus
// nearest other-id distance plus margin), averaged over anchors. Distances
// are plain Euclidean; ties resolve to the lowest index.
template <typename T>
TensorT<T> batch_hard_triplet(GradTapeT<T>* tape, const TensorT<T>& feats,
                              const std::vector<int>& ids, T margin) {
  detail::check(feats.rank() == 2, "triplet: features must be rank 2");
  const std::size_t b = feats.rows(), d = feats.cols();
  detail::check(ids.size() == b, "triplet: id count mismatch");
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t same = 0;
    for (std::size_t j = 0; j < b; ++j) same += (ids[j] == ids[i]);
    if (same < 2) {
      throw std::runtime_error("triplet: identity " + std::to_string(ids[i]) +
                               " has a single sample in the batch");
    }
  }
  bool any_other = false;
  for (std::size_t i = 1; i < b && !any_other; ++i) any_other = (ids[i] != ids[0]);
  if (!any_other) throw std::runtime_error("triplet: batch needs at least 2 identities");

  std::vector<T> dist(b * b, T(0));
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = i + 1; j < b; ++j) {
      T sq = T(0);
      for (std::size_t k = 0; k < d; ++k) {
        const T diff = feats.at(i, k) - feats.at(j, k);
        sq += diff * diff;
      }
      const T dv = std::sqrt(sq);
      dist[i * b + j] = dv;
      dist[j * b + i] = dv;
    }
  }

  std::vector<std::size_t> pos_idx(b), neg_idx(b);
  std::vector<T> hinge(b);
  T total = T(0);
  for (std::size_t a = 0; a < b; ++a) {
    T dp = -T(1);
    std::size_t pi = a;
    T dn = T(0);
    std::size_t ni = b;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == a) continue;
      if (ids[j] == ids[a]) {
        if (dist[a * b + j] > dp) {
          dp = dist[a * b + j];
          pi = j;
        }
      } else if (ni == b || dist[a * b + j] < dn) {
        dn = dist[a * b + j];
        ni = j;
      }
    }
    const T h = dp - dn + margin;
    hinge[a] = h;
    pos_idx[a] = pi;
    neg_idx[a] = ni;
    if (h > T(0)) total += h;
  }

  auto out = TensorT<T>::zeros({1}, detail::track(tape, feats.requires_grad()));
  out.data()[0] = total / static_cast<T>(b);
  if (out.requires_grad()) {
    auto fn = feats.node(), cn = out.node();
    auto dists = std::make_shared<std::vector<T>>(std::move(dist));
    tape->record([fn, cn, dists, pos_idx, neg_idx, hinge, b, d] {
      const T g = cn->grad_buffer()[0] / static_cast<T>(b);
      std::vector<T>& gf = fn->grad_buffer();
      const std::vector<T>& x = fn->value;
      for (std::size_t a = 0; a < b; ++a) {
        if (hinge[a] <= T(0)) continue;
        const std::size_t p = pos_idx[a], n = neg_idx[a];
        const T dp = (*dists)[a * b + p];
        const T dn = (*dists)[a * b + n];
        // d||f_a - f_j|| / df = (f_a - f_j)/dist; zero distance contributes
        // a zero subgradient.
        if (dp > T(0)) {
          for (std::size_t k = 0; k < d; ++k) {
            const T u = (x[a * d + k] - x[p * d + k]) / dp * g;
            gf[a * d + k] += u;
            gf[p * d + k] -= u;
          }
        }
        if (dn > T(0)) {
          for (std::size_t k = 0; k < d; ++k) {
            const T u = (x[a * d + k] - x[n * d + k]) / dn * g;
            gf[a * d + k] -= u;
            gf[n * d + k] += u;
          }
        }
      }
    });
  }
  return out;
}

// Relational distillation on squared pairwise distances, summed over
// unordered pairs and normalized by the pair count.
template <typename T>
TensorT<T> rkd_loss(GradTapeT<T>* tape, const TensorT<T>& student, const TensorT<T>& teacher) {
  detail::check(student.rank() == 2 && teacher.rank() == 2, "rkd: inputs must be rank 2");
  detail::check(student.shape() == teacher.shape(), "rkd: shape mismatch");
  const std::size_t b = student.rows(), d = student.cols();
  if (b < 2) throw std::runtime_error("rkd: batch size must be at least 2");
  const T pairs = static_cast<T>(b * (b - 1) / 2);

  auto sqdist = [d](const TensorT<T>& f, std::size_t i, std::size_t j) {
    T sq = T(0);
    for (std::size_t k = 0; k < d; ++k) {
      const T diff = f.at(i, k) - f.at(j, k);
      sq += diff * diff;
    }
    return sq;
  };

  T total = T(0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = i + 1; j < b; ++j) {
      const T delta = sqdist(student, i, j) - sqdist(teacher, i, j);
      total += delta * delta;
    }
  }
  bool req = student.requires_grad() || teacher.requires_grad();
  auto out = TensorT<T>::zeros({1}, detail::track(tape, req));
  out.data()[0] = total / pairs;
  if (out.requires_grad()) {
    auto sn = student.node(), tn = teacher.node(), cn = out.node();
    tape->record([sn, tn, cn, b, d, pairs] {
      const T g = cn->grad_buffer()[0] / pairs;
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = i + 1; j < b; ++j) {
          T ds = T(0), dt = T(0);
          for (std::size_t k = 0; k < d; ++k) {
            const T a = sn->value[i * d + k] - sn->value[j * d + k];
            const T bb = tn->value[i * d + k] - tn->value[j * d + k];
            ds += a * a;
            dt += bb * bb;
          }
          const T coeff = T(2) * (ds - dt) * g;
          if (sn->requires_grad) {
            std::vector<T>& gs = sn->grad_buffer();
            for (std::size_t k = 0; k < d; ++k) {
              const T u = T(2) * (sn->value[i * d + k] - sn->value[j * d + k]) * coeff;
              gs[i * d + k] += u;
              gs[j * d + k] -= u;
            }
          }
          if (tn->requires_grad) {
            std::vector<T>& gt = tn->grad_buffer();
            for (std::size_t k = 0; k < d; ++k) {
              const T u = T(2) * (tn->value[i * d + k] - tn->value[j * d + k]) * coeff;
              gt[i * d + k] -= u;
              gt[j * d + k] += u;
            }
          }
        }
      }
    });
  }
  return out;
}

// Mean per-sample L1 distance between matched feature rows.
template <typename T>
TensorT<T> l1_distill(GradTapeT<T>* tape, const TensorT<T>& student, const TensorT<T>& teacher) {
  detail::check(student.shape() == teacher.shape(), "l1 distill: shape mismatch");
  const std::size_t b = student.rows(), d = student.cols();
  T total = T(0);
  for (std::size_t i = 0; i < b * d; ++i) total += std::abs(student.data()[i] - teacher.data()[i]);
  bool req = student.requires_grad() || teacher.requires_grad();
  auto out = TensorT<T>::zeros({1}, detail::track(tape, req));
  out.data()[0] = total / static_cast<T>(b);
  if (out.requires_grad()) {
    auto sn = student.node(), tn = teacher.node(), cn = out.node();
    tape->record([sn, tn, cn, b] {
      const T g = cn->grad_buffer()[0] / static_cast<T>(b);
      for (std::size_t i = 0; i < sn->value.size(); ++i) {
        const T diff = sn->value[i] - tn->value[i];
        const T s = diff > T(0) ? T(1) : (diff < T(0) ? -T(1) : T(0));
        if (sn->requires_grad) sn->grad_buffer()[i] += s * g;
        if (tn->requires_grad) tn->grad_buffer()[i] -= s * g;
      }
    });
  }
  return out;
}

// Mean per-sample Euclidean distance between matched feature rows.
template <typename T>
TensorT<T> l2_distill(GradTapeT<T>* tape, const TensorT<T>& student, const TensorT<T>& teacher) {
  detail::check(student.shape() == teacher.shape(), "l2 distill: shape mismatch");
  const std::size_t b = student.rows(), d = student.cols();
  std::vector<T> dist(b, T(0));
  T total = T(0);
  for (std::size_t i = 0; i < b; ++i) {
    T sq = T(0);
    for (std::size_t k = 0; k < d; ++k) {
      const T diff = student.at(i, k) - teacher.at(i, k);
      sq += diff * diff;
    }
    dist[i] = std::sqrt(sq);
    total += dist[i];
  }
  bool req = student.requires_grad() || teacher.requires_grad();
  auto out = TensorT<T>::zeros({1}, detail::track(tape, req));
  out.data()[0] = total / static_cast<T>(b);
  if (out.requires_grad()) {
    auto sn = student.node(), tn = teacher.node(), cn = out.node();
    auto dists = std::make_shared<std::vector<T>>(std::move(dist));
    tape->record([sn, tn, cn, dists, b, d] {
      const T g = cn->grad_buffer()[0] / static_cast<T>(b);
      for (std::size_t i = 0; i < b; ++i) {
        if ((*dists)[i] <= T(0)) continue;
        for (std::size_t k = 0; k < d; ++k) {
          const T u = (sn->value[i * d + k] - tn->value[i * d + k]) / (*dists)[i] * g;
          if (sn->requires_grad) sn->grad_buffer()[i * d + k] += u;
          if (tn->requires_grad) tn->grad_buffer()[i * d + k] -= u;
        }
      }
    });
  }
  return out;
}

// Mean KL(teacher || student) over rows, with both distributions re-tempered
// by exponent 1/tau and renormalized. Logs are clamped at 1e-12. The teacher
// side is a constant: no gradient is recorded for it.
template <typename T>
TensorT<T> kl_distill(GradTapeT<T>* tape, const TensorT<T>& student_probs,
                      const TensorT<T>& teacher_probs, T tau) {
  detail::check(student_probs.shape() == teacher_probs.shape(), "kl distill: shape mismatch");
  detail::check(tau > T(0), "kl distill: tau must be positive");
  const std::size_t b = student_probs.rows(), c = student_probs.cols();
  const T floor = T(1e-12);
  auto temper = [&](const TensorT<T>& p, std::size_t row, std::vector<T>& out_row) {
    T z = T(0);
    for (std::size_t k = 0; k < c; ++k) {
      const T v = std::pow(std::max(p.at(row, k), T(0)), T(1) / tau);
      out_row[k] = v;
      z += v;
    }
    for (std::size_t k = 0; k < c; ++k) out_row[k] /= z;
  };

  auto st = std::make_shared<std::vector<T>>(b * c);
  auto tt = std::make_shared<std::vector<T>>(b * c);
  std::vector<T> srow(c), trow(c);
  T total = T(0);
  for (std::size_t i = 0; i < b; ++i) {
    temper(student_probs, i, srow);
    temper(teacher_probs, i, trow);
    for (std::size_t k = 0; k < c; ++k) {
      (*st)[i * c + k] = srow[k];
      (*tt)[i * c + k] = trow[k];
      if (trow[k] > T(0)) {
        total += trow[k] * (std::log(std::max(trow[k], floor)) - std::log(std::max(srow[k], floor)));
      }
    }
  }
  auto out = TensorT<T>::zeros({1}, detail::track(tape, student_probs.requires_grad()));
  out.data()[0] = total / static_cast<T>(b);
  if (out.requires_grad()) {
    auto sn = student_probs.node(), cn = out.node();
    tape->record([sn, cn, st, tt, b, c, tau, floor] {
      const T g = cn->grad_buffer()[0] / static_cast<T>(b);
      std::vector<T>& gs = sn->grad_buffer();
      // d/dq_m mean-KL = (q~_m - p~_m) / (tau * q_m) per row.
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t m = 0; m < c; ++m) {
          const T q = std::max(sn->value[i * c + m], floor);
          gs[i * c + m] += g * ((*st)[i * c + m] - (*tt)[i * c + m]) / (tau * q);
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> distill_variant(GradTapeT<T>* tape, DistillKind kind, const TensorT<T>& student_feats,
                           const TensorT<T>& teacher_feats, const TensorT<T>& student_probs,
                           const TensorT<T>& teacher_probs, T kl_tau) {
  switch (kind) {
    case DistillKind::rkd: return rkd_loss(tape, student_feats, teacher_feats);
    case DistillKind::l1: return l1_distill(tape, student_feats, teacher_feats);
    case DistillKind::l2: return l2_distill(tape, student_feats, teacher_feats);
    case DistillKind::kl: return kl_distill(tape, student_probs, teacher_probs, kl_tau);
  }
  throw UsageError("distill: unknown kind");
}

// Stage-1 objective: triplet plus mean identity cross-entropy, unweighted.
template <typename T>
TensorT<T> stage1_loss(GradTapeT<T>* tape, const TensorT<T>& feats, const TensorT<T>& probs,
                       const std::vector<int>& ids, const LossConfig& cfg) {
  auto tri = batch_hard_triplet(tape, feats, ids, T(cfg.margin));
  auto ce = cross_entropy(tape, probs, ids);
  return add(tape, tri, ce);
}

// Stage-2 objective: stage-1 terms on the student plus alpha times the
// distillation term. alpha == 0 takes the exact stage-1 code path so the
// degenerate case is bit-identical to stage1_loss.
template <typename T>
TensorT<T> stage2_loss(GradTapeT<T>* tape, const TensorT<T>& student_feats,
                       const TensorT<T>& student_probs, const TensorT<T>& teacher_feats,
                       const TensorT<T>& teacher_probs, const std::vector<int>& ids,
                       const LossConfig& cfg) {
  auto base = stage1_loss(tape, student_feats, student_probs, ids, cfg);
  if (cfg.alpha == 0.0f) return base;
  auto kd = distill_variant(tape, cfg.distill, student_feats, teacher_feats, student_probs,
                            teacher_probs, T(cfg.kl_tau));
  return add(tape, base, scale(tape, kd, T(cfg.alpha)));
}

}  // namespace versreid
