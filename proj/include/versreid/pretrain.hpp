#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "versreid/errors.hpp"
#include "versreid/losses.hpp"
#include "versreid/model.hpp"
#include "versreid/optim.hpp"
#include "versreid/tensor.hpp"

namespace versreid {

// Query/key encoder for the simplified momentum-contrastive objective: the
// shared ViT backbone (prompt-free forward) plus a projection head.
template <typename T>
struct ProjectionHeadT {
  LinearT<T> fc1;  // D -> 2D
  LinearT<T> fc2;  // 2D -> D
};

template <typename T>
struct PretrainEncoderT {
  BranchT<T> branch;
  ProjectionHeadT<T> head;
};

namespace detail {

// The head feeds l2_normalize, so its output must sit at unit scale: with the
// backbone's 0.02 init the pre-normalization norm is ~1e-3, the normalize
// Jacobian explodes, and the hidden layer dies. Fan-in scaling keeps it sane.
template <typename T>
LinearT<T> init_projection(Rng& rng, std::size_t in, std::size_t out) {
  return {init_normal<T>(rng, {in, out}, std::sqrt(T(2) / static_cast<T>(in))),
          init_const<T>({out}, T(0))};
}

}  // namespace detail

template <typename T>
PretrainEncoderT<T> make_pretrain_encoder(const ModelConfig& cfg, Rng& rng) {
  PretrainEncoderT<T> enc;
  enc.branch = make_branch<T>(cfg, BranchKind::bank, rng);
  enc.head.fc1 = detail::init_projection<T>(rng, cfg.dim, 2 * cfg.dim);
  enc.head.fc2 = detail::init_projection<T>(rng, 2 * cfg.dim, cfg.dim);
  return enc;
}

// Parameters touched by pretraining: the backbone and the projection head.
// Prompts, the pre-classifier norm, and the classifier stay at their
// initialization (they are not in the pretraining forward path).
template <typename T, typename Fn>
void for_each_pretrain_parameter(PretrainEncoderT<T>& enc, Fn&& fn) {
  for_each_backbone_parameter(enc.branch, fn);
  fn("proj.w1", enc.head.fc1.w);
  fn("proj.b1", enc.head.fc1.b);
  fn("proj.w2", enc.head.fc2.w);
  fn("proj.b2", enc.head.fc2.b);
}

template <typename T>
PretrainEncoderT<T> clone_pretrain_encoder(const PretrainEncoderT<T>& enc, Rng& rng) {
  PretrainEncoderT<T> copy = make_pretrain_encoder<T>(enc.branch.cfg, rng);
  std::vector<const TensorT<T>*> src;
  for_each_pretrain_parameter(const_cast<PretrainEncoderT<T>&>(enc),
                              [&](const std::string&, TensorT<T>& t) { src.push_back(&t); });
  std::size_t i = 0;
  for_each_pretrain_parameter(copy, [&](const std::string&, TensorT<T>& t) {
    t.values() = src[i]->values();
    ++i;
  });
  return copy;
}

// Prompt-free class-token features for a batch of images.
template <typename T>
TensorT<T> encode_batch(GradTapeT<T>* tape, const BranchT<T>& br,
                        const std::vector<const Image*>& images) {
  std::vector<TensorT<T>> rows;
  rows.reserve(images.size());
  for (const Image* img : images) {
    auto seq = serialize_image(tape, br, *img);
    auto out = transformer_forward(tape, br, seq);
    auto normed = layer_norm_rows(tape, out, br.final_norm.gamma, br.final_norm.beta);
    rows.push_back(slice_rows(tape, normed, 0, 1));
  }
  return concat(tape, rows, 0);
}

template <typename T>
TensorT<T> project(GradTapeT<T>* tape, const ProjectionHeadT<T>& head, const TensorT<T>& feats) {
  auto h = gelu(tape, detail::linear(tape, feats, head.fc1));
  return l2_normalize_rows(tape, detail::linear(tape, h, head.fc2));
}

// Symmetric in-batch InfoNCE at temperature tau: queries from the live
// encoder on one view against keys from the momentum encoder on the other
// view, plus the mirrored term. Keys are constants.
template <typename T>
TensorT<T> contrastive_loss(GradTapeT<T>* tape, const PretrainEncoderT<T>& enc,
                            const PretrainEncoderT<T>& momentum_enc,
                            const std::vector<const Image*>& views_a,
                            const std::vector<const Image*>& views_b, T tau) {
  const std::size_t b = views_a.size();
  detail::check(views_b.size() == b, "contrastive: view batch size mismatch");
  if (b < 2) throw UsageError("contrastive: batch of 1 has no negatives");
  std::vector<int> labels(b);
  for (std::size_t i = 0; i < b; ++i) labels[i] = static_cast<int>(i);

  auto qa = project(tape, enc.head, encode_batch(tape, enc.branch, views_a));
  auto kb = project<T>(nullptr, momentum_enc.head,
                       encode_batch<T>(nullptr, momentum_enc.branch, views_b));
  auto probs_ab = softmax_rows(tape, scale(tape, matmul(tape, qa, transpose(tape, kb)), T(1) / tau));
  auto loss_ab = cross_entropy(tape, probs_ab, labels);

  auto qb = project(tape, enc.head, encode_batch(tape, enc.branch, views_b));
  auto ka = project<T>(nullptr, momentum_enc.head,
                       encode_batch<T>(nullptr, momentum_enc.branch, views_a));
  auto probs_ba = softmax_rows(tape, scale(tape, matmul(tape, qb, transpose(tape, ka)), T(1) / tau));
  auto loss_ba = cross_entropy(tape, probs_ba, labels);

  return scale(tape, add(tape, loss_ab, loss_ba), T(0.5));
}

// EMA update of every momentum-encoder parameter: m=1 freezes it, m=0 copies
// the live encoder.
template <typename T>
void momentum_update(const PretrainEncoderT<T>& enc, PretrainEncoderT<T>& momentum_enc, T m) {
  std::vector<const TensorT<T>*> src;
  for_each_pretrain_parameter(const_cast<PretrainEncoderT<T>&>(enc),
                              [&](const std::string&, TensorT<T>& t) { src.push_back(&t); });
  std::size_t i = 0;
  for_each_pretrain_parameter(momentum_enc, [&](const std::string& name, TensorT<T>& t) {
    if (t.shape() != src[i]->shape()) {
      throw std::runtime_error("momentum_update: shape mismatch at " + name);
    }
    for (std::size_t k = 0; k < t.size(); ++k) {
      t.data()[k] = m * t.data()[k] + (T(1) - m) * src[i]->data()[k];
    }
    ++i;
  });
}

// One optimization step: loss, backward, SGD on the live encoder, EMA on the
// momentum encoder. Returns the loss value.
template <typename T>
T contrastive_step(PretrainEncoderT<T>& enc, PretrainEncoderT<T>& momentum_enc,
                   const std::vector<const Image*>& views_a,
                   const std::vector<const Image*>& views_b, T tau, T ema_m, SgdT<T>& opt, T lr) {
  GradTapeT<T> tape;
  auto loss = contrastive_loss(&tape, enc, momentum_enc, views_a, views_b, tau);
  opt.zero_grad();
  tape.backward(loss);
  opt.step(lr);
  momentum_update(enc, momentum_enc, ema_m);
  return loss.at(0);
}

}  // namespace versreid
