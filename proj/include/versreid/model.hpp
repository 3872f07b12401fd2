#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "versreid/errors.hpp"
#include "versreid/image.hpp"
#include "versreid/rng.hpp"
#include "versreid/tensor.hpp"

namespace versreid {

struct ModelConfig {
  std::size_t image_h = 32;
  std::size_t image_w = 16;
  std::size_t patch = 8;
  std::size_t stride = 8;  // stride < patch gives the overlapping variant
  std::size_t dim = 32;
  std::size_t blocks = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t scenes = 5;
  std::size_t prompts_per_scene = 2;
  std::size_t versatile_prompts = 5;
  std::size_t num_ids = 0;

  std::size_t tokens_h() const { return (image_h - patch) / stride + 1; }
  std::size_t tokens_w() const { return (image_w - patch) / stride + 1; }
  std::size_t num_tokens() const { return tokens_h() * tokens_w(); }
  std::size_t patch_dim() const { return patch * patch * 3; }

  void validate() const {
    if (patch == 0 || stride == 0 || dim == 0 || heads == 0 || blocks == 0 || mlp_ratio == 0) {
      throw UsageError("config: model dimensions must be positive");
    }
    if (patch > image_h || patch > image_w) {
      throw UsageError("config: patch larger than image");
    }
    if ((image_h - patch) % stride != 0 || (image_w - patch) % stride != 0) {
      throw UsageError("config: stride must evenly tile the image");
    }
    if (dim % heads != 0) throw UsageError("config: dim must be divisible by heads");
    if (scenes == 0) throw UsageError("config: scene count must be positive");
  }
};

enum class BranchKind { bank, vbranch };

template <typename T>
struct LinearT {
  TensorT<T> w;
  TensorT<T> b;
};

template <typename T>
struct NormT {
  TensorT<T> gamma;
  TensorT<T> beta;
};

template <typename T>
struct BlockT {
  NormT<T> ln1;
  LinearT<T> wq, wk, wv, wo;
  NormT<T> ln2;
  LinearT<T> fc1, fc2;
};

// One branch: the shared-architecture transformer plus whichever prompt set
// the branch kind uses. The ReID Bank holds the scene-prompt pool (S groups
// of N rows in one (S*N)xD table); the V-Branch holds M versatile prompts.
template <typename T>
struct BranchT {
  ModelConfig cfg;
  BranchKind kind = BranchKind::bank;
  LinearT<T> patch_embed;
  TensorT<T> cls;  // 1 x D
  TensorT<T> pos;  // (1+l) x D, never covers prompt rows
  std::vector<BlockT<T>> blocks;
  NormT<T> final_norm;
  NormT<T> feature_norm;
  LinearT<T> classifier;
  TensorT<T> scene_prompts;      // (S*N) x D, bank only
  TensorT<T> versatile_prompts;  // M x D, vbranch only
};

using Branch = BranchT<float>;

namespace detail {

template <typename T>
TensorT<T> init_normal(Rng& rng, std::vector<std::size_t> shape, T stddev) {
  auto t = TensorT<T>::zeros(std::move(shape), true);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

template <typename T>
TensorT<T> init_const(std::vector<std::size_t> shape, T value) {
  auto t = TensorT<T>::zeros(std::move(shape), true);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = value;
  return t;
}

template <typename T>
LinearT<T> init_linear(Rng& rng, std::size_t in, std::size_t out) {
  // Variance-preserving init for the linear maps. A fixed 0.02 std assumes
  // large embedding widths; at desk widths its gain 0.02*sqrt(dim) << 1
  // attenuates the token-to-class-token signal path until features are
  // input-independent, which stalls training from scratch.
  const T std = std::sqrt(T(2) / static_cast<T>(in + out));
  return {init_normal<T>(rng, {in, out}, std), init_const<T>({out}, T(0))};
}

template <typename T>
NormT<T> init_norm(std::size_t dim) {
  return {init_const<T>({dim}, T(1)), init_const<T>({dim}, T(0))};
}

}  // namespace detail

template <typename T>
BranchT<T> make_branch(const ModelConfig& cfg, BranchKind kind, Rng& rng) {
  cfg.validate();
  BranchT<T> br;
  br.cfg = cfg;
  br.kind = kind;
  br.patch_embed = detail::init_linear<T>(rng, cfg.patch_dim(), cfg.dim);
  br.cls = detail::init_normal<T>(rng, {1, cfg.dim}, T(0.02));
  br.pos = detail::init_normal<T>(rng, {1 + cfg.num_tokens(), cfg.dim}, T(0.02));
  br.blocks.resize(cfg.blocks);
  for (auto& blk : br.blocks) {
    blk.ln1 = detail::init_norm<T>(cfg.dim);
    blk.wq = detail::init_linear<T>(rng, cfg.dim, cfg.dim);
    blk.wk = detail::init_linear<T>(rng, cfg.dim, cfg.dim);
    blk.wv = detail::init_linear<T>(rng, cfg.dim, cfg.dim);
    blk.wo = detail::init_linear<T>(rng, cfg.dim, cfg.dim);
    blk.ln2 = detail::init_norm<T>(cfg.dim);
    blk.fc1 = detail::init_linear<T>(rng, cfg.dim, cfg.dim * cfg.mlp_ratio);
    blk.fc2 = detail::init_linear<T>(rng, cfg.dim * cfg.mlp_ratio, cfg.dim);
  }
  br.final_norm = detail::init_norm<T>(cfg.dim);
  br.feature_norm = detail::init_norm<T>(cfg.dim);
  // The classifier starts at zero: every image then scores a uniform
  // posterior, and no gradient reaches the backbone through this head until
  // the class directions carry real signal. With a random classifier and
  // weak features, the fastest cross-entropy descent is instead to collapse
  // the features themselves toward a single point.
  const std::size_t classes = cfg.num_ids > 0 ? cfg.num_ids : 1;
  br.classifier = LinearT<T>{detail::init_const<T>({cfg.dim, classes}, T(0)),
                             detail::init_const<T>({classes}, T(0))};
  if (kind == BranchKind::bank) {
    br.scene_prompts =
        detail::init_normal<T>(rng, {cfg.scenes * cfg.prompts_per_scene, cfg.dim}, T(0.02));
  } else {
    br.versatile_prompts = detail::init_normal<T>(rng, {cfg.versatile_prompts, cfg.dim}, T(0.02));
  }
  return br;
}

// Visits every learnable parameter in a fixed, documented order; checkpoint
// layout and optimizer registration both rely on this order.
template <typename T, typename Fn>
void for_each_parameter(BranchT<T>& br, Fn&& fn) {
  fn("patch.weight", br.patch_embed.w);
  fn("patch.bias", br.patch_embed.b);
  fn("cls", br.cls);
  fn("pos", br.pos);
  for (std::size_t i = 0; i < br.blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    auto& blk = br.blocks[i];
    fn(p + "ln1.gamma", blk.ln1.gamma);
    fn(p + "ln1.beta", blk.ln1.beta);
    fn(p + "attn.wq", blk.wq.w);
    fn(p + "attn.bq", blk.wq.b);
    fn(p + "attn.wk", blk.wk.w);
    fn(p + "attn.bk", blk.wk.b);
    fn(p + "attn.wv", blk.wv.w);
    fn(p + "attn.bv", blk.wv.b);
    fn(p + "attn.wo", blk.wo.w);
    fn(p + "attn.bo", blk.wo.b);
    fn(p + "ln2.gamma", blk.ln2.gamma);
    fn(p + "ln2.beta", blk.ln2.beta);
    fn(p + "mlp.w1", blk.fc1.w);
    fn(p + "mlp.b1", blk.fc1.b);
    fn(p + "mlp.w2", blk.fc2.w);
    fn(p + "mlp.b2", blk.fc2.b);
  }
  fn("final_norm.gamma", br.final_norm.gamma);
  fn("final_norm.beta", br.final_norm.beta);
  fn("feature_norm.gamma", br.feature_norm.gamma);
  fn("feature_norm.beta", br.feature_norm.beta);
  fn("classifier.weight", br.classifier.w);
  fn("classifier.bias", br.classifier.b);
  if (br.kind == BranchKind::bank) {
    fn("prompts.scene", br.scene_prompts);
  } else {
    fn("prompts.versatile", br.versatile_prompts);
  }
}

template <typename T, typename Fn>
void for_each_parameter(const BranchT<T>& br, Fn&& fn) {
  for_each_parameter(const_cast<BranchT<T>&>(br),
                     [&](const std::string& name, TensorT<T>& t) {
                       fn(name, static_cast<const TensorT<T>&>(t));
                     });
}

inline bool is_backbone_parameter(const std::string& name) {
  return name.rfind("feature_norm.", 0) != 0 && name.rfind("classifier.", 0) != 0 &&
         name.rfind("prompts.", 0) != 0;
}

// Backbone-only subset: the parameters shared between branch kinds.
template <typename T, typename Fn>
void for_each_backbone_parameter(BranchT<T>& br, Fn&& fn) {
  for_each_parameter(br, [&](const std::string& name, TensorT<T>& t) {
    if (is_backbone_parameter(name)) fn(name, t);
  });
}

template <typename T>
TensorT<T> clone_tensor(const TensorT<T>& t) {
  auto out = TensorT<T>::from(t.shape(), t.values(), t.requires_grad());
  return out;
}

// Patch extraction is input preparation, not a differentiable op: the image
// enters the graph as a constant (l x patch_dim) matrix. Patch vectors are
// flattened in (dy, dx, channel) order.
template <typename T>
TensorT<T> extract_patches(const ModelConfig& cfg, const Image& img) {
  if (img.h != cfg.image_h || img.w != cfg.image_w) {
    throw UsageError("serialize: image is " + std::to_string(img.h) + "x" + std::to_string(img.w) +
                     ", config wants " + std::to_string(cfg.image_h) + "x" +
                     std::to_string(cfg.image_w));
  }
  const std::size_t l = cfg.num_tokens();
  auto out = TensorT<T>::zeros({l, cfg.patch_dim()});
  std::size_t row = 0;
  for (std::size_t py = 0; py + cfg.patch <= cfg.image_h; py += cfg.stride) {
    for (std::size_t px = 0; px + cfg.patch <= cfg.image_w; px += cfg.stride) {
      std::size_t k = 0;
      for (std::size_t dy = 0; dy < cfg.patch; ++dy) {
        for (std::size_t dx = 0; dx < cfg.patch; ++dx) {
          for (std::size_t c = 0; c < 3; ++c) {
            out.at(row, k++) = static_cast<T>(img.at(py + dy, px + dx, c));
          }
        }
      }
      ++row;
    }
  }
  return out;
}

// Embeds patches, prepends the class token, and adds positional encodings to
// all 1+l rows. Row 0 is the class-token slot.
template <typename T>
TensorT<T> serialize_image(GradTapeT<T>* tape, const BranchT<T>& br, const Image& img) {
  auto patches = extract_patches<T>(br.cfg, img);
  auto tokens = add(tape, matmul(tape, patches, br.patch_embed.w), br.patch_embed.b);
  auto seq = concat(tape, {br.cls, tokens}, 0);
  return add(tape, seq, br.pos);
}

// Appends prompt rows after the image tokens; prompts never receive
// positional encoding. k = 0 returns the input unchanged.
template <typename T>
TensorT<T> assemble_sequence(GradTapeT<T>* tape, const TensorT<T>& tokens,
                             const TensorT<T>& prompts) {
  if (!prompts.defined() || prompts.rows() == 0) return tokens;
  detail::check(prompts.cols() == tokens.cols(), "assemble: embedding dims differ");
  return concat(tape, {tokens, prompts}, 0);
}

namespace detail {

template <typename T>
TensorT<T> linear(GradTapeT<T>* tape, const TensorT<T>& x, const LinearT<T>& lin) {
  return add(tape, matmul(tape, x, lin.w), lin.b);
}

template <typename T>
TensorT<T> attention(GradTapeT<T>* tape, const TensorT<T>& x, const BlockT<T>& blk,
                     std::size_t heads) {
  const std::size_t d = x.cols();
  const std::size_t dh = d / heads;
  auto q = linear(tape, x, blk.wq);
  auto k = linear(tape, x, blk.wk);
  auto v = linear(tape, x, blk.wv);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<TensorT<T>> head_outs;
  head_outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = slice_cols(tape, q, h * dh, dh);
    auto kh = slice_cols(tape, k, h * dh, dh);
    auto vh = slice_cols(tape, v, h * dh, dh);
    auto scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), inv_sqrt);
    auto attn = softmax_rows(tape, scores);
    head_outs.push_back(matmul(tape, attn, vh));
  }
  auto merged = heads == 1 ? head_outs[0] : concat(tape, head_outs, 1);
  return linear(tape, merged, blk.wo);
}

}  // namespace detail

// Pre-norm blocks with full attention over the whole sequence, prompts
// included. Output shape equals input shape; the final normalization is
// applied by the feature extraction step, not here.
template <typename T>
TensorT<T> transformer_forward(GradTapeT<T>* tape, const BranchT<T>& br, const TensorT<T>& seq) {
  auto x = seq;
  for (const auto& blk : br.blocks) {
    auto h = layer_norm_rows(tape, x, blk.ln1.gamma, blk.ln1.beta);
    x = add(tape, x, detail::attention(tape, h, blk, br.cfg.heads));
    auto h2 = layer_norm_rows(tape, x, blk.ln2.gamma, blk.ln2.beta);
    auto m = detail::linear(tape, gelu(tape, detail::linear(tape, h2, blk.fc1)), blk.fc2);
    x = add(tape, x, m);
  }
  return x;
}

template <typename T>
struct ForwardResult {
  TensorT<T> f;  // 1 x D class-token feature, used for triplet and retrieval
  TensorT<T> p;  // 1 x C identity probabilities
};

namespace detail {

template <typename T>
ForwardResult<T> forward_common(GradTapeT<T>* tape, const BranchT<T>& br, const Image& img,
                                const TensorT<T>& prompts) {
  auto seq = assemble_sequence(tape, serialize_image(tape, br, img), prompts);
  auto out = transformer_forward(tape, br, seq);
  auto normed = layer_norm_rows(tape, out, br.final_norm.gamma, br.final_norm.beta);
  ForwardResult<T> res;
  res.f = slice_rows(tape, normed, 0, 1);
  auto head_in = layer_norm_rows(tape, res.f, br.feature_norm.gamma, br.feature_norm.beta);
  res.p = softmax_rows(tape, linear(tape, head_in, br.classifier));
  return res;
}

}  // namespace detail

template <typename T>
ForwardResult<T> forward_bank(GradTapeT<T>* tape, const BranchT<T>& bank, const Image& img,
                              std::size_t scene) {
  detail::check(bank.kind == BranchKind::bank, "forward_bank: branch is not a bank");
  if (scene >= bank.cfg.scenes) {
    throw std::runtime_error("forward_bank: scene label " + std::to_string(scene) +
                             " out of range (S=" + std::to_string(bank.cfg.scenes) + ")");
  }
  const std::size_t n = bank.cfg.prompts_per_scene;
  TensorT<T> prompts;
  if (n > 0) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = scene * n + i;
    prompts = gather_rows(tape, bank.scene_prompts, idx);
  }
  return detail::forward_common(tape, bank, img, prompts);
}

// Scene labels are not an input anywhere in this path.
template <typename T>
ForwardResult<T> forward_vbranch(GradTapeT<T>* tape, const BranchT<T>& vb, const Image& img) {
  detail::check(vb.kind == BranchKind::vbranch, "forward_vbranch: branch is not a v-branch");
  return detail::forward_common(tape, vb, img, vb.versatile_prompts);
}

template <typename T>
struct BatchForward {
  TensorT<T> feats;  // B x D
  TensorT<T> probs;  // B x C
};

template <typename T>
BatchForward<T> forward_bank_batch(GradTapeT<T>* tape, const BranchT<T>& bank,
                                   const std::vector<const Image*>& images,
                                   const std::vector<std::size_t>& scenes) {
  detail::check(images.size() == scenes.size(), "forward_bank_batch: size mismatch");
  std::vector<TensorT<T>> fs, ps;
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto r = forward_bank(tape, bank, *images[i], scenes[i]);
    fs.push_back(r.f);
    ps.push_back(r.p);
  }
  return {concat(tape, fs, 0), concat(tape, ps, 0)};
}

template <typename T>
BatchForward<T> forward_vbranch_batch(GradTapeT<T>* tape, const BranchT<T>& vb,
                                      const std::vector<const Image*>& images) {
  std::vector<TensorT<T>> fs, ps;
  for (const Image* img : images) {
    auto r = forward_vbranch(tape, vb, *img);
    fs.push_back(r.f);
    ps.push_back(r.p);
  }
  return {concat(tape, fs, 0), concat(tape, ps, 0)};
}

// Stage-2 initialization: the backbone is deep-copied from the trained bank;
// versatile prompts, the pre-classifier normalization, and the classifier
// start fresh. Later V-Branch updates can never reach bank storage.
template <typename T>
BranchT<T> init_vbranch_from_bank(const BranchT<T>& bank, Rng& rng) {
  detail::check(bank.kind == BranchKind::bank, "init_vbranch: source is not a bank");
  BranchT<T> vb = make_branch<T>(bank.cfg, BranchKind::vbranch, rng);
  std::vector<const TensorT<T>*> bank_params;
  for_each_parameter(bank, [&](const std::string& name, const TensorT<T>& t) {
    if (is_backbone_parameter(name)) bank_params.push_back(&t);
  });
  std::size_t i = 0;
  for_each_backbone_parameter(vb, [&](const std::string&, TensorT<T>& t) {
    t.values() = bank_params[i]->values();
    ++i;
  });
  return vb;
}

}  // namespace versreid
