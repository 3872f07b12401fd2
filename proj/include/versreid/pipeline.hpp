#pragma once
// End-to-end drivers shared by the command-line tool and the test suites:
// corpus loading, bank training, distillation into the versatile branch,
// contrastive pretraining, and retrieval evaluation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "versreid/augment.hpp"
#include "versreid/checkpoint.hpp"
#include "versreid/config.hpp"
#include "versreid/dataset.hpp"
#include "versreid/errors.hpp"
#include "versreid/eval.hpp"
#include "versreid/image.hpp"
#include "versreid/logging.hpp"
#include "versreid/losses.hpp"
#include "versreid/model.hpp"
#include "versreid/optim.hpp"
#include "versreid/pretrain.hpp"
#include "versreid/rng.hpp"
#include "versreid/threading.hpp"

namespace versreid {

// ---------------------------------------------------------------------------
// Corpus loading
// ---------------------------------------------------------------------------

struct LoadedDataset {
  DatasetManifest manifest;
  std::vector<Image> images;  // parallel to manifest.records
  // Contiguous classifier label per record; -1 for identities that never
  // appear in the train split (they can still be retrieval items).
  std::vector<int> train_label;
  std::size_t num_train_ids = 0;
};

inline LoadedDataset load_dataset(const std::string& data_dir) {
  LoadedDataset ds;
  const auto manifest_path = std::filesystem::path(data_dir) / "manifest.tsv";
  ds.manifest = load_manifest(manifest_path.string());
  if (ds.manifest.records.empty()) {
    throw DataError("dataset: manifest has no records: " + manifest_path.string());
  }
  ds.images.resize(ds.manifest.records.size());
  parallel_for(ds.manifest.records.size(), [&](std::size_t i) {
    ds.images[i] = load_record_image(ds.manifest, ds.manifest.records[i]);
  });
  std::map<std::size_t, int> remap;
  for (const auto& rec : ds.manifest.records) {
    if (rec.split == Split::train) remap.emplace(rec.identity, 0);
  }
  int next = 0;
  for (auto& [id, label] : remap) label = next++;
  ds.num_train_ids = remap.size();
  ds.train_label.reserve(ds.manifest.records.size());
  for (const auto& rec : ds.manifest.records) {
    const auto it = remap.find(rec.identity);
    ds.train_label.push_back(it == remap.end() ? -1 : it->second);
  }
  return ds;
}

// The prompt pool is indexed by scene, so every manifest scene must fit the
// configured scene count.
inline void check_scene_bounds(const LoadedDataset& ds, std::size_t scenes) {
  for (const auto& rec : ds.manifest.records) {
    const auto s = static_cast<std::size_t>(rec.scene);
    if (s >= scenes) {
      throw UsageError("config: manifest scene '" + std::string(scene_name(rec.scene)) +
                       "' needs prompt group " + std::to_string(s) + " but the model has only " +
                       std::to_string(scenes) + " scenes");
    }
  }
}

inline std::vector<std::size_t> split_indices(const LoadedDataset& ds, Split split) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ds.manifest.records.size(); ++i) {
    if (ds.manifest.records[i].split == split) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Schedule and logging
// ---------------------------------------------------------------------------

// Linear warmup to the base rate, then cosine decay to zero over the rest.
inline float lr_at_step(float base_lr, std::size_t step, std::size_t total_steps,
                        std::size_t warmup_steps) {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<float>(step + 1) / static_cast<float>(warmup_steps);
  }
  const std::size_t rest = std::max<std::size_t>(1, total_steps - warmup_steps);
  const double t = static_cast<double>(step - warmup_steps) / static_cast<double>(rest);
  return static_cast<float>(0.5 * (1.0 + std::cos(std::numbers::pi * t)) *
                            static_cast<double>(base_lr));
}

// One JSON object per optimization step, written next to the checkpoint.
class TrainLog {
 public:
  explicit TrainLog(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw DataError("log: cannot open for writing: " + path);
  }
  void write(const nlohmann::json& obj) { out_ << obj.dump() << "\n"; }

 private:
  std::ofstream out_;
};

namespace detail {

inline std::size_t steps_per_epoch(std::size_t train_count, std::size_t batch) {
  return std::max<std::size_t>(1, train_count / std::max<std::size_t>(1, batch));
}

// SGD rejects non-finite gradients with a plain runtime error; surface that
// as a numerical failure so the process exits with the numerics code.
template <typename T>
void guarded_step(SgdT<T>& opt, T lr) {
  try {
    opt.step(lr);
  } catch (const UsageError&) {
    throw;
  } catch (const DataError&) {
    throw;
  } catch (const std::runtime_error& e) {
    throw NumericalError(e.what());
  }
}

inline void check_finite_loss(float value, const char* stage, std::uint64_t step) {
  if (!std::isfinite(value)) {
    throw NumericalError(std::string(stage) + ": non-finite loss at step " + std::to_string(step));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage 1: prompt-bank training
// ---------------------------------------------------------------------------

struct TrainResult {
  std::vector<float> step_losses;
  std::uint64_t steps = 0;
};

template <typename T = float>
TrainResult run_train_bank(const RunConfig& run_cfg, const std::string& data_dir,
                           const std::optional<std::string>& init_ckpt,
                           const std::string& out_path) {
  LoadedDataset ds = load_dataset(data_dir);
  RunConfig cfg = run_cfg;
  cfg.model.num_ids = ds.num_train_ids;  // classifier width follows the data
  cfg.validate();
  check_scene_bounds(ds, cfg.model.scenes);
  const std::size_t train_count = split_indices(ds, Split::train).size();
  if (train_count == 0) throw DataError("train: manifest has no train records");

  Rng rng(cfg.seed);
  auto bank = make_branch<T>(cfg.model, BranchKind::bank, rng);
  if (init_ckpt.has_value()) {
    const CheckpointData ckpt = load_checkpoint(*init_ckpt);
    const std::size_t loaded = checkpoint_into_branch(ckpt, bank, /*partial=*/true);
    warn("train: initialized " + std::to_string(loaded) + " tensors from " + *init_ckpt);
  }
  SgdT<T> opt(T(cfg.momentum), T(cfg.weight_decay));
  for_each_parameter(bank, [&](const std::string& name, TensorT<T>& t) {
    const bool head = name.rfind("classifier.", 0) == 0;
    opt.add_parameter(name, t, head ? T(cfg.head_lr_scale) : T(1));
  });

  const std::size_t batch = cfg.batch_p * cfg.batch_k;
  const std::size_t spe = detail::steps_per_epoch(train_count, batch);
  const std::size_t total_steps = spe * cfg.epochs;
  const std::size_t warmup_steps = std::min(cfg.warmup_epochs * spe, total_steps / 2);

  TrainLog log(out_path + ".log.jsonl");
  TrainResult result;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t s = 0; s < spe; ++s) {
      const auto batch_idx = pk_sample(ds.manifest, cfg.batch_p, cfg.batch_k, rng);
      std::vector<const Image*> imgs;
      std::vector<std::size_t> scenes;
      std::vector<int> ids;
      for (std::size_t idx : batch_idx) {
        imgs.push_back(&ds.images[idx]);
        scenes.push_back(static_cast<std::size_t>(ds.manifest.records[idx].scene));
        ids.push_back(ds.train_label[idx]);
      }
      GradTapeT<T> tape;
      const auto fwd = forward_bank_batch(&tape, bank, imgs, scenes);
      auto tri = batch_hard_triplet(&tape, fwd.feats, ids, T(cfg.loss.margin));
      auto ce = cross_entropy(&tape, fwd.probs, ids);
      auto loss = add(&tape, tri, ce);
      const float lv = static_cast<float>(loss.at(0));
      detail::check_finite_loss(lv, "train", step);
      opt.zero_grad();
      tape.backward(loss);
      const float lr = lr_at_step(cfg.base_lr, step, total_steps, warmup_steps);
      detail::guarded_step(opt, T(lr));
      log.write({{"step", step},
                 {"epoch", epoch},
                 {"lr", lr},
                 {"loss", lv},
                 {"triplet", static_cast<float>(tri.at(0))},
                 {"ce", static_cast<float>(ce.at(0))}});
      result.step_losses.push_back(lv);
      ++step;
    }
    save_checkpoint(branch_to_checkpoint(bank, step, rng), out_path);
  }
  result.steps = step;
  return result;
}

// ---------------------------------------------------------------------------
// Stage 2: distillation into the versatile branch
// ---------------------------------------------------------------------------

struct DistillResult {
  std::vector<float> step_losses;
  std::vector<float> kd_losses;  // distillation component, pre-weighting
  std::uint64_t teacher_hash_before = 0;
  std::uint64_t teacher_hash_after = 0;
  std::uint64_t steps = 0;
};

inline void require_matching_geometry(const ModelConfig& want, const ModelConfig& have) {
  auto req = [](std::size_t a, std::size_t b, const char* name) {
    if (a != b) {
      throw UsageError(std::string("checkpoint: model mismatch on ") + name + ": config wants " +
                       std::to_string(a) + ", checkpoint has " + std::to_string(b));
    }
  };
  req(want.image_h, have.image_h, "image_h");
  req(want.image_w, have.image_w, "image_w");
  req(want.patch, have.patch, "patch");
  req(want.stride, have.stride, "stride");
  req(want.dim, have.dim, "dim");
  req(want.blocks, have.blocks, "blocks");
  req(want.heads, have.heads, "heads");
  req(want.mlp_ratio, have.mlp_ratio, "mlp_ratio");
  req(want.scenes, have.scenes, "scenes");
  req(want.prompts_per_scene, have.prompts_per_scene, "prompts_per_scene");
  req(want.versatile_prompts, have.versatile_prompts, "versatile_prompts");
  req(want.num_ids, have.num_ids, "num_ids");
}

// `use_teacher=false` runs the identical loop but never touches the teacher
// network beyond copying its backbone at initialization. With alpha == 0 the
// two paths must produce bit-identical students; the acceptance audit checks
// exactly that.
template <typename T = float>
DistillResult run_distill(const RunConfig& run_cfg, const std::string& data_dir,
                          const std::string& bank_ckpt_path, const std::string& out_path,
                          bool use_teacher = true) {
  LoadedDataset ds = load_dataset(data_dir);
  RunConfig cfg = run_cfg;
  cfg.model.num_ids = ds.num_train_ids;
  cfg.validate();
  const std::size_t train_count = split_indices(ds, Split::train).size();
  if (train_count == 0) throw DataError("distill: manifest has no train records");

  const CheckpointData bank_ckpt = load_checkpoint(bank_ckpt_path);
  const auto [bank_cfg, bank_kind] = decode_model_config(bank_ckpt);
  if (bank_kind != BranchKind::bank) {
    throw UsageError("distill: --bank checkpoint does not hold a prompt-bank model");
  }
  require_matching_geometry(cfg.model, bank_cfg);
  check_scene_bounds(ds, cfg.model.scenes);

  Rng rng(cfg.seed);
  auto bank = make_branch<T>(cfg.model, BranchKind::bank, rng);
  checkpoint_into_branch(bank_ckpt, bank, /*partial=*/false);
  DistillResult result;
  result.teacher_hash_before = checkpoint_hash(branch_to_checkpoint(bank, 0, Rng(0)));

  auto vb = init_vbranch_from_bank(bank, rng);
  SgdT<T> opt(T(cfg.momentum), T(cfg.weight_decay));
  for_each_parameter(vb, [&](const std::string& name, TensorT<T>& t) {
    const bool head = name.rfind("classifier.", 0) == 0;
    opt.add_parameter(name, t, head ? T(cfg.head_lr_scale) : T(1));
  });

  const std::size_t batch = cfg.batch_p * cfg.batch_k;
  const std::size_t spe = detail::steps_per_epoch(train_count, batch);
  const std::size_t total_steps = spe * cfg.epochs;
  const std::size_t warmup_steps = std::min(cfg.warmup_epochs * spe, total_steps / 2);

  TrainLog log(out_path + ".log.jsonl");
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t s = 0; s < spe; ++s) {
      const auto batch_idx = pk_sample(ds.manifest, cfg.batch_p, cfg.batch_k, rng);
      std::vector<const Image*> imgs;
      std::vector<std::size_t> scenes;
      std::vector<int> ids;
      for (std::size_t idx : batch_idx) {
        imgs.push_back(&ds.images[idx]);
        scenes.push_back(static_cast<std::size_t>(ds.manifest.records[idx].scene));
        ids.push_back(ds.train_label[idx]);
      }
      // Teacher features come from the frozen bank with its scene-label
      // prompt routing; no tape, so nothing feeds back into it.
      BatchForward<T> teacher;
      if (use_teacher) teacher = forward_bank_batch<T>(nullptr, bank, imgs, scenes);

      GradTapeT<T> tape;
      const auto fwd = forward_vbranch_batch(&tape, vb, imgs);
      auto tri = batch_hard_triplet(&tape, fwd.feats, ids, T(cfg.loss.margin));
      auto ce = cross_entropy(&tape, fwd.probs, ids);
      auto loss = add(&tape, tri, ce);
      float kd_value = 0.0f;
      if (use_teacher && cfg.loss.alpha != 0.0f) {
        auto kd = distill_variant(&tape, cfg.loss.distill, fwd.feats, teacher.feats, fwd.probs,
                                  teacher.probs, T(cfg.loss.kl_tau));
        kd_value = static_cast<float>(kd.at(0));
        loss = add(&tape, loss, scale(&tape, kd, T(cfg.loss.alpha)));
      }
      const float lv = static_cast<float>(loss.at(0));
      detail::check_finite_loss(lv, "distill", step);
      opt.zero_grad();
      tape.backward(loss);
      const float lr = lr_at_step(cfg.base_lr, step, total_steps, warmup_steps);
      detail::guarded_step(opt, T(lr));
      log.write({{"step", step},
                 {"epoch", epoch},
                 {"lr", lr},
                 {"loss", lv},
                 {"triplet", static_cast<float>(tri.at(0))},
                 {"ce", static_cast<float>(ce.at(0))},
                 {"distill", kd_value}});
      result.step_losses.push_back(lv);
      result.kd_losses.push_back(kd_value);
      ++step;
    }
    save_checkpoint(branch_to_checkpoint(vb, step, rng), out_path);
  }
  result.steps = step;
  result.teacher_hash_after = checkpoint_hash(branch_to_checkpoint(bank, 0, Rng(0)));
  if (result.teacher_hash_before != result.teacher_hash_after) {
    throw std::runtime_error("distill: teacher parameters changed during distillation");
  }
  return result;
}

// ---------------------------------------------------------------------------
// Contrastive pretraining over augmented view pairs
// ---------------------------------------------------------------------------

struct PretrainStats {
  std::vector<float> step_losses;
  std::array<std::size_t, kNumViewKinds> view_counts{};
  std::uint64_t steps = 0;
};

template <typename T = float>
CheckpointData pretrain_to_checkpoint(const PretrainEncoderT<T>& enc, std::uint64_t step,
                                      const Rng& rng) {
  CheckpointData ckpt = branch_to_checkpoint(enc.branch, step, rng);
  auto put = [&](const std::string& name, const TensorT<T>& t) {
    auto copy = TensorT<float>::zeros(t.shape(), true);
    for (std::size_t i = 0; i < t.size(); ++i) copy.data()[i] = static_cast<float>(t.at(i));
    ckpt.tensors.push_back({name, std::move(copy)});
  };
  put("proj.w1", enc.head.fc1.w);
  put("proj.b1", enc.head.fc1.b);
  put("proj.w2", enc.head.fc2.w);
  put("proj.b2", enc.head.fc2.b);
  return ckpt;
}

template <typename T = float>
PretrainStats run_pretrain(const RunConfig& run_cfg, const std::string& data_dir, bool mpda_on,
                           const std::string& out_path) {
  LoadedDataset ds = load_dataset(data_dir);
  RunConfig cfg = run_cfg;
  cfg.model.num_ids = ds.num_train_ids;
  cfg.validate();
  const std::vector<std::size_t> corpus = split_indices(ds, Split::train);
  if (corpus.size() < 2) throw DataError("pretrain: need at least 2 train images");
  const std::size_t batch = std::min(cfg.batch_p * cfg.batch_k, corpus.size());

  Rng rng(cfg.seed);
  auto enc = make_pretrain_encoder<T>(cfg.model, rng);
  auto momentum_enc = clone_pretrain_encoder(enc, rng);
  SgdT<T> opt(T(cfg.momentum), T(cfg.weight_decay));
  for_each_pretrain_parameter(enc, [&](const std::string& name, TensorT<T>& t) {
    opt.add_parameter(name, t);
  });

  const std::size_t spe = detail::steps_per_epoch(corpus.size(), batch);
  const std::size_t total_steps = spe * cfg.pretrain_epochs;
  const std::size_t warmup_steps = std::min(cfg.warmup_epochs * spe, total_steps / 2);

  TrainLog log(out_path + ".log.jsonl");
  PretrainStats stats;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    std::vector<std::size_t> order = corpus;
    rng.shuffle(order);
    for (std::size_t b = 0; b < spe; ++b) {
      const std::size_t begin = b * batch;
      const std::size_t count = std::min(batch, order.size() - begin);
      if (count < 2) break;
      std::vector<Image> views_a, views_b;
      views_a.reserve(count);
      views_b.reserve(count);
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t idx = order[begin + i];
        // Occlusion patches borrow texture from the other images in the batch.
        std::vector<const Image*> donors;
        for (std::size_t j = 0; j < count; ++j) {
          if (j != i) donors.push_back(&ds.images[order[begin + j]]);
        }
        ViewPair pair = sample_view_pair(ds.images[idx], donors, cfg.aug, rng, mpda_on);
        stats.view_counts[static_cast<std::size_t>(pair.kind_a)]++;
        stats.view_counts[static_cast<std::size_t>(pair.kind_b)]++;
        views_a.push_back(std::move(pair.a));
        views_b.push_back(std::move(pair.b));
      }
      std::vector<const Image*> va, vb;
      for (std::size_t i = 0; i < count; ++i) {
        va.push_back(&views_a[i]);
        vb.push_back(&views_b[i]);
      }
      const float lr = lr_at_step(cfg.base_lr, step, total_steps, warmup_steps);
      float lv = 0.0f;
      try {
        lv = static_cast<float>(contrastive_step(enc, momentum_enc, va, vb, T(cfg.tau),
                                                 T(cfg.ema_momentum), opt, T(lr)));
      } catch (const UsageError&) {
        throw;
      } catch (const DataError&) {
        throw;
      } catch (const std::runtime_error& e) {
        throw NumericalError(e.what());
      }
      detail::check_finite_loss(lv, "pretrain", step);
      log.write({{"step", step}, {"epoch", epoch}, {"lr", lr}, {"loss", lv}});
      stats.step_losses.push_back(lv);
      ++step;
    }
    save_checkpoint(pretrain_to_checkpoint(enc, step, rng), out_path);
  }
  stats.steps = step;
  return stats;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

enum class EnsembleMode { none, hard, soft, concat };

inline EnsembleMode parse_ensemble_mode(const std::string& s) {
  if (s.empty() || s == "none") return EnsembleMode::none;
  if (s == "hard") return EnsembleMode::hard;
  if (s == "soft") return EnsembleMode::soft;
  if (s == "concat") return EnsembleMode::concat;
  throw UsageError("eval: unknown ensemble mode '" + s + "' (expected hard, soft, or concat)");
}

struct EvalOptions {
  std::string branch;  // "bank" or "vbranch"
  EnsembleMode ensemble = EnsembleMode::none;
  float classifier_noise = 0.0f;
};

namespace detail {

// The simulated scene classifier: correct with probability 1 - noise,
// otherwise a uniformly random wrong scene. Drawn serially so evaluation
// stays deterministic regardless of the worker count.
inline std::vector<std::size_t> simulate_scene_predictions(const LoadedDataset& ds,
                                                           const std::vector<std::size_t>& idxs,
                                                           std::size_t scenes, float noise,
                                                           Rng& rng) {
  std::vector<std::size_t> predicted(idxs.size());
  for (std::size_t i = 0; i < idxs.size(); ++i) {
    const auto truth = static_cast<std::size_t>(ds.manifest.records[idxs[i]].scene);
    std::size_t pick = truth;
    if (rng.uniform() < static_cast<double>(noise) && scenes > 1) {
      pick = static_cast<std::size_t>(rng.uniform_index(scenes - 1));
      if (pick >= truth) ++pick;
    }
    predicted[i] = pick;
  }
  return predicted;
}

}  // namespace detail

inline EvalReport run_eval(const std::string& data_dir, const std::string& ckpt_path,
                           const EvalOptions& opt) {
  if (opt.branch != "bank" && opt.branch != "vbranch") {
    throw UsageError("eval: --branch must be 'bank' or 'vbranch', got '" + opt.branch + "'");
  }
  if (opt.classifier_noise < 0.0f || opt.classifier_noise > 1.0f) {
    throw UsageError("eval: --classifier-noise must lie in [0, 1]");
  }
  if (opt.branch == "vbranch" && opt.ensemble != EnsembleMode::none) {
    throw UsageError("eval: ensembles need the prompt bank; --branch vbranch cannot ensemble");
  }
  if (opt.ensemble == EnsembleMode::none && opt.classifier_noise != 0.0f) {
    throw UsageError("eval: --classifier-noise only applies to --ensemble modes");
  }

  LoadedDataset ds = load_dataset(data_dir);
  const CheckpointData ckpt = load_checkpoint(ckpt_path);
  const auto [model_cfg, kind] = decode_model_config(ckpt);
  const BranchKind want_kind = opt.branch == "bank" ? BranchKind::bank : BranchKind::vbranch;
  if (kind != want_kind) {
    throw UsageError("eval: checkpoint holds a " +
                     std::string(kind == BranchKind::bank ? "bank" : "vbranch") +
                     " model, but --branch " + opt.branch + " was requested");
  }
  Rng init_rng(0);
  auto branch = make_branch<float>(model_cfg, want_kind, init_rng);
  checkpoint_into_branch(ckpt, branch, /*partial=*/false);
  if (want_kind == BranchKind::bank) check_scene_bounds(ds, model_cfg.scenes);

  const auto qidx = split_indices(ds, Split::query);
  const auto gidx = split_indices(ds, Split::gallery);
  if (qidx.empty()) throw DataError("eval: manifest has no query records");
  if (gidx.empty()) throw DataError("eval: manifest has no gallery records");

  std::vector<std::size_t> eval_idx = qidx;
  eval_idx.insert(eval_idx.end(), gidx.begin(), gidx.end());

  // Scene predictions are only sampled for the hard ensemble; soft weighting
  // uses the classifier's expected distribution directly.
  std::vector<std::size_t> predicted;
  if (opt.ensemble == EnsembleMode::hard) {
    Rng noise_rng(ds.manifest.seed ^ 0x9e3779b97f4a7c15ull);
    predicted = detail::simulate_scene_predictions(ds, eval_idx, model_cfg.scenes,
                                                   opt.classifier_noise, noise_rng);
  }

  const std::size_t scenes = model_cfg.scenes;
  const std::size_t dim = model_cfg.dim;
  const std::size_t feat_dim = opt.ensemble == EnsembleMode::concat ? scenes * dim : dim;
  auto feats = TensorT<float>::zeros({eval_idx.size(), feat_dim}, false);

  parallel_for(eval_idx.size(), [&](std::size_t i) {
    const std::size_t idx = eval_idx[i];
    const Image& img = ds.images[idx];
    float* row = feats.data() + i * feat_dim;
    if (want_kind == BranchKind::vbranch) {
      const auto r = forward_vbranch<float>(nullptr, branch, img);
      for (std::size_t k = 0; k < dim; ++k) row[k] = r.f.at(k);
      return;
    }
    switch (opt.ensemble) {
      case EnsembleMode::none: {
        const auto scene = static_cast<std::size_t>(ds.manifest.records[idx].scene);
        const auto r = forward_bank<float>(nullptr, branch, img, scene);
        for (std::size_t k = 0; k < dim; ++k) row[k] = r.f.at(k);
        break;
      }
      case EnsembleMode::hard: {
        const auto r = forward_bank<float>(nullptr, branch, img, predicted[i]);
        for (std::size_t k = 0; k < dim; ++k) row[k] = r.f.at(k);
        break;
      }
      case EnsembleMode::soft: {
        const auto truth = static_cast<std::size_t>(ds.manifest.records[idx].scene);
        for (std::size_t s = 0; s < scenes; ++s) {
          const float w = s == truth
                              ? 1.0f - opt.classifier_noise
                              : opt.classifier_noise / static_cast<float>(scenes - 1);
          if (w == 0.0f) continue;
          const auto r = forward_bank<float>(nullptr, branch, img, s);
          for (std::size_t k = 0; k < dim; ++k) row[k] += w * r.f.at(k);
        }
        break;
      }
      case EnsembleMode::concat: {
        for (std::size_t s = 0; s < scenes; ++s) {
          const auto r = forward_bank<float>(nullptr, branch, img, s);
          for (std::size_t k = 0; k < dim; ++k) row[s * dim + k] = r.f.at(k);
        }
        break;
      }
    }
  });

  auto build_set = [&](std::size_t offset, const std::vector<std::size_t>& idxs) {
    EvalSet set;
    std::vector<std::size_t> rows(idxs.size());
    for (std::size_t i = 0; i < idxs.size(); ++i) rows[i] = offset + i;
    set.feats = detail::select_rows(feats, rows);
    for (std::size_t idx : idxs) {
      const auto& rec = ds.manifest.records[idx];
      set.items.push_back({rec.identity, rec.camera});
      set.scenes.push_back(rec.scene);
    }
    return set;
  };
  const EvalSet query = build_set(0, qidx);
  const EvalSet gallery = build_set(qidx.size(), gidx);

  EvalReport report = joint_evaluate(query, gallery);
  report.branch = opt.branch;
  switch (opt.ensemble) {
    case EnsembleMode::none: break;
    case EnsembleMode::hard: report.branch += "+hard"; break;
    case EnsembleMode::soft: report.branch += "+soft"; break;
    case EnsembleMode::concat: report.branch += "+concat"; break;
  }
  report.checkpoint = ckpt_path;
  report.seed = ds.manifest.seed;
  return report;
}

}  // namespace versreid
