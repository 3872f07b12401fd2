#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <string>

#include "versreid/augment.hpp"
#include "versreid/errors.hpp"
#include "versreid/losses.hpp"
#include "versreid/model.hpp"

namespace versreid {

// Everything a run needs beyond the dataset: model geometry, loss weights,
// optimizer schedule, batch shape, and the seed. Augmentation ranges use
// their built-in defaults and are not exposed as keys.
struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  AugConfig aug;
  float base_lr = 4e-4f;
  // The zero-initialized classifier head trains at head_lr_scale * base_lr.
  // At this model size a shared rate cannot serve both groups: the backbone
  // needs a small rate to avoid metric collapse while the head must outrun
  // it to supply identity signal, so the head gets its own multiplier.
  float head_lr_scale = 50.0f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
  std::size_t warmup_epochs = 5;
  std::size_t epochs = 30;
  std::size_t batch_p = 8;
  std::size_t batch_k = 4;
  std::uint64_t seed = 0;
  float tau = 0.2f;
  float ema_momentum = 0.99f;
  std::size_t pretrain_epochs = 5;

  void validate() const {
    model.validate();
    aug.validate();
    if (epochs < 1) throw UsageError("config: epochs must be at least 1");
    if (batch_p < 2 || batch_k < 2) {
      throw UsageError("config: batch_p and batch_k must be at least 2");
    }
    if (head_lr_scale < 0.0f) throw UsageError("config: head_lr_scale must be non-negative");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

inline float parse_float(const std::string& value, std::size_t lineno, const std::string& key) {
  char* end = nullptr;
  const float v = std::strtof(value.c_str(), &end);
  if (end == value.c_str() || *end != '\0') {
    throw UsageError("config: line " + std::to_string(lineno) + ": cannot parse value '" + value +
                     "' for key '" + key + "'");
  }
  return v;
}

inline std::uint64_t parse_uint(const std::string& value, std::size_t lineno, const std::string& key) {
  char* end = nullptr;
  const std::uint64_t v = std::strtoull(value.c_str(), &end, 10);
  if (end == value.c_str() || *end != '\0') {
    throw UsageError("config: line " + std::to_string(lineno) + ": cannot parse value '" + value +
                     "' for key '" + key + "'");
  }
  return v;
}

}  // namespace detail

inline void apply_config_line(RunConfig& cfg, const std::string& key, const std::string& value,
                              std::size_t lineno) {
  auto f = [&] { return detail::parse_float(value, lineno, key); };
  auto u = [&] { return static_cast<std::size_t>(detail::parse_uint(value, lineno, key)); };

  if (key == "image_h") cfg.model.image_h = u();
  else if (key == "image_w") cfg.model.image_w = u();
  else if (key == "patch") cfg.model.patch = u();
  else if (key == "stride") cfg.model.stride = u();
  else if (key == "dim") cfg.model.dim = u();
  else if (key == "blocks") cfg.model.blocks = u();
  else if (key == "heads") cfg.model.heads = u();
  else if (key == "mlp_ratio") cfg.model.mlp_ratio = u();
  else if (key == "scenes") cfg.model.scenes = u();
  else if (key == "prompts_per_scene") cfg.model.prompts_per_scene = u();
  else if (key == "versatile_prompts") cfg.model.versatile_prompts = u();
  else if (key == "margin") cfg.loss.margin = f();
  else if (key == "alpha") cfg.loss.alpha = f();
  else if (key == "kl_tau") cfg.loss.kl_tau = f();
  else if (key == "distill") {
    try {
      cfg.loss.distill = parse_distill_kind(value);
    } catch (const UsageError& e) {
      throw UsageError("config: line " + std::to_string(lineno) + ": " + e.what());
    }
  } else if (key == "base_lr") cfg.base_lr = f();
  else if (key == "head_lr_scale") cfg.head_lr_scale = f();
  else if (key == "momentum") cfg.momentum = f();
  else if (key == "weight_decay") cfg.weight_decay = f();
  else if (key == "warmup_epochs") cfg.warmup_epochs = u();
  else if (key == "epochs") cfg.epochs = u();
  else if (key == "batch_p") cfg.batch_p = u();
  else if (key == "batch_k") cfg.batch_k = u();
  else if (key == "seed") cfg.seed = detail::parse_uint(value, lineno, key);
  else if (key == "tau") cfg.tau = f();
  else if (key == "ema_momentum") cfg.ema_momentum = f();
  else if (key == "pretrain_epochs") cfg.pretrain_epochs = u();
  else {
    throw UsageError("config: line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
}

// Line-oriented `key = value` with `#` comments; unknown keys are rejected,
// missing keys keep their defaults.
inline RunConfig parse_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("config: cannot open: " + path);
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config: line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw UsageError("config: line " + std::to_string(lineno) + ": expected key = value");
    }
    apply_config_line(cfg, key, value, lineno);
  }
  return cfg;
}

}  // namespace versreid
