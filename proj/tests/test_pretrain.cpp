#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "support/gradcheck.hpp"
#include "versreid/model.hpp"
#include "versreid/optim.hpp"
#include "versreid/pretrain.hpp"
#include "versreid/rng.hpp"

using versreid::GradTapeT;
using versreid::Image;
using versreid::ModelConfig;
using versreid::PretrainEncoderT;
using versreid::Rng;
using versreid::TensorT;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.image_h = 8;
  cfg.image_w = 8;
  cfg.patch = 4;
  cfg.stride = 4;
  cfg.dim = 8;
  cfg.blocks = 1;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.scenes = 2;
  cfg.prompts_per_scene = 2;
  cfg.versatile_prompts = 2;
  cfg.num_ids = 2;
  return cfg;
}

Image random_image(Rng& rng, std::size_t h, std::size_t w) {
  Image img(h, w);
  for (auto& v : img.pix) v = static_cast<float>(rng.uniform());
  return img;
}

template <typename T>
std::vector<T> flatten_parameters(PretrainEncoderT<T>& enc) {
  std::vector<T> out;
  versreid::for_each_pretrain_parameter(enc, [&](const std::string&, TensorT<T>& t) {
    out.insert(out.end(), t.values().begin(), t.values().end());
  });
  return out;
}

}  // namespace

TEST_CASE("momentum update interpolates between the two encoders") {
  ModelConfig cfg = tiny_config();
  Rng rng(31);
  auto enc = versreid::make_pretrain_encoder<float>(cfg, rng);
  auto momentum = versreid::clone_pretrain_encoder(enc, rng);

  // Nudge the live encoder away so the two differ.
  versreid::for_each_pretrain_parameter(enc, [&](const std::string&, TensorT<float>& t) {
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] += 0.25f;
  });
  const auto live = flatten_parameters(enc);
  const auto before = flatten_parameters(momentum);

  SECTION("m = 1 leaves the momentum encoder untouched") {
    versreid::momentum_update(enc, momentum, 1.0f);
    REQUIRE(flatten_parameters(momentum) == before);
  }

  SECTION("m = 0 copies the live encoder") {
    versreid::momentum_update(enc, momentum, 0.0f);
    REQUIRE(flatten_parameters(momentum) == live);
  }

  SECTION("repeated updates converge geometrically") {
    const float m = 0.5f;
    double prev_gap = 0.0;
    for (std::size_t i = 0; i < before.size(); ++i) {
      prev_gap = std::max(prev_gap, std::abs(static_cast<double>(before[i] - live[i])));
    }
    for (int step = 0; step < 4; ++step) {
      versreid::momentum_update(enc, momentum, m);
      const auto cur = flatten_parameters(momentum);
      double gap = 0.0;
      for (std::size_t i = 0; i < cur.size(); ++i) {
        gap = std::max(gap, std::abs(static_cast<double>(cur[i] - live[i])));
      }
      REQUIRE(gap == Catch::Approx(prev_gap * m).margin(1e-6));
      prev_gap = gap;
    }
  }
}

TEST_CASE("momentum update rejects mismatched shapes") {
  Rng rng(32);
  ModelConfig small = tiny_config();
  ModelConfig big = tiny_config();
  big.dim = 16;
  auto enc = versreid::make_pretrain_encoder<float>(small, rng);
  auto momentum = versreid::make_pretrain_encoder<float>(big, rng);
  REQUIRE_THROWS_WITH(versreid::momentum_update(enc, momentum, 0.5f),
                      Catch::Matchers::ContainsSubstring("shape mismatch"));
}

TEST_CASE("contrastive loss starts near log batch size for uninformative pairs") {
  // When the two views of each "pair" are unrelated images, the pair carries
  // no information, so an untrained encoder scores every key about equally
  // and the loss sits near the maximum-entropy value ln B.
  ModelConfig cfg = tiny_config();
  Rng rng(33);
  auto enc = versreid::make_pretrain_encoder<float>(cfg, rng);
  auto momentum = versreid::clone_pretrain_encoder(enc, rng);

  const std::size_t b = 4;
  std::vector<Image> imgs;
  for (std::size_t i = 0; i < 2 * b; ++i) imgs.push_back(random_image(rng, 8, 8));
  std::vector<const Image*> va, vb;
  for (std::size_t i = 0; i < b; ++i) {
    va.push_back(&imgs[i]);
    vb.push_back(&imgs[b + i]);
  }
  auto loss = versreid::contrastive_loss<float>(nullptr, enc, momentum, va, vb, 0.2f);
  REQUIRE(loss.at(0) == Catch::Approx(std::log(4.0)).margin(0.5));
}

TEST_CASE("contrastive loss for aligned positives stays at or below log batch size") {
  ModelConfig cfg = tiny_config();
  Rng rng(33);
  auto enc = versreid::make_pretrain_encoder<float>(cfg, rng);
  auto momentum = versreid::clone_pretrain_encoder(enc, rng);

  const std::size_t b = 4;
  std::vector<Image> imgs;
  for (std::size_t i = 0; i < b; ++i) imgs.push_back(random_image(rng, 8, 8));
  std::vector<const Image*> va, vb;
  for (const auto& img : imgs) {
    va.push_back(&img);
    vb.push_back(&img);
  }
  auto loss = versreid::contrastive_loss<float>(nullptr, enc, momentum, va, vb, 0.2f);
  // The two encoders are clones and both sides see the same image, so every
  // positive is perfectly aligned; with distinct negatives the loss sits at
  // or below ln B.
  REQUIRE(loss.at(0) <= std::log(4.0f) + 1e-6f);
  REQUIRE(loss.at(0) > 0.0f);
}

TEST_CASE("contrastive loss rejects a batch of one") {
  ModelConfig cfg = tiny_config();
  Rng rng(34);
  auto enc = versreid::make_pretrain_encoder<float>(cfg, rng);
  auto momentum = versreid::clone_pretrain_encoder(enc, rng);
  Image img = random_image(rng, 8, 8);
  std::vector<const Image*> one = {&img};
  REQUIRE_THROWS_AS(versreid::contrastive_loss<float>(nullptr, enc, momentum, one, one, 0.2f),
                    versreid::UsageError);
}

TEST_CASE("contrastive gradients match finite differences") {
  ModelConfig cfg = tiny_config();
  Rng rng(35);
  auto enc = versreid::make_pretrain_encoder<double>(cfg, rng);
  auto momentum = versreid::clone_pretrain_encoder(enc, rng);

  std::vector<Image> imgs = {random_image(rng, 8, 8), random_image(rng, 8, 8)};
  std::vector<const Image*> va = {&imgs[0], &imgs[1]};
  std::vector<Image> other = {random_image(rng, 8, 8), random_image(rng, 8, 8)};
  std::vector<const Image*> vb = {&other[0], &other[1]};

  // Shared handles: perturbing these perturbs the encoder itself. The
  // backbone path is finite-difference checked at the model level, so this
  // covers the projection head and the class token end to end.
  std::vector<TensorT<double>> inputs = {enc.head.fc1.w, enc.head.fc1.b, enc.head.fc2.w,
                                         enc.head.fc2.b, enc.branch.cls,
                                         enc.branch.final_norm.gamma};
  auto fn = [&](GradTapeT<double>* tape, std::vector<TensorT<double>>&) {
    return versreid::contrastive_loss<double>(tape, enc, momentum, va, vb, 0.2);
  };
  // Step 1e-4: composed transformer third derivatives dominate at 1e-3.
  auto res = testsupport::check_gradients(fn, inputs, 1e-4);
  INFO(res.worst);
  REQUIRE(res.ok());
}

TEST_CASE("contrastive steps reduce the loss on a fixed batch") {
  ModelConfig cfg = tiny_config();
  Rng rng(36);
  auto enc = versreid::make_pretrain_encoder<float>(cfg, rng);
  auto momentum = versreid::clone_pretrain_encoder(enc, rng);

  std::vector<Image> imgs;
  for (int i = 0; i < 4; ++i) imgs.push_back(random_image(rng, 8, 8));
  std::vector<const Image*> va = {&imgs[0], &imgs[1], &imgs[2], &imgs[3]};
  std::vector<const Image*> vb = va;

  versreid::Sgd opt(0.9f, 0.0f);
  versreid::for_each_pretrain_parameter(
      enc, [&](const std::string& name, TensorT<float>& t) { opt.add_parameter(name, t); });

  const float first =
      versreid::contrastive_step(enc, momentum, va, vb, 0.2f, 0.99f, opt, 5e-3f);
  float last = first;
  for (int step = 1; step < 100; ++step) {
    last = versreid::contrastive_step(enc, momentum, va, vb, 0.2f, 0.99f, opt, 5e-3f);
  }
  REQUIRE(last < first - 0.05f);
  REQUIRE(std::isfinite(last));
}

TEST_CASE("pretraining leaves prompts and classifier at initialization") {
  ModelConfig cfg = tiny_config();
  Rng rng(37);
  auto enc = versreid::make_pretrain_encoder<float>(cfg, rng);
  auto momentum = versreid::clone_pretrain_encoder(enc, rng);
  const auto prompts_before = enc.branch.scene_prompts.values();
  const auto classifier_before = enc.branch.classifier.w.values();

  std::vector<Image> imgs;
  for (int i = 0; i < 3; ++i) imgs.push_back(random_image(rng, 8, 8));
  std::vector<const Image*> va = {&imgs[0], &imgs[1], &imgs[2]};

  versreid::Sgd opt(0.9f, 1e-4f);
  versreid::for_each_pretrain_parameter(
      enc, [&](const std::string& name, TensorT<float>& t) { opt.add_parameter(name, t); });
  for (int step = 0; step < 5; ++step) {
    versreid::contrastive_step(enc, momentum, va, va, 0.2f, 0.99f, opt, 0.05f);
  }
  REQUIRE(enc.branch.scene_prompts.values() == prompts_before);
  REQUIRE(enc.branch.classifier.w.values() == classifier_before);
}
