#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "versreid/augment.hpp"
#include "versreid/image.hpp"
#include "versreid/rng.hpp"

using versreid::AugConfig;
using versreid::Image;
using versreid::Rng;
using versreid::ViewKind;
using versreid::ViewPair;

namespace {

Image random_image(std::size_t h, std::size_t w, Rng& rng) {
  Image img(h, w);
  for (float& v : img.pix) v = static_cast<float>(rng.uniform());
  return img;
}

Image constant_image(std::size_t h, std::size_t w, float r, float g, float b) {
  Image img(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      img.at(y, x, 0) = r;
      img.at(y, x, 1) = g;
      img.at(y, x, 2) = b;
    }
  }
  return img;
}

float image_mean(const Image& img) {
  double sum = 0.0;
  for (float v : img.pix) sum += v;
  return static_cast<float>(sum / static_cast<double>(img.pix.size()));
}

}  // namespace

TEST_CASE("grayscale view uses the luminance weights") {
  Image img = constant_image(4, 3, 0.2f, 0.5f, 0.8f);
  Image out = versreid::grayscale_view(img);
  const float expected = 0.299f * 0.2f + 0.587f * 0.5f + 0.114f * 0.8f;
  REQUIRE(expected == Catch::Approx(0.4445f).margin(1e-6));
  for (std::size_t y = 0; y < out.h; ++y) {
    for (std::size_t x = 0; x < out.w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        REQUIRE(out.at(y, x, c) == Catch::Approx(expected).margin(1e-6));
      }
    }
  }
}

TEST_CASE("grayscale has zero variance across channels") {
  Rng rng(11);
  Image img = random_image(16, 8, rng);
  Image out = versreid::grayscale_view(img);
  for (std::size_t y = 0; y < out.h; ++y) {
    for (std::size_t x = 0; x < out.w; ++x) {
      REQUIRE(out.at(y, x, 0) == out.at(y, x, 1));
      REQUIRE(out.at(y, x, 1) == out.at(y, x, 2));
    }
  }
}

TEST_CASE("lighting with unit brightness and contrast is the identity") {
  Rng rng(12);
  Image img = random_image(10, 6, rng);
  Image out = versreid::lighting_view(img, 1.0f, 1.0f);
  for (std::size_t i = 0; i < img.pix.size(); ++i) {
    REQUIRE(out.pix[i] == Catch::Approx(img.pix[i]).margin(1e-6));
  }
}

TEST_CASE("lighting brightness scales the mean of a constant image") {
  Image img = constant_image(8, 4, 0.5f, 0.5f, 0.5f);
  Image out = versreid::lighting_view(img, 1.2f, 1.0f);
  for (float v : out.pix) REQUIRE(v == Catch::Approx(0.6f).margin(1e-6));
}

TEST_CASE("unchanged view without geometric jitter is bitwise identical") {
  Rng rng(13);
  Image img = random_image(12, 7, rng);
  AugConfig cfg;
  Image out = versreid::generate_view(img, ViewKind::unchanged, nullptr, cfg, rng, false);
  REQUIRE(out.pix == img.pix);
}

TEST_CASE("blur preserves constants and the image mean") {
  Image flat = constant_image(9, 9, 0.37f, 0.37f, 0.37f);
  Image out = versreid::blur_view(flat, 1.5f);
  for (float v : out.pix) REQUIRE(v == Catch::Approx(0.37f).margin(1e-5));

  Rng rng(14);
  Image img = random_image(32, 16, rng);
  Image blurred = versreid::blur_view(img, 1.5f);
  REQUIRE(image_mean(blurred) == Catch::Approx(image_mean(img)).margin(1e-3));
  REQUIRE(blurred.h == img.h);
  REQUIRE(blurred.w == img.w);
}

TEST_CASE("clothing change rotates the torso hue and leaves the rest alone") {
  AugConfig cfg;
  Image img = constant_image(20, 10, 1.0f, 0.2f, 0.2f);
  Image out = versreid::clothing_change_view(img, cfg, 180.0f);
  const std::size_t y0 = static_cast<std::size_t>(cfg.torso_y0 * 20);
  const std::size_t y1 = static_cast<std::size_t>(cfg.torso_y1 * 20);
  const std::size_t x0 = static_cast<std::size_t>(cfg.torso_x0 * 10);
  const std::size_t x1 = static_cast<std::size_t>(cfg.torso_x1 * 10);
  for (std::size_t y = 0; y < 20; ++y) {
    for (std::size_t x = 0; x < 10; ++x) {
      const bool inside = y >= y0 && y < y1 && x >= x0 && x < x1;
      if (inside) {
        // Red shifted 180 degrees lands on cyan with the same s and v.
        REQUIRE(out.at(y, x, 0) == Catch::Approx(0.2f).margin(1e-5));
        REQUIRE(out.at(y, x, 1) == Catch::Approx(1.0f).margin(1e-5));
        REQUIRE(out.at(y, x, 2) == Catch::Approx(1.0f).margin(1e-5));
      } else {
        REQUIRE(out.at(y, x, 0) == 1.0f);
        REQUIRE(out.at(y, x, 1) == 0.2f);
        REQUIRE(out.at(y, x, 2) == 0.2f);
      }
    }
  }
}

TEST_CASE("occlusion pastes a solid donor rectangle of plausible size") {
  AugConfig cfg;
  Rng rng(15);
  Image target = constant_image(32, 16, 0.25f, 0.25f, 0.25f);
  Image donor = constant_image(32, 16, 0.75f, 0.75f, 0.75f);
  for (int trial = 0; trial < 20; ++trial) {
    Image out = versreid::occlusion_view(target, donor, cfg, rng);
    std::size_t count = 0;
    std::size_t ymin = 32, ymax = 0, xmin = 16, xmax = 0;
    for (std::size_t y = 0; y < 32; ++y) {
      for (std::size_t x = 0; x < 16; ++x) {
        if (out.at(y, x, 0) == 0.75f) {
          REQUIRE(out.at(y, x, 1) == 0.75f);
          REQUIRE(out.at(y, x, 2) == 0.75f);
          ++count;
          ymin = std::min(ymin, y);
          ymax = std::max(ymax, y);
          xmin = std::min(xmin, x);
          xmax = std::max(xmax, x);
        } else {
          REQUIRE(out.at(y, x, 0) == 0.25f);
        }
      }
    }
    // The pasted region is one solid axis-aligned rectangle.
    REQUIRE(count == (ymax - ymin + 1) * (xmax - xmin + 1));
    // Rounded side lengths keep the area near the sampled fraction of [0.1, 0.4].
    const float frac = static_cast<float>(count) / (32.0f * 16.0f);
    REQUIRE(frac >= 0.05f);
    REQUIRE(frac <= 0.5f);
  }
}

TEST_CASE("every view keeps shape and the [0,1] range") {
  AugConfig cfg;
  Rng rng(16);
  Image img = random_image(32, 16, rng);
  Image donor = random_image(32, 16, rng);
  for (std::size_t k = 0; k < versreid::kNumViewKinds; ++k) {
    Image out = versreid::generate_view(img, static_cast<ViewKind>(k), &donor, cfg, rng, true);
    REQUIRE(out.h == img.h);
    REQUIRE(out.w == img.w);
    for (float v : out.pix) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
  }
}

TEST_CASE("occlusion view requires a donor") {
  AugConfig cfg;
  Rng rng(17);
  Image img = constant_image(8, 4, 0.5f, 0.5f, 0.5f);
  REQUIRE_THROWS_AS(versreid::generate_view(img, ViewKind::occlusion, nullptr, cfg, rng, false),
                    versreid::UsageError);
}

TEST_CASE("aug config validation rejects bad ranges") {
  AugConfig cfg;
  cfg.brightness_lo = 1.5f;
  cfg.brightness_hi = 0.5f;
  REQUIRE_THROWS_AS(cfg.validate(), versreid::UsageError);

  AugConfig cfg2;
  cfg2.occlusion_area_lo = 0.0f;
  REQUIRE_THROWS_AS(cfg2.validate(), versreid::UsageError);

  AugConfig ok;
  REQUIRE_NOTHROW(ok.validate());
}

TEST_CASE("view pairs draw two distinct kinds") {
  AugConfig cfg;
  Rng rng(18);
  Image img = random_image(16, 8, rng);
  std::vector<const Image*> pool = {&img};
  for (int i = 0; i < 200; ++i) {
    ViewPair p = versreid::sample_view_pair(img, pool, cfg, rng, true);
    REQUIRE(p.kind_a != p.kind_b);
  }
}

TEST_CASE("view kinds are drawn uniformly") {
  AugConfig cfg;
  Rng rng(19);
  Image img = random_image(8, 4, rng);
  std::vector<const Image*> pool = {&img};
  std::array<std::size_t, versreid::kNumViewKinds> counts{};
  const int draws = 6000;
  for (int i = 0; i < draws; ++i) {
    ViewPair p = versreid::sample_view_pair(img, pool, cfg, rng, true);
    counts[static_cast<std::size_t>(p.kind_a)]++;
    counts[static_cast<std::size_t>(p.kind_b)]++;
  }
  // Each kind appears in a pair with probability 1/3, so the count over 6000
  // draws is Binomial(6000, 1/3): mean 2000, three sigma about 110.
  for (std::size_t k = 0; k < versreid::kNumViewKinds; ++k) {
    REQUIRE(counts[k] >= 2000 - 110);
    REQUIRE(counts[k] <= 2000 + 110);
  }
}

TEST_CASE("a fixed seed reproduces the pair exactly") {
  AugConfig cfg;
  Image img;
  {
    Rng vals(20);
    img = random_image(16, 8, vals);
  }
  Image donor;
  {
    Rng vals(21);
    donor = random_image(16, 8, vals);
  }
  std::vector<const Image*> pool = {&donor};
  Rng a(99), b(99);
  ViewPair pa = versreid::sample_view_pair(img, pool, cfg, a, true);
  ViewPair pb = versreid::sample_view_pair(img, pool, cfg, b, true);
  REQUIRE(pa.kind_a == pb.kind_a);
  REQUIRE(pa.kind_b == pb.kind_b);
  REQUIRE(pa.a.pix == pb.a.pix);
  REQUIRE(pa.b.pix == pb.b.pix);
}

TEST_CASE("disabling the multi-view pool leaves only baseline views") {
  AugConfig cfg;
  Rng rng(22);
  Image img = random_image(8, 4, rng);
  std::vector<const Image*> pool = {&img};
  for (int i = 0; i < 200; ++i) {
    ViewPair p = versreid::sample_view_pair(img, pool, cfg, rng, false);
    REQUIRE((p.kind_a == ViewKind::unchanged || p.kind_a == ViewKind::lighting));
    REQUIRE((p.kind_b == ViewKind::unchanged || p.kind_b == ViewKind::lighting));
    REQUIRE(p.kind_a != p.kind_b);
  }
}

TEST_CASE("empty donor pool is rejected") {
  AugConfig cfg;
  Rng rng(23);
  Image img = constant_image(8, 4, 0.5f, 0.5f, 0.5f);
  std::vector<const Image*> pool;
  REQUIRE_THROWS_AS(versreid::sample_view_pair(img, pool, cfg, rng, true), versreid::UsageError);
}
