#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "versreid/errors.hpp"
#include "versreid/image.hpp"
#include "versreid/rng.hpp"

namespace versreid {

enum class ViewKind { unchanged, lighting, blurred, clothing_change, occlusion, grayscale };

constexpr std::size_t kNumViewKinds = 6;

inline const char* view_kind_name(ViewKind k) {
  switch (k) {
    case ViewKind::unchanged: return "unchanged";
    case ViewKind::lighting: return "lighting";
    case ViewKind::blurred: return "blurred";
    case ViewKind::clothing_change: return "clothing_change";
    case ViewKind::occlusion: return "occlusion";
    case ViewKind::grayscale: return "grayscale";
  }
  return "?";
}

struct AugConfig {
  float brightness_lo = 0.7f, brightness_hi = 1.3f;
  float contrast_lo = 0.7f, contrast_hi = 1.3f;
  float blur_sigma_lo = 0.8f, blur_sigma_hi = 2.0f;
  float occlusion_area_lo = 0.1f, occlusion_area_hi = 0.4f;
  float hue_shift_lo = 60.0f, hue_shift_hi = 300.0f;
  // Torso window as fractions of image height/width; matches the synthetic
  // renderer's torso placement.
  float torso_y0 = 0.30f, torso_y1 = 0.62f;
  float torso_x0 = 0.20f, torso_x1 = 0.80f;
  // Geometric jitter applied before every view-specific transform.
  float crop_scale_lo = 0.75f, crop_scale_hi = 1.0f;

  void validate() const {
    auto range_ok = [](float lo, float hi) { return lo <= hi; };
    if (!range_ok(brightness_lo, brightness_hi) || !range_ok(contrast_lo, contrast_hi) ||
        !range_ok(blur_sigma_lo, blur_sigma_hi) ||
        !range_ok(occlusion_area_lo, occlusion_area_hi) ||
        !range_ok(hue_shift_lo, hue_shift_hi) || !range_ok(crop_scale_lo, crop_scale_hi)) {
      throw UsageError("aug: every range needs min <= max");
    }
    if (occlusion_area_lo <= 0.0f || occlusion_area_hi >= 1.0f) {
      throw UsageError("aug: occlusion area fraction must lie in (0,1)");
    }
  }
};

namespace detail {

inline std::size_t reflect_index(long i, long n) {
  if (i < 0) i = -i - 1;
  if (i >= n) i = 2 * n - i - 1;
  return static_cast<std::size_t>(i);
}

inline float bilinear_sample(const Image& img, float y, float x, std::size_t c) {
  const float yc = std::min(std::max(y, 0.0f), static_cast<float>(img.h - 1));
  const float xc = std::min(std::max(x, 0.0f), static_cast<float>(img.w - 1));
  const std::size_t y0 = static_cast<std::size_t>(yc);
  const std::size_t x0 = static_cast<std::size_t>(xc);
  const std::size_t y1 = std::min(y0 + 1, img.h - 1);
  const std::size_t x1 = std::min(x0 + 1, img.w - 1);
  const float fy = yc - static_cast<float>(y0);
  const float fx = xc - static_cast<float>(x0);
  return img.at(y0, x0, c) * (1 - fy) * (1 - fx) + img.at(y0, x1, c) * (1 - fy) * fx +
         img.at(y1, x0, c) * fy * (1 - fx) + img.at(y1, x1, c) * fy * fx;
}

}  // namespace detail

// Random crop-resize plus horizontal flip with probability 0.5.
inline Image geometric_jitter(const Image& img, const AugConfig& cfg, Rng& rng) {
  const float s = static_cast<float>(rng.uniform(cfg.crop_scale_lo, cfg.crop_scale_hi));
  const std::size_t ch = std::max<std::size_t>(1, static_cast<std::size_t>(std::round(s * static_cast<float>(img.h))));
  const std::size_t cw = std::max<std::size_t>(1, static_cast<std::size_t>(std::round(s * static_cast<float>(img.w))));
  const std::size_t oy = img.h > ch ? static_cast<std::size_t>(rng.uniform_index(img.h - ch + 1)) : 0;
  const std::size_t ox = img.w > cw ? static_cast<std::size_t>(rng.uniform_index(img.w - cw + 1)) : 0;
  const bool flip = rng.bernoulli(0.5);
  Image out(img.h, img.w);
  for (std::size_t y = 0; y < img.h; ++y) {
    for (std::size_t x = 0; x < img.w; ++x) {
      const std::size_t sx = flip ? img.w - 1 - x : x;
      const float fy = static_cast<float>(oy) +
                       (img.h > 1 ? static_cast<float>(y) / static_cast<float>(img.h - 1) *
                                        static_cast<float>(ch - 1)
                                  : 0.0f);
      const float fx = static_cast<float>(ox) +
                       (img.w > 1 ? static_cast<float>(sx) / static_cast<float>(img.w - 1) *
                                        static_cast<float>(cw - 1)
                                  : 0.0f);
      for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = detail::bilinear_sample(img, fy, fx, c);
    }
  }
  return out;
}

// out = clamp((in - mean) * contrast + mean * brightness), one global scalar
// mean. brightness = contrast = 1 is the identity.
inline Image lighting_view(const Image& img, float brightness, float contrast) {
  float mean = 0.0f;
  for (float v : img.pix) mean += v;
  mean /= static_cast<float>(img.pix.size());
  Image out(img.h, img.w);
  for (std::size_t i = 0; i < img.pix.size(); ++i) {
    out.pix[i] = clamp01((img.pix[i] - mean) * contrast + mean * brightness);
  }
  return out;
}

// Separable Gaussian with reflected borders; kernel normalized to sum 1, so
// the image mean is preserved.
inline Image blur_view(const Image& img, float sigma) {
  const long radius = static_cast<long>(std::ceil(3.0f * sigma));
  std::vector<float> kernel(static_cast<std::size_t>(2 * radius + 1));
  float sum = 0.0f;
  for (long i = -radius; i <= radius; ++i) {
    const float v = std::exp(-static_cast<float>(i * i) / (2.0f * sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (float& v : kernel) v /= sum;

  Image tmp(img.h, img.w);
  for (std::size_t y = 0; y < img.h; ++y) {
    for (std::size_t x = 0; x < img.w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        float acc = 0.0f;
        for (long i = -radius; i <= radius; ++i) {
          acc += kernel[static_cast<std::size_t>(i + radius)] *
                 img.at(y, detail::reflect_index(static_cast<long>(x) + i, static_cast<long>(img.w)), c);
        }
        tmp.at(y, x, c) = acc;
      }
    }
  }
  Image out(img.h, img.w);
  for (std::size_t y = 0; y < img.h; ++y) {
    for (std::size_t x = 0; x < img.w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        float acc = 0.0f;
        for (long i = -radius; i <= radius; ++i) {
          acc += kernel[static_cast<std::size_t>(i + radius)] *
                 tmp.at(detail::reflect_index(static_cast<long>(y) + i, static_cast<long>(img.h)), x, c);
        }
        out.at(y, x, c) = clamp01(acc);
      }
    }
  }
  return out;
}

// Stand-in for generative clothing transfer: rotates the hue of the torso
// window. Shifts drawn from [60, 300] degrees keep the new color far from
// the original.
inline Image clothing_change_view(const Image& img, const AugConfig& cfg, float hue_shift) {
  Image out = img;
  const std::size_t y0 = static_cast<std::size_t>(cfg.torso_y0 * static_cast<float>(img.h));
  const std::size_t y1 = static_cast<std::size_t>(cfg.torso_y1 * static_cast<float>(img.h));
  const std::size_t x0 = static_cast<std::size_t>(cfg.torso_x0 * static_cast<float>(img.w));
  const std::size_t x1 = static_cast<std::size_t>(cfg.torso_x1 * static_cast<float>(img.w));
  for (std::size_t y = y0; y < y1 && y < img.h; ++y) {
    for (std::size_t x = x0; x < x1 && x < img.w; ++x) {
      float h, s, v;
      rgb_to_hsv(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2), h, s, v);
      float r, g, b;
      hsv_to_rgb(h + hue_shift, s, v, r, g, b);
      out.at(y, x, 0) = clamp01(r);
      out.at(y, x, 1) = clamp01(g);
      out.at(y, x, 2) = clamp01(b);
    }
  }
  return out;
}

// Crop-and-paste occlusion: a rectangle cropped from the donor lands fully
// inside the target at a random position.
inline Image occlusion_view(const Image& img, const Image& donor, const AugConfig& cfg, Rng& rng) {
  const float area = static_cast<float>(rng.uniform(cfg.occlusion_area_lo, cfg.occlusion_area_hi));
  const float aspect = static_cast<float>(rng.uniform(0.5, 2.0));
  const float pixels = area * static_cast<float>(img.h * img.w);
  std::size_t rh = static_cast<std::size_t>(std::round(std::sqrt(pixels * aspect)));
  std::size_t rw = static_cast<std::size_t>(std::round(std::sqrt(pixels / aspect)));
  rh = std::min(std::max<std::size_t>(1, rh), img.h);
  rw = std::min(std::max<std::size_t>(1, rw), img.w);
  const std::size_t sy = static_cast<std::size_t>(rng.uniform_index(donor.h - std::min(rh, donor.h) + 1));
  const std::size_t sx = static_cast<std::size_t>(rng.uniform_index(donor.w - std::min(rw, donor.w) + 1));
  const std::size_t dy = static_cast<std::size_t>(rng.uniform_index(img.h - rh + 1));
  const std::size_t dx = static_cast<std::size_t>(rng.uniform_index(img.w - rw + 1));
  Image out = img;
  for (std::size_t y = 0; y < rh; ++y) {
    for (std::size_t x = 0; x < rw; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        out.at(dy + y, dx + x, c) =
            donor.at(std::min(sy + y, donor.h - 1), std::min(sx + x, donor.w - 1), c);
      }
    }
  }
  return out;
}

inline Image grayscale_view(const Image& img) {
  Image out(img.h, img.w);
  for (std::size_t y = 0; y < img.h; ++y) {
    for (std::size_t x = 0; x < img.w; ++x) {
      const float lum =
          0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) + 0.114f * img.at(y, x, 2);
      out.at(y, x, 0) = out.at(y, x, 1) = out.at(y, x, 2) = lum;
    }
  }
  return out;
}

// One augmented view. `geometric` toggles the crop/flip jitter applied before
// the view transform; tests turn it off to pin the view transforms alone.
inline Image generate_view(const Image& img, ViewKind kind, const Image* donor,
                           const AugConfig& cfg, Rng& rng, bool geometric = true) {
  if (kind == ViewKind::occlusion && donor == nullptr) {
    throw UsageError("generate_view: occlusion needs a donor image");
  }
  Image base = geometric ? geometric_jitter(img, cfg, rng) : img;
  switch (kind) {
    case ViewKind::unchanged:
      return base;
    case ViewKind::lighting: {
      const float b = static_cast<float>(rng.uniform(cfg.brightness_lo, cfg.brightness_hi));
      const float c = static_cast<float>(rng.uniform(cfg.contrast_lo, cfg.contrast_hi));
      return lighting_view(base, b, c);
    }
    case ViewKind::blurred:
      return blur_view(base, static_cast<float>(rng.uniform(cfg.blur_sigma_lo, cfg.blur_sigma_hi)));
    case ViewKind::clothing_change:
      return clothing_change_view(base, cfg,
                                  static_cast<float>(rng.uniform(cfg.hue_shift_lo, cfg.hue_shift_hi)));
    case ViewKind::occlusion:
      return occlusion_view(base, *donor, cfg, rng);
    case ViewKind::grayscale:
      return grayscale_view(base);
  }
  throw UsageError("generate_view: unknown view kind");
}

struct ViewPair {
  Image a, b;
  ViewKind kind_a, kind_b;
};

// Draws two distinct view kinds uniformly without replacement. mpda_on=false
// restricts the pool to the two baseline views (unchanged, lighting).
inline ViewPair sample_view_pair(const Image& img, const std::vector<const Image*>& donor_pool,
                                 const AugConfig& cfg, Rng& rng, bool mpda_on = true) {
  if (donor_pool.empty()) throw UsageError("sample_view_pair: donor pool is empty");
  const std::size_t pool = mpda_on ? kNumViewKinds : 2;
  const std::size_t first = static_cast<std::size_t>(rng.uniform_index(pool));
  std::size_t second = static_cast<std::size_t>(rng.uniform_index(pool - 1));
  if (second >= first) ++second;
  ViewPair out;
  out.kind_a = static_cast<ViewKind>(first);
  out.kind_b = static_cast<ViewKind>(second);
  const Image* donor = donor_pool[rng.uniform_index(donor_pool.size())];
  out.a = generate_view(img, out.kind_a, donor, cfg, rng);
  donor = donor_pool[rng.uniform_index(donor_pool.size())];
  out.b = generate_view(img, out.kind_b, donor, cfg, rng);
  return out;
}

}  // namespace versreid
