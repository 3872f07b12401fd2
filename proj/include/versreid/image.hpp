#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "versreid/errors.hpp"

namespace versreid {

// Row-major H x W x 3 float image, values in [0, 1].
struct Image {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<float> pix;

  Image() = default;
  Image(std::size_t height, std::size_t width) : h(height), w(width), pix(height * width * 3, 0.0f) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pix[(y * w + x) * 3 + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return pix[(y * w + x) * 3 + c]; }
};

inline float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

// Hue in degrees [0, 360), saturation and value in [0, 1].
inline void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max(r, std::max(g, b));
  const float mn = std::min(r, std::min(g, b));
  const float d = mx - mn;
  v = mx;
  s = mx > 0.0f ? d / mx : 0.0f;
  if (d <= 0.0f) {
    h = 0.0f;
    return;
  }
  if (mx == r) {
    h = 60.0f * std::fmod((g - b) / d + 6.0f, 6.0f);
  } else if (mx == g) {
    h = 60.0f * ((b - r) / d + 2.0f);
  } else {
    h = 60.0f * ((r - g) / d + 4.0f);
  }
}

inline void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  h = std::fmod(std::fmod(h, 360.0f) + 360.0f, 360.0f);
  const float c = v * s;
  const float x = c * (1.0f - std::fabs(std::fmod(h / 60.0f, 2.0f) - 1.0f));
  const float m = v - c;
  float rr = 0, gg = 0, bb = 0;
  if (h < 60) {
    rr = c, gg = x;
  } else if (h < 120) {
    rr = x, gg = c;
  } else if (h < 180) {
    gg = c, bb = x;
  } else if (h < 240) {
    gg = x, bb = c;
  } else if (h < 300) {
    rr = x, bb = c;
  } else {
    rr = c, bb = x;
  }
  r = rr + m;
  g = gg + m;
  b = bb + m;
}

// Quantization to 8 bits, round half up. 0.5 maps to byte 128.
inline std::uint8_t quantize_byte(float v) {
  const float q = std::floor(clamp01(v) * 255.0f + 0.5f);
  return static_cast<std::uint8_t>(q);
}

inline void write_ppm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("ppm: cannot open for writing: " + path);
  out << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<std::uint8_t> bytes(img.pix.size());
  for (std::size_t i = 0; i < img.pix.size(); ++i) bytes[i] = quantize_byte(img.pix[i]);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("ppm: write failed: " + path);
}

namespace detail {

// Skips whitespace and '#' comment lines, tracking the byte offset for error
// reporting.
inline int ppm_next_token_char(std::istream& in, std::size_t& offset) {
  int ch = in.get();
  ++offset;
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') {
        ch = in.get();
        ++offset;
      }
    } else if (!std::isspace(ch)) {
      return ch;
    }
    ch = in.get();
    ++offset;
  }
  return EOF;
}

inline std::size_t ppm_read_uint(std::istream& in, std::size_t& offset, const std::string& path) {
  int ch = ppm_next_token_char(in, offset);
  if (ch == EOF || !std::isdigit(ch)) {
    throw DataError("ppm: malformed header at byte " + std::to_string(offset - 1) + ": " + path);
  }
  std::size_t v = 0;
  while (ch != EOF && std::isdigit(ch)) {
    v = v * 10 + static_cast<std::size_t>(ch - '0');
    ch = in.get();
    ++offset;
  }
  if (ch != EOF) in.unget(), --offset;
  return v;
}

}  // namespace detail

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("ppm: cannot open: " + path);
  std::size_t offset = 0;
  char magic[2] = {0, 0};
  in.read(magic, 2);
  offset += 2;
  if (!in || magic[0] != 'P' || magic[1] != '6') {
    throw DataError("ppm: malformed header at byte 0 (expected P6): " + path);
  }
  const std::size_t w = detail::ppm_read_uint(in, offset, path);
  const std::size_t h = detail::ppm_read_uint(in, offset, path);
  const std::size_t maxval = detail::ppm_read_uint(in, offset, path);
  if (maxval != 255) {
    throw DataError("ppm: unsupported maxval " + std::to_string(maxval) + " at byte " +
                    std::to_string(offset) + ": " + path);
  }
  // Exactly one whitespace byte separates the header from the payload.
  int sep = in.get();
  ++offset;
  if (sep == EOF || !std::isspace(sep)) {
    throw DataError("ppm: malformed header at byte " + std::to_string(offset - 1) + ": " + path);
  }
  Image img(h, w);
  std::vector<std::uint8_t> bytes(w * h * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) {
    throw DataError("ppm: truncated payload at byte " +
                    std::to_string(offset + static_cast<std::size_t>(in.gcount())) + ": " + path);
  }
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pix[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

}  // namespace versreid
