#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "versreid/augment.hpp"
#include "versreid/errors.hpp"
#include "versreid/image.hpp"
#include "versreid/rng.hpp"

namespace versreid {

enum class Scene { general, low_resolution, clothing_change, occlusion, cross_modality };

constexpr std::size_t kNumScenes = 5;

inline const char* scene_name(Scene s) {
  switch (s) {
    case Scene::general: return "general";
    case Scene::low_resolution: return "low_resolution";
    case Scene::clothing_change: return "clothing_change";
    case Scene::occlusion: return "occlusion";
    case Scene::cross_modality: return "cross_modality";
  }
  return "?";
}

inline Scene parse_scene(const std::string& name) {
  for (std::size_t i = 0; i < kNumScenes; ++i) {
    if (name == scene_name(static_cast<Scene>(i))) return static_cast<Scene>(i);
  }
  throw DataError("scene: unknown name " + name);
}

enum class Split { train, query, gallery };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
  }
  return "?";
}

inline Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "query") return Split::query;
  if (name == "gallery") return Split::gallery;
  throw DataError("split: unknown name " + name);
}

// Body shape quantized to a 4x4x4 grid, so at most 64 identities keep the
// pairwise-distinct invariant. Shape survives every scene transform; torso
// hue is the attire cue that clothing_change destroys.
struct IdentitySpec {
  std::size_t identity = 0;
  int torso_width_level = 0;
  int head_radius_level = 0;
  int leg_length_level = 0;
  float torso_hue = 0.0f;
  float leg_hue = 0.0f;
};

constexpr std::size_t kMaxIdentities = 64;

inline IdentitySpec make_identity_spec(std::size_t identity) {
  if (identity >= kMaxIdentities) {
    throw DataError("identity spec: shape grid holds at most 64 identities, got index " +
                    std::to_string(identity));
  }
  IdentitySpec spec;
  spec.identity = identity;
  spec.torso_width_level = static_cast<int>(identity % 4);
  spec.head_radius_level = static_cast<int>((identity / 4) % 4);
  spec.leg_length_level = static_cast<int>((identity / 16) % 4);
  // Hues are assigned on coarse wheels (45 and 90 degrees apart) so nearby
  // identity indices stay far apart in color space; identities that share a
  // wheel slot still differ in at least one shape level.
  spec.torso_hue = 10.0f + 45.0f * static_cast<float>(identity % 8);
  spec.leg_hue = 50.0f + 90.0f * static_cast<float>((identity / 8) % 4);
  return spec;
}

struct SceneSample {
  Image image;
  std::size_t identity = 0;
  Scene scene = Scene::general;
  std::size_t camera = 0;
  Split split = Split::train;
};

namespace detail {

constexpr std::size_t kImageH = 32;
constexpr std::size_t kImageW = 16;

inline void fill_hsv(Image& img, std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1,
                     float h, float s, float v) {
  float r, g, b;
  hsv_to_rgb(h, s, v, r, g, b);
  for (std::size_t y = y0; y < y1 && y < img.h; ++y) {
    for (std::size_t x = x0; x < x1 && x < img.w; ++x) {
      img.at(y, x, 0) = clamp01(r);
      img.at(y, x, 1) = clamp01(g);
      img.at(y, x, 2) = clamp01(b);
    }
  }
}

// Low-saturation noisy backdrop; the hue encodes the camera.
inline void draw_background(Image& img, std::size_t camera, Rng& rng) {
  const float hue = std::fmod(200.0f + 25.0f * static_cast<float>(camera), 360.0f);
  for (std::size_t y = 0; y < img.h; ++y) {
    for (std::size_t x = 0; x < img.w; ++x) {
      const float v = 0.55f + static_cast<float>(rng.uniform(-0.06, 0.06));
      float r, g, b;
      hsv_to_rgb(hue, 0.18f, v, r, g, b);
      img.at(y, x, 0) = clamp01(r);
      img.at(y, x, 1) = clamp01(g);
      img.at(y, x, 2) = clamp01(b);
    }
  }
}

inline void draw_person(Image& img, const IdentitySpec& spec, float torso_hue) {
  const float h = static_cast<float>(img.h);
  const float w = static_cast<float>(img.w);

  // Head: circle around (0.16h, 0.5w), radius from the shape grid.
  const float radius = (0.05f + 0.02f * static_cast<float>(spec.head_radius_level)) * h;
  const float cy = 0.16f * h;
  const float cx = 0.5f * w;
  float hr, hg, hb;
  hsv_to_rgb(28.0f, 0.45f, 0.82f, hr, hg, hb);
  for (std::size_t y = 0; y < img.h; ++y) {
    for (std::size_t x = 0; x < img.w; ++x) {
      const float dy = (static_cast<float>(y) + 0.5f) - cy;
      const float dx = (static_cast<float>(x) + 0.5f) - cx;
      if (dy * dy + dx * dx <= radius * radius) {
        img.at(y, x, 0) = clamp01(hr);
        img.at(y, x, 1) = clamp01(hg);
        img.at(y, x, 2) = clamp01(hb);
      }
    }
  }

  // Torso: the window the clothing-change augmentation recolors. Width
  // levels step by a full pixel so the shape code stays legible at 32x16.
  const float hw = (0.14f + 0.06f * static_cast<float>(spec.torso_width_level)) * w;
  fill_hsv(img, static_cast<std::size_t>(0.30f * h), static_cast<std::size_t>(0.62f * h),
           static_cast<std::size_t>(0.5f * w - hw),
           static_cast<std::size_t>(std::ceil(0.5f * w + hw)), torso_hue, 0.9f, 0.8f);

  // Legs: two bars whose length comes from the shape grid.
  const std::size_t leg_top = static_cast<std::size_t>(0.62f * h);
  const float len = (0.18f + 0.08f * static_cast<float>(spec.leg_length_level)) * h;
  const std::size_t leg_bot = std::min(img.h, leg_top + static_cast<std::size_t>(len));
  fill_hsv(img, leg_top, leg_bot, static_cast<std::size_t>(0.30f * w),
           static_cast<std::size_t>(0.45f * w), spec.leg_hue, 0.85f, 0.65f);
  fill_hsv(img, leg_top, leg_bot, static_cast<std::size_t>(0.55f * w),
           static_cast<std::size_t>(0.70f * w), spec.leg_hue, 0.85f, 0.65f);
}

// Downsample by 4 with block averaging, then nearest-neighbor upsample back.
inline Image pixelate4(const Image& img) {
  Image out(img.h, img.w);
  for (std::size_t by = 0; by < img.h; by += 4) {
    for (std::size_t bx = 0; bx < img.w; bx += 4) {
      for (std::size_t c = 0; c < 3; ++c) {
        float sum = 0.0f;
        std::size_t count = 0;
        for (std::size_t y = by; y < std::min(by + 4, img.h); ++y) {
          for (std::size_t x = bx; x < std::min(bx + 4, img.w); ++x) {
            sum += img.at(y, x, c);
            ++count;
          }
        }
        const float mean = sum / static_cast<float>(count);
        for (std::size_t y = by; y < std::min(by + 4, img.h); ++y) {
          for (std::size_t x = bx; x < std::min(bx + 4, img.w); ++x) out.at(y, x, c) = mean;
        }
      }
    }
  }
  return out;
}

inline void paste_background_patch(Image& img, std::size_t camera, Rng& rng) {
  const float area = static_cast<float>(rng.uniform(0.10, 0.40));
  const float aspect = static_cast<float>(rng.uniform(0.5, 2.0));
  const float pixels = area * static_cast<float>(img.h * img.w);
  std::size_t rh = static_cast<std::size_t>(std::round(std::sqrt(pixels * aspect)));
  std::size_t rw = static_cast<std::size_t>(std::round(std::sqrt(pixels / aspect)));
  rh = std::min(std::max<std::size_t>(1, rh), img.h);
  rw = std::min(std::max<std::size_t>(1, rw), img.w);
  const std::size_t dy = static_cast<std::size_t>(rng.uniform_index(img.h - rh + 1));
  const std::size_t dx = static_cast<std::size_t>(rng.uniform_index(img.w - rw + 1));
  const float hue = std::fmod(200.0f + 25.0f * static_cast<float>(camera), 360.0f);
  for (std::size_t y = dy; y < dy + rh; ++y) {
    for (std::size_t x = dx; x < dx + rw; ++x) {
      const float v = 0.55f + static_cast<float>(rng.uniform(-0.06, 0.06));
      float r, g, b;
      hsv_to_rgb(hue, 0.18f, v, r, g, b);
      img.at(y, x, 0) = clamp01(r);
      img.at(y, x, 1) = clamp01(g);
      img.at(y, x, 2) = clamp01(b);
    }
  }
}

}  // namespace detail

// Stylized person on a noisy backdrop, then the scene transform, then the
// deterministic camera brightness. The clothing-change scene redraws the
// torso hue uniformly at random, making attire identity-uninformative there.
inline SceneSample render_sample(const IdentitySpec& spec, Scene scene, std::size_t camera,
                                 Rng& rng) {
  Image img(detail::kImageH, detail::kImageW);
  detail::draw_background(img, camera, rng);
  const float torso_hue = scene == Scene::clothing_change
                              ? static_cast<float>(rng.uniform(0.0, 360.0))
                              : spec.torso_hue;
  detail::draw_person(img, spec, torso_hue);

  switch (scene) {
    case Scene::general: {
      const float b = static_cast<float>(rng.uniform(0.92, 1.08));
      const float c = static_cast<float>(rng.uniform(0.92, 1.08));
      img = lighting_view(img, b, c);
      break;
    }
    case Scene::low_resolution:
      img = detail::pixelate4(img);
      break;
    case Scene::clothing_change:
      break;
    case Scene::occlusion:
      detail::paste_background_patch(img, camera, rng);
      break;
    case Scene::cross_modality:
      img = grayscale_view(img);
      break;
  }

  const float cam_brightness = camera % 2 == 0 ? 0.96f : 1.05f;
  for (float& v : img.pix) v = clamp01(v * cam_brightness);

  SceneSample sample;
  sample.image = std::move(img);
  sample.identity = spec.identity;
  sample.scene = scene;
  sample.camera = camera;
  return sample;
}

struct ManifestRecord {
  std::string path;  // relative to the manifest root
  std::size_t identity = 0;
  Scene scene = Scene::general;
  std::size_t camera = 0;
  Split split = Split::train;
};

struct DatasetManifest {
  std::string root;
  std::uint64_t seed = 0;
  std::string config;
  std::vector<ManifestRecord> records;
};

inline void write_manifest(const DatasetManifest& manifest, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("manifest: cannot open for writing: " + path);
  out << "# seed=" << manifest.seed << "\n";
  out << "# config=" << manifest.config << "\n";
  for (const auto& rec : manifest.records) {
    out << rec.path << "\t" << rec.identity << "\t" << scene_name(rec.scene) << "\t" << rec.camera
        << "\t" << split_name(rec.split) << "\n";
  }
  if (!out) throw DataError("manifest: write failed: " + path);
}

inline DatasetManifest load_manifest(const std::string& path, bool check_files = true) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("manifest: cannot open: " + path);
  DatasetManifest manifest;
  manifest.root = std::filesystem::path(path).parent_path().string();
  if (manifest.root.empty()) manifest.root = ".";
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto seed_pos = line.find("seed=");
      const auto config_pos = line.find("config=");
      if (seed_pos != std::string::npos) {
        manifest.seed = std::strtoull(line.c_str() + seed_pos + 5, nullptr, 10);
      } else if (config_pos != std::string::npos) {
        manifest.config = line.substr(config_pos + 7);
      }
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 5) {
      throw DataError("manifest: malformed line " + std::to_string(lineno) + ": expected 5 fields, got " +
                      std::to_string(fields.size()));
    }
    ManifestRecord rec;
    rec.path = fields[0];
    try {
      rec.identity = std::stoul(fields[1]);
      rec.camera = std::stoul(fields[3]);
    } catch (const std::exception&) {
      throw DataError("manifest: malformed line " + std::to_string(lineno) + ": bad integer field");
    }
    try {
      rec.scene = parse_scene(fields[2]);
      rec.split = parse_split(fields[4]);
    } catch (const DataError& e) {
      throw DataError("manifest: malformed line " + std::to_string(lineno) + ": " + e.what());
    }
    if (check_files && !std::filesystem::exists(std::filesystem::path(manifest.root) / rec.path)) {
      throw DataError("manifest: missing file " + rec.path + " (line " + std::to_string(lineno) + ")");
    }
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

inline Image load_record_image(const DatasetManifest& manifest, const ManifestRecord& rec) {
  return read_ppm((std::filesystem::path(manifest.root) / rec.path).string());
}

// Renders the full corpus to `out_dir` and returns the manifest that was
// written alongside it. Per (identity, scene): one query, two gallery shots
// at the opposite camera, and the rest train alternating cameras, so every
// query keeps valid matches under same-camera exclusion.
inline DatasetManifest generate_dataset(const std::string& out_dir, std::size_t num_identities,
                                        std::size_t per_scene, std::uint64_t seed) {
  if (num_identities < 2) throw UsageError("gen-data: need at least 2 identities");
  if (num_identities > kMaxIdentities) {
    throw UsageError("gen-data: shape grid holds at most 64 identities");
  }
  if (per_scene < 4) {
    throw UsageError("gen-data: need at least 4 images per identity per scene");
  }
  std::error_code ec;
  std::filesystem::create_directories(std::filesystem::path(out_dir) / "images", ec);
  if (ec) throw DataError("gen-data: cannot create " + out_dir + ": " + ec.message());

  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.seed = seed;
  manifest.config = "ids=" + std::to_string(num_identities) + ";per_scene=" + std::to_string(per_scene);

  Rng rng(seed);
  for (std::size_t id = 0; id < num_identities; ++id) {
    const IdentitySpec spec = make_identity_spec(id);
    for (std::size_t s = 0; s < kNumScenes; ++s) {
      const Scene scene = static_cast<Scene>(s);
      const std::size_t query_cam = id % 2;
      for (std::size_t k = 0; k < per_scene; ++k) {
        std::size_t camera;
        Split split;
        if (k == 0) {
          camera = query_cam;
          split = Split::query;
        } else if (k <= 2) {
          camera = 1 - query_cam;
          split = Split::gallery;
        } else {
          camera = k % 2;
          split = Split::train;
        }
        SceneSample sample = render_sample(spec, scene, camera, rng);
        sample.split = split;

        char name[96];
        std::snprintf(name, sizeof(name), "images/id%03zu_%s_c%zu_%02zu.ppm", id,
                      scene_name(scene), camera, k);
        ManifestRecord rec;
        rec.path = name;
        rec.identity = id;
        rec.scene = scene;
        rec.camera = camera;
        rec.split = split;
        write_ppm(sample.image, (std::filesystem::path(out_dir) / rec.path).string());
        manifest.records.push_back(std::move(rec));
      }
    }
  }
  write_manifest(manifest, (std::filesystem::path(out_dir) / "manifest.tsv").string());
  return manifest;
}

// PK batch: P distinct identities with K train images each, both without
// replacement. Every identity in the train split must afford K images.
inline std::vector<std::size_t> pk_sample(const DatasetManifest& manifest, std::size_t p,
                                          std::size_t k, Rng& rng) {
  std::map<std::size_t, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    if (manifest.records[i].split == Split::train) by_id[manifest.records[i].identity].push_back(i);
  }
  if (by_id.size() < p) {
    throw DataError("pk: need " + std::to_string(p) + " identities with train images, have " +
                    std::to_string(by_id.size()));
  }
  for (const auto& [id, recs] : by_id) {
    if (recs.size() < k) {
      throw DataError("pk: identity " + std::to_string(id) + " has only " +
                      std::to_string(recs.size()) + " train images, need " + std::to_string(k));
    }
  }
  std::vector<std::size_t> ids;
  ids.reserve(by_id.size());
  for (const auto& [id, recs] : by_id) ids.push_back(id);
  rng.shuffle(ids);
  ids.resize(p);

  std::vector<std::size_t> batch;
  batch.reserve(p * k);
  for (std::size_t id : ids) {
    std::vector<std::size_t> pool = by_id[id];
    rng.shuffle(pool);
    for (std::size_t j = 0; j < k; ++j) batch.push_back(pool[j]);
  }
  return batch;
}

// Scene heuristics used by the separability audit: zero channel variance
// flags the grayscale scene, low horizontal high-frequency energy flags the
// pixelated scene, everything else is "other".
inline float channel_variance(const Image& img) {
  double acc = 0.0;
  for (std::size_t y = 0; y < img.h; ++y) {
    for (std::size_t x = 0; x < img.w; ++x) {
      // Sum in double so equal channels give an exactly zero deviation.
      const double m = (static_cast<double>(img.at(y, x, 0)) + img.at(y, x, 1) + img.at(y, x, 2)) / 3.0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double d = img.at(y, x, c) - m;
        acc += d * d;
      }
    }
  }
  return static_cast<float>(acc / static_cast<double>(img.h * img.w * 3));
}

inline float high_frequency_energy(const Image& img) {
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t y = 0; y < img.h; ++y) {
    for (std::size_t x = 0; x + 1 < img.w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        acc += std::abs(img.at(y, x + 1, c) - img.at(y, x, c));
        ++count;
      }
    }
  }
  return static_cast<float>(acc / static_cast<double>(count));
}

}  // namespace versreid
