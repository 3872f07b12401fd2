#pragma once

#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "versreid/errors.hpp"
#include "versreid/logging.hpp"
#include "versreid/model.hpp"
#include "versreid/rng.hpp"
#include "versreid/tensor.hpp"

namespace versreid {

// On-disk model state: ordered named tensors plus the step counter and the
// training RNG state. Binary layout (all integers little-endian): "VRSR",
// version byte 1, u32 tensor count, then per tensor u16 name length, name,
// u8 rank, rank x u32 dims, f32 payload; finally u64 step and 32 RNG bytes.
struct CheckpointData {
  std::vector<std::pair<std::string, TensorT<float>>> tensors;
  std::uint64_t step = 0;
  std::array<std::uint8_t, 32> rng_state{};
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct CheckpointReader {
  const std::string& bytes;
  std::size_t offset = 0;
  std::string context = "header";

  void need(std::size_t n) const {
    if (offset + n > bytes.size()) {
      throw DataError("checkpoint: truncated " + context + " at offset " + std::to_string(offset));
    }
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes[offset++]);
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes[offset++])) << (8 * i);
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[offset++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes[offset++])) << (8 * i);
    return v;
  }
};

}  // namespace detail

inline std::string serialize_checkpoint(const CheckpointData& ckpt) {
  std::string out;
  out += "VRSR";
  out.push_back(1);
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, tensor] : ckpt.tensors) {
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(tensor.rank()));
    for (std::size_t d : tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      detail::put_u32(out, std::bit_cast<std::uint32_t>(tensor.at(i)));
    }
  }
  detail::put_u64(out, ckpt.step);
  for (std::uint8_t b : ckpt.rng_state) out.push_back(static_cast<char>(b));
  return out;
}

inline CheckpointData deserialize_checkpoint(const std::string& bytes) {
  detail::CheckpointReader r{bytes};
  r.need(5);
  if (bytes.compare(0, 4, "VRSR") != 0) {
    throw DataError("checkpoint: bad magic at offset 0");
  }
  r.offset = 4;
  const std::uint8_t version = r.u8();
  if (version != 1) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version) + " at offset 4");
  }
  CheckpointData ckpt;
  const std::uint32_t count = r.u32();
  for (std::uint32_t t = 0; t < count; ++t) {
    r.context = "tensor record " + std::to_string(t);
    const std::uint16_t name_len = r.u16();
    r.need(name_len);
    std::string name = bytes.substr(r.offset, name_len);
    r.offset += name_len;
    r.context = "tensor record '" + name + "'";
    const std::uint8_t rank = r.u8();
    std::vector<std::size_t> shape;
    std::size_t size = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = r.u32();
      if (dim == 0 || size > (1u << 30) / std::max<std::size_t>(1, dim)) {
        throw DataError("checkpoint: corrupted length field in tensor record '" + name +
                        "' at offset " + std::to_string(r.offset - 4));
      }
      shape.push_back(dim);
      size *= dim;
    }
    auto tensor = TensorT<float>::zeros(shape, true);
    r.need(4 * size);
    for (std::size_t i = 0; i < size; ++i) tensor.data()[i] = std::bit_cast<float>(r.u32());
    ckpt.tensors.push_back({std::move(name), std::move(tensor)});
  }
  r.context = "trailer";
  ckpt.step = r.u64();
  r.need(32);
  for (std::size_t i = 0; i < 32; ++i) {
    ckpt.rng_state[i] = static_cast<std::uint8_t>(bytes[r.offset + i]);
  }
  r.offset += 32;
  if (r.offset != bytes.size()) {
    warn("checkpoint: " + std::to_string(bytes.size() - r.offset) + " trailing bytes ignored");
  }
  return ckpt;
}

inline void save_checkpoint(const CheckpointData& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot open for writing: " + path);
  const std::string bytes = serialize_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("checkpoint: write failed: " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

// Model geometry travels inside the checkpoint as an ordinary tensor record
// named "__config__", so evaluation can rebuild the architecture from the
// file alone. Parameter loaders skip it because they only iterate branch
// parameter names.
inline constexpr const char* kConfigRecordName = "__config__";

inline TensorT<float> encode_model_config(const ModelConfig& cfg, BranchKind kind) {
  auto t = TensorT<float>::zeros({13}, false);
  const std::size_t fields[12] = {cfg.image_h, cfg.image_w,  cfg.patch,
                                  cfg.stride,  cfg.dim,      cfg.blocks,
                                  cfg.heads,   cfg.mlp_ratio, cfg.scenes,
                                  cfg.prompts_per_scene, cfg.versatile_prompts, cfg.num_ids};
  for (std::size_t i = 0; i < 12; ++i) t.data()[i] = static_cast<float>(fields[i]);
  t.data()[12] = kind == BranchKind::vbranch ? 1.0f : 0.0f;
  return t;
}

inline std::pair<ModelConfig, BranchKind> decode_model_config(const CheckpointData& ckpt) {
  for (const auto& [name, t] : ckpt.tensors) {
    if (name != kConfigRecordName) continue;
    if (t.size() != 13) {
      throw DataError("checkpoint: malformed '__config__' record, expected 13 values");
    }
    ModelConfig cfg;
    std::size_t* fields[12] = {&cfg.image_h, &cfg.image_w,  &cfg.patch,
                               &cfg.stride,  &cfg.dim,      &cfg.blocks,
                               &cfg.heads,   &cfg.mlp_ratio, &cfg.scenes,
                               &cfg.prompts_per_scene, &cfg.versatile_prompts, &cfg.num_ids};
    for (std::size_t i = 0; i < 12; ++i) *fields[i] = static_cast<std::size_t>(t.at(i));
    cfg.validate();
    return {cfg, t.at(12) == 1.0f ? BranchKind::vbranch : BranchKind::bank};
  }
  throw DataError("checkpoint: missing '__config__' record, cannot rebuild the model");
}

template <typename T>
CheckpointData branch_to_checkpoint(const BranchT<T>& branch, std::uint64_t step, const Rng& rng) {
  CheckpointData ckpt;
  ckpt.tensors.push_back({kConfigRecordName, encode_model_config(branch.cfg, branch.kind)});
  for_each_parameter(branch, [&](const std::string& name, const TensorT<T>& t) {
    if (t.size() == 0) return;  // e.g. an empty prompt pool; nothing to store
    auto copy = TensorT<float>::zeros(t.shape(), true);
    for (std::size_t i = 0; i < t.size(); ++i) copy.data()[i] = static_cast<float>(t.at(i));
    ckpt.tensors.push_back({name, std::move(copy)});
  });
  ckpt.step = step;
  ckpt.rng_state = rng.serialize();
  return ckpt;
}

// Full load: every branch parameter must be present with a matching shape.
// Partial load (for --init) copies the name/shape intersection and warns on
// the rest; it returns how many tensors were copied.
template <typename T>
std::size_t checkpoint_into_branch(const CheckpointData& ckpt, BranchT<T>& branch, bool partial) {
  std::size_t loaded = 0;
  for_each_parameter(branch, [&](const std::string& name, TensorT<T>& t) {
    if (t.size() == 0) return;  // empty tensors are not stored
    const TensorT<float>* found = nullptr;
    for (const auto& [ckpt_name, tensor] : ckpt.tensors) {
      if (ckpt_name == name) {
        found = &tensor;
        break;
      }
    }
    if (found == nullptr) {
      if (partial) {
        warn("checkpoint: no tensor named '" + name + "', keeping initialization");
        return;
      }
      throw DataError("checkpoint: missing tensor '" + name + "'");
    }
    if (found->shape() != t.shape()) {
      if (partial) {
        warn("checkpoint: shape mismatch for '" + name + "', keeping initialization");
        return;
      }
      throw DataError("checkpoint: shape mismatch for '" + name + "', expected " +
                      detail::shape_str(t.shape()) + ", found " + detail::shape_str(found->shape()));
    }
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<T>(found->at(i));
    ++loaded;
  });
  return loaded;
}

// FNV-1a over the serialized bytes; used for teacher-immutability and
// determinism audits.
inline std::uint64_t checkpoint_hash(const CheckpointData& ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace versreid
