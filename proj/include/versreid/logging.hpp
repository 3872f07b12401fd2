#pragma once

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <string>

namespace versreid {

// Warnings go to stderr; the counter lets tests assert one was emitted
// without capturing the stream.
inline std::atomic<std::uint64_t>& warning_count() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}

inline void warn(const std::string& msg) {
  warning_count().fetch_add(1, std::memory_order_relaxed);
  std::fprintf(stderr, "[warn] %s\n", msg.c_str());
}

}  // namespace versreid
