#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace elf {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Row-major strides; stride of dim i is the number of scalars between
/// consecutive indices along i.
inline std::vector<Index> row_major_strides(const Shape& shape) {
  std::vector<Index> strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
    strides[i] = strides[i + 1] * shape[i + 1];
  return strides;
}

struct TensorError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail(const std::string& what) { throw TensorError(what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(what);
}

/// Global toggle for the NaN/Inf guard applied after every forward op.
inline bool& finite_checks() {
  static bool enabled = true;
  return enabled;
}

template <typename S>
void ensure_finite(const std::vector<S>& data, const char* op) {
  if (!finite_checks()) return;
  for (const S& v : data)
    if (!std::isfinite(static_cast<double>(v)))
      fail(std::string("non-finite value produced by op '") + op + "'");
}

// -- deterministic seeding helpers -------------------------------------------

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Portable uniform in [0,1) from a 64-bit state; independent of libc++
/// distribution internals so seeded runs are bit-identical everywhere.
inline double uniform01(std::uint64_t& state) {
  return static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
}

inline double uniform_in(std::uint64_t& state, double lo, double hi) {
  return lo + (hi - lo) * uniform01(state);
}

/// Box-Muller normal draw (two uniforms per call, second discarded).
inline double normal01(std::uint64_t& state) {
  double u1 = uniform01(state);
  double u2 = uniform01(state);
  if (u1 <= 0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace elf
