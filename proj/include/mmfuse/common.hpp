#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mmfuse {

// ----------------------------------------------------------------------------
// Error taxonomy
// ----------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes are incompatible (dimension errors).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A configuration value is invalid (bad hyperparameter, bad geometry, bad key).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Input data violates its schema (bad label, unknown category, missing column).
class DataError : public Error {
 public:
  using Error::Error;
};

// An API contract was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// A kernel produced or received NaN/Inf.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// ----------------------------------------------------------------------------
// Shapes
// ----------------------------------------------------------------------------

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ----------------------------------------------------------------------------
// Deterministic RNG
//
// splitmix64 core with hand-rolled uniform/normal so that streams are
// bit-reproducible across compilers (std::normal_distribution is not).
// ----------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64(state_); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, two draws per sample; no cached spare so state stays linear.
  double normal() {
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  std::size_t index(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

  void shuffle(std::vector<std::size_t>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Independent deterministic stream per (seed, purpose) pair.
inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag) {
  std::uint64_t s = seed ^ fnv1a64(tag);
  return splitmix64(s);
}

// ----------------------------------------------------------------------------
// Kernel threading cap (MMFUSE_THREADS)
// ----------------------------------------------------------------------------

inline unsigned kernel_threads() {
  static unsigned cached = [] {
    unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("MMFUSE_THREADS")) {
      char* end = nullptr;
      long v = std::strtol(env, &end, 10);
      if (end != env && v >= 1) hw = std::min<unsigned>(hw, static_cast<unsigned>(v));
    }
    return hw;
  }();
  return cached;
}

// Splits [0, n) into contiguous chunks, one worker thread per chunk. Chunk
// boundaries depend only on n and the thread cap, so writes into disjoint
// output ranges stay deterministic.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t grain = 2048) {
  unsigned workers = kernel_threads();
  if (workers <= 1 || n <= grain) {
    fn(std::size_t{0}, n);
    return;
  }
  std::size_t chunks = std::min<std::size_t>(workers, (n + grain - 1) / grain);
  std::size_t per = (n + chunks - 1) / chunks;
  std::vector<std::thread> pool;
  pool.reserve(chunks);
  for (std::size_t c = 0; c < chunks; ++c) {
    std::size_t lo = c * per;
    std::size_t hi = std::min(n, lo + per);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace mmfuse
