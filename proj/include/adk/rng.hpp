#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace adk {

// Deterministic random stream keyed by (seed, stream-name). The same key and
// the same call sequence always produce the same values; distinct stream
// names on the same seed give unrelated sequences. Gaussian draws use
// Box-Muller on top of mt19937_64 so the sequence does not depend on any
// implementation-defined std::distribution.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::string_view stream = "")
      : seed_(seed), stream_(stream), engine_(stream_key(seed, stream)) {}

  // Derived stream: same seed, child name appended to the stream path.
  Rng fork(std::string_view child) const {
    std::string name = stream_.empty()
                           ? std::string(child)
                           : stream_ + "/" + std::string(child);
    return Rng(seed_, name);
  }

  std::uint64_t seed() const { return seed_; }
  const std::string& stream() const { return stream_; }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], both inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (lo > hi) throw std::invalid_argument("uniform_int: lo > hi");
    std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return lo + static_cast<std::int64_t>(v % span);
  }

  // Standard normal draw. Pairs are cached, so draws are two-per-transform.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1], keeps log() finite
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  static std::uint64_t stream_key(std::uint64_t seed, std::string_view stream) {
    std::uint64_t h = 14695981039346656037ull;  // FNV-1a
    for (char c : stream) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    return splitmix(seed ^ splitmix(h));
  }

  std::uint64_t seed_;
  std::string stream_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace adk
