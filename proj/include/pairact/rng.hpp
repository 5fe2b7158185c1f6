#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "pairact/common.hpp"

namespace pairact {

// mt19937_64 with a self-contained normal sampler (Box-Muller) so that
// trajectories do not depend on the standard library's distribution
// implementations. Serializable for checkpointing.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // size_t uniform in [0, n)
  std::size_t index(std::size_t n) {
    // modulo bias is irrelevant at our n << 2^64
    return static_cast<std::size_t>(engine_() % n);
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      std::size_t j = index(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_ << " " << (have_spare_ ? 1 : 0) << " ";
    os.precision(17);
    os << spare_;
    return os.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream is(s);
    int spare_flag = 0;
    is >> engine_ >> spare_flag >> spare_;
    if (!is) data_error("corrupt RNG state");
    have_spare_ = spare_flag != 0;
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Stable seed derivation for independent streams (per fold, per subject, ...).
inline std::uint64_t derive_seed(std::uint64_t base, const std::string& tag) {
  Fnv1a64 h;
  h.update(&base, sizeof(base));
  h.update(tag);
  return h.value();
}

inline std::uint64_t derive_seed(std::uint64_t base, const std::string& tag, std::uint64_t n) {
  Fnv1a64 h;
  h.update(&base, sizeof(base));
  h.update(tag);
  h.update(&n, sizeof(n));
  return h.value();
}

}  // namespace pairact
