#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace widthlab {

// splitmix64; used for seed expansion and for deriving stream seeds.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// The mixing function used everywhere a derived seed is needed (per-epoch
// shuffles, per-candidate streams). mix64(a, b) != mix64(b, a) in general.
inline uint64_t mix64(uint64_t a, uint64_t b) {
  return splitmix64(a ^ (0x9E3779B97F4A7C15ull * (b + 1)));
}

// xoshiro256++ with explicit, serializable state. std::mt19937 would work,
// but its textual state is unwieldy inside binary checkpoints; this keeps
// the full stream state at four words plus the Box-Muller spare.
class Rng {
 public:
  Rng() : Rng(0) {}

  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s_) {
      x = splitmix64(x);
      w = x;
    }
    has_spare_ = false;
    spare_ = 0.0;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n) by rejection; n must be > 0.
  uint64_t below(uint64_t n) {
    const uint64_t threshold = (0 - n) % n;
    for (;;) {
      const uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Standard normal via Box-Muller, one spare cached.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Serialized form: 4 state words + spare flag + spare bits.
  struct State {
    std::array<uint64_t, 4> s;
    bool has_spare;
    uint64_t spare_bits;
  };

  State state() const {
    State st;
    st.s = s_;
    st.has_spare = has_spare_;
    uint64_t bits;
    static_assert(sizeof(bits) == sizeof(spare_));
    __builtin_memcpy(&bits, &spare_, sizeof(bits));
    st.spare_bits = bits;
    return st;
  }

  static Rng from_state(const State& st) {
    Rng r(0);
    r.s_ = st.s;
    r.has_spare_ = st.has_spare;
    __builtin_memcpy(&r.spare_, &st.spare_bits, sizeof(r.spare_));
    return r;
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<uint64_t, 4> s_;
  bool has_spare_;
  double spare_;
};

}  // namespace widthlab
