#pragma once

// Counter-based random numbers (Philox4x32-10).
//
// A generator is identified by a 64-bit key (the user seed) and a 64-bit
// stream id. Output block n is Philox(key, {n_lo, n_hi, stream_lo, stream_hi}),
// so any (seed, stream, position) triple is reproducible without replaying
// the sequence. split() derives an independent child stream; experiments give
// every seed / sequence / Monte-Carlo sample its own stream so results do not
// depend on evaluation order or thread count.

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <limits>
#include <random>

namespace motionssm {

class Philox4x32 {
 public:
  using result_type = std::uint32_t;

  explicit Philox4x32(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
        stream_(stream) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    if (index_ == 4) {
      refill();
    }
    return block_[index_++];
  }

  /// Child generator on a stream derived from this one's stream and `id`.
  /// The child starts at counter zero and never overlaps the parent.
  Philox4x32 split(std::uint64_t id) const {
    const std::uint64_t seed = (static_cast<std::uint64_t>(key_[1]) << 32) | key_[0];
    return Philox4x32(seed, splitmix64(stream_ ^ splitmix64(id + 0x632be59bd9b4e019ULL)));
  }

  std::uint64_t stream() const { return stream_; }

  /// Raw block function, exposed for known-answer tests.
  static std::array<std::uint32_t, 4> block(std::array<std::uint32_t, 4> ctr,
                                            std::array<std::uint32_t, 2> key) {
    constexpr std::uint32_t kMul0 = 0xD2511F53u;
    constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
      const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
      ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
             static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    return ctr;
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  void refill() {
    block_ = block({static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32),
                    static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)},
                   key_);
    ++counter_;
    index_ = 0;
  }

  std::array<std::uint32_t, 2> key_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int index_ = 4;
};

using Rng = Philox4x32;

/// Vector of iid standard normals.
inline Eigen::VectorXd standard_normal(Rng& rng, Eigen::Index n) {
  std::normal_distribution<double> normal;
  Eigen::VectorXd out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out[i] = normal(rng);
  }
  return out;
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

}  // namespace motionssm
