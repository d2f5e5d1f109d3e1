#pragma once

#include <array>
#include <cstdint>

namespace qkdsim {

/// Identifies one reproducible random stream. Identical (seed, stream_id)
/// always produce the same sequence, independent of thread scheduling.
struct RngSpec {
  std::uint64_t seed = 0;
  std::uint64_t stream_id = 0;

  /// Derived stream for a parallel trial / worker. Streams with distinct
  /// offsets never overlap.
  [[nodiscard]] RngSpec substream(std::uint64_t offset) const {
    return RngSpec{seed, stream_id + offset};
  }
};

namespace detail {

inline void philox_mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi,
                           std::uint32_t& lo) {
  const std::uint64_t prod = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(prod >> 32);
  lo = static_cast<std::uint32_t>(prod);
}

/// One Philox4x32-10 block: 128 bits of counter, 64 bits of key.
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) {
  for (int r = 0; r < 10; ++r) {
    std::uint32_t hi0, lo0, hi1, lo1;
    philox_mulhilo(0xD2511F53u, ctr[0], hi0, lo0);
    philox_mulhilo(0xCD9E8D57u, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    if (r < 9) {
      key[0] += 0x9E3779B9u;
      key[1] += 0xBB67AE85u;
    }
  }
  return ctr;
}

}  // namespace detail

/// Counter-based random stream (Philox4x32-10) with hand-rolled samplers so
/// output is bit-identical across platforms and standard-library versions.
///
/// The 128-bit Philox counter is laid out as [block_lo, block_hi, stream_lo,
/// stream_hi]; the key is the 64-bit seed. Each stream therefore has 2^64
/// blocks of 128 bits available. Blocks are generated in batches; the output
/// sequence does not depend on the batch size.
class RandomStream {
 public:
  explicit RandomStream(RngSpec spec)
      : key_{static_cast<std::uint32_t>(spec.seed),
             static_cast<std::uint32_t>(spec.seed >> 32)},
        stream_(spec.stream_id) {}

  std::uint64_t next_u64() {
    if (word_ >= kWords) refill();
    return words_[word_++];
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Exponential with the given mean (mean <= 0 returns 0).
  double exponential(double mean);

  /// Exact Poisson sampler (multiplicative method, chunked so it stays exact
  /// for large means).
  std::uint64_t poisson(double mean);

 private:
  static constexpr int kBatchBlocks = 8;
  static constexpr int kWords = 2 * kBatchBlocks;

  void refill() {
    const std::uint32_t s_lo = static_cast<std::uint32_t>(stream_);
    const std::uint32_t s_hi = static_cast<std::uint32_t>(stream_ >> 32);
    std::uint64_t block = block_;
    std::uint64_t out[kWords];
    for (int b = 0; b < kBatchBlocks; ++b, ++block) {
      const auto w = detail::philox4x32({static_cast<std::uint32_t>(block),
                                         static_cast<std::uint32_t>(block >> 32),
                                         s_lo, s_hi},
                                        key_);
      out[2 * b] = (static_cast<std::uint64_t>(w[1]) << 32) | w[0];
      out[2 * b + 1] = (static_cast<std::uint64_t>(w[3]) << 32) | w[2];
    }
    for (int i = 0; i < kWords; ++i) words_[i] = out[i];
    block_ = block;
    word_ = 0;
  }

  std::array<std::uint32_t, 2> key_;
  std::uint64_t stream_ = 0;
  std::uint64_t block_ = 0;
  std::array<std::uint64_t, kWords> words_{};
  int word_ = kWords;  // force refill on first use
};

}  // namespace qkdsim
