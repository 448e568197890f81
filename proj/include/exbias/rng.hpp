#pragma once

#include <cstdint>
#include <cstddef>
#include <random>

namespace exbias {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Fixed sub-stream tags. Values are part of the reproducibility contract:
// changing one changes every downstream draw.
enum class Purpose : std::uint64_t {
  kCatalog = 1,
  kUsers = 2,
  kPopulation = 3,
  kNests = 4,
  kOverexposurePair = 5,
  kCompetitionPair = 6,
  kNullPairs = 7,
  kSlates = 8,
  kChoices = 9,
  kTraining = 10,
  kTreated = 11,
  kControl = 12,
  kInit = 13,
  kNegatives = 14,
  kShuffle = 15,
  kBootstrap = 16,
  kRandomScores = 17,
  kGradientCheck = 18,
};

// xoshiro256** (Blackman & Vigna), seeded through splitmix64.
class Xoshiro256 {
 public:
  using result_type = std::uint64_t;
  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return ~result_type{0}; }

  explicit Xoshiro256(std::uint64_t seed) noexcept {
    std::uint64_t x = seed;
    for (auto& w : s_) {
      x += 0x9e3779b97f4a7c15ULL;
      w = splitmix64(x - 0x9e3779b97f4a7c15ULL);
    }
    if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 1;
  }

  result_type operator()() noexcept {
    const std::uint64_t out = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return out;
  }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }
  std::uint64_t s_[4];
};

// A named random stream. The handle itself is a value; engines are built on
// demand, so copies of a handle replay the same sequence.
class RngHandle {
 public:
  using Engine = Xoshiro256;

  constexpr RngHandle() noexcept = default;
  constexpr explicit RngHandle(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : seed_(seed), stream_(stream) {}

  constexpr std::uint64_t seed() const noexcept { return seed_; }
  constexpr std::uint64_t stream() const noexcept { return stream_; }

  // Child stream; the child depends only on (seed, stream, tag).
  constexpr RngHandle split(std::uint64_t tag) const noexcept {
    return RngHandle(seed_, splitmix64(splitmix64(stream_) ^ (tag * 0xd1b54a32d192ed03ULL + 1)));
  }
  constexpr RngHandle split(Purpose p) const noexcept {
    return split(static_cast<std::uint64_t>(p));
  }

  Engine engine() const noexcept { return Engine(splitmix64(seed_) ^ splitmix64(stream_ ^ 0x5851f42d4c957f2dULL)); }

  friend constexpr bool operator==(const RngHandle&, const RngHandle&) = default;

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
};

// 53-bit uniform in [0, 1).
inline double uniform01(RngHandle::Engine& eng) { return static_cast<double>(eng() >> 11) * 0x1.0p-53; }

// Unbiased integer in [0, n) (Lemire's multiply-shift with rejection).
inline std::size_t uniform_index(RngHandle::Engine& eng, std::size_t n) {
  using u128 = unsigned __int128;
  const std::uint64_t bound = n;
  u128 m = static_cast<u128>(eng()) * bound;
  auto low = static_cast<std::uint64_t>(m);
  if (low < bound) {
    const std::uint64_t threshold = (0 - bound) % bound;
    while (low < threshold) {
      m = static_cast<u128>(eng()) * bound;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::size_t>(m >> 64);
}

}  // namespace exbias
