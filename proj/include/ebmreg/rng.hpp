#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <vector>

namespace ebmreg {

// Finalizer from the splitmix64 generator; bijective on 64-bit words.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Folds an ordered tuple of integers (seed, epoch, batch index, ...) into one
// stream key. Every consumer of randomness derives its own key this way, so
// streams are independent of scheduling and of each other.
template <class... Ts>
constexpr std::uint64_t stream_key(Ts... parts) {
  std::uint64_t k = 0x243f6a8885a308d3ull;
  ((k = splitmix64(k ^ splitmix64(static_cast<std::uint64_t>(parts)))), ...);
  return k;
}

// First element fed to stream_key by each randomness consumer, so that the
// same user-facing seed never feeds two purposes from one stream.
enum StreamRole : std::uint64_t {
  kRoleData = 1,     // dataset generation
  kRoleInit = 2,     // parameter initialization
  kRoleLoss = 3,     // per-batch loss sampling (proposal/noise/chain draws)
  kRoleShuffle = 4,  // per-epoch batch order
  kRoleRun = 5,      // per-run seed derivation inside protocols
};

// mt19937_64 with hand-rolled output conversions. The engine's word sequence
// is pinned by the standard; the std distributions are not, so uniform and
// normal variates are derived here to keep every platform on identical bits.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t bits() { return eng_(); }

  // [0, 1): top 53 bits of the engine word as a mantissa
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller, cosine branch; consumes exactly two
  // engine words per draw so call patterns never change the stream layout
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]: keeps log finite
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  void normal_fill(std::span<double> out) {
    for (double& x : out) x = normal();
  }

  // uniform integer in [0, n) by rejection on the top bits
  std::uint64_t index(std::uint64_t n) {
    assert(n > 0);
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t w = eng_();
    while (w >= limit) w = eng_();
    return w % n;
  }

 private:
  std::mt19937_64 eng_;
};

// Fisher-Yates with Rng::index; std::shuffle's draw pattern is unspecified.
template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.index(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace ebmreg
