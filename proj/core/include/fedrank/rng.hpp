#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace fedrank {

// Random stream "fedrank-rng v1".
//
// Generator: xoshiro256** (Blackman & Vigna). State is expanded from a 64-bit
// seed with four successive splitmix64 outputs.
//
// Derived streams: derive_seed(parent, label) = splitmix64_mix(parent ^
// fnv1a64(label)); derive_seed(parent, n) = splitmix64_mix(parent +
// 0x9E3779B97F4A7C15 * (n + 1)). Derivations chain left to right.
//
// Variates:
//   uniform()          (next() >> 11) * 2^-53, in [0, 1)
//   uniform_int(n)     Lemire multiply-shift with rejection, in [0, n)
//   normal()           Marsaglia polar method; the second value is discarded
//   log_gamma(shape)   Marsaglia-Tsang for shape >= 1; for shape < 1 the
//                      boost log G(shape+1) + log(U)/shape
//   dirichlet(n, a)    log-gamma draws normalized with log-sum-exp
//   shuffle(v)         Fisher-Yates from the back, j = uniform_int(i + 1)
//
// Every algorithm here is fixed so that other implementations can replay it.
inline constexpr std::string_view kRngName = "fedrank-rng";
inline constexpr int kRngVersion = 1;

std::uint64_t splitmix64_mix(std::uint64_t z) noexcept;
std::uint64_t fnv1a64(std::string_view s) noexcept;
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label) noexcept;
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t n) noexcept;

class Rng {
 public:
  using result_type = std::uint64_t;
  using State = std::array<std::uint64_t, 4>;

  explicit Rng(std::uint64_t seed) noexcept;

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return ~result_type{0}; }

  result_type next() noexcept;
  result_type operator()() noexcept { return next(); }

  double uniform() noexcept;
  std::uint64_t uniform_int(std::uint64_t n) noexcept;
  double normal() noexcept;
  double log_gamma(double shape);
  std::vector<double> dirichlet(std::size_t n, double concentration);

  template <typename T>
  void shuffle(std::span<T> values) noexcept {
    for (std::size_t i = values.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(i));
      std::swap(values[i - 1], values[j]);
    }
  }
  template <typename T>
  void shuffle(std::vector<T>& values) noexcept {
    shuffle(std::span<T>(values));
  }

  const State& state() const noexcept { return state_; }
  void set_state(const State& s) noexcept { state_ = s; }

 private:
  State state_{};
};

}  // namespace fedrank
