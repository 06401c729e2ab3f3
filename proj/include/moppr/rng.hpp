#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <utility>

namespace moppr {

using Rng = std::mt19937_64;

/// Mixes a base seed with a list of stream tags into an independent seed.
/// Every random stream in the pipeline is derived this way, so a stream
/// depends only on (seed, tags) and never on the order of other draws.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags);

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  return Rng(derive_seed(base, tags));
}

double uniform01(Rng& rng);
double normal01(Rng& rng);
/// Uniform integer in [0, n).
std::int64_t uniform_index(Rng& rng, std::int64_t n);

/// Fisher-Yates with uniform_index, so orders match across standard libraries.
template <class It>
void shuffle(It first, It last, Rng& rng) {
  const auto n = static_cast<std::int64_t>(last - first);
  for (std::int64_t i = n - 1; i > 0; --i) std::swap(first[i], first[uniform_index(rng, i + 1)]);
}

}  // namespace moppr
