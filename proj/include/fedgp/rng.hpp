/*!
 * Copyright (c) 2026 The FedGP Authors. All rights reserved.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedgp {

using Rng = std::mt19937_64;

namespace rng {

/// SplitMix64 step; used to hash seed material into engine seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream from a master seed and a tag list
/// (client id, round index, purpose...). The derivation is stateless, so
/// resumed runs reproduce the exact draw sequences of uninterrupted ones.
inline Rng derive_stream(std::uint64_t master_seed,
                         std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = splitmix64(master_seed);
  for (std::uint64_t t : tags) h = splitmix64(h ^ splitmix64(t));
  return Rng(h);
}

inline double uniform(Rng& g) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(g);
}

inline double normal(Rng& g) {
  return std::normal_distribution<double>(0.0, 1.0)(g);
}

inline double exponential(Rng& g) {
  return std::exponential_distribution<double>(1.0)(g);
}

inline double gamma(Rng& g, double shape) {
  return std::gamma_distribution<double>(shape, 1.0)(g);
}

}  // namespace rng
}  // namespace fedgp
