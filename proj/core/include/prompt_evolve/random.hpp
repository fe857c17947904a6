#pragma once

#include <cstdint>
#include <random>

#include "prompt_evolve/tensor.hpp"

namespace prompt_evolve {

using Rng = std::mt19937_64;

// splitmix64 finalizer; derives independent child seeds from (seed, stream).
uint64_t mix_seed(uint64_t seed, uint64_t stream);

Tensor random_normal(Shape shape, double stddev, Rng& rng);
Tensor random_uniform(Shape shape, double lo, double hi, Rng& rng);

}  // namespace prompt_evolve
