#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "c2f/array.hpp"
#include "c2f/random.hpp"

namespace c2f {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Finite-difference checks of every loss on small random inputs.
std::vector<CheckResult> gradient_checks(std::uint64_t seed, double eps = 1e-3, double tol = 1e-4);

/// Expansion conservation, KD-entropy identity, max-squares ordering and the
/// KL coarsening inequality on the built-in desk hierarchy.
std::vector<CheckResult> invariant_checks(std::uint64_t seed);

/// Random [n,h,w,k] logits with standard normal entries times `spread`.
Array random_logits(RandomStream& rng, std::size_t n, std::size_t h, std::size_t w, std::size_t k,
                    double spread = 1.0);
Array random_images(RandomStream& rng, std::size_t n, std::size_t h, std::size_t w);
/// Softmax of random logits, as a plain array.
Array random_simplex(RandomStream& rng, std::size_t n, std::size_t h, std::size_t w, std::size_t k,
                     double spread = 1.0);

}  // namespace c2f
