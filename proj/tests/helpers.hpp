#pragma once

// Shared generators and small oracles for the test suites.

#include <cmath>
#include <vector>

#include "kvmix/half.hpp"
#include "kvmix/rng.hpp"
#include "kvmix/tensor.hpp"

namespace testutil {

// Random value already representable at binary16, matching the half-precision
// cache regime the quantizer is meant to compress.
inline float h16_normal(kvmix::Rng& rng, float sigma = 1.0f, float mu = 0.0f) {
  return kvmix::round_through_half(mu + sigma * static_cast<float>(rng.normal()));
}

inline kvmix::Tensor4f random_tensor(kvmix::Rng& rng, int b, int nh, int t, int d,
                                     float sigma = 1.0f, float mu = 0.0f) {
  kvmix::Tensor4f x(b, nh, t, d);
  for (auto& v : x.data) v = h16_normal(rng, sigma, mu);
  return x;
}

inline double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

// Independent replay of the recent-context shrink rule. Tracks one side
// (Keys or Values) with plain integer bookkeeping so cache behavior can be
// checked against the formulas directly.
struct RpcReplay {
  int64_t tail = 0;
  int64_t quantized = 0;

  // whole_groups: Keys age in group_size multiples, Values token by token
  void append(int64_t t, double r, int group_size, bool whole_groups) {
    tail += t;
    const int64_t target = static_cast<int64_t>(std::floor(r * static_cast<double>(tail)));
    const int64_t excess = tail - target;
    const int64_t aged = whole_groups ? excess / group_size * group_size : excess;
    if (aged > 0) {
      tail -= aged;
      quantized += aged;
    }
  }
};

}  // namespace testutil
