#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

namespace kvmix {

// Dense row-major [B, nh, T, D] float tensor. B is the batch size, nh the
// head count, T the token count and D the head dimension; attention scores
// reuse the same container with D standing in for the key/token axis.
struct Tensor4f {
  int b = 0, nh = 0, t = 0, d = 0;
  std::vector<float> data;

  Tensor4f() = default;
  Tensor4f(int b_, int nh_, int t_, int d_)
      : b(b_),
        nh(nh_),
        t(t_),
        d(d_),
        data(static_cast<size_t>(b_) * nh_ * t_ * d_, 0.0f) {}

  size_t index(int bi, int hi, int ti, int di) const {
    assert(bi >= 0 && bi < b && hi >= 0 && hi < nh && ti >= 0 && ti < t && di >= 0 && di < d);
    return ((static_cast<size_t>(bi) * nh + hi) * t + ti) * d + di;
  }

  float& at(int bi, int hi, int ti, int di) { return data[index(bi, hi, ti, di)]; }
  const float& at(int bi, int hi, int ti, int di) const { return data[index(bi, hi, ti, di)]; }

  float* row(int bi, int hi, int ti) { return data.data() + index(bi, hi, ti, 0); }
  const float* row(int bi, int hi, int ti) const { return data.data() + index(bi, hi, ti, 0); }

  size_t size() const { return data.size(); }
  bool same_shape(const Tensor4f& o) const {
    return b == o.b && nh == o.nh && t == o.t && d == o.d;
  }
};

}  // namespace kvmix
