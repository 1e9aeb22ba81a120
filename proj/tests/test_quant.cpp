#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "helpers.hpp"
#include "kvmix/quant.hpp"

using namespace kvmix;

namespace {

// brute-force reconstruction check: every element of every group must land
// within half of that group's (positionally adjusted) scale
int count_bound_violations(const Tensor4f& x, const QuantizedGroups& qg) {
  int violations = 0;
  for (int bi = 0; bi < x.b; ++bi) {
    for (int hi = 0; hi < x.nh; ++hi) {
      for (int ti = 0; ti < x.t; ++ti) {
        for (int di = 0; di < x.d; ++di) {
          const GroupMeta& m = qg.meta[qg.meta_index(bi, hi, ti, di)];
          const size_t si = qg.stream_index(bi, hi, ti, di);
          float scale = m.scale;
          if (qg.spec.bits == 3 && si % kMixed3Block == kMixed3Block - 1) {
            scale = mixed3_wide_scale(m.scale);
          }
          const double err = std::abs(static_cast<double>(x.at(bi, hi, ti, di)) -
                                      static_cast<double>(qg.value_at(bi, hi, ti, di)));
          const double bound = 0.5 * static_cast<double>(scale);
          if (err > bound + 1e-5 * static_cast<double>(scale) + 1e-12) ++violations;
        }
      }
    }
  }
  return violations;
}

double total_squared_error(const Tensor4f& x, const QuantizedGroups& qg) {
  double tse = 0.0;
  for (int bi = 0; bi < x.b; ++bi)
    for (int hi = 0; hi < x.nh; ++hi)
      for (int ti = 0; ti < x.t; ++ti)
        for (int di = 0; di < x.d; ++di) {
          const double e = static_cast<double>(x.at(bi, hi, ti, di)) -
                           static_cast<double>(qg.value_at(bi, hi, ti, di));
          tse += e * e;
        }
  return tse;
}

}  // namespace

TEST_CASE("compute_meta basics") {
  GroupMeta m0 = compute_meta(std::vector<float>{0, 1, 2, 3}, 3);
  CHECK(m0.scale == 1.0f);
  CHECK(m0.min_val == 0.0f);

  GroupMeta m1 = compute_meta(std::vector<float>{5, 5, 5}, 3);
  CHECK(m1.scale == 0.0f);
  CHECK(m1.min_val == 5.0f);

  CHECK_THROWS_AS(compute_meta(std::vector<float>{}, 3), std::invalid_argument);
}

TEST_CASE("compute_meta matches an independent min/max scan") {
  Rng rng(0x9a1);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = rng.uniform_int(1, 64);
    const int q_max = q_max_for_bits(rng.uniform_int(1, 4));
    std::vector<float> g(n);
    for (auto& v : g) v = static_cast<float>(rng.uniform(-4.0, 4.0));
    GroupMeta m = compute_meta(g, q_max);
    float mn = g[0], mx = g[0];
    for (float v : g) {
      if (v < mn) mn = v;
      if (v > mx) mx = v;
    }
    CHECK(m.min_val == round_through_half(mn));
    CHECK(m.scale == round_through_half((mx - mn) / static_cast<float>(q_max)));
  }
}

TEST_CASE("quantize_group formula cases") {
  GroupMeta m{1.0f, 0.0f};
  CHECK(quantize_group(std::vector<float>{0, 1, 1.4f, 3}, m, 3) ==
        std::vector<uint32_t>{0, 1, 1, 3});

  GroupMeta mc{0.0f, 5.0f};
  CHECK(quantize_group(std::vector<float>{5, 5, 5}, mc, 3) == std::vector<uint32_t>{0, 0, 0});

  GroupMeta mneg = compute_meta(std::vector<float>{-1, 0, 2}, 3);
  CHECK(mneg.scale == 1.0f);
  CHECK(mneg.min_val == -1.0f);
  CHECK(quantize_group(std::vector<float>{-1, 0, 2}, mneg, 3) == std::vector<uint32_t>{0, 1, 3});

  // rounding is half away from zero
  CHECK(quantize_group(std::vector<float>{1.5f}, m, 3) == std::vector<uint32_t>{2});
  CHECK(quantize_group(std::vector<float>{2.5f}, m, 3) == std::vector<uint32_t>{3});
}

TEST_CASE("dequantize_group formula cases") {
  GroupMeta m{1.0f, 0.0f};
  const auto x = dequantize_group(std::vector<uint32_t>{0, 1, 1, 3}, m);
  CHECK(x == std::vector<float>{0, 1, 1, 3});
  const double err = std::abs(1.4 - static_cast<double>(x[2]));
  CHECK(err <= 0.5 * m.scale);

  GroupMeta mc{0.0f, 5.0f};
  CHECK(dequantize_group(std::vector<uint32_t>{0, 0, 0}, mc) == std::vector<float>{5, 5, 5});

  // grid-aligned groups reconstruct exactly
  GroupMeta mg = compute_meta(std::vector<float>{-2, -1, 0, 1}, 3);
  const auto codes = quantize_group(std::vector<float>{-2, -1, 0, 1}, mg, 3);
  CHECK(dequantize_group(codes, mg) == std::vector<float>{-2, -1, 0, 1});
}

TEST_CASE("key tensor: constant channel is lossless") {
  Rng rng(0x171);
  Tensor4f keys(1, 1, 32, 2);
  for (int t = 0; t < 32; ++t) {
    keys.at(0, 0, t, 0) = 0.75f;
    keys.at(0, 0, t, 1) = testutil::h16_normal(rng);
  }
  QuantSpec spec{4, Grouping::kPerChannelKey, 32};
  QuantizedGroups qg = quantize_key_tensor(keys, spec);
  CHECK(qg.group_count() == 2);
  for (int t = 0; t < 32; ++t) {
    REQUIRE(qg.value_at(0, 0, t, 0) == 0.75f);
  }
}

TEST_CASE("key tensor rejects ragged token counts") {
  Tensor4f keys(1, 1, 33, 2);
  QuantSpec spec{4, Grouping::kPerChannelKey, 32};
  CHECK_THROWS_AS(quantize_key_tensor(keys, spec), std::invalid_argument);
  QuantSpec wrong{4, Grouping::kPerTokenValue, 32};
  CHECK_THROWS_AS(quantize_key_tensor(Tensor4f(1, 1, 32, 2), wrong), std::invalid_argument);
}

TEST_CASE("key tensor: reconstruction bound and bit monotonicity") {
  Rng rng(0xa11ce);
  Tensor4f keys = testutil::random_tensor(rng, 2, 2, 64, 8);
  double prev_tse = -1.0;
  for (int bits : {4, 3, 2}) {
    QuantSpec spec{bits, Grouping::kPerChannelKey, 32};
    QuantizedGroups qg = quantize_key_tensor(keys, spec);
    CHECK(count_bound_violations(keys, qg) == 0);
    const double tse = total_squared_error(keys, qg);
    if (prev_tse >= 0.0) CHECK(tse >= prev_tse);  // coarser bits, larger error
    prev_tse = tse;
  }
}

TEST_CASE("key tensor: error isolation across channels") {
  Rng rng(0xdead);
  Tensor4f keys = testutil::random_tensor(rng, 1, 1, 64, 3);
  QuantSpec spec{4, Grouping::kPerChannelKey, 32};
  QuantizedGroups before = quantize_key_tensor(keys, spec);

  for (int t = 0; t < 64; ++t) keys.at(0, 0, t, 1) = testutil::h16_normal(rng, 3.0f);
  QuantizedGroups after = quantize_key_tensor(keys, spec);

  for (int d : {0, 2}) {
    for (int t = 0; t < 64; ++t) {
      const size_t mi = before.meta_index(0, 0, t, d);
      REQUIRE(before.meta[mi].scale == after.meta[mi].scale);
      REQUIRE(before.meta[mi].min_val == after.meta[mi].min_val);
      REQUIRE(before.codes.get(before.stream_index(0, 0, t, d)) ==
              after.codes.get(after.stream_index(0, 0, t, d)));
    }
  }
}

TEST_CASE("value tensor: constant token is lossless, any T allowed") {
  Tensor4f values(1, 1, 1, 32);
  for (int d = 0; d < 32; ++d) values.at(0, 0, 0, d) = -1.25f;
  QuantSpec spec{2, Grouping::kPerTokenValue, 32};
  QuantizedGroups qg = quantize_value_tensor(values, spec);
  CHECK(qg.group_count() == 1);
  for (int d = 0; d < 32; ++d) REQUIRE(qg.value_at(0, 0, 0, d) == -1.25f);
}

TEST_CASE("value tensor: reconstruction bound, partial final group, bit ordering") {
  Rng rng(0xbee);
  Tensor4f values = testutil::random_tensor(rng, 1, 2, 5, 48);
  double prev_tse = -1.0;
  for (int bits : {4, 3, 2}) {
    QuantSpec spec{bits, Grouping::kPerTokenValue, 32};
    QuantizedGroups qg = quantize_value_tensor(values, spec);
    CHECK(qg.group_count() == static_cast<size_t>(1 * 2 * 5 * 2));  // 32 + 16 per token
    CHECK(count_bound_violations(values, qg) == 0);
    const double tse = total_squared_error(values, qg);
    if (prev_tse >= 0.0) CHECK(tse >= prev_tse);
    prev_tse = tse;
  }
}

TEST_CASE("value tensor: perturbing one token leaves other tokens bit-identical") {
  Rng rng(0xf00);
  Tensor4f values = testutil::random_tensor(rng, 1, 1, 6, 32);
  QuantSpec spec{4, Grouping::kPerTokenValue, 32};
  QuantizedGroups before = quantize_value_tensor(values, spec);

  for (int d = 0; d < 32; ++d) values.at(0, 0, 3, d) = testutil::h16_normal(rng, 2.0f);
  QuantizedGroups after = quantize_value_tensor(values, spec);

  for (int t = 0; t < 6; ++t) {
    if (t == 3) continue;
    for (int d = 0; d < 32; ++d) {
      const size_t mi = before.meta_index(0, 0, t, d);
      REQUIRE(before.meta[mi].scale == after.meta[mi].scale);
      REQUIRE(before.meta[mi].min_val == after.meta[mi].min_val);
      REQUIRE(before.codes.get(before.stream_index(0, 0, t, d)) ==
              after.codes.get(after.stream_index(0, 0, t, d)));
    }
  }
}

TEST_CASE("mixed 3-bit: narrow slots honor the (max-min)/3 step bound") {
  Rng rng(0x31337);
  Tensor4f values = testutil::random_tensor(rng, 1, 1, 11, 32);
  QuantSpec spec{3, Grouping::kPerTokenValue, 32};
  QuantizedGroups qg = quantize_value_tensor(values, spec);
  int narrow_seen = 0;
  for (int t = 0; t < values.t; ++t) {
    float mn = values.at(0, 0, t, 0), mx = mn;
    for (int d = 0; d < 32; ++d) {
      mn = std::min(mn, values.at(0, 0, t, d));
      mx = std::max(mx, values.at(0, 0, t, d));
    }
    for (int d = 0; d < 32; ++d) {
      const size_t si = qg.stream_index(0, 0, t, d);
      if (si % kMixed3Block != kMixed3Block - 1) continue;
      ++narrow_seen;
      const uint32_t code = qg.codes.get(si);
      REQUIRE(code <= 3u);
      const double err = std::abs(static_cast<double>(values.at(0, 0, t, d)) -
                                  static_cast<double>(qg.value_at(0, 0, t, d)));
      REQUIRE(err <= (static_cast<double>(mx) - mn) / 3.0 / 2.0 * (1.0 + 1e-3) + 1e-9);
    }
  }
  CHECK(narrow_seen > 20);
}

TEST_CASE("random groups reconstruct within half a scale step") {
  Rng rng(0xcafe);
  int violations = 0;
  for (int trial = 0; trial < 400; ++trial) {
    const int bits = 2 + trial % 3;
    const bool key = trial % 2 == 0;
    Tensor4f x = testutil::random_tensor(rng, 1, 1, key ? 32 : rng.uniform_int(1, 4), 32,
                                         static_cast<float>(rng.uniform(0.1, 3.0)),
                                         static_cast<float>(rng.uniform(-2.0, 2.0)));
    QuantSpec spec{bits, key ? Grouping::kPerChannelKey : Grouping::kPerTokenValue, 32};
    QuantizedGroups qg = key ? quantize_key_tensor(x, spec) : quantize_value_tensor(x, spec);
    violations += count_bound_violations(x, qg);
  }
  CHECK(violations == 0);
}

TEST_CASE("serialization golden bytes and roundtrip") {
  Tensor4f v(1, 1, 1, 4);
  v.at(0, 0, 0, 0) = 0.0f;
  v.at(0, 0, 0, 1) = 1.0f;
  v.at(0, 0, 0, 2) = 2.0f;
  v.at(0, 0, 0, 3) = 3.0f;
  QuantSpec spec{2, Grouping::kPerTokenValue, 4};
  QuantizedGroups qg = quantize_value_tensor(v, spec);
  REQUIRE(qg.meta.size() == 1);
  CHECK(qg.meta[0].scale == 1.0f);
  CHECK(qg.codes.words == std::vector<uint32_t>{0xE4u});

  const std::vector<uint8_t> golden = {
      'K',  'V',  'Q',  'G',         // magic
      0x01,                          // version
      0x02,                          // bits
      0x01,                          // grouping: per-token
      0x00,                          // layout: uniform
      0x04, 0x00, 0x00, 0x00,        // group_size
      0x01, 0x00, 0x00, 0x00,        // B
      0x01, 0x00, 0x00, 0x00,        // nh
      0x01, 0x00, 0x00, 0x00,        // T
      0x04, 0x00, 0x00, 0x00,        // D
      0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,  // group count
      0x04, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,  // logical_len
      0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,  // word count
      0x00, 0x3C,                    // scale = 1.0 as binary16
      0x00, 0x00,                    // min = 0.0 as binary16
      0xE4, 0x00, 0x00, 0x00,        // packed word
  };
  CHECK(serialize_quantized_groups(qg) == golden);

  QuantizedGroups back = deserialize_quantized_groups(golden);
  CHECK(back.spec.bits == 2);
  CHECK(back.spec.group_size == 4);
  CHECK(back.codes.words == qg.codes.words);
  CHECK(back.meta[0].scale == 1.0f);
  CHECK(back.meta[0].min_val == 0.0f);
  for (int d = 0; d < 4; ++d) REQUIRE(back.value_at(0, 0, 0, d) == qg.value_at(0, 0, 0, d));

  std::vector<uint8_t> bad = golden;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_quantized_groups(bad), std::runtime_error);
  bad = golden;
  bad.pop_back();
  CHECK_THROWS_AS(deserialize_quantized_groups(bad), std::runtime_error);
}

TEST_CASE("binary16 metadata codec spot checks") {
  CHECK(half_from_float(1.0f) == 0x3C00);
  CHECK(half_from_float(0.0f) == 0x0000);
  CHECK(float_from_half(half_from_float(0.1f)) == doctest::Approx(0.0999755859375).epsilon(1e-9));
  CHECK(float_from_half(half_from_float(65504.0f)) == 65504.0f);
  CHECK(round_through_half(5.0f) == 5.0f);
  CHECK(round_through_half(-2.5f) == -2.5f);
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    const float x = testutil::h16_normal(rng, 10.0f);
    REQUIRE(round_through_half(x) == x);  // representable values are fixed points
  }
}
