#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "helpers.hpp"
#include "kvmix/cache.hpp"

using namespace kvmix;

namespace {

LayerQuantConfig make_config(int key_bits, int value_bits, float rk, float rv, int gs = 32) {
  LayerQuantConfig c;
  c.key_bits = key_bits;
  c.value_bits = value_bits;
  c.key_rpc_ratio = rk;
  c.value_rpc_ratio = rv;
  c.group_size = gs;
  return c;
}

Tensor4f random_kv(Rng& rng, int b, int nh, int t, int d) {
  return testutil::random_tensor(rng, b, nh, t, d);
}

}  // namespace

TEST_CASE("rpc_target formula") {
  CHECK(rpc_target(10, 0.2) == 2);
  CHECK(rpc_target(25, 0.1) == 2);
  CHECK(rpc_target(0, 0.2) == 0);
  CHECK(rpc_target(201, 0.2) == 40);
  CHECK(rpc_target(7, 1.0) == 7);
  CHECK_THROWS_AS(rpc_target(-1, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(rpc_target(10, 1.5), std::invalid_argument);
}

TEST_CASE("config validation") {
  CHECK(LayerQuantConfig::default_rpc_for_bits(4) == 0.2f);
  CHECK(LayerQuantConfig::default_rpc_for_bits(3) == 0.2f);
  CHECK(LayerQuantConfig::default_rpc_for_bits(2) == 0.1f);
  CHECK_THROWS_AS(make_config(5, 2, 0.1f, 0.1f).validate(), std::invalid_argument);
  CHECK_THROWS_AS(make_config(2, 2, -0.1f, 0.1f).validate(), std::invalid_argument);
  CHECK_THROWS_AS(make_config(2, 2, 0.1f, 0.1f, 0).validate(), std::invalid_argument);
}

TEST_CASE("prefill then decode follow the shrink formulas") {
  Rng rng(0xc0ffee);
  KVLayerCache cache(make_config(2, 2, 0.2f, 0.2f), 1, 1, 4);

  cache.append(random_kv(rng, 1, 1, 1000, 4), random_kv(rng, 1, 1, 1000, 4));
  // target 200, excess 800: keys age 25 whole groups, values age 800 tokens
  CHECK(cache.quantized_key_tokens() == 800);
  CHECK(cache.key_tail_tokens() == 200);
  CHECK(cache.quantized_value_tokens() == 800);
  CHECK(cache.value_tail_tokens() == 200);
  CHECK(cache.key_segments().size() == 1);
  CHECK(cache.key_segments()[0].group_count() == 4 * 800 / 32);

  cache.append(random_kv(rng, 1, 1, 1, 4), random_kv(rng, 1, 1, 1, 4));
  // keys: current 201, target 40, excess 161 -> 5 groups (160 tokens)
  CHECK(cache.quantized_key_tokens() == 960);
  CHECK(cache.key_tail_tokens() == 41);
  // values: current 201, target 40 -> tail shrinks exactly to target
  CHECK(cache.value_tail_tokens() == 40);
  CHECK(cache.total_tokens() == 1001);
}

TEST_CASE("r = 1 never quantizes") {
  Rng rng(0x1);
  KVLayerCache cache(make_config(2, 2, 1.0f, 1.0f), 1, 2, 8);
  for (int step = 0; step < 40; ++step) {
    cache.append(random_kv(rng, 1, 2, 1, 8), random_kv(rng, 1, 2, 1, 8));
  }
  CHECK(cache.quantized_key_tokens() == 0);
  CHECK(cache.quantized_value_tokens() == 0);
  CHECK(cache.key_tail_tokens() == 40);
  CHECK(cache.memory_usage().packed_payload_bits == 0);
}

TEST_CASE("token conservation: replay oracle matches across random append sequences") {
  Rng rng(0x5ca1e);
  for (int trial = 0; trial < 10; ++trial) {
    const float rk = static_cast<float>(rng.uniform(0.05, 0.95));
    const float rv = static_cast<float>(rng.uniform(0.05, 0.95));
    KVLayerCache cache(make_config(3, 4, rk, rv), 1, 1, 4);
    testutil::RpcReplay key_replay, value_replay;
    int64_t appended = 0;
    for (int step = 0; step < 30; ++step) {
      const int t = rng.uniform_int(1, 64);
      cache.append(random_kv(rng, 1, 1, t, 4), random_kv(rng, 1, 1, t, 4));
      appended += t;
      key_replay.append(t, rk, 32, true);
      value_replay.append(t, rv, 32, false);

      REQUIRE(cache.total_tokens() == appended);  // nothing is ever dropped
      REQUIRE(cache.key_tail_tokens() == key_replay.tail);
      REQUIRE(cache.value_tail_tokens() == value_replay.tail);
      REQUIRE(cache.quantized_key_tokens() == key_replay.quantized);
      REQUIRE(cache.quantized_value_tokens() == value_replay.quantized);
      REQUIRE(cache.quantized_key_tokens() % 32 == 0);
    }
  }
}

TEST_CASE("tail bound: shrink rule applied maximally at its granularity") {
  Rng rng(0xabc);
  KVLayerCache cache(make_config(2, 2, 0.2f, 0.2f), 1, 1, 4);
  for (int step = 0; step < 200; ++step) {
    const int t = rng.uniform_int(1, 5);
    const int64_t key_current = cache.key_tail_tokens() + t;
    const int64_t value_current = cache.value_tail_tokens() + t;
    cache.append(random_kv(rng, 1, 1, t, 4), random_kv(rng, 1, 1, t, 4));
    const int64_t key_target = rpc_target(key_current, 0.2);
    REQUIRE(cache.key_tail_tokens() >= key_target);
    REQUIRE(cache.key_tail_tokens() < key_target + 32);
    REQUIRE(cache.value_tail_tokens() == rpc_target(value_current, 0.2));
  }
}

TEST_CASE("key and value sides evolve independently") {
  Rng rng(0x77);
  KVLayerCache a(make_config(2, 2, 0.3f, 0.1f), 1, 1, 4);
  KVLayerCache b(make_config(2, 2, 0.3f, 0.9f), 1, 1, 4);
  Rng rng_a(42), rng_b(42);
  for (int step = 0; step < 25; ++step) {
    const int t = rng.uniform_int(1, 16);
    Tensor4f k = random_kv(rng_a, 1, 1, t, 4);
    Tensor4f v = random_kv(rng_a, 1, 1, t, 4);
    Tensor4f k2 = k, v2 = v;
    a.append(k, v);
    b.append(k2, v2);
    // different value ratios leave the key trajectory untouched
    REQUIRE(a.key_tail_tokens() == b.key_tail_tokens());
    REQUIRE(a.quantized_key_tokens() == b.quantized_key_tokens());
    REQUIRE(a.value_tail_tokens() != b.value_tail_tokens());
  }
}

TEST_CASE("snapshot preserves exact token order") {
  // values are constant per token (lossless), keys constant per channel
  const int D = 4;
  KVLayerCache cache(make_config(4, 4, 0.2f, 0.2f), 1, 1, D);
  int64_t appended = 0;
  Rng rng(9);
  for (int step = 0; step < 12; ++step) {
    const int t = rng.uniform_int(1, 80);
    Tensor4f k(1, 1, t, D), v(1, 1, t, D);
    for (int ti = 0; ti < t; ++ti) {
      for (int di = 0; di < D; ++di) {
        k.at(0, 0, ti, di) = static_cast<float>(di);               // channel sentinel
        v.at(0, 0, ti, di) = static_cast<float>(appended + ti);    // token sentinel
      }
    }
    cache.append(k, v);
    appended += t;
  }
  auto [keys, values] = cache.snapshot_dequantized();
  REQUIRE(keys.t == appended);
  for (int ti = 0; ti < appended; ++ti) {
    for (int di = 0; di < D; ++di) {
      REQUIRE(values.at(0, 0, ti, di) == static_cast<float>(ti));
      REQUIRE(keys.at(0, 0, ti, di) == static_cast<float>(di));
    }
  }
}

TEST_CASE("memory accounting: fully quantized 2-bit cache hits 3 bits per element") {
  KVLayerCache cache(make_config(2, 2, 0.0f, 0.0f), 1, 1, 32);
  Rng rng(3);
  cache.append(random_kv(rng, 1, 1, 128, 32), random_kv(rng, 1, 1, 128, 32));
  CHECK(cache.key_tail_tokens() == 0);
  CHECK(cache.value_tail_tokens() == 0);
  const MemoryReport r = cache.memory_usage();
  const uint64_t elems = 128ull * 32ull;
  CHECK(r.packed_payload_bits == elems * 2 * 2);  // keys + values
  CHECK(r.metadata_bits == elems / 32 * 32 * 2);
  CHECK(r.tail_bits == 0);
  CHECK(r.total_bits == r.packed_payload_bits + r.metadata_bits + r.tail_bits);
  CHECK(r.compression_ratio == doctest::Approx(16.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("memory accounting: empty cache") {
  KVLayerCache cache(make_config(2, 2, 0.1f, 0.1f), 1, 1, 8);
  const MemoryReport r = cache.memory_usage();
  CHECK(r.total_bits == 0);
  CHECK(r.compression_ratio == 1.0);
}

TEST_CASE("bits per token converge from above toward the quantized steady state") {
  Rng rng(0x1234);
  KVLayerCache cache(make_config(2, 2, 0.1f, 0.1f), 1, 1, 32);
  cache.append(random_kv(rng, 1, 1, 512, 32), random_kv(rng, 1, 1, 512, 32));
  auto bits_per_element = [&]() {
    const MemoryReport r = cache.memory_usage();
    return static_cast<double>(r.total_bits) /
           (static_cast<double>(cache.total_tokens()) * 32.0 * 2.0);
  };
  const double early = bits_per_element();
  for (int step = 0; step < 3584; ++step) {
    cache.append(random_kv(rng, 1, 1, 1, 32), random_kv(rng, 1, 1, 1, 32));
  }
  const double late = bits_per_element();
  CHECK(early >= late);
  CHECK(late >= 3.0);          // payload 2 + metadata 1
  CHECK(late <= 3.0 + 0.15);   // small full-precision tail remains
}

TEST_CASE("shape mismatches are rejected") {
  KVLayerCache cache(make_config(2, 2, 0.1f, 0.1f), 1, 2, 8);
  Rng rng(5);
  CHECK_THROWS_AS(cache.append(random_kv(rng, 1, 1, 4, 8), random_kv(rng, 1, 1, 4, 8)),
                  std::invalid_argument);
  CHECK_THROWS_AS(cache.append(random_kv(rng, 1, 2, 4, 8), random_kv(rng, 1, 2, 5, 8)),
                  std::invalid_argument);
}

TEST_CASE("dump and load roundtrip bit-exactly") {
  Rng rng(0xd1ce);
  KVLayerCache cache(make_config(3, 4, 0.2f, 0.2f), 2, 2, 16);
  for (int step = 0; step < 6; ++step) {
    const int t = rng.uniform_int(1, 100);
    cache.append(random_kv(rng, 2, 2, t, 16), random_kv(rng, 2, 2, t, 16));
  }
  std::stringstream ss;
  cache.dump(ss);
  KVLayerCache back = KVLayerCache::load(ss);

  CHECK(back.total_tokens() == cache.total_tokens());
  CHECK(back.key_tail_tokens() == cache.key_tail_tokens());
  CHECK(back.value_tail_tokens() == cache.value_tail_tokens());
  auto [k0, v0] = cache.snapshot_dequantized();
  auto [k1, v1] = back.snapshot_dequantized();
  CHECK(k0.data == k1.data);
  CHECK(v0.data == v1.data);

  std::stringstream bad("nope");
  CHECK_THROWS_AS(KVLayerCache::load(bad), std::runtime_error);
}
