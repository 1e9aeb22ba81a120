#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kvmix/bitpack.hpp"
#include "kvmix/half.hpp"
#include "kvmix/tensor.hpp"

namespace kvmix {

// Group-wise asymmetric quantization of Key and Value tensors.
//
// Keys group along the token axis of one channel (the [B, nh, T, D] tensor
// is read as [B*nh*D, T] and every group_size consecutive tokens of a
// channel share one scale/min pair). Values group along the channel axis of
// one token; a trailing partial group gets its own metadata when D is not a
// multiple of group_size.
//
// Codes are q = clamp(round((x - min) / s), 0, q_max) with
// s = (max - min) / q_max per group, rounding half away from zero, and
// dequantization is x = q * s + min. Metadata is computed in full precision
// and rounded through binary16 (see half.hpp).
//
// 3-bit tensors pack through the mixed block layout: stream positions with
// q_max 7 use the group scale, the 2-bit slot at the end of each block uses
// scale * 7/3 so the whole group range stays representable there.

struct GroupMeta {
  float scale = 0.0f;    // binary16 value, >= 0; 0 only for constant groups
  float min_val = 0.0f;  // binary16 value
};

enum class Grouping : uint8_t { kPerChannelKey = 0, kPerTokenValue = 1 };

struct QuantSpec {
  int bits = 4;  // 1, 2, 3 or 4; 3 selects the mixed block layout
  Grouping grouping = Grouping::kPerChannelKey;
  int group_size = 32;
};

struct TensorShape {
  int b = 0, nh = 0, t = 0, d = 0;
  size_t elems() const { return static_cast<size_t>(b) * nh * t * d; }
};

// Scale applied to codes sitting in the narrow 2-bit slots of a mixed
// 3-bit block.
inline float mixed3_wide_scale(float scale) { return scale * (7.0f / 3.0f); }

// 2^bits - 1 for the uniform widths; the primary (3-bit-slot) maximum for
// the mixed layout.
int q_max_for_bits(int bits);

GroupMeta compute_meta(std::span<const float> group, int q_max);
std::vector<uint32_t> quantize_group(std::span<const float> group, const GroupMeta& meta,
                                     int q_max);
std::vector<float> dequantize_group(std::span<const uint32_t> codes, const GroupMeta& meta);

struct QuantizedGroups {
  std::vector<GroupMeta> meta;  // one per group
  PackedBuffer codes;
  QuantSpec spec;
  TensorShape shape;

  size_t group_count() const { return meta.size(); }

  // read-back of one element; coordinates are local to the covered segment
  float value_at(int bi, int hi, int ti, int di) const;

  size_t stream_index(int bi, int hi, int ti, int di) const;
  size_t meta_index(int bi, int hi, int ti, int di) const;
};

QuantizedGroups quantize_key_tensor(const Tensor4f& keys, const QuantSpec& spec);
QuantizedGroups quantize_value_tensor(const Tensor4f& values, const QuantSpec& spec);

// Serialized layout (little-endian), normative for golden files:
//   magic "KVQG", u8 version (1), u8 bits, u8 grouping, u8 layout,
//   u32 group_size, u32 B, u32 nh, u32 T, u32 D,
//   u64 group_count, u64 logical_len, u64 word_count,
//   group_count * { u16 scale_fp16, u16 min_fp16 },
//   word_count * u32 words.
std::vector<uint8_t> serialize_quantized_groups(const QuantizedGroups& qg);
QuantizedGroups deserialize_quantized_groups(std::span<const uint8_t> bytes);

namespace detail {

inline GroupMeta make_group_meta(float mn, float mx, int q_max) {
  GroupMeta m;
  m.min_val = round_through_half(mn);
  m.scale = round_through_half((mx - mn) / static_cast<float>(q_max));
  return m;
}

uint32_t encode_element(float x, const GroupMeta& m, int bits, size_t stream_idx);
float decode_code(uint32_t code, const GroupMeta& m, int bits, size_t stream_idx);

// Shared tensor-segment quantizer. `at(channel, token)` reads one element of
// the channel-major view for keys; `at(token_slot, channel)` reads the
// token-major view for values. Used both by the tensor entry points and by
// the cache, which streams codes straight out of its full-precision tail.
template <typename AtFn>
QuantizedGroups quantize_key_stream(AtFn&& at, const TensorShape& shape, const QuantSpec& spec) {
  if (spec.grouping != Grouping::kPerChannelKey) {
    throw std::invalid_argument("quantize_key_stream: spec.grouping must be per-channel");
  }
  if (spec.group_size <= 0) throw std::invalid_argument("group_size must be positive");
  if (shape.t % spec.group_size != 0) {
    throw std::invalid_argument("key quantization needs T (" + std::to_string(shape.t) +
                                ") to be a multiple of group_size (" +
                                std::to_string(spec.group_size) + ")");
  }
  const int q_max = q_max_for_bits(spec.bits);
  const int channels = shape.b * shape.nh * shape.d;
  const int gs = spec.group_size;
  const int groups_per_channel = shape.t / gs;

  QuantizedGroups out;
  out.spec = spec;
  out.shape = shape;
  out.meta.resize(static_cast<size_t>(channels) * groups_per_channel);

#pragma omp parallel for schedule(static)
  for (int g = 0; g < channels * groups_per_channel; ++g) {
    const int c = g / groups_per_channel;
    const int t0 = (g % groups_per_channel) * gs;
    float mn = at(c, t0), mx = mn;
    for (int j = 1; j < gs; ++j) {
      const float v = at(c, t0 + j);
      mn = v < mn ? v : mn;
      mx = v > mx ? v : mx;
    }
    out.meta[g] = make_group_meta(mn, mx, q_max);
  }

  PackedWriter w = spec.bits == 3 ? PackedWriter::mixed3() : PackedWriter::uniform(spec.bits);
  size_t idx = 0;
  for (int c = 0; c < channels; ++c) {
    for (int t = 0; t < shape.t; ++t, ++idx) {
      const GroupMeta& m = out.meta[static_cast<size_t>(c) * groups_per_channel + t / gs];
      w.push(encode_element(at(c, t), m, spec.bits, idx));
    }
  }
  out.codes = std::move(w).finish();
  return out;
}

template <typename AtFn>
QuantizedGroups quantize_value_stream(AtFn&& at, const TensorShape& shape,
                                      const QuantSpec& spec) {
  if (spec.grouping != Grouping::kPerTokenValue) {
    throw std::invalid_argument("quantize_value_stream: spec.grouping must be per-token");
  }
  if (spec.group_size <= 0) throw std::invalid_argument("group_size must be positive");
  const int q_max = q_max_for_bits(spec.bits);
  const int tokens = shape.b * shape.nh * shape.t;
  const int gs = spec.group_size;
  const int groups_per_token = (shape.d + gs - 1) / gs;

  QuantizedGroups out;
  out.spec = spec;
  out.shape = shape;
  out.meta.resize(static_cast<size_t>(tokens) * groups_per_token);

#pragma omp parallel for schedule(static)
  for (int g = 0; g < tokens * groups_per_token; ++g) {
    const int tok = g / groups_per_token;
    const int d0 = (g % groups_per_token) * gs;
    const int d1 = d0 + gs < shape.d ? d0 + gs : shape.d;
    float mn = at(tok, d0), mx = mn;
    for (int d = d0 + 1; d < d1; ++d) {
      const float v = at(tok, d);
      mn = v < mn ? v : mn;
      mx = v > mx ? v : mx;
    }
    out.meta[g] = make_group_meta(mn, mx, q_max);
  }

  PackedWriter w = spec.bits == 3 ? PackedWriter::mixed3() : PackedWriter::uniform(spec.bits);
  size_t idx = 0;
  for (int tok = 0; tok < tokens; ++tok) {
    for (int d = 0; d < shape.d; ++d, ++idx) {
      const GroupMeta& m = out.meta[static_cast<size_t>(tok) * groups_per_token + d / gs];
      w.push(encode_element(at(tok, d), m, spec.bits, idx));
    }
  }
  out.codes = std::move(w).finish();
  return out;
}

}  // namespace detail
}  // namespace kvmix
