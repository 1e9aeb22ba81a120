#include "kvmix/quant.hpp"

#include <cmath>
#include <cstring>

namespace kvmix {

int q_max_for_bits(int bits) {
  switch (bits) {
    case 1:
      return 1;
    case 2:
      return 3;
    case 3:
      return 7;  // primary slots of the mixed layout
    case 4:
      return 15;
    default:
      throw std::invalid_argument("unsupported bit width " + std::to_string(bits));
  }
}

GroupMeta compute_meta(std::span<const float> group, int q_max) {
  if (group.empty()) throw std::invalid_argument("compute_meta: empty group");
  if (q_max < 1) throw std::invalid_argument("compute_meta: q_max must be >= 1");
  float mn = group[0], mx = group[0];
  for (float v : group) {
    mn = v < mn ? v : mn;
    mx = v > mx ? v : mx;
  }
  return detail::make_group_meta(mn, mx, q_max);
}

namespace detail {

uint32_t encode_element(float x, const GroupMeta& m, int bits, size_t stream_idx) {
  float scale = m.scale;
  long q_max = q_max_for_bits(bits);
  if (bits == 3 && stream_idx % kMixed3Block == kMixed3Block - 1) {
    scale = mixed3_wide_scale(m.scale);
    q_max = 3;
  }
  if (scale == 0.0f) return 0;  // constant group
  long q = std::lround((x - m.min_val) / scale);
  q = q < 0 ? 0 : (q > q_max ? q_max : q);
  return static_cast<uint32_t>(q);
}

float decode_code(uint32_t code, const GroupMeta& m, int bits, size_t stream_idx) {
  const bool narrow = bits == 3 && stream_idx % kMixed3Block == kMixed3Block - 1;
  const float scale = narrow ? mixed3_wide_scale(m.scale) : m.scale;
  return static_cast<float>(code) * scale + m.min_val;
}

}  // namespace detail

std::vector<uint32_t> quantize_group(std::span<const float> group, const GroupMeta& meta,
                                     int q_max) {
  std::vector<uint32_t> codes(group.size());
  if (meta.scale == 0.0f) return codes;
  for (size_t i = 0; i < group.size(); ++i) {
    long q = std::lround((group[i] - meta.min_val) / meta.scale);
    q = q < 0 ? 0 : (q > q_max ? q_max : q);
    codes[i] = static_cast<uint32_t>(q);
  }
  return codes;
}

std::vector<float> dequantize_group(std::span<const uint32_t> codes, const GroupMeta& meta) {
  std::vector<float> out(codes.size());
  for (size_t i = 0; i < codes.size(); ++i) {
    out[i] = static_cast<float>(codes[i]) * meta.scale + meta.min_val;
  }
  return out;
}

size_t QuantizedGroups::stream_index(int bi, int hi, int ti, int di) const {
  if (spec.grouping == Grouping::kPerChannelKey) {
    const size_t channel = (static_cast<size_t>(bi) * shape.nh + hi) * shape.d + di;
    return channel * shape.t + ti;
  }
  const size_t token = (static_cast<size_t>(bi) * shape.nh + hi) * shape.t + ti;
  return token * shape.d + di;
}

size_t QuantizedGroups::meta_index(int bi, int hi, int ti, int di) const {
  const int gs = spec.group_size;
  if (spec.grouping == Grouping::kPerChannelKey) {
    const size_t channel = (static_cast<size_t>(bi) * shape.nh + hi) * shape.d + di;
    return channel * (shape.t / gs) + ti / gs;
  }
  const size_t token = (static_cast<size_t>(bi) * shape.nh + hi) * shape.t + ti;
  const size_t groups_per_token = (shape.d + gs - 1) / gs;
  return token * groups_per_token + di / gs;
}

float QuantizedGroups::value_at(int bi, int hi, int ti, int di) const {
  const size_t si = stream_index(bi, hi, ti, di);
  return detail::decode_code(codes.get(si), meta[meta_index(bi, hi, ti, di)], spec.bits, si);
}

QuantizedGroups quantize_key_tensor(const Tensor4f& keys, const QuantSpec& spec) {
  const TensorShape shape{keys.b, keys.nh, keys.t, keys.d};
  const int nh = keys.nh, T = keys.t, D = keys.d;
  const float* data = keys.data.data();
  auto at = [=](int channel, int token) {
    const int b = channel / (nh * D);
    const int rem = channel % (nh * D);
    const int h = rem / D;
    const int d = rem % D;
    return data[((static_cast<size_t>(b) * nh + h) * T + token) * D + d];
  };
  return detail::quantize_key_stream(at, shape, spec);
}

QuantizedGroups quantize_value_tensor(const Tensor4f& values, const QuantSpec& spec) {
  const TensorShape shape{values.b, values.nh, values.t, values.d};
  const int D = values.d;
  const float* data = values.data.data();
  // token slots are (b, h, t) in row-major order, so the token-major stream
  // is just the tensor's own layout
  auto at = [=](int token, int d) { return data[static_cast<size_t>(token) * D + d]; };
  return detail::quantize_value_stream(at, shape, spec);
}

namespace {

template <typename T>
void put(std::vector<uint8_t>& out, T v) {
  uint8_t tmp[sizeof(T)];
  std::memcpy(tmp, &v, sizeof(T));
  out.insert(out.end(), tmp, tmp + sizeof(T));
}

template <typename T>
T take(std::span<const uint8_t> bytes, size_t& off) {
  if (off + sizeof(T) > bytes.size()) {
    throw std::runtime_error("deserialize_quantized_groups: truncated buffer");
  }
  T v;
  std::memcpy(&v, bytes.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace

std::vector<uint8_t> serialize_quantized_groups(const QuantizedGroups& qg) {
  std::vector<uint8_t> out;
  out.reserve(64 + qg.meta.size() * 4 + qg.codes.words.size() * 4);
  for (char c : {'K', 'V', 'Q', 'G'}) out.push_back(static_cast<uint8_t>(c));
  put<uint8_t>(out, 1);
  put<uint8_t>(out, static_cast<uint8_t>(qg.spec.bits));
  put<uint8_t>(out, static_cast<uint8_t>(qg.spec.grouping));
  put<uint8_t>(out, static_cast<uint8_t>(qg.codes.layout));
  put<uint32_t>(out, static_cast<uint32_t>(qg.spec.group_size));
  put<uint32_t>(out, static_cast<uint32_t>(qg.shape.b));
  put<uint32_t>(out, static_cast<uint32_t>(qg.shape.nh));
  put<uint32_t>(out, static_cast<uint32_t>(qg.shape.t));
  put<uint32_t>(out, static_cast<uint32_t>(qg.shape.d));
  put<uint64_t>(out, qg.meta.size());
  put<uint64_t>(out, qg.codes.logical_len);
  put<uint64_t>(out, qg.codes.words.size());
  for (const GroupMeta& m : qg.meta) {
    put<uint16_t>(out, half_from_float(m.scale));
    put<uint16_t>(out, half_from_float(m.min_val));
  }
  for (uint32_t w : qg.codes.words) put<uint32_t>(out, w);
  return out;
}

QuantizedGroups deserialize_quantized_groups(std::span<const uint8_t> bytes) {
  size_t off = 0;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "KVQG", 4) != 0) {
    throw std::runtime_error("deserialize_quantized_groups: bad magic");
  }
  off = 4;
  const uint8_t version = take<uint8_t>(bytes, off);
  if (version != 1) {
    throw std::runtime_error("deserialize_quantized_groups: unsupported version " +
                             std::to_string(version));
  }
  QuantizedGroups qg;
  qg.spec.bits = take<uint8_t>(bytes, off);
  qg.spec.grouping = static_cast<Grouping>(take<uint8_t>(bytes, off));
  qg.codes.layout = static_cast<PackLayout>(take<uint8_t>(bytes, off));
  qg.codes.bits = qg.spec.bits;
  qg.spec.group_size = static_cast<int>(take<uint32_t>(bytes, off));
  qg.shape.b = static_cast<int>(take<uint32_t>(bytes, off));
  qg.shape.nh = static_cast<int>(take<uint32_t>(bytes, off));
  qg.shape.t = static_cast<int>(take<uint32_t>(bytes, off));
  qg.shape.d = static_cast<int>(take<uint32_t>(bytes, off));
  const uint64_t n_groups = take<uint64_t>(bytes, off);
  qg.codes.logical_len = take<uint64_t>(bytes, off);
  const uint64_t n_words = take<uint64_t>(bytes, off);
  qg.meta.resize(n_groups);
  for (uint64_t i = 0; i < n_groups; ++i) {
    qg.meta[i].scale = float_from_half(take<uint16_t>(bytes, off));
    qg.meta[i].min_val = float_from_half(take<uint16_t>(bytes, off));
  }
  qg.codes.words.resize(n_words);
  for (uint64_t i = 0; i < n_words; ++i) qg.codes.words[i] = take<uint32_t>(bytes, off);
  if (off != bytes.size()) {
    throw std::runtime_error("deserialize_quantized_groups: trailing bytes");
  }
  return qg;
}

}  // namespace kvmix
