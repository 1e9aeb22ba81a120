#include "kvmix/cache.hpp"

#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "kvmix/scratch.hpp"

namespace kvmix {

void LayerQuantConfig::validate() const {
  if (key_bits < 2 || key_bits > 4 || value_bits < 2 || value_bits > 4) {
    throw std::invalid_argument("layer " + std::to_string(layer_index) +
                                ": cache bit widths must be 2, 3 or 4");
  }
  if (key_rpc_ratio < 0.0f || key_rpc_ratio > 1.0f || value_rpc_ratio < 0.0f ||
      value_rpc_ratio > 1.0f) {
    throw std::invalid_argument("layer " + std::to_string(layer_index) +
                                ": rpc ratios must lie in [0, 1]");
  }
  if (group_size <= 0) {
    throw std::invalid_argument("layer " + std::to_string(layer_index) +
                                ": group_size must be positive");
  }
}

int64_t rpc_target(int64_t current_rpc, double r) {
  if (current_rpc < 0) throw std::invalid_argument("rpc_target: negative token count");
  if (r < 0.0 || r > 1.0) throw std::invalid_argument("rpc_target: ratio outside [0, 1]");
  return static_cast<int64_t>(std::floor(r * static_cast<double>(current_rpc)));
}

KVLayerCache::KVLayerCache(const LayerQuantConfig& config, int batch, int heads, int head_dim)
    : cfg_(config), b_(batch), nh_(heads), d_(head_dim) {
  cfg_.validate();
  if (batch < 1 || heads < 1 || head_dim < 1) {
    throw std::invalid_argument("KVLayerCache: dimensions must be positive");
  }
  slab_ = static_cast<size_t>(b_) * nh_ * d_;
}

void KVLayerCache::append(const Tensor4f& new_keys, const Tensor4f& new_values) {
  if (new_keys.b != b_ || new_keys.nh != nh_ || new_keys.d != d_ || new_values.b != b_ ||
      new_values.nh != nh_ || new_values.d != d_ || new_keys.t != new_values.t) {
    throw std::invalid_argument("KVLayerCache::append: tensor shape does not match cache");
  }
  const int t = new_keys.t;
  if (t < 1) throw std::invalid_argument("KVLayerCache::append: need at least one token");

  key_tail_.reserve(key_tail_.size() + static_cast<size_t>(t) * slab_);
  value_tail_.reserve(value_tail_.size() + static_cast<size_t>(t) * slab_);
  for (int ti = 0; ti < t; ++ti) {
    for (int bi = 0; bi < b_; ++bi) {
      for (int hi = 0; hi < nh_; ++hi) {
        const float* krow = new_keys.row(bi, hi, ti);
        const float* vrow = new_values.row(bi, hi, ti);
        key_tail_.insert(key_tail_.end(), krow, krow + d_);
        value_tail_.insert(value_tail_.end(), vrow, vrow + d_);
      }
    }
  }
  key_tail_len_ += t;
  value_tail_len_ += t;

  // shrink rule, applied independently per side
  {
    const int64_t target = rpc_target(key_tail_len_, cfg_.key_rpc_ratio);
    const int64_t excess = key_tail_len_ - target;
    const int64_t n = excess / cfg_.group_size * cfg_.group_size;
    if (n > 0) age_out_keys(n);
  }
  {
    const int64_t target = rpc_target(value_tail_len_, cfg_.value_rpc_ratio);
    const int64_t excess = value_tail_len_ - target;
    if (excess > 0) age_out_values(excess);
  }
}

void KVLayerCache::age_out_keys(int64_t n) {
  const TensorShape shape{b_, nh_, static_cast<int>(n), d_};
  const QuantSpec spec{cfg_.key_bits, Grouping::kPerChannelKey, cfg_.group_size};
  const float* tail = key_tail_.data();
  const int nh = nh_, D = d_;
  const size_t slab = slab_;
  // codes stream straight out of the tail slabs; nothing is copied first
  auto at = [tail, nh, D, slab](int channel, int token) {
    const int bi = channel / (nh * D);
    const int rem = channel % (nh * D);
    return tail[static_cast<size_t>(token) * slab + static_cast<size_t>(bi) * nh * D + rem];
  };
  key_segs_.push_back(detail::quantize_key_stream(at, shape, spec));
  key_tail_.erase(key_tail_.begin(), key_tail_.begin() + static_cast<int64_t>(n * slab_));
  key_tail_len_ -= n;
  quant_key_tokens_ += n;
}

void KVLayerCache::age_out_values(int64_t n) {
  const TensorShape shape{b_, nh_, static_cast<int>(n), d_};
  const QuantSpec spec{cfg_.value_bits, Grouping::kPerTokenValue, cfg_.group_size};
  const float* tail = value_tail_.data();
  const int nh = nh_, D = d_, T = static_cast<int>(n);
  const size_t slab = slab_;
  auto at = [tail, nh, D, T, slab](int token_slot, int d) {
    const int bi = token_slot / (nh * T);
    const int rem = token_slot % (nh * T);
    const int hi = rem / T;
    const int ti = rem % T;
    return tail[static_cast<size_t>(ti) * slab + (static_cast<size_t>(bi) * nh + hi) * D + d];
  };
  value_segs_.push_back(detail::quantize_value_stream(at, shape, spec));
  value_tail_.erase(value_tail_.begin(), value_tail_.begin() + static_cast<int64_t>(n * slab_));
  value_tail_len_ -= n;
  quant_value_tokens_ += n;
}

MemoryReport KVLayerCache::memory_usage() const {
  MemoryReport r;
  for (const auto* segs : {&key_segs_, &value_segs_}) {
    for (const QuantizedGroups& qg : *segs) {
      r.packed_payload_bits += static_cast<uint64_t>(qg.codes.words.size()) * 32u;
      r.metadata_bits += static_cast<uint64_t>(qg.meta.size()) * 32u;
    }
  }
  r.tail_bits = static_cast<uint64_t>(key_tail_len_ + value_tail_len_) * slab_ * 16u;
  r.total_bits = r.packed_payload_bits + r.metadata_bits + r.tail_bits;
  r.fp16_baseline_bits = static_cast<uint64_t>(total_tokens()) * slab_ * 16u * 2u;
  r.compression_ratio = r.total_bits == 0 ? 1.0
                                          : static_cast<double>(r.fp16_baseline_bits) /
                                                static_cast<double>(r.total_bits);
  return r;
}

std::pair<Tensor4f, Tensor4f> KVLayerCache::snapshot_dequantized() const {
  const int total = static_cast<int>(total_tokens());
  Tensor4f keys(b_, nh_, total, d_);
  Tensor4f values(b_, nh_, total, d_);
  scratch::add((keys.size() + values.size()) * sizeof(float));

  int64_t off = 0;
  for (const QuantizedGroups& qg : key_segs_) {
    for (int bi = 0; bi < b_; ++bi)
      for (int hi = 0; hi < nh_; ++hi)
        for (int ti = 0; ti < qg.shape.t; ++ti)
          for (int di = 0; di < d_; ++di)
            keys.at(bi, hi, static_cast<int>(off) + ti, di) = qg.value_at(bi, hi, ti, di);
    off += qg.shape.t;
  }
  for (int64_t j = 0; j < key_tail_len_; ++j)
    for (int bi = 0; bi < b_; ++bi)
      for (int hi = 0; hi < nh_; ++hi)
        for (int di = 0; di < d_; ++di)
          keys.at(bi, hi, static_cast<int>(off + j), di) = key_tail_at(bi, hi, j, di);

  off = 0;
  for (const QuantizedGroups& qg : value_segs_) {
    for (int bi = 0; bi < b_; ++bi)
      for (int hi = 0; hi < nh_; ++hi)
        for (int ti = 0; ti < qg.shape.t; ++ti)
          for (int di = 0; di < d_; ++di)
            values.at(bi, hi, static_cast<int>(off) + ti, di) = qg.value_at(bi, hi, ti, di);
    off += qg.shape.t;
  }
  for (int64_t j = 0; j < value_tail_len_; ++j)
    for (int bi = 0; bi < b_; ++bi)
      for (int hi = 0; hi < nh_; ++hi)
        for (int di = 0; di < d_; ++di)
          values.at(bi, hi, static_cast<int>(off + j), di) = value_tail_at(bi, hi, j, di);

  return {std::move(keys), std::move(values)};
}

namespace {

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("KVLayerCache::load: truncated stream");
  return v;
}

void write_segments(std::ostream& os, const std::vector<QuantizedGroups>& segs) {
  write_pod<uint32_t>(os, static_cast<uint32_t>(segs.size()));
  for (const QuantizedGroups& qg : segs) {
    const std::vector<uint8_t> bytes = serialize_quantized_groups(qg);
    write_pod<uint64_t>(os, bytes.size());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
}

std::vector<QuantizedGroups> read_segments(std::istream& is) {
  const uint32_t n = read_pod<uint32_t>(is);
  std::vector<QuantizedGroups> segs;
  segs.reserve(n);
  for (uint32_t i = 0; i < n; ++i) {
    const uint64_t len = read_pod<uint64_t>(is);
    std::vector<uint8_t> bytes(len);
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(len));
    if (!is) throw std::runtime_error("KVLayerCache::load: truncated segment");
    segs.push_back(deserialize_quantized_groups(bytes));
  }
  return segs;
}

void write_tail(std::ostream& os, const std::vector<float>& tail) {
  write_pod<uint64_t>(os, tail.size());
  os.write(reinterpret_cast<const char*>(tail.data()),
           static_cast<std::streamsize>(tail.size() * sizeof(float)));
}

std::vector<float> read_tail(std::istream& is) {
  const uint64_t n = read_pod<uint64_t>(is);
  std::vector<float> tail(n);
  is.read(reinterpret_cast<char*>(tail.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!is) throw std::runtime_error("KVLayerCache::load: truncated tail");
  return tail;
}

}  // namespace

void KVLayerCache::dump(std::ostream& os) const {
  os.write("KVCD", 4);
  write_pod<uint8_t>(os, 1);  // version
  write_pod<int32_t>(os, cfg_.layer_index);
  write_pod<uint8_t>(os, static_cast<uint8_t>(cfg_.key_bits));
  write_pod<uint8_t>(os, static_cast<uint8_t>(cfg_.value_bits));
  write_pod<float>(os, cfg_.key_rpc_ratio);
  write_pod<float>(os, cfg_.value_rpc_ratio);
  write_pod<uint32_t>(os, static_cast<uint32_t>(cfg_.group_size));
  write_pod<uint32_t>(os, static_cast<uint32_t>(b_));
  write_pod<uint32_t>(os, static_cast<uint32_t>(nh_));
  write_pod<uint32_t>(os, static_cast<uint32_t>(d_));
  write_pod<int64_t>(os, key_tail_len_);
  write_pod<int64_t>(os, value_tail_len_);
  write_pod<int64_t>(os, quant_key_tokens_);
  write_pod<int64_t>(os, quant_value_tokens_);
  write_segments(os, key_segs_);
  write_segments(os, value_segs_);
  write_tail(os, key_tail_);
  write_tail(os, value_tail_);
}

KVLayerCache KVLayerCache::load(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "KVCD", 4) != 0) {
    throw std::runtime_error("KVLayerCache::load: bad magic");
  }
  const uint8_t version = read_pod<uint8_t>(is);
  if (version != 1) {
    throw std::runtime_error("KVLayerCache::load: unsupported version " + std::to_string(version));
  }
  LayerQuantConfig cfg;
  cfg.layer_index = read_pod<int32_t>(is);
  cfg.key_bits = read_pod<uint8_t>(is);
  cfg.value_bits = read_pod<uint8_t>(is);
  cfg.key_rpc_ratio = read_pod<float>(is);
  cfg.value_rpc_ratio = read_pod<float>(is);
  cfg.group_size = static_cast<int>(read_pod<uint32_t>(is));
  const int b = static_cast<int>(read_pod<uint32_t>(is));
  const int nh = static_cast<int>(read_pod<uint32_t>(is));
  const int d = static_cast<int>(read_pod<uint32_t>(is));
  KVLayerCache cache(cfg, b, nh, d);
  cache.key_tail_len_ = read_pod<int64_t>(is);
  cache.value_tail_len_ = read_pod<int64_t>(is);
  cache.quant_key_tokens_ = read_pod<int64_t>(is);
  cache.quant_value_tokens_ = read_pod<int64_t>(is);
  cache.key_segs_ = read_segments(is);
  cache.value_segs_ = read_segments(is);
  cache.key_tail_ = read_tail(is);
  cache.value_tail_ = read_tail(is);
  return cache;
}

}  // namespace kvmix
