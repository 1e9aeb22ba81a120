#pragma once

#include <cstdint>
#include <iosfwd>
#include <utility>
#include <vector>

#include "kvmix/quant.hpp"
#include "kvmix/tensor.hpp"

namespace kvmix {

// Per-layer KV cache: packed quantized history plus a full-precision tail of
// recent tokens.
//
// Every append lands the new tokens in the tail, then shrinks the tail
// toward target = floor(r * current) where current is the tail length after
// the append, independently for Keys and Values with their own ratios. Aged
// Key tokens quantize in whole groups of group_size tokens (their groups run
// along the token axis); aged Value tokens quantize one token at a time.
// Tokens are never dropped, only compressed, and the quantized segments stay
// strictly older than the tail.
//
// One writer at a time; any number of readers between appends.

struct LayerQuantConfig {
  int layer_index = 0;
  int key_bits = 2;
  int value_bits = 2;
  float key_rpc_ratio = 0.1f;
  float value_rpc_ratio = 0.1f;
  int group_size = 32;

  // tier convention: 3- and 4-bit layers keep 20% recent context, 2-bit 10%
  static float default_rpc_for_bits(int bits) { return bits >= 3 ? 0.2f : 0.1f; }

  void validate() const;
};

struct MemoryReport {
  uint64_t packed_payload_bits = 0;
  uint64_t metadata_bits = 0;  // 16-bit scale + 16-bit min per group
  uint64_t tail_bits = 0;      // tail elements at 16 bits each
  uint64_t total_bits = 0;
  uint64_t fp16_baseline_bits = 0;
  double compression_ratio = 1.0;  // baseline / total; 1.0 for an empty cache
};

// floor(r * current_rpc)
int64_t rpc_target(int64_t current_rpc, double r);

class KVLayerCache {
 public:
  KVLayerCache(const LayerQuantConfig& config, int batch, int heads, int head_dim);

  void append(const Tensor4f& new_keys, const Tensor4f& new_values);

  MemoryReport memory_usage() const;

  // Reconstructs the logical [B, nh, total_tokens, D] tensors. Used by tests
  // and the reference attention path; deliberately materializes everything.
  std::pair<Tensor4f, Tensor4f> snapshot_dequantized() const;

  int64_t total_tokens() const { return quant_key_tokens_ + key_tail_len_; }
  int64_t key_tail_tokens() const { return key_tail_len_; }
  int64_t value_tail_tokens() const { return value_tail_len_; }
  int64_t quantized_key_tokens() const { return quant_key_tokens_; }
  int64_t quantized_value_tokens() const { return quant_value_tokens_; }

  int batch() const { return b_; }
  int heads() const { return nh_; }
  int head_dim() const { return d_; }
  const LayerQuantConfig& config() const { return cfg_; }

  const std::vector<QuantizedGroups>& key_segments() const { return key_segs_; }
  const std::vector<QuantizedGroups>& value_segments() const { return value_segs_; }

  // tail reads; j indexes tail-local tokens, oldest first
  float key_tail_at(int bi, int hi, int64_t j, int di) const {
    return key_tail_[static_cast<size_t>(j) * slab_ + (static_cast<size_t>(bi) * nh_ + hi) * d_ +
                     di];
  }
  float value_tail_at(int bi, int hi, int64_t j, int di) const {
    return value_tail_[static_cast<size_t>(j) * slab_ +
                       (static_cast<size_t>(bi) * nh_ + hi) * d_ + di];
  }

  // Versioned binary state dump: header, per-segment payloads, raw tails.
  void dump(std::ostream& os) const;
  static KVLayerCache load(std::istream& is);

 private:
  void age_out_keys(int64_t n);
  void age_out_values(int64_t n);

  LayerQuantConfig cfg_;
  int b_ = 1, nh_ = 1, d_ = 1;
  size_t slab_ = 1;  // elements per token: b * nh * d

  std::vector<QuantizedGroups> key_segs_, value_segs_;
  std::vector<float> key_tail_, value_tail_;  // [token][b][h][d], oldest first
  int64_t key_tail_len_ = 0, value_tail_len_ = 0;
  int64_t quant_key_tokens_ = 0, quant_value_tokens_ = 0;
};

}  // namespace kvmix
