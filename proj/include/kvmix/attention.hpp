#pragma once

#include <cmath>
#include <iosfwd>
#include <span>

#include "kvmix/cache.hpp"
#include "kvmix/tensor.hpp"

namespace kvmix {

// Attention over a quantized KV cache.
//
// The fused kernels dequantize each packed element inside the accumulation
// loop: no full-precision copy of a quantized region is ever materialized,
// so auxiliary storage stays O(group_size + D) regardless of how many tokens
// the cache holds. reference_attend is the serial oracle: it snapshots the
// whole cache back to full precision and runs dense attention, deliberately
// paying the O(total_tokens * D) allocation the fused path avoids.
//
// Queries with t > 1 are evaluated row by row; every row attends over all
// cached tokens (the cache only ever holds past tokens, so no mask applies).
// Rows are independent and evaluated in parallel.

struct AttentionOutput {
  Tensor4f output;                // [B, nh, t, D]
  double scores_checksum = 0.0;   // sum of raw scores, diagnostic only
};

// scores[b,h,qi,j] = dot(query[b,h,qi,:], key_j) / sqrt(D)
Tensor4f fused_qk_scores(const Tensor4f& query, const KVLayerCache& cache);

// numerically stable row softmax (max subtraction); rows sum to 1
Tensor4f softmax_rows(Tensor4f scores);
void softmax_inplace(std::span<float> row);

// output[b,h,qi,:] = sum_j probs[b,h,qi,j] * value_j
Tensor4f fused_pv(const Tensor4f& probs, const KVLayerCache& cache);

AttentionOutput attend(const Tensor4f& query, const KVLayerCache& cache);
AttentionOutput reference_attend(const Tensor4f& query, const KVLayerCache& cache);

// diagnostic CSV dump: one row per (b, h, query, token)
void dump_scores_csv(std::ostream& os, const Tensor4f& scores);

inline float attention_inv_scale(int head_dim) {
  return 1.0f / std::sqrt(static_cast<float>(head_dim));
}

}  // namespace kvmix
