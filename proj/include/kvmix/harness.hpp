#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string_view>
#include <vector>

#include "kvmix/profiler.hpp"
#include "kvmix/quant_config.hpp"
#include "kvmix/toymodel.hpp"

namespace kvmix {

// Benchmark and comparison drivers shared by the command-line tool and the
// acceptance suite.

struct BenchMemoryRow {
  int layer = 0;  // -1 aggregates across all layers
  int64_t step = 0;  // 0 = right after prefill, then one row per decode step
  MemoryReport report;
};

struct BenchMemoryOptions {
  int batch = 1;
  int heads = 4;
  int head_dim = 64;
  int prefill = 4096;
  int decode_steps = 1024;
  uint64_t seed = 1;
  int emit_every = 64;  // thinning for per-step rows; the final step always emits
};

std::vector<BenchMemoryRow> bench_memory(const ModelQuantConfig& cfg,
                                         const BenchMemoryOptions& opt);

struct AttentionTrialRow {
  int bits = 0;  // uniform bit width of the trial's cache
  int trial = 0;
  double mse_vs_fp = 0.0;         // fused output against a full-precision cache
  double fused_ref_maxdev = 0.0;  // fused vs dequantize-all reference, relative
  double fused_us = 0.0;
  double reference_us = 0.0;
};

struct BenchAttentionOptions {
  int trials = 50;
  uint64_t seed = 1;
  int heads = 4;
  int head_dim = 32;
  int tokens = 512;
};

// Runs uniform 2-, 3- and 4-bit configurations over identical token streams.
std::vector<AttentionTrialRow> bench_attention(const BenchAttentionOptions& opt);

// Mean next-token cross-entropy of a decode-style pass in which every
// position's attention goes through the per-layer caches, so cache
// quantization affects every prediction. quant == nullptr is full precision.
double quantized_eval_loss(const ToyTransformerF32& m, const ModelQuantConfig* quant,
                           std::span<const int> tokens);

struct CompareRow {
  uint64_t seed = 0;
  double loss_full = 0.0, loss_guided = 0.0, loss_random = 0.0;
  double degradation_guided = 0.0, degradation_random = 0.0;
  double avg_key_bits = 0.0, avg_value_bits = 0.0;  // identical across both arms
};

struct CompareOptions {
  int n_seeds = 20;
  uint64_t seed0 = 1;
  // toy model used per seed
  int vocab = 64, d_model = 32, n_layers = 3, n_heads = 2, head_dim = 16, d_ff = 48,
      max_seq = 96;
  int train_steps = 700;
  double lr = 0.7;
  int train_seq = 48;
  int train_batch = 8;
  int profile_prompts = 8;
  int prompt_len = 48;
  int eval_sequences = 4;
  int eval_len = 48;  // within the trained position range
  BitAllocationParams alloc{0.34, 3, 4, 2, 0.2f, 0.1f, 32};
};

// Per seed: train a fresh model, profile it, then measure the eval-loss
// degradation of the gradient-guided plan and a random plan with identical
// average bits against the full-precision baseline.
std::vector<CompareRow> compare_allocations(const CompareOptions& opt);

void write_memory_csv(std::ostream& os, const std::vector<BenchMemoryRow>& rows,
                      std::string_view manifest_ref);
void write_attention_csv(std::ostream& os, const std::vector<AttentionTrialRow>& rows,
                         std::string_view manifest_ref);
void write_compare_csv(std::ostream& os, const std::vector<CompareRow>& rows,
                       std::string_view manifest_ref);

}  // namespace kvmix
