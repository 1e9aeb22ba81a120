#pragma once

#include <cstdint>
#include <iosfwd>
#include <string_view>
#include <utility>
#include <vector>

#include "kvmix/quant_config.hpp"
#include "kvmix/toymodel.hpp"

namespace kvmix {

// Gradient-norm layer profiling and bit allocation.
//
// Each prompt is backpropagated once; the Frobenius norm of the loss
// gradient with respect to every layer's Key and Value projection matrices
// becomes that layer's per-prompt importance score, and scores average
// across prompts. The top floor(high_fraction * n_layers) layers by mean
// score take the high bit width and recent-context ratio, independently for
// Keys and Values; everything else drops to the low tier.

struct ImportanceReport {
  int n_layers = 0;
  int prompts = 0;
  std::vector<std::vector<double>> key_scores;    // [prompt][layer]
  std::vector<std::vector<double>> value_scores;  // [prompt][layer]
  std::vector<double> key_mean, value_mean;       // [layer]
};

ImportanceReport importance_scores(const ToyTransformer& m,
                                   const std::vector<std::vector<int>>& prompts);

struct BitAllocationParams {
  double high_fraction = 0.2;
  int high_key_bits = 3;
  int high_value_bits = 4;
  int low_bits = 2;
  float rpc_high = 0.2f;
  float rpc_low = 0.1f;
  int group_size = 32;
};

// Ties break toward the lower layer index.
ModelQuantConfig allocate_bits(const ImportanceReport& report, const BitAllocationParams& p);

// (key average, value average)
std::pair<double, double> average_bits(const ModelQuantConfig& config);

// Uniformly random high-bit layer choice at the same tier sizes, so random
// and gradient-guided plans always carry identical average bits.
ModelQuantConfig random_allocation(int n_layers, const BitAllocationParams& p, uint64_t seed);

struct LayerWeightStats {
  double norm_k = 0.0, norm_v = 0.0;    // Frobenius norms
  double range_k = 0.0, range_v = 0.0;  // max - min
};

std::vector<LayerWeightStats> weight_stats(const ToyTransformer& m);

// Text config format (one record per line, '#' comments allowed):
//   kvmix-config v1
//   provenance gradient-guided | random seed=<u64> | uniform
//   n_layers <n>
//   group_size <g>
//   layer <i> key_bits <b> value_bits <b> key_rpc <r> value_rpc <r>
void write_config(std::ostream& os, const ModelQuantConfig& config);
ModelQuantConfig read_config(std::istream& is);

// CSV emitters; every row carries the manifest reference in its last column.
void write_importance_csv(std::ostream& os, const ImportanceReport& report,
                          std::string_view manifest_ref);
void write_weight_stats_csv(std::ostream& os, const std::vector<LayerWeightStats>& stats,
                            std::string_view manifest_ref);

}  // namespace kvmix
