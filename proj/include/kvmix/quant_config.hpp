#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "kvmix/cache.hpp"

namespace kvmix {

// Whole-model quantization plan: one cache config per layer plus a record of
// how the plan was chosen.

enum class Provenance : uint8_t { kGradientGuided = 0, kRandom = 1, kUniformBits = 2 };

struct ModelQuantConfig {
  std::vector<LayerQuantConfig> layers;
  Provenance provenance = Provenance::kUniformBits;
  uint64_t random_seed = 0;  // meaningful only for kRandom

  void validate() const {
    for (size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].layer_index != static_cast<int>(i)) {
        throw std::invalid_argument("ModelQuantConfig: layer " + std::to_string(i) +
                                    " has index " + std::to_string(layers[i].layer_index));
      }
      layers[i].validate();
    }
  }
};

inline ModelQuantConfig uniform_config(int n_layers, int bits, float rpc_ratio,
                                       int group_size = 32) {
  ModelQuantConfig cfg;
  cfg.provenance = Provenance::kUniformBits;
  cfg.layers.resize(n_layers);
  for (int i = 0; i < n_layers; ++i) {
    cfg.layers[i].layer_index = i;
    cfg.layers[i].key_bits = bits;
    cfg.layers[i].value_bits = bits;
    cfg.layers[i].key_rpc_ratio = rpc_ratio;
    cfg.layers[i].value_rpc_ratio = rpc_ratio;
    cfg.layers[i].group_size = group_size;
  }
  cfg.validate();
  return cfg;
}

// r = 1 keeps every token in the full-precision tail; bits never apply
inline ModelQuantConfig full_precision_config(int n_layers) {
  return uniform_config(n_layers, 4, 1.0f);
}

}  // namespace kvmix
