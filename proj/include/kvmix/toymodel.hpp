#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "kvmix/quant_config.hpp"
#include "kvmix/rng.hpp"
#include "kvmix/tensor.hpp"

namespace kvmix {

// Small decoder-only transformer with exact manual backpropagation.
//
// Architecture (pre-norm, no biases):
//   x_t = embedding[token_t] + pos_embedding[t]
//   per layer:  h  = rmsnorm(x) * attn_gain
//               q, k, v = h Wq, h Wk, h Wv       (split into nh heads of D)
//               a_t = sum_u softmax_u(q_t . k_u / sqrt(D)) v_u   over u <= t
//               x  += (a concat) Wo
//               h2 = rmsnorm(x) * mlp_gain
//               x  += gelu(h2 W_ff_in) W_ff_out
//   logits_t = rmsnorm(x_t) * final_gain, times the unembedding matrix
//   loss = mean cross-entropy of logits_t against token_{t+1}
//
// rmsnorm(x) = x / sqrt(mean(x^2) + 1e-6); gelu is the exact erf form.
// All matrices are row-major [in][out], applied as out_j = sum_i x_i W[i][j].
// Positions use learned absolute embeddings, so cached Keys carry no
// rotary twist and quantize as-is.
//
// The profiling path (forward_loss/backward) runs in double; generation and
// everything downstream of the caches runs in float.

struct ToyHyperparams {
  int vocab_size = 256;
  int d_model = 64;
  int n_layers = 8;
  int n_heads = 4;
  int head_dim = 16;
  int d_ff = 128;
  int max_seq = 256;

  void validate() const;
};

struct LayerWeights {
  std::vector<double> w_q, w_k, w_v, w_o;  // [d_model * d_model]
  std::vector<double> w_ff_in;             // [d_model * d_ff]
  std::vector<double> w_ff_out;            // [d_ff * d_model]
  std::vector<double> attn_norm_gain, mlp_norm_gain;  // [d_model]
};

struct ToyTransformer {
  ToyHyperparams hp;
  uint64_t seed = 0;
  std::vector<double> embedding;      // [vocab * d_model]
  std::vector<double> pos_embedding;  // [max_seq * d_model]
  std::vector<LayerWeights> layers;
  std::vector<double> final_norm_gain;  // [d_model]
  std::vector<double> unembedding;      // [d_model * vocab]
};

ToyTransformer init_model(const ToyHyperparams& hp, uint64_t seed);

double forward_loss(const ToyTransformer& m, std::span<const int> tokens);

struct GradientBundle {
  std::vector<std::vector<double>> grad_w_k;  // per layer, [d_model * d_model]
  std::vector<std::vector<double>> grad_w_v;
};

GradientBundle backward(const ToyTransformer& m, std::span<const int> tokens);

// every parameter's gradient, for the training loop
struct FullGradients {
  struct LayerGrads {
    std::vector<double> w_q, w_k, w_v, w_o, w_ff_in, w_ff_out, attn_norm_gain, mlp_norm_gain;
  };
  std::vector<double> embedding, pos_embedding, final_norm_gain, unembedding;
  std::vector<LayerGrads> layers;
  double loss = 0.0;
};

FullGradients backward_full(const ToyTransformer& m, std::span<const int> tokens);

// Synthetic corpus: sequences tiled from a random 8-token motif, so the
// next token is a copy of the one 8 positions back. Attention has to fetch
// it from the cache, which makes generation quality sensitive to cache
// quantization.
inline constexpr int kMotifLen = 8;
std::vector<int> synth_sequence(Rng& rng, int len, int vocab);

// Plain gradient descent on the mean loss of `batch` fresh sequences per
// step; returns the final step's training loss. The copy mechanism forms
// reliably around 500 steps with batch 8 and lr 0.7.
double train(ToyTransformer& m, int steps, double lr, uint64_t data_seed, int seq_len,
             int batch = 8);

// ---- float generation path ---------------------------------------------

struct ToyTransformerF32 {
  ToyHyperparams hp;
  std::vector<float> embedding, pos_embedding;
  struct Layer {
    std::vector<float> w_q, w_k, w_v, w_o, w_ff_in, w_ff_out, attn_norm_gain, mlp_norm_gain;
  };
  std::vector<Layer> layers;
  std::vector<float> final_norm_gain, unembedding;

  static ToyTransformerF32 from(const ToyTransformer& m);
};

// Full-sequence causal forward in float: per-layer K/V for cache prefill
// plus the last position's logits.
struct FloatForward {
  std::vector<Tensor4f> layer_keys;    // [layer] -> [1, nh, T, D]
  std::vector<Tensor4f> layer_values;  // [layer] -> [1, nh, T, D]
  std::vector<float> last_logits;
};

FloatForward causal_forward_f32(const ToyTransformerF32& m, std::span<const int> tokens);

// Incremental decoder over per-layer quantized caches. Appends each token's
// K/V, then attends through the fused kernels.
class CachedDecoder {
 public:
  CachedDecoder(const ToyTransformerF32& m, const ModelQuantConfig* quant);

  std::vector<float> step(int token);                    // logits for this position
  std::vector<float> prefill(std::span<const int> tokens);  // bulk, full-precision attention
  int position() const { return pos_; }
  const KVLayerCache& layer_cache(int l) const { return caches_[l]; }

 private:
  const ToyTransformerF32& m_;
  std::vector<KVLayerCache> caches_;
  int pos_ = 0;
};

// Greedy decoding; quant == nullptr runs a full-precision cache.
std::vector<int> generate(const ToyTransformer& m, std::span<const int> prompt,
                          int max_new_tokens, const ModelQuantConfig* quant);

// Oracle decoder: no cache at all, re-runs the causal forward over the whole
// sequence for every generated token.
std::vector<int> generate_recompute_reference(const ToyTransformer& m, std::span<const int> prompt,
                                              int max_new_tokens);

// Versioned binary checkpoint: magic "KVTM", u32 version, hyperparameters,
// seed, then all parameters as little-endian f64 in declaration order.
void save_checkpoint(std::ostream& os, const ToyTransformer& m);
ToyTransformer load_checkpoint(std::istream& is);

}  // namespace kvmix
