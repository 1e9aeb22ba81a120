#include "kvmix/harness.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <stdexcept>

#include "kvmix/attention.hpp"
#include "kvmix/half.hpp"

namespace kvmix {

namespace {

// synthetic KV values live on the binary16 grid, like the half-precision
// cache they stand in for
Tensor4f random_kv_tensor(Rng& rng, int b, int nh, int t, int d) {
  Tensor4f x(b, nh, t, d);
  for (auto& v : x.data) {
    v = round_through_half(static_cast<float>(rng.normal()));
  }
  return x;
}

MemoryReport aggregate_reports(const std::vector<KVLayerCache>& caches) {
  MemoryReport sum;
  for (const KVLayerCache& c : caches) {
    const MemoryReport r = c.memory_usage();
    sum.packed_payload_bits += r.packed_payload_bits;
    sum.metadata_bits += r.metadata_bits;
    sum.tail_bits += r.tail_bits;
    sum.total_bits += r.total_bits;
    sum.fp16_baseline_bits += r.fp16_baseline_bits;
  }
  sum.compression_ratio = sum.total_bits == 0 ? 1.0
                                              : static_cast<double>(sum.fp16_baseline_bits) /
                                                    static_cast<double>(sum.total_bits);
  return sum;
}

}  // namespace

std::vector<BenchMemoryRow> bench_memory(const ModelQuantConfig& cfg,
                                         const BenchMemoryOptions& opt) {
  cfg.validate();
  if (cfg.layers.empty()) throw std::invalid_argument("bench_memory: empty config");
  if (opt.prefill < 1 || opt.decode_steps < 0) {
    throw std::invalid_argument("bench_memory: need prefill >= 1 and decode_steps >= 0");
  }

  std::vector<KVLayerCache> caches;
  caches.reserve(cfg.layers.size());
  for (const LayerQuantConfig& lc : cfg.layers) {
    caches.emplace_back(lc, opt.batch, opt.heads, opt.head_dim);
  }

  std::vector<BenchMemoryRow> rows;
  auto emit_step = [&](int64_t step) {
    for (size_t l = 0; l < caches.size(); ++l) {
      rows.push_back({static_cast<int>(l), step, caches[l].memory_usage()});
    }
    rows.push_back({-1, step, aggregate_reports(caches)});
  };

  Rng rng(opt.seed);
  for (size_t l = 0; l < caches.size(); ++l) {
    Tensor4f k = random_kv_tensor(rng, opt.batch, opt.heads, opt.prefill, opt.head_dim);
    Tensor4f v = random_kv_tensor(rng, opt.batch, opt.heads, opt.prefill, opt.head_dim);
    caches[l].append(k, v);
  }
  emit_step(0);

  for (int step = 1; step <= opt.decode_steps; ++step) {
    for (size_t l = 0; l < caches.size(); ++l) {
      caches[l].append(random_kv_tensor(rng, opt.batch, opt.heads, 1, opt.head_dim),
                       random_kv_tensor(rng, opt.batch, opt.heads, 1, opt.head_dim));
    }
    if (step % opt.emit_every == 0 || step == opt.decode_steps) emit_step(step);
  }
  return rows;
}

std::vector<AttentionTrialRow> bench_attention(const BenchAttentionOptions& opt) {
  if (opt.trials < 1) throw std::invalid_argument("bench_attention: trials must be >= 1");
  std::vector<AttentionTrialRow> rows;
  using clock = std::chrono::steady_clock;

  for (int trial = 0; trial < opt.trials; ++trial) {
    for (int bits : {2, 3, 4}) {
      const uint64_t seed = opt.seed + static_cast<uint64_t>(trial) * 7919u;
      LayerQuantConfig qc;
      qc.key_bits = bits;
      qc.value_bits = bits;
      qc.key_rpc_ratio = LayerQuantConfig::default_rpc_for_bits(bits);
      qc.value_rpc_ratio = LayerQuantConfig::default_rpc_for_bits(bits);
      LayerQuantConfig fp = qc;
      fp.key_rpc_ratio = 1.0f;
      fp.value_rpc_ratio = 1.0f;

      KVLayerCache quant_cache(qc, 1, opt.heads, opt.head_dim);
      KVLayerCache fp_cache(fp, 1, opt.heads, opt.head_dim);
      Rng rng(seed);
      int done = 0;
      while (done < opt.tokens) {
        const int t = std::min(opt.tokens - done, rng.uniform_int(1, 128));
        Tensor4f k = random_kv_tensor(rng, 1, opt.heads, t, opt.head_dim);
        Tensor4f v = random_kv_tensor(rng, 1, opt.heads, t, opt.head_dim);
        quant_cache.append(k, v);
        fp_cache.append(k, v);
        done += t;
      }
      Tensor4f q = random_kv_tensor(rng, 1, opt.heads, 1, opt.head_dim);

      const auto t0 = clock::now();
      const AttentionOutput fused = attend(q, quant_cache);
      const auto t1 = clock::now();
      const AttentionOutput ref = reference_attend(q, quant_cache);
      const auto t2 = clock::now();
      const AttentionOutput full = attend(q, fp_cache);

      AttentionTrialRow row;
      row.bits = bits;
      row.trial = trial;
      row.fused_us = std::chrono::duration<double, std::micro>(t1 - t0).count();
      row.reference_us = std::chrono::duration<double, std::micro>(t2 - t1).count();
      double mse = 0.0, maxdev = 0.0;
      for (size_t i = 0; i < fused.output.data.size(); ++i) {
        const double d = static_cast<double>(fused.output.data[i]) - full.output.data[i];
        mse += d * d;
        const double a = fused.output.data[i], b = ref.output.data[i];
        const double denom = std::max({std::abs(a), std::abs(b), 1e-7});
        maxdev = std::max(maxdev, std::abs(a - b) / denom);
      }
      row.mse_vs_fp = mse / static_cast<double>(fused.output.data.size());
      row.fused_ref_maxdev = maxdev;
      rows.push_back(row);
    }
  }
  return rows;
}

double quantized_eval_loss(const ToyTransformerF32& m, const ModelQuantConfig* quant,
                           std::span<const int> tokens) {
  if (tokens.size() < 2) {
    throw std::invalid_argument("quantized_eval_loss: need at least two tokens");
  }
  CachedDecoder dec(m, quant);
  double total = 0.0;
  for (size_t t = 0; t + 1 < tokens.size(); ++t) {
    const std::vector<float> logits = dec.step(tokens[t]);
    double mx = logits[0];
    for (float v : logits) mx = v > mx ? v : mx;
    double sum = 0.0;
    for (float v : logits) sum += std::exp(static_cast<double>(v) - mx);
    total += mx + std::log(sum) - static_cast<double>(logits[tokens[t + 1]]);
  }
  return total / static_cast<double>(tokens.size() - 1);
}

std::vector<CompareRow> compare_allocations(const CompareOptions& opt) {
  if (opt.n_seeds < 1) throw std::invalid_argument("compare_allocations: need n_seeds >= 1");
  ToyHyperparams hp;
  hp.vocab_size = opt.vocab;
  hp.d_model = opt.d_model;
  hp.n_layers = opt.n_layers;
  hp.n_heads = opt.n_heads;
  hp.head_dim = opt.head_dim;
  hp.d_ff = opt.d_ff;
  hp.max_seq = opt.max_seq;
  hp.validate();

  std::vector<CompareRow> rows(opt.n_seeds);
#pragma omp parallel for schedule(dynamic)
  for (int s = 0; s < opt.n_seeds; ++s) {
    const uint64_t seed = opt.seed0 + static_cast<uint64_t>(s);
    ToyTransformer model = init_model(hp, seed);
    train(model, opt.train_steps, opt.lr, seed * 31 + 5, opt.train_seq, opt.train_batch);

    Rng prompt_rng(seed * 101 + 7);
    std::vector<std::vector<int>> prompts;
    prompts.reserve(opt.profile_prompts);
    for (int p = 0; p < opt.profile_prompts; ++p) {
      prompts.push_back(synth_sequence(prompt_rng, opt.prompt_len, hp.vocab_size));
    }
    const ImportanceReport report = importance_scores(model, prompts);
    const ModelQuantConfig guided = allocate_bits(report, opt.alloc);
    const ModelQuantConfig random_cfg = random_allocation(hp.n_layers, opt.alloc, seed * 997 + 3);

    const ToyTransformerF32 mf = ToyTransformerF32::from(model);
    Rng eval_rng(seed * 131 + 17);
    double full = 0.0, g = 0.0, r = 0.0;
    for (int e = 0; e < opt.eval_sequences; ++e) {
      const std::vector<int> seq = synth_sequence(eval_rng, opt.eval_len, hp.vocab_size);
      full += quantized_eval_loss(mf, nullptr, seq);
      g += quantized_eval_loss(mf, &guided, seq);
      r += quantized_eval_loss(mf, &random_cfg, seq);
    }
    full /= opt.eval_sequences;
    g /= opt.eval_sequences;
    r /= opt.eval_sequences;

    CompareRow row;
    row.seed = seed;
    row.loss_full = full;
    row.loss_guided = g;
    row.loss_random = r;
    row.degradation_guided = g - full;
    row.degradation_random = r - full;
    const auto [ka, va] = average_bits(guided);
    const auto [ka_r, va_r] = average_bits(random_cfg);
    if (ka != ka_r || va != va_r) {
      throw std::logic_error("compare_allocations: arms disagree on average bits");
    }
    row.avg_key_bits = ka;
    row.avg_value_bits = va;
    rows[s] = row;
  }
  return rows;
}

void write_memory_csv(std::ostream& os, const std::vector<BenchMemoryRow>& rows,
                      std::string_view manifest_ref) {
  os << "layer,step,payload_bits,metadata_bits,tail_bits,ratio,manifest\n";
  os << std::setprecision(17);
  for (const BenchMemoryRow& r : rows) {
    os << r.layer << ',' << r.step << ',' << r.report.packed_payload_bits << ','
       << r.report.metadata_bits << ',' << r.report.tail_bits << ','
       << r.report.compression_ratio << ',' << manifest_ref << '\n';
  }
}

void write_attention_csv(std::ostream& os, const std::vector<AttentionTrialRow>& rows,
                         std::string_view manifest_ref) {
  os << "bits,trial,mse_vs_fp,fused_ref_maxdev,fused_us,reference_us,manifest\n";
  os << std::setprecision(17);
  for (const AttentionTrialRow& r : rows) {
    os << r.bits << ',' << r.trial << ',' << r.mse_vs_fp << ',' << r.fused_ref_maxdev << ','
       << r.fused_us << ',' << r.reference_us << ',' << manifest_ref << '\n';
  }
}

void write_compare_csv(std::ostream& os, const std::vector<CompareRow>& rows,
                       std::string_view manifest_ref) {
  os << "seed,loss_full,loss_guided,loss_random,degradation_guided,degradation_random,"
        "avg_key_bits,avg_value_bits,manifest\n";
  os << std::setprecision(17);
  for (const CompareRow& r : rows) {
    os << r.seed << ',' << r.loss_full << ',' << r.loss_guided << ',' << r.loss_random << ','
       << r.degradation_guided << ',' << r.degradation_random << ',' << r.avg_key_bits << ','
       << r.avg_value_bits << ',' << manifest_ref << '\n';
  }
}

}  // namespace kvmix
