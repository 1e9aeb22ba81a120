// kvmix command-line harness: profiling, benchmarking and generation.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "kvmix/attention.hpp"
#include "kvmix/harness.hpp"
#include "kvmix/profiler.hpp"
#include "kvmix/toymodel.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kvmix;

namespace {

constexpr const char* kToolVersion = "0.1.0";
constexpr int kExitConfigError = 2;
constexpr int kExitRuntimeError = 3;

// thrown for bad configs / unusable inputs, mapped to exit code 2
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

ModelQuantConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  try {
    return read_config(is);
  } catch (const std::exception& e) {
    throw ConfigError(std::string(e.what()) + " (" + path + ")");
  }
}

ToyTransformer load_or_init_model(const std::string& checkpoint, const ToyHyperparams& hp,
                                  uint64_t seed) {
  if (checkpoint.empty()) return init_model(hp, seed);
  std::ifstream is(checkpoint, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint: " + checkpoint);
  try {
    return load_checkpoint(is);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("bad checkpoint: ") + e.what());
  }
}

void write_file(const fs::path& path, const std::string& contents) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << contents;
}

void write_manifest(const fs::path& out_dir, const std::string& command, uint64_t seed,
                    const json& flags, const std::vector<std::string>& outputs) {
  json m;
  m["command"] = command;
  m["flags"] = flags;
  m["outputs"] = outputs;
  m["seed"] = seed;
  m["tool"] = "kvmix";
  m["version"] = kToolVersion;
  write_file(out_dir / "manifest.json", m.dump(2) + "\n");
}

std::vector<int> parse_id_list(const std::string& csv) {
  std::vector<int> ids;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      ids.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("bad token id '" + item + "' in prompt list");
    }
  }
  if (ids.empty()) throw ConfigError("prompt list is empty");
  return ids;
}

struct CommonModelFlags {
  int layers = 32;
  int d_model = 64;
  int heads = 4;
  int head_dim = 16;
  int d_ff = 128;
  int max_seq = 256;

  ToyHyperparams to_hp() const {
    ToyHyperparams hp;
    hp.vocab_size = 256;
    hp.d_model = d_model;
    hp.n_layers = layers;
    hp.n_heads = heads;
    hp.head_dim = head_dim;
    hp.d_ff = d_ff;
    hp.max_seq = max_seq;
    return hp;
  }
};

int cmd_profile(uint64_t seed, const CommonModelFlags& mf, const std::string& checkpoint,
                int prompts, int prompt_len, const BitAllocationParams& alloc,
                const std::string& out) {
  ToyHyperparams hp = mf.to_hp();
  hp.validate();
  if (prompt_len < 2 || prompt_len > hp.max_seq) {
    throw ConfigError("prompt length must lie in [2, max_seq]");
  }
  const ToyTransformer model = load_or_init_model(checkpoint, hp, seed);

  Rng prompt_rng(seed ^ 0x9e3779b9u);
  std::vector<std::vector<int>> prompt_set;
  prompt_set.reserve(prompts);
  for (int p = 0; p < prompts; ++p) {
    prompt_set.push_back(synth_sequence(prompt_rng, prompt_len, model.hp.vocab_size));
  }

  const ImportanceReport report = importance_scores(model, prompt_set);
  const ModelQuantConfig config = allocate_bits(report, alloc);
  const auto [key_avg, value_avg] = average_bits(config);

  const fs::path out_dir(out);
  fs::create_directories(out_dir);
  {
    std::ostringstream os;
    write_config(os, config);
    write_file(out_dir / "quant_config.txt", os.str());
  }
  {
    std::ostringstream os;
    write_importance_csv(os, report, "manifest.json");
    write_file(out_dir / "importance.csv", os.str());
  }
  {
    std::ostringstream os;
    write_weight_stats_csv(os, weight_stats(model), "manifest.json");
    write_file(out_dir / "weight_stats.csv", os.str());
  }
  json flags{{"layers", model.hp.n_layers},   {"prompts", prompts},
             {"prompt_len", prompt_len},      {"high_fraction", alloc.high_fraction},
             {"group_size", alloc.group_size}, {"bits_key_high", alloc.high_key_bits},
             {"bits_value_high", alloc.high_value_bits}, {"rpc_high", alloc.rpc_high},
             {"rpc_low", alloc.rpc_low},       {"checkpoint", checkpoint}};
  write_manifest(out_dir, "profile", seed, flags,
                 {"quant_config.txt", "importance.csv", "weight_stats.csv"});
  std::cout << "profile: " << model.hp.n_layers << " layers, " << prompts
            << " prompts; average bits key=" << key_avg << " value=" << value_avg << "\n"
            << "wrote " << (out_dir / "quant_config.txt").string() << "\n";
  return 0;
}

int cmd_bench_memory(const std::string& config_path, const BenchMemoryOptions& opt,
                     const std::string& out) {
  const ModelQuantConfig config = load_config_file(config_path);
  const std::vector<BenchMemoryRow> rows = bench_memory(config, opt);

  const fs::path out_dir(out);
  fs::create_directories(out_dir);
  std::ostringstream os;
  write_memory_csv(os, rows, "manifest.json");
  write_file(out_dir / "memory.csv", os.str());
  json flags{{"config", config_path},   {"prefill", opt.prefill},
             {"decode_steps", opt.decode_steps}, {"batch", opt.batch},
             {"heads", opt.heads},      {"head_dim", opt.head_dim},
             {"emit_every", opt.emit_every}};
  write_manifest(out_dir, "bench-memory", opt.seed, flags, {"memory.csv"});

  const BenchMemoryRow& final_row = rows.back();  // aggregate of the last step
  std::cout << "bench-memory: " << config.layers.size() << " layers, "
            << opt.prefill + opt.decode_steps << " tokens; final cache compression "
            << final_row.report.compression_ratio << "x\n"
            << "wrote " << (out_dir / "memory.csv").string() << "\n";
  return 0;
}

int cmd_bench_attention(const std::string& config_path, const BenchAttentionOptions& opt,
                        const std::string& out) {
  if (!config_path.empty()) {
    load_config_file(config_path);  // validated; trials sweep the uniform widths
  }
  const std::vector<AttentionTrialRow> rows = bench_attention(opt);

  const fs::path out_dir(out);
  fs::create_directories(out_dir);
  std::ostringstream os;
  write_attention_csv(os, rows, "manifest.json");
  write_file(out_dir / "attention_bench.csv", os.str());
  json flags{{"config", config_path}, {"trials", opt.trials},      {"heads", opt.heads},
             {"head_dim", opt.head_dim}, {"tokens", opt.tokens}};
  write_manifest(out_dir, "bench-attention", opt.seed, flags, {"attention_bench.csv"});

  double mse[5] = {0, 0, 0, 0, 0};
  double maxdev = 0.0, fused_us = 0.0, ref_us = 0.0;
  for (const AttentionTrialRow& r : rows) {
    mse[r.bits] += r.mse_vs_fp;
    maxdev = std::max(maxdev, r.fused_ref_maxdev);
    fused_us += r.fused_us;
    ref_us += r.reference_us;
  }
  std::cout << "bench-attention: " << opt.trials << " trials; mean MSE vs fp16-cache "
            << "2-bit=" << mse[2] / opt.trials << " 3-bit=" << mse[3] / opt.trials
            << " 4-bit=" << mse[4] / opt.trials << "\n"
            << "fused vs reference max deviation " << maxdev << "; mean wall-clock fused="
            << fused_us / rows.size() << "us reference=" << ref_us / rows.size() << "us\n"
            << "wrote " << (out_dir / "attention_bench.csv").string() << "\n";
  return 0;
}

int cmd_compare_allocations(const CompareOptions& opt, const std::string& out) {
  const std::vector<CompareRow> rows = compare_allocations(opt);

  const fs::path out_dir(out);
  fs::create_directories(out_dir);
  std::ostringstream os;
  write_compare_csv(os, rows, "manifest.json");
  write_file(out_dir / "compare.csv", os.str());
  json flags{{"seeds", opt.n_seeds},
             {"layers", opt.n_layers},
             {"high_fraction", opt.alloc.high_fraction},
             {"train_steps", opt.train_steps},
             {"prompts", opt.profile_prompts},
             {"eval_len", opt.eval_len}};
  write_manifest(out_dir, "compare-allocations", opt.seed0, flags, {"compare.csv"});

  double guided = 0.0, random_deg = 0.0;
  int wins = 0;
  for (const CompareRow& r : rows) {
    guided += r.degradation_guided;
    random_deg += r.degradation_random;
    wins += r.degradation_guided < r.degradation_random;
  }
  guided /= rows.size();
  random_deg /= rows.size();
  std::cout << "compare-allocations: " << rows.size() << " seeds at key/value bits "
            << rows[0].avg_key_bits << "/" << rows[0].avg_value_bits << "\n"
            << "mean loss degradation: gradient-guided=" << guided << " random=" << random_deg
            << " (guided better on " << wins << "/" << rows.size() << " seeds)\n"
            << "wrote " << (out_dir / "compare.csv").string() << "\n";
  return 0;
}

int cmd_generate(uint64_t seed, const CommonModelFlags& mf, const std::string& checkpoint,
                 const std::string& config_path, const std::string& prompt_csv, int max_new,
                 int train_steps, const std::string& out) {
  ToyHyperparams hp = mf.to_hp();
  hp.validate();
  const std::vector<int> prompt = parse_id_list(prompt_csv);
  for (int id : prompt) {
    if (id < 0 || id >= hp.vocab_size) {
      throw ConfigError("prompt id " + std::to_string(id) + " outside vocabulary");
    }
  }
  std::optional<ModelQuantConfig> config;
  if (!config_path.empty()) {
    config = load_config_file(config_path);
    if (static_cast<int>(config->layers.size()) != hp.n_layers) {
      throw ConfigError("config layer count does not match --layers");
    }
  }

  ToyTransformer model = load_or_init_model(checkpoint, hp, seed);
  if (train_steps > 0) train(model, train_steps, 0.7, seed * 31 + 5, 48, 8);

  const std::vector<int> tokens =
      generate(model, prompt, max_new, config ? &*config : nullptr);

  const fs::path out_dir(out);
  fs::create_directories(out_dir);
  std::ostringstream os;
  for (size_t i = 0; i < tokens.size(); ++i) os << (i ? " " : "") << tokens[i];
  os << "\n";
  write_file(out_dir / "tokens.txt", os.str());
  json flags{{"config", config_path}, {"checkpoint", checkpoint}, {"prompt", prompt_csv},
             {"max_new", max_new},    {"train_steps", train_steps}, {"layers", model.hp.n_layers}};
  write_manifest(out_dir, "generate", seed, flags, {"tokens.txt"});
  std::cout << os.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixed-precision KV-cache quantization toolkit"};
  app.require_subcommand(1);

  uint64_t seed = 42;
  std::string out = ".";
  std::string config_path, checkpoint;
  CommonModelFlags mf;
  BitAllocationParams alloc;

  // profile
  auto* profile = app.add_subcommand("profile", "gradient-norm layer profiling -> quant config");
  int prompts = 30, prompt_len = 64;
  profile->add_option("--seed", seed, "model init seed");
  profile->add_option("--layers", mf.layers, "model layer count")->capture_default_str();
  profile->add_option("--prompts", prompts, "profiling prompt count")->capture_default_str();
  profile->add_option("--prompt-len", prompt_len, "tokens per prompt")->capture_default_str();
  profile->add_option("--high-fraction", alloc.high_fraction, "fraction of high-bit layers")
      ->capture_default_str();
  profile->add_option("--group-size", alloc.group_size, "quantization group size")
      ->capture_default_str();
  profile->add_option("--bits-key-high", alloc.high_key_bits, "key bits for important layers")
      ->capture_default_str();
  profile->add_option("--bits-value-high", alloc.high_value_bits,
                      "value bits for important layers")
      ->capture_default_str();
  profile->add_option("--rpc-high", alloc.rpc_high, "recent-context ratio, high tier")
      ->capture_default_str();
  profile->add_option("--rpc-low", alloc.rpc_low, "recent-context ratio, low tier")
      ->capture_default_str();
  profile->add_option("--checkpoint", checkpoint, "profile this checkpoint instead of a fresh model");
  profile->add_option("--out", out, "output directory")->capture_default_str();

  // bench-memory
  auto* bm = app.add_subcommand("bench-memory", "stream synthetic KV, report compression");
  BenchMemoryOptions bm_opt;
  bm->add_option("--config", config_path, "quant config file")->required();
  bm->add_option("--seed", bm_opt.seed, "data seed");
  bm->add_option("--prefill", bm_opt.prefill, "prompt tokens")->capture_default_str();
  bm->add_option("--decode-steps", bm_opt.decode_steps, "decode appends")->capture_default_str();
  bm->add_option("--batch", bm_opt.batch, "batch size")->capture_default_str();
  bm->add_option("--heads", bm_opt.heads, "attention heads")->capture_default_str();
  bm->add_option("--head-dim", bm_opt.head_dim, "head dimension")->capture_default_str();
  bm->add_option("--emit-every", bm_opt.emit_every, "CSV row thinning")->capture_default_str();
  bm->add_option("--out", out, "output directory")->capture_default_str();

  // bench-attention
  auto* ba = app.add_subcommand("bench-attention",
                                "fused vs reference attention error and wall-clock");
  BenchAttentionOptions ba_opt;
  ba->add_option("--config", config_path, "quant config file (validated, recorded)");
  ba->add_option("--seed", ba_opt.seed, "data seed");
  ba->add_option("--trials", ba_opt.trials, "trials per bit width")->capture_default_str();
  ba->add_option("--heads", ba_opt.heads, "attention heads")->capture_default_str();
  ba->add_option("--head-dim", ba_opt.head_dim, "head dimension")->capture_default_str();
  ba->add_option("--tokens", ba_opt.tokens, "cached tokens per trial")->capture_default_str();
  ba->add_option("--out", out, "output directory")->capture_default_str();

  // compare-allocations
  auto* ca = app.add_subcommand("compare-allocations",
                                "gradient-guided vs random bit allocation, paired by seed");
  CompareOptions ca_opt;
  ca->add_option("--seeds", ca_opt.n_seeds, "number of paired trials")->capture_default_str();
  ca->add_option("--seed", ca_opt.seed0, "first seed");
  ca->add_option("--layers", ca_opt.n_layers, "toy model layers")->capture_default_str();
  ca->add_option("--high-fraction", ca_opt.alloc.high_fraction, "fraction of high-bit layers")
      ->capture_default_str();
  ca->add_option("--train-steps", ca_opt.train_steps, "training steps per seed")
      ->capture_default_str();
  ca->add_option("--prompts", ca_opt.profile_prompts, "profiling prompts per seed")
      ->capture_default_str();
  ca->add_option("--eval-len", ca_opt.eval_len, "evaluation sequence length")
      ->capture_default_str();
  ca->add_option("--bits-key-high", ca_opt.alloc.high_key_bits, "key bits, high tier")
      ->capture_default_str();
  ca->add_option("--bits-value-high", ca_opt.alloc.high_value_bits, "value bits, high tier")
      ->capture_default_str();
  ca->add_option("--rpc-high", ca_opt.alloc.rpc_high, "recent-context ratio, high tier")
      ->capture_default_str();
  ca->add_option("--rpc-low", ca_opt.alloc.rpc_low, "recent-context ratio, low tier")
      ->capture_default_str();
  ca->add_option("--group-size", ca_opt.alloc.group_size, "quantization group size")
      ->capture_default_str();
  ca->add_option("--out", out, "output directory")->capture_default_str();

  // generate
  auto* gen = app.add_subcommand("generate", "greedy decoding through the quantized cache");
  std::string prompt_csv;
  int max_new = 32, gen_train_steps = 0;
  gen->add_option("--seed", seed, "model init seed");
  gen->add_option("--layers", mf.layers, "model layer count")->capture_default_str();
  gen->add_option("--prompt", prompt_csv, "comma-separated token ids")->required();
  gen->add_option("--max-new", max_new, "tokens to generate")->capture_default_str();
  gen->add_option("--config", config_path, "quant config file (omit for full precision)");
  gen->add_option("--checkpoint", checkpoint, "model checkpoint to load");
  gen->add_option("--train-steps", gen_train_steps, "train briefly before generating")
      ->capture_default_str();
  gen->add_option("--out", out, "output directory")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (profile->parsed()) {
      return cmd_profile(seed, mf, checkpoint, prompts, prompt_len, alloc, out);
    }
    if (bm->parsed()) return cmd_bench_memory(config_path, bm_opt, out);
    if (ba->parsed()) return cmd_bench_attention(config_path, ba_opt, out);
    if (ca->parsed()) return cmd_compare_allocations(ca_opt, out);
    if (gen->parsed()) {
      return cmd_generate(seed, mf, checkpoint, config_path, prompt_csv, max_new,
                          gen_train_steps, out);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntimeError;
  }
  return 0;
}
