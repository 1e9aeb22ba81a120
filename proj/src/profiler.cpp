#include "kvmix/profiler.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace kvmix {

namespace {

double frobenius_norm(const std::vector<double>& m) {
  double ss = 0.0;
  for (double v : m) ss += v * v;
  return std::sqrt(ss);
}

// shortest text that parses back to the identical float
std::string float_str(float v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

ImportanceReport importance_scores(const ToyTransformer& m,
                                   const std::vector<std::vector<int>>& prompts) {
  if (prompts.empty()) throw std::invalid_argument("importance_scores: need at least one prompt");
  ImportanceReport report;
  report.n_layers = m.hp.n_layers;
  report.prompts = static_cast<int>(prompts.size());
  report.key_scores.assign(prompts.size(), std::vector<double>(m.hp.n_layers, 0.0));
  report.value_scores.assign(prompts.size(), std::vector<double>(m.hp.n_layers, 0.0));

  const int P = static_cast<int>(prompts.size());
#pragma omp parallel for schedule(dynamic)
  for (int p = 0; p < P; ++p) {
    const GradientBundle g = backward(m, prompts[p]);
    for (int l = 0; l < m.hp.n_layers; ++l) {
      report.key_scores[p][l] = frobenius_norm(g.grad_w_k[l]);
      report.value_scores[p][l] = frobenius_norm(g.grad_w_v[l]);
    }
  }

  report.key_mean.assign(m.hp.n_layers, 0.0);
  report.value_mean.assign(m.hp.n_layers, 0.0);
  for (int p = 0; p < P; ++p) {
    for (int l = 0; l < m.hp.n_layers; ++l) {
      report.key_mean[l] += report.key_scores[p][l];
      report.value_mean[l] += report.value_scores[p][l];
    }
  }
  for (int l = 0; l < m.hp.n_layers; ++l) {
    report.key_mean[l] /= P;
    report.value_mean[l] /= P;
  }
  return report;
}

namespace {

// indices of the n_high largest scores, ties toward the lower index
std::vector<bool> top_set(const std::vector<double>& scores, int n_high) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&scores](int a, int b) { return scores[a] > scores[b]; });
  std::vector<bool> high(scores.size(), false);
  for (int i = 0; i < n_high; ++i) high[order[i]] = true;
  return high;
}

void check_alloc_params(const BitAllocationParams& p) {
  if (p.high_fraction < 0.0 || p.high_fraction > 1.0) {
    throw std::invalid_argument("high_fraction must lie in [0, 1]");
  }
}

ModelQuantConfig assemble(const std::vector<bool>& key_high, const std::vector<bool>& value_high,
                          const BitAllocationParams& p) {
  ModelQuantConfig cfg;
  cfg.layers.resize(key_high.size());
  for (size_t i = 0; i < key_high.size(); ++i) {
    LayerQuantConfig& lc = cfg.layers[i];
    lc.layer_index = static_cast<int>(i);
    lc.key_bits = key_high[i] ? p.high_key_bits : p.low_bits;
    lc.value_bits = value_high[i] ? p.high_value_bits : p.low_bits;
    lc.key_rpc_ratio = key_high[i] ? p.rpc_high : p.rpc_low;
    lc.value_rpc_ratio = value_high[i] ? p.rpc_high : p.rpc_low;
    lc.group_size = p.group_size;
  }
  cfg.validate();
  return cfg;
}

}  // namespace

ModelQuantConfig allocate_bits(const ImportanceReport& report, const BitAllocationParams& p) {
  check_alloc_params(p);
  const int n = report.n_layers;
  const int n_high = static_cast<int>(std::floor(p.high_fraction * n));
  ModelQuantConfig cfg = assemble(top_set(report.key_mean, n_high),
                                  top_set(report.value_mean, n_high), p);
  cfg.provenance = Provenance::kGradientGuided;
  return cfg;
}

std::pair<double, double> average_bits(const ModelQuantConfig& config) {
  if (config.layers.empty()) return {0.0, 0.0};
  double k = 0.0, v = 0.0;
  for (const LayerQuantConfig& lc : config.layers) {
    k += lc.key_bits;
    v += lc.value_bits;
  }
  const double n = static_cast<double>(config.layers.size());
  return {k / n, v / n};
}

ModelQuantConfig random_allocation(int n_layers, const BitAllocationParams& p, uint64_t seed) {
  check_alloc_params(p);
  const int n_high = static_cast<int>(std::floor(p.high_fraction * n_layers));
  Rng rng(seed);
  auto pick = [&rng, n_layers, n_high]() {
    std::vector<int> idx(n_layers);
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<bool> high(n_layers, false);
    for (int i = 0; i < n_high; ++i) {
      const int j = i + rng.uniform_int(0, n_layers - 1 - i);
      std::swap(idx[i], idx[j]);
      high[idx[i]] = true;
    }
    return high;
  };
  const std::vector<bool> key_high = pick();
  const std::vector<bool> value_high = pick();
  ModelQuantConfig cfg = assemble(key_high, value_high, p);
  cfg.provenance = Provenance::kRandom;
  cfg.random_seed = seed;
  return cfg;
}

std::vector<LayerWeightStats> weight_stats(const ToyTransformer& m) {
  std::vector<LayerWeightStats> stats(m.hp.n_layers);
  for (int l = 0; l < m.hp.n_layers; ++l) {
    const LayerWeights& w = m.layers[l];
    stats[l].norm_k = frobenius_norm(w.w_k);
    stats[l].norm_v = frobenius_norm(w.w_v);
    const auto [kmin, kmax] = std::minmax_element(w.w_k.begin(), w.w_k.end());
    const auto [vmin, vmax] = std::minmax_element(w.w_v.begin(), w.w_v.end());
    stats[l].range_k = *kmax - *kmin;
    stats[l].range_v = *vmax - *vmin;
  }
  return stats;
}

void write_config(std::ostream& os, const ModelQuantConfig& config) {
  os << "kvmix-config v1\n";
  os << "provenance ";
  switch (config.provenance) {
    case Provenance::kGradientGuided:
      os << "gradient-guided";
      break;
    case Provenance::kRandom:
      os << "random seed=" << config.random_seed;
      break;
    case Provenance::kUniformBits:
      os << "uniform";
      break;
  }
  os << "\n";
  os << "n_layers " << config.layers.size() << "\n";
  os << "group_size " << (config.layers.empty() ? 32 : config.layers[0].group_size) << "\n";
  for (const LayerQuantConfig& lc : config.layers) {
    os << "layer " << lc.layer_index << " key_bits " << lc.key_bits << " value_bits "
       << lc.value_bits << " key_rpc " << float_str(lc.key_rpc_ratio) << " value_rpc "
       << float_str(lc.value_rpc_ratio) << "\n";
  }
}

namespace {

[[noreturn]] void config_error(int line_no, const std::string& why) {
  throw std::runtime_error("config line " + std::to_string(line_no) + ": " + why);
}

}  // namespace

ModelQuantConfig read_config(std::istream& is) {
  ModelQuantConfig cfg;
  std::string line;
  int line_no = 0;
  int declared_layers = -1, declared_group = -1;
  bool saw_header = false, saw_provenance = false;

  while (std::getline(is, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word)) continue;

    if (!saw_header) {
      std::string version;
      if (word != "kvmix-config" || !(ls >> version) || version != "v1") {
        config_error(line_no, "expected 'kvmix-config v1' header");
      }
      saw_header = true;
    } else if (word == "provenance") {
      std::string kind;
      if (!(ls >> kind)) config_error(line_no, "missing provenance kind");
      if (kind == "gradient-guided") {
        cfg.provenance = Provenance::kGradientGuided;
      } else if (kind == "uniform") {
        cfg.provenance = Provenance::kUniformBits;
      } else if (kind.rfind("random", 0) == 0) {
        cfg.provenance = Provenance::kRandom;
        std::string seed_part;
        if (!(ls >> seed_part) || seed_part.rfind("seed=", 0) != 0) {
          config_error(line_no, "random provenance needs seed=<u64>");
        }
        cfg.random_seed = std::stoull(seed_part.substr(5));
      } else {
        config_error(line_no, "unknown provenance '" + kind + "'");
      }
      saw_provenance = true;
    } else if (word == "n_layers") {
      if (!(ls >> declared_layers) || declared_layers < 1) {
        config_error(line_no, "bad n_layers");
      }
    } else if (word == "group_size") {
      if (!(ls >> declared_group) || declared_group < 1) {
        config_error(line_no, "bad group_size");
      }
    } else if (word == "layer") {
      LayerQuantConfig lc;
      std::string kb, vb, kr, vr;
      if (!(ls >> lc.layer_index >> kb >> lc.key_bits >> vb >> lc.value_bits >> kr >>
            lc.key_rpc_ratio >> vr >> lc.value_rpc_ratio) ||
          kb != "key_bits" || vb != "value_bits" || kr != "key_rpc" || vr != "value_rpc") {
        config_error(line_no, "malformed layer record");
      }
      lc.group_size = declared_group > 0 ? declared_group : 32;
      cfg.layers.push_back(lc);
    } else {
      config_error(line_no, "unknown directive '" + word + "'");
    }
  }
  if (!saw_header) throw std::runtime_error("config: empty file or missing header");
  if (!saw_provenance) throw std::runtime_error("config: missing provenance");
  if (declared_layers >= 0 && declared_layers != static_cast<int>(cfg.layers.size())) {
    throw std::runtime_error("config: n_layers says " + std::to_string(declared_layers) +
                             " but found " + std::to_string(cfg.layers.size()) + " records");
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(std::string("config: ") + e.what());
  }
  return cfg;
}

void write_importance_csv(std::ostream& os, const ImportanceReport& report,
                          std::string_view manifest_ref) {
  os << "layer,prompt,score_key,score_value,manifest\n";
  os << std::setprecision(17);
  for (int p = 0; p < report.prompts; ++p) {
    for (int l = 0; l < report.n_layers; ++l) {
      os << l << ',' << p << ',' << report.key_scores[p][l] << ',' << report.value_scores[p][l]
         << ',' << manifest_ref << '\n';
    }
  }
  for (int l = 0; l < report.n_layers; ++l) {
    os << l << ",mean," << report.key_mean[l] << ',' << report.value_mean[l] << ','
       << manifest_ref << '\n';
  }
}

void write_weight_stats_csv(std::ostream& os, const std::vector<LayerWeightStats>& stats,
                            std::string_view manifest_ref) {
  os << "layer,norm_k,norm_v,range_k,range_v,manifest\n";
  os << std::setprecision(17);
  for (size_t l = 0; l < stats.size(); ++l) {
    os << l << ',' << stats[l].norm_k << ',' << stats[l].norm_v << ',' << stats[l].range_k << ','
       << stats[l].range_v << ',' << manifest_ref << '\n';
  }
}

}  // namespace kvmix
