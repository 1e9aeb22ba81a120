#include "kvmix/toymodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "kvmix/attention.hpp"

namespace kvmix {

namespace {

constexpr double kNormEps = 1e-6;
constexpr float kNormEpsF = 1e-6f;

void check_tokens(const ToyHyperparams& hp, std::span<const int> tokens, size_t min_len) {
  if (tokens.size() < min_len) {
    throw std::invalid_argument("token sequence too short (need at least " +
                                std::to_string(min_len) + ")");
  }
  if (tokens.size() > static_cast<size_t>(hp.max_seq)) {
    throw std::invalid_argument("token sequence exceeds max_seq");
  }
  for (int id : tokens) {
    if (id < 0 || id >= hp.vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(id) + " outside vocabulary");
    }
  }
}

// y_j += sum_i x_i W[i][j]
void matvec_acc(const double* x, const double* w, int in_dim, int out_dim, double* y) {
  for (int i = 0; i < in_dim; ++i) {
    const double xi = x[i];
    const double* wrow = w + static_cast<size_t>(i) * out_dim;
    for (int j = 0; j < out_dim; ++j) y[j] += xi * wrow[j];
  }
}

void rmsnorm_rows(const double* x, const double* gain, int n, int dm, double* h,
                  double* inv_r) {
  for (int t = 0; t < n; ++t) {
    const double* xt = x + static_cast<size_t>(t) * dm;
    double ss = 0.0;
    for (int i = 0; i < dm; ++i) ss += xt[i] * xt[i];
    inv_r[t] = 1.0 / std::sqrt(ss / dm + kNormEps);
    double* ht = h + static_cast<size_t>(t) * dm;
    for (int i = 0; i < dm; ++i) ht[i] = xt[i] * gain[i] * inv_r[t];
  }
}

// dx_i += dy_i g_i / r - x_i * (sum_j dy_j g_j x_j) / (dm r^3);  dg_i += dy_i x_i / r
void rmsnorm_backward(const double* x, const double* gain, const double* inv_r,
                      const double* dy, int n, int dm, double* dx, double* dgain) {
  for (int t = 0; t < n; ++t) {
    const double ir = inv_r[t];
    const double* xt = x + static_cast<size_t>(t) * dm;
    const double* dyt = dy + static_cast<size_t>(t) * dm;
    double s = 0.0;
    for (int i = 0; i < dm; ++i) s += dyt[i] * gain[i] * xt[i];
    const double coef = s * ir * ir * ir / dm;
    double* dxt = dx + static_cast<size_t>(t) * dm;
    for (int i = 0; i < dm; ++i) {
      dxt[i] += dyt[i] * gain[i] * ir - xt[i] * coef;
      dgain[i] += dyt[i] * xt[i] * ir;
    }
  }
}

// dW[i][j] += sum_t in[t][i] dout[t][j];  din[t][i] += sum_j dout[t][j] W[i][j]
void matvec_backward(const double* in, const double* dout, const double* w, int n, int in_dim,
                     int out_dim, double* dw, double* din) {
  for (int t = 0; t < n; ++t) {
    const double* it = in + static_cast<size_t>(t) * in_dim;
    const double* dot = dout + static_cast<size_t>(t) * out_dim;
    double* dit = din + static_cast<size_t>(t) * in_dim;
    for (int i = 0; i < in_dim; ++i) {
      const double xi = it[i];
      const double* wrow = w + static_cast<size_t>(i) * out_dim;
      double* dwrow = dw + static_cast<size_t>(i) * out_dim;
      double acc = 0.0;
      for (int j = 0; j < out_dim; ++j) {
        dwrow[j] += xi * dot[j];
        acc += dot[j] * wrow[j];
      }
      dit[i] += acc;
    }
  }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
  const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
  return cdf + x * pdf;
}

struct LayerTrace {
  std::vector<double> x_in, h, q, k, v, probs, attn, x_mid, h2, m1, g1;
  std::vector<double> inv_r1, inv_r2;
};

struct ForwardTrace {
  int n = 0;
  std::vector<LayerTrace> layers;
  std::vector<double> x_final, f, logits;
  std::vector<double> inv_r3;
  double loss = 0.0;
};

ForwardTrace run_forward(const ToyTransformer& m, std::span<const int> tokens) {
  const ToyHyperparams& hp = m.hp;
  check_tokens(hp, tokens, 2);
  const int n = static_cast<int>(tokens.size());
  const int dm = hp.d_model, dff = hp.d_ff, nh = hp.n_heads, D = hp.head_dim;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));

  ForwardTrace tr;
  tr.n = n;
  tr.layers.resize(hp.n_layers);

  std::vector<double> x(static_cast<size_t>(n) * dm);
  for (int t = 0; t < n; ++t) {
    const double* emb = m.embedding.data() + static_cast<size_t>(tokens[t]) * dm;
    const double* pos = m.pos_embedding.data() + static_cast<size_t>(t) * dm;
    for (int i = 0; i < dm; ++i) x[static_cast<size_t>(t) * dm + i] = emb[i] + pos[i];
  }

  for (int l = 0; l < hp.n_layers; ++l) {
    const LayerWeights& w = m.layers[l];
    LayerTrace& lt = tr.layers[l];
    lt.x_in = x;
    lt.inv_r1.resize(n);
    lt.h.assign(static_cast<size_t>(n) * dm, 0.0);
    rmsnorm_rows(lt.x_in.data(), w.attn_norm_gain.data(), n, dm, lt.h.data(), lt.inv_r1.data());

    lt.q.assign(static_cast<size_t>(n) * dm, 0.0);
    lt.k.assign(static_cast<size_t>(n) * dm, 0.0);
    lt.v.assign(static_cast<size_t>(n) * dm, 0.0);
    for (int t = 0; t < n; ++t) {
      const double* ht = lt.h.data() + static_cast<size_t>(t) * dm;
      matvec_acc(ht, w.w_q.data(), dm, dm, lt.q.data() + static_cast<size_t>(t) * dm);
      matvec_acc(ht, w.w_k.data(), dm, dm, lt.k.data() + static_cast<size_t>(t) * dm);
      matvec_acc(ht, w.w_v.data(), dm, dm, lt.v.data() + static_cast<size_t>(t) * dm);
    }

    lt.probs.assign(static_cast<size_t>(nh) * n * n, 0.0);
    lt.attn.assign(static_cast<size_t>(n) * dm, 0.0);
    for (int hh = 0; hh < nh; ++hh) {
      for (int t = 0; t < n; ++t) {
        double* prow = lt.probs.data() + (static_cast<size_t>(hh) * n + t) * n;
        const double* qt = lt.q.data() + static_cast<size_t>(t) * dm + hh * D;
        double mx = -1e300;
        for (int u = 0; u <= t; ++u) {
          const double* ku = lt.k.data() + static_cast<size_t>(u) * dm + hh * D;
          double s = 0.0;
          for (int d = 0; d < D; ++d) s += qt[d] * ku[d];
          s *= inv_sqrt_d;
          prow[u] = s;
          mx = s > mx ? s : mx;
        }
        double sum = 0.0;
        for (int u = 0; u <= t; ++u) {
          prow[u] = std::exp(prow[u] - mx);
          sum += prow[u];
        }
        const double inv = 1.0 / sum;
        for (int u = 0; u <= t; ++u) prow[u] *= inv;
        double* at = lt.attn.data() + static_cast<size_t>(t) * dm + hh * D;
        for (int u = 0; u <= t; ++u) {
          const double p = prow[u];
          const double* vu = lt.v.data() + static_cast<size_t>(u) * dm + hh * D;
          for (int d = 0; d < D; ++d) at[d] += p * vu[d];
        }
      }
    }

    lt.x_mid = lt.x_in;
    for (int t = 0; t < n; ++t) {
      matvec_acc(lt.attn.data() + static_cast<size_t>(t) * dm, w.w_o.data(), dm, dm,
                 lt.x_mid.data() + static_cast<size_t>(t) * dm);
    }

    lt.inv_r2.resize(n);
    lt.h2.assign(static_cast<size_t>(n) * dm, 0.0);
    rmsnorm_rows(lt.x_mid.data(), w.mlp_norm_gain.data(), n, dm, lt.h2.data(), lt.inv_r2.data());

    lt.m1.assign(static_cast<size_t>(n) * dff, 0.0);
    for (int t = 0; t < n; ++t) {
      matvec_acc(lt.h2.data() + static_cast<size_t>(t) * dm, w.w_ff_in.data(), dm, dff,
                 lt.m1.data() + static_cast<size_t>(t) * dff);
    }
    lt.g1.resize(static_cast<size_t>(n) * dff);
    for (size_t i = 0; i < lt.m1.size(); ++i) lt.g1[i] = gelu(lt.m1[i]);

    x = lt.x_mid;
    for (int t = 0; t < n; ++t) {
      matvec_acc(lt.g1.data() + static_cast<size_t>(t) * dff, w.w_ff_out.data(), dff, dm,
                 x.data() + static_cast<size_t>(t) * dm);
    }
  }

  tr.x_final = x;
  tr.inv_r3.resize(n);
  tr.f.assign(static_cast<size_t>(n) * dm, 0.0);
  rmsnorm_rows(tr.x_final.data(), m.final_norm_gain.data(), n, dm, tr.f.data(),
               tr.inv_r3.data());

  tr.logits.assign(static_cast<size_t>(n) * hp.vocab_size, 0.0);
  for (int t = 0; t < n; ++t) {
    matvec_acc(tr.f.data() + static_cast<size_t>(t) * dm, m.unembedding.data(), dm,
               hp.vocab_size, tr.logits.data() + static_cast<size_t>(t) * hp.vocab_size);
  }

  double loss = 0.0;
  for (int t = 0; t < n - 1; ++t) {
    const double* lrow = tr.logits.data() + static_cast<size_t>(t) * hp.vocab_size;
    double mx = lrow[0];
    for (int v = 1; v < hp.vocab_size; ++v) mx = lrow[v] > mx ? lrow[v] : mx;
    double sum = 0.0;
    for (int v = 0; v < hp.vocab_size; ++v) sum += std::exp(lrow[v] - mx);
    loss += mx + std::log(sum) - lrow[tokens[t + 1]];
  }
  tr.loss = loss / (n - 1);
  return tr;
}

FullGradients run_backward(const ToyTransformer& m, std::span<const int> tokens,
                           const ForwardTrace& tr) {
  const ToyHyperparams& hp = m.hp;
  const int n = tr.n;
  const int dm = hp.d_model, dff = hp.d_ff, nh = hp.n_heads, D = hp.head_dim, V = hp.vocab_size;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));

  FullGradients g;
  g.loss = tr.loss;
  g.embedding.assign(m.embedding.size(), 0.0);
  g.pos_embedding.assign(m.pos_embedding.size(), 0.0);
  g.final_norm_gain.assign(m.final_norm_gain.size(), 0.0);
  g.unembedding.assign(m.unembedding.size(), 0.0);
  g.layers.resize(hp.n_layers);
  for (int l = 0; l < hp.n_layers; ++l) {
    const LayerWeights& w = m.layers[l];
    auto& lg = g.layers[l];
    lg.w_q.assign(w.w_q.size(), 0.0);
    lg.w_k.assign(w.w_k.size(), 0.0);
    lg.w_v.assign(w.w_v.size(), 0.0);
    lg.w_o.assign(w.w_o.size(), 0.0);
    lg.w_ff_in.assign(w.w_ff_in.size(), 0.0);
    lg.w_ff_out.assign(w.w_ff_out.size(), 0.0);
    lg.attn_norm_gain.assign(static_cast<size_t>(dm), 0.0);
    lg.mlp_norm_gain.assign(static_cast<size_t>(dm), 0.0);
  }

  // softmax cross-entropy gradient at the logits
  std::vector<double> dlogits(static_cast<size_t>(n) * V, 0.0);
  const double inv_preds = 1.0 / (n - 1);
  for (int t = 0; t < n - 1; ++t) {
    const double* lrow = tr.logits.data() + static_cast<size_t>(t) * V;
    double* drow = dlogits.data() + static_cast<size_t>(t) * V;
    double mx = lrow[0];
    for (int v = 1; v < V; ++v) mx = lrow[v] > mx ? lrow[v] : mx;
    double sum = 0.0;
    for (int v = 0; v < V; ++v) sum += std::exp(lrow[v] - mx);
    const double inv = 1.0 / sum;
    for (int v = 0; v < V; ++v) drow[v] = std::exp(lrow[v] - mx) * inv * inv_preds;
    drow[tokens[t + 1]] -= inv_preds;
  }

  std::vector<double> df(static_cast<size_t>(n) * dm, 0.0);
  matvec_backward(tr.f.data(), dlogits.data(), m.unembedding.data(), n, dm, V,
                  g.unembedding.data(), df.data());

  std::vector<double> dx(static_cast<size_t>(n) * dm, 0.0);
  rmsnorm_backward(tr.x_final.data(), m.final_norm_gain.data(), tr.inv_r3.data(), df.data(), n,
                   dm, dx.data(), g.final_norm_gain.data());

  std::vector<double> dp_row(n);
  for (int l = hp.n_layers - 1; l >= 0; --l) {
    const LayerWeights& w = m.layers[l];
    const LayerTrace& lt = tr.layers[l];
    auto& lg = g.layers[l];

    // MLP block: x = x_mid + gelu(h2 W_in) W_out
    std::vector<double> dg1(static_cast<size_t>(n) * dff, 0.0);
    matvec_backward(lt.g1.data(), dx.data(), w.w_ff_out.data(), n, dff, dm, lg.w_ff_out.data(),
                    dg1.data());
    std::vector<double> dm1(static_cast<size_t>(n) * dff);
    for (size_t i = 0; i < dm1.size(); ++i) dm1[i] = dg1[i] * gelu_grad(lt.m1[i]);
    std::vector<double> dh2(static_cast<size_t>(n) * dm, 0.0);
    matvec_backward(lt.h2.data(), dm1.data(), w.w_ff_in.data(), n, dm, dff, lg.w_ff_in.data(),
                    dh2.data());
    // residual: dx (w.r.t. x_mid) keeps flowing, plus the norm branch
    rmsnorm_backward(lt.x_mid.data(), w.mlp_norm_gain.data(), lt.inv_r2.data(), dh2.data(), n,
                     dm, dx.data(), lg.mlp_norm_gain.data());

    // attention block: x_mid = x_in + attn Wo
    std::vector<double> dattn(static_cast<size_t>(n) * dm, 0.0);
    matvec_backward(lt.attn.data(), dx.data(), w.w_o.data(), n, dm, dm, lg.w_o.data(),
                    dattn.data());

    std::vector<double> dq(static_cast<size_t>(n) * dm, 0.0);
    std::vector<double> dk(static_cast<size_t>(n) * dm, 0.0);
    std::vector<double> dv(static_cast<size_t>(n) * dm, 0.0);
    for (int hh = 0; hh < nh; ++hh) {
      for (int t = 0; t < n; ++t) {
        const double* dat = dattn.data() + static_cast<size_t>(t) * dm + hh * D;
        const double* prow = lt.probs.data() + (static_cast<size_t>(hh) * n + t) * n;
        double sdot = 0.0;
        for (int u = 0; u <= t; ++u) {
          const double* vu = lt.v.data() + static_cast<size_t>(u) * dm + hh * D;
          double* dvu = dv.data() + static_cast<size_t>(u) * dm + hh * D;
          const double p = prow[u];
          double dp = 0.0;
          for (int d = 0; d < D; ++d) {
            dp += dat[d] * vu[d];
            dvu[d] += p * dat[d];
          }
          dp_row[u] = dp;
          sdot += p * dp;
        }
        const double* qt = lt.q.data() + static_cast<size_t>(t) * dm + hh * D;
        double* dqt = dq.data() + static_cast<size_t>(t) * dm + hh * D;
        for (int u = 0; u <= t; ++u) {
          const double ds = prow[u] * (dp_row[u] - sdot) * inv_sqrt_d;
          const double* ku = lt.k.data() + static_cast<size_t>(u) * dm + hh * D;
          double* dku = dk.data() + static_cast<size_t>(u) * dm + hh * D;
          for (int d = 0; d < D; ++d) {
            dqt[d] += ds * ku[d];
            dku[d] += ds * qt[d];
          }
        }
      }
    }

    std::vector<double> dh(static_cast<size_t>(n) * dm, 0.0);
    matvec_backward(lt.h.data(), dq.data(), w.w_q.data(), n, dm, dm, lg.w_q.data(), dh.data());
    matvec_backward(lt.h.data(), dk.data(), w.w_k.data(), n, dm, dm, lg.w_k.data(), dh.data());
    matvec_backward(lt.h.data(), dv.data(), w.w_v.data(), n, dm, dm, lg.w_v.data(), dh.data());

    rmsnorm_backward(lt.x_in.data(), w.attn_norm_gain.data(), lt.inv_r1.data(), dh.data(), n, dm,
                     dx.data(), lg.attn_norm_gain.data());
  }

  for (int t = 0; t < n; ++t) {
    const double* dxt = dx.data() + static_cast<size_t>(t) * dm;
    double* demb = g.embedding.data() + static_cast<size_t>(tokens[t]) * dm;
    double* dpos = g.pos_embedding.data() + static_cast<size_t>(t) * dm;
    for (int i = 0; i < dm; ++i) {
      demb[i] += dxt[i];
      dpos[i] += dxt[i];
    }
  }
  return g;
}

}  // namespace

void ToyHyperparams::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("vocab_size must be >= 2");
  if (n_layers < 1) throw std::invalid_argument("n_layers must be >= 1");
  if (n_heads < 1 || head_dim < 1) throw std::invalid_argument("invalid head configuration");
  if (d_model != n_heads * head_dim) {
    throw std::invalid_argument("d_model must equal n_heads * head_dim");
  }
  if (d_ff < 1) throw std::invalid_argument("d_ff must be >= 1");
  if (max_seq < 2) throw std::invalid_argument("max_seq must be >= 2");
}

ToyTransformer init_model(const ToyHyperparams& hp, uint64_t seed) {
  hp.validate();
  ToyTransformer m;
  m.hp = hp;
  m.seed = seed;
  Rng rng(seed);
  auto fill_normal = [&rng](std::vector<double>& v, size_t len, double std_dev) {
    v.resize(len);
    for (double& x : v) x = std_dev * rng.normal();
  };
  const int dm = hp.d_model;
  fill_normal(m.embedding, static_cast<size_t>(hp.vocab_size) * dm, 0.02);
  fill_normal(m.pos_embedding, static_cast<size_t>(hp.max_seq) * dm, 0.01);
  m.layers.resize(hp.n_layers);
  for (LayerWeights& w : m.layers) {
    // query/key projections start hotter so attention logits clear the
    // noise floor early; training stalls on the uniform plateau otherwise
    fill_normal(w.w_q, static_cast<size_t>(dm) * dm, 0.06);
    fill_normal(w.w_k, static_cast<size_t>(dm) * dm, 0.06);
    fill_normal(w.w_v, static_cast<size_t>(dm) * dm, 0.02);
    fill_normal(w.w_o, static_cast<size_t>(dm) * dm, 0.02);
    fill_normal(w.w_ff_in, static_cast<size_t>(dm) * hp.d_ff, 0.02);
    fill_normal(w.w_ff_out, static_cast<size_t>(hp.d_ff) * dm, 0.02);
    w.attn_norm_gain.assign(dm, 1.0);
    w.mlp_norm_gain.assign(dm, 1.0);
  }
  m.final_norm_gain.assign(dm, 1.0);
  fill_normal(m.unembedding, static_cast<size_t>(dm) * hp.vocab_size, 0.02);
  return m;
}

double forward_loss(const ToyTransformer& m, std::span<const int> tokens) {
  return run_forward(m, tokens).loss;
}

FullGradients backward_full(const ToyTransformer& m, std::span<const int> tokens) {
  const ForwardTrace tr = run_forward(m, tokens);
  return run_backward(m, tokens, tr);
}

GradientBundle backward(const ToyTransformer& m, std::span<const int> tokens) {
  FullGradients g = backward_full(m, tokens);
  GradientBundle b;
  b.grad_w_k.reserve(g.layers.size());
  b.grad_w_v.reserve(g.layers.size());
  for (auto& lg : g.layers) {
    b.grad_w_k.push_back(std::move(lg.w_k));
    b.grad_w_v.push_back(std::move(lg.w_v));
  }
  return b;
}

std::vector<int> synth_sequence(Rng& rng, int len, int vocab) {
  std::vector<int> motif(kMotifLen);
  for (int& t : motif) t = rng.uniform_int(0, vocab - 1);
  std::vector<int> seq(len);
  for (int i = 0; i < len; ++i) seq[i] = motif[i % kMotifLen];
  return seq;
}

namespace {

void add_into(std::vector<double>& acc, const std::vector<double>& g) {
  for (size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

void accumulate(FullGradients& acc, const FullGradients& g) {
  add_into(acc.embedding, g.embedding);
  add_into(acc.pos_embedding, g.pos_embedding);
  add_into(acc.final_norm_gain, g.final_norm_gain);
  add_into(acc.unembedding, g.unembedding);
  for (size_t l = 0; l < acc.layers.size(); ++l) {
    add_into(acc.layers[l].w_q, g.layers[l].w_q);
    add_into(acc.layers[l].w_k, g.layers[l].w_k);
    add_into(acc.layers[l].w_v, g.layers[l].w_v);
    add_into(acc.layers[l].w_o, g.layers[l].w_o);
    add_into(acc.layers[l].w_ff_in, g.layers[l].w_ff_in);
    add_into(acc.layers[l].w_ff_out, g.layers[l].w_ff_out);
    add_into(acc.layers[l].attn_norm_gain, g.layers[l].attn_norm_gain);
    add_into(acc.layers[l].mlp_norm_gain, g.layers[l].mlp_norm_gain);
  }
  acc.loss += g.loss;
}

}  // namespace

double train(ToyTransformer& m, int steps, double lr, uint64_t data_seed, int seq_len,
             int batch) {
  if (seq_len < 2 || seq_len > m.hp.max_seq) {
    throw std::invalid_argument("train: invalid sequence length");
  }
  if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
  Rng rng(data_seed);
  double last_loss = 0.0;
  for (int step = 0; step < steps; ++step) {
    FullGradients acc;
    for (int b = 0; b < batch; ++b) {
      const std::vector<int> seq = synth_sequence(rng, seq_len, m.hp.vocab_size);
      FullGradients g = backward_full(m, seq);
      if (b == 0) {
        acc = std::move(g);
      } else {
        accumulate(acc, g);
      }
    }
    last_loss = acc.loss / batch;
    const double scale = lr / batch;
    auto apply = [scale](std::vector<double>& p, const std::vector<double>& g) {
      for (size_t i = 0; i < p.size(); ++i) p[i] -= scale * g[i];
    };
    apply(m.embedding, acc.embedding);
    apply(m.pos_embedding, acc.pos_embedding);
    apply(m.final_norm_gain, acc.final_norm_gain);
    apply(m.unembedding, acc.unembedding);
    for (int l = 0; l < m.hp.n_layers; ++l) {
      LayerWeights& w = m.layers[l];
      auto& lg = acc.layers[l];
      apply(w.w_q, lg.w_q);
      apply(w.w_k, lg.w_k);
      apply(w.w_v, lg.w_v);
      apply(w.w_o, lg.w_o);
      apply(w.w_ff_in, lg.w_ff_in);
      apply(w.w_ff_out, lg.w_ff_out);
      apply(w.attn_norm_gain, lg.attn_norm_gain);
      apply(w.mlp_norm_gain, lg.mlp_norm_gain);
    }
  }
  return last_loss;
}

// ---- float generation path ---------------------------------------------

ToyTransformerF32 ToyTransformerF32::from(const ToyTransformer& m) {
  ToyTransformerF32 f;
  f.hp = m.hp;
  auto cast = [](const std::vector<double>& src) {
    std::vector<float> dst(src.size());
    for (size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<float>(src[i]);
    return dst;
  };
  f.embedding = cast(m.embedding);
  f.pos_embedding = cast(m.pos_embedding);
  f.layers.resize(m.layers.size());
  for (size_t l = 0; l < m.layers.size(); ++l) {
    const LayerWeights& w = m.layers[l];
    auto& fw = f.layers[l];
    fw.w_q = cast(w.w_q);
    fw.w_k = cast(w.w_k);
    fw.w_v = cast(w.w_v);
    fw.w_o = cast(w.w_o);
    fw.w_ff_in = cast(w.w_ff_in);
    fw.w_ff_out = cast(w.w_ff_out);
    fw.attn_norm_gain = cast(w.attn_norm_gain);
    fw.mlp_norm_gain = cast(w.mlp_norm_gain);
  }
  f.final_norm_gain = cast(m.final_norm_gain);
  f.unembedding = cast(m.unembedding);
  return f;
}

namespace {

void matvec_acc_f(const float* x, const float* w, int in_dim, int out_dim, float* y) {
  for (int i = 0; i < in_dim; ++i) {
    const float xi = x[i];
    const float* wrow = w + static_cast<size_t>(i) * out_dim;
    for (int j = 0; j < out_dim; ++j) y[j] += xi * wrow[j];
  }
}

void rmsnorm_row_f(const float* x, const float* gain, int dm, float* h) {
  float ss = 0.0f;
  for (int i = 0; i < dm; ++i) ss += x[i] * x[i];
  const float inv_r = 1.0f / std::sqrt(ss / static_cast<float>(dm) + kNormEpsF);
  for (int i = 0; i < dm; ++i) h[i] = x[i] * gain[i] * inv_r;
}

float gelu_f(float x) { return 0.5f * x * (1.0f + std::erf(x * 0.70710678f)); }

int argmax(std::span<const float> v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace

FloatForward causal_forward_f32(const ToyTransformerF32& m, std::span<const int> tokens) {
  const ToyHyperparams& hp = m.hp;
  check_tokens(hp, tokens, 1);
  const int n = static_cast<int>(tokens.size());
  const int dm = hp.d_model, dff = hp.d_ff, nh = hp.n_heads, D = hp.head_dim;
  const float inv = attention_inv_scale(D);

  FloatForward out;
  out.layer_keys.reserve(hp.n_layers);
  out.layer_values.reserve(hp.n_layers);

  std::vector<float> x(static_cast<size_t>(n) * dm);
  for (int t = 0; t < n; ++t) {
    const float* emb = m.embedding.data() + static_cast<size_t>(tokens[t]) * dm;
    const float* pos = m.pos_embedding.data() + static_cast<size_t>(t) * dm;
    for (int i = 0; i < dm; ++i) x[static_cast<size_t>(t) * dm + i] = emb[i] + pos[i];
  }

  std::vector<float> h(static_cast<size_t>(n) * dm);
  std::vector<float> q(static_cast<size_t>(n) * dm), k(static_cast<size_t>(n) * dm),
      v(static_cast<size_t>(n) * dm);
  std::vector<float> attn(static_cast<size_t>(n) * dm);
  std::vector<float> srow;
  std::vector<float> m1(static_cast<size_t>(n) * dff);

  for (int l = 0; l < hp.n_layers; ++l) {
    const auto& w = m.layers[l];
    for (int t = 0; t < n; ++t) {
      rmsnorm_row_f(x.data() + static_cast<size_t>(t) * dm, w.attn_norm_gain.data(), dm,
                    h.data() + static_cast<size_t>(t) * dm);
    }
    std::fill(q.begin(), q.end(), 0.0f);
    std::fill(k.begin(), k.end(), 0.0f);
    std::fill(v.begin(), v.end(), 0.0f);
    for (int t = 0; t < n; ++t) {
      const float* ht = h.data() + static_cast<size_t>(t) * dm;
      matvec_acc_f(ht, w.w_q.data(), dm, dm, q.data() + static_cast<size_t>(t) * dm);
      matvec_acc_f(ht, w.w_k.data(), dm, dm, k.data() + static_cast<size_t>(t) * dm);
      matvec_acc_f(ht, w.w_v.data(), dm, dm, v.data() + static_cast<size_t>(t) * dm);
    }

    Tensor4f keys(1, nh, n, D), values(1, nh, n, D);
    for (int t = 0; t < n; ++t) {
      for (int hh = 0; hh < nh; ++hh) {
        for (int d = 0; d < D; ++d) {
          keys.at(0, hh, t, d) = k[static_cast<size_t>(t) * dm + hh * D + d];
          values.at(0, hh, t, d) = v[static_cast<size_t>(t) * dm + hh * D + d];
        }
      }
    }

    std::fill(attn.begin(), attn.end(), 0.0f);
    for (int hh = 0; hh < nh; ++hh) {
      for (int t = 0; t < n; ++t) {
        srow.assign(static_cast<size_t>(t) + 1, 0.0f);
        const float* qt = q.data() + static_cast<size_t>(t) * dm + hh * D;
        for (int u = 0; u <= t; ++u) {
          const float* ku = k.data() + static_cast<size_t>(u) * dm + hh * D;
          float acc = 0.0f;
          for (int d = 0; d < D; ++d) acc += qt[d] * ku[d];
          srow[u] = acc;
        }
        for (int u = 0; u <= t; ++u) srow[u] *= inv;
        softmax_inplace(srow);
        float* at = attn.data() + static_cast<size_t>(t) * dm + hh * D;
        for (int u = 0; u <= t; ++u) {
          const float p = srow[u];
          const float* vu = v.data() + static_cast<size_t>(u) * dm + hh * D;
          for (int d = 0; d < D; ++d) at[d] += p * vu[d];
        }
      }
    }

    for (int t = 0; t < n; ++t) {
      matvec_acc_f(attn.data() + static_cast<size_t>(t) * dm, w.w_o.data(), dm, dm,
                   x.data() + static_cast<size_t>(t) * dm);
    }
    for (int t = 0; t < n; ++t) {
      rmsnorm_row_f(x.data() + static_cast<size_t>(t) * dm, w.mlp_norm_gain.data(), dm,
                    h.data() + static_cast<size_t>(t) * dm);
    }
    std::fill(m1.begin(), m1.end(), 0.0f);
    for (int t = 0; t < n; ++t) {
      matvec_acc_f(h.data() + static_cast<size_t>(t) * dm, w.w_ff_in.data(), dm, dff,
                   m1.data() + static_cast<size_t>(t) * dff);
    }
    for (float& g : m1) g = gelu_f(g);
    for (int t = 0; t < n; ++t) {
      matvec_acc_f(m1.data() + static_cast<size_t>(t) * dff, w.w_ff_out.data(), dff, dm,
                   x.data() + static_cast<size_t>(t) * dm);
    }

    out.layer_keys.push_back(std::move(keys));
    out.layer_values.push_back(std::move(values));
  }

  std::vector<float> f(dm);
  rmsnorm_row_f(x.data() + static_cast<size_t>(n - 1) * dm, m.final_norm_gain.data(), dm,
                f.data());
  out.last_logits.assign(hp.vocab_size, 0.0f);
  matvec_acc_f(f.data(), m.unembedding.data(), dm, hp.vocab_size, out.last_logits.data());
  return out;
}

CachedDecoder::CachedDecoder(const ToyTransformerF32& m, const ModelQuantConfig* quant)
    : m_(m) {
  const ToyHyperparams& hp = m.hp;
  ModelQuantConfig fallback;
  const ModelQuantConfig* cfg = quant;
  if (cfg == nullptr) {
    fallback = full_precision_config(hp.n_layers);
    cfg = &fallback;
  }
  cfg->validate();
  if (static_cast<int>(cfg->layers.size()) != hp.n_layers) {
    throw std::invalid_argument("quant config covers " + std::to_string(cfg->layers.size()) +
                                " layers, model has " + std::to_string(hp.n_layers));
  }
  caches_.reserve(hp.n_layers);
  for (int l = 0; l < hp.n_layers; ++l) {
    caches_.emplace_back(cfg->layers[l], 1, hp.n_heads, hp.head_dim);
  }
}

std::vector<float> CachedDecoder::step(int token) {
  const ToyHyperparams& hp = m_.hp;
  if (pos_ >= hp.max_seq) throw std::invalid_argument("decode position exceeds max_seq");
  if (token < 0 || token >= hp.vocab_size) {
    throw std::invalid_argument("token id " + std::to_string(token) + " outside vocabulary");
  }
  const int dm = hp.d_model, dff = hp.d_ff, nh = hp.n_heads, D = hp.head_dim;

  std::vector<float> x(dm);
  for (int i = 0; i < dm; ++i) {
    x[i] = m_.embedding[static_cast<size_t>(token) * dm + i] +
           m_.pos_embedding[static_cast<size_t>(pos_) * dm + i];
  }

  std::vector<float> h(dm), q(dm), k(dm), v(dm), a(dm), m1(dff);
  Tensor4f qt(1, nh, 1, D), kt(1, nh, 1, D), vt(1, nh, 1, D);
  for (int l = 0; l < hp.n_layers; ++l) {
    const auto& w = m_.layers[l];
    rmsnorm_row_f(x.data(), w.attn_norm_gain.data(), dm, h.data());
    std::fill(q.begin(), q.end(), 0.0f);
    std::fill(k.begin(), k.end(), 0.0f);
    std::fill(v.begin(), v.end(), 0.0f);
    matvec_acc_f(h.data(), w.w_q.data(), dm, dm, q.data());
    matvec_acc_f(h.data(), w.w_k.data(), dm, dm, k.data());
    matvec_acc_f(h.data(), w.w_v.data(), dm, dm, v.data());
    for (int hh = 0; hh < nh; ++hh) {
      for (int d = 0; d < D; ++d) {
        qt.at(0, hh, 0, d) = q[static_cast<size_t>(hh) * D + d];
        kt.at(0, hh, 0, d) = k[static_cast<size_t>(hh) * D + d];
        vt.at(0, hh, 0, d) = v[static_cast<size_t>(hh) * D + d];
      }
    }
    caches_[l].append(kt, vt);
    const AttentionOutput att = attend(qt, caches_[l]);
    for (int hh = 0; hh < nh; ++hh) {
      for (int d = 0; d < D; ++d) a[static_cast<size_t>(hh) * D + d] = att.output.at(0, hh, 0, d);
    }
    matvec_acc_f(a.data(), w.w_o.data(), dm, dm, x.data());

    rmsnorm_row_f(x.data(), w.mlp_norm_gain.data(), dm, h.data());
    std::fill(m1.begin(), m1.end(), 0.0f);
    matvec_acc_f(h.data(), w.w_ff_in.data(), dm, dff, m1.data());
    for (float& g : m1) g = gelu_f(g);
    matvec_acc_f(m1.data(), w.w_ff_out.data(), dff, dm, x.data());
  }

  std::vector<float> f(dm);
  rmsnorm_row_f(x.data(), m_.final_norm_gain.data(), dm, f.data());
  std::vector<float> logits(hp.vocab_size, 0.0f);
  matvec_acc_f(f.data(), m_.unembedding.data(), dm, hp.vocab_size, logits.data());
  ++pos_;
  return logits;
}

std::vector<float> CachedDecoder::prefill(std::span<const int> tokens) {
  if (pos_ != 0) throw std::invalid_argument("prefill requires an empty decoder");
  FloatForward ff = causal_forward_f32(m_, tokens);
  for (size_t l = 0; l < caches_.size(); ++l) {
    caches_[l].append(ff.layer_keys[l], ff.layer_values[l]);
  }
  pos_ = static_cast<int>(tokens.size());
  return std::move(ff.last_logits);
}

std::vector<int> generate(const ToyTransformer& m, std::span<const int> prompt,
                          int max_new_tokens, const ModelQuantConfig* quant) {
  check_tokens(m.hp, prompt, 1);
  if (max_new_tokens < 0) throw std::invalid_argument("max_new_tokens must be >= 0");
  std::vector<int> out(prompt.begin(), prompt.end());
  if (max_new_tokens == 0) return out;
  if (prompt.size() + static_cast<size_t>(max_new_tokens) > static_cast<size_t>(m.hp.max_seq)) {
    throw std::invalid_argument("prompt plus generated tokens exceed max_seq");
  }
  const ToyTransformerF32 mf = ToyTransformerF32::from(m);
  CachedDecoder dec(mf, quant);
  std::vector<float> logits = dec.prefill(prompt);
  int next = argmax(logits);
  out.push_back(next);
  for (int i = 1; i < max_new_tokens; ++i) {
    logits = dec.step(next);
    next = argmax(logits);
    out.push_back(next);
  }
  return out;
}

std::vector<int> generate_recompute_reference(const ToyTransformer& m,
                                              std::span<const int> prompt, int max_new_tokens) {
  check_tokens(m.hp, prompt, 1);
  std::vector<int> out(prompt.begin(), prompt.end());
  if (max_new_tokens == 0) return out;
  if (prompt.size() + static_cast<size_t>(max_new_tokens) > static_cast<size_t>(m.hp.max_seq)) {
    throw std::invalid_argument("prompt plus generated tokens exceed max_seq");
  }
  const ToyTransformerF32 mf = ToyTransformerF32::from(m);
  for (int i = 0; i < max_new_tokens; ++i) {
    const FloatForward ff = causal_forward_f32(mf, out);
    out.push_back(argmax(ff.last_logits));
  }
  return out;
}

// ---- checkpoints ----------------------------------------------------------

namespace {

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("load_checkpoint: truncated stream");
  return v;
}

void write_vec(std::ostream& os, const std::vector<double>& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_vec(std::istream& is, std::vector<double>& v, size_t len) {
  v.resize(len);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(len * sizeof(double)));
  if (!is) throw std::runtime_error("load_checkpoint: truncated parameters");
}

}  // namespace

void save_checkpoint(std::ostream& os, const ToyTransformer& m) {
  os.write("KVTM", 4);
  write_pod<uint32_t>(os, 1);
  write_pod<int32_t>(os, m.hp.vocab_size);
  write_pod<int32_t>(os, m.hp.d_model);
  write_pod<int32_t>(os, m.hp.n_layers);
  write_pod<int32_t>(os, m.hp.n_heads);
  write_pod<int32_t>(os, m.hp.head_dim);
  write_pod<int32_t>(os, m.hp.d_ff);
  write_pod<int32_t>(os, m.hp.max_seq);
  write_pod<uint64_t>(os, m.seed);
  write_vec(os, m.embedding);
  write_vec(os, m.pos_embedding);
  for (const LayerWeights& w : m.layers) {
    write_vec(os, w.w_q);
    write_vec(os, w.w_k);
    write_vec(os, w.w_v);
    write_vec(os, w.w_o);
    write_vec(os, w.w_ff_in);
    write_vec(os, w.w_ff_out);
    write_vec(os, w.attn_norm_gain);
    write_vec(os, w.mlp_norm_gain);
  }
  write_vec(os, m.final_norm_gain);
  write_vec(os, m.unembedding);
}

ToyTransformer load_checkpoint(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "KVTM", 4) != 0) {
    throw std::runtime_error("load_checkpoint: bad magic");
  }
  const uint32_t version = read_pod<uint32_t>(is);
  if (version != 1) {
    throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
  }
  ToyTransformer m;
  m.hp.vocab_size = read_pod<int32_t>(is);
  m.hp.d_model = read_pod<int32_t>(is);
  m.hp.n_layers = read_pod<int32_t>(is);
  m.hp.n_heads = read_pod<int32_t>(is);
  m.hp.head_dim = read_pod<int32_t>(is);
  m.hp.d_ff = read_pod<int32_t>(is);
  m.hp.max_seq = read_pod<int32_t>(is);
  m.hp.validate();
  m.seed = read_pod<uint64_t>(is);
  const int dm = m.hp.d_model;
  read_vec(is, m.embedding, static_cast<size_t>(m.hp.vocab_size) * dm);
  read_vec(is, m.pos_embedding, static_cast<size_t>(m.hp.max_seq) * dm);
  m.layers.resize(m.hp.n_layers);
  for (LayerWeights& w : m.layers) {
    read_vec(is, w.w_q, static_cast<size_t>(dm) * dm);
    read_vec(is, w.w_k, static_cast<size_t>(dm) * dm);
    read_vec(is, w.w_v, static_cast<size_t>(dm) * dm);
    read_vec(is, w.w_o, static_cast<size_t>(dm) * dm);
    read_vec(is, w.w_ff_in, static_cast<size_t>(dm) * m.hp.d_ff);
    read_vec(is, w.w_ff_out, static_cast<size_t>(m.hp.d_ff) * dm);
    read_vec(is, w.attn_norm_gain, dm);
    read_vec(is, w.mlp_norm_gain, dm);
  }
  read_vec(is, m.final_norm_gain, dm);
  read_vec(is, m.unembedding, static_cast<size_t>(dm) * m.hp.vocab_size);
  return m;
}

}  // namespace kvmix
