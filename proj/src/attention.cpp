#include "kvmix/attention.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

#include "kvmix/scratch.hpp"

namespace kvmix {

namespace {

void check_query(const Tensor4f& query, const KVLayerCache& cache) {
  if (query.b != cache.batch() || query.nh != cache.heads() || query.d != cache.head_dim()) {
    throw std::invalid_argument("attention: query shape does not match cache");
  }
  if (query.t < 1) throw std::invalid_argument("attention: need at least one query row");
}

double checksum(const Tensor4f& scores) {
  double s = 0.0;
  for (float v : scores.data) s += v;
  return s;
}

}  // namespace

Tensor4f fused_qk_scores(const Tensor4f& query, const KVLayerCache& cache) {
  check_query(query, cache);
  const int total = static_cast<int>(cache.total_tokens());
  const int B = query.b, NH = query.nh, T = query.t, D = query.d;
  Tensor4f scores(B, NH, T, total);
  const float inv = attention_inv_scale(D);
  const int rows = B * NH * T;
  const int64_t tail_len = cache.key_tail_tokens();

#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int bi = r / (NH * T);
    const int hi = r / T % NH;
    const int qi = r % T;
    const float* qrow = query.row(bi, hi, qi);
    float* srow = scores.row(bi, hi, qi);

    int64_t tok_off = 0;
    for (const QuantizedGroups& seg : cache.key_segments()) {
      const int t_seg = seg.shape.t;
      const int gs = seg.spec.group_size;
      const int groups_per_channel = t_seg / gs;
      const int bits = seg.spec.bits;
      // channel-major layout: walk each channel's groups under one meta,
      // decoding codes in place of any dequantized staging buffer
      for (int d = 0; d < D; ++d) {
        const float qd = qrow[d];
        const size_t channel = (static_cast<size_t>(bi) * NH + hi) * D + d;
        const size_t meta_base = channel * groups_per_channel;
        const size_t stream_base = channel * t_seg;
        for (int tg = 0; tg < groups_per_channel; ++tg) {
          const GroupMeta& m = seg.meta[meta_base + tg];
          const float wide = mixed3_wide_scale(m.scale);
          float* sdst = srow + tok_off + static_cast<int64_t>(tg) * gs;
          for (int tt = 0; tt < gs; ++tt) {
            const size_t si = stream_base + static_cast<size_t>(tg) * gs + tt;
            const uint32_t code = seg.codes.get(si);
            const bool narrow = bits == 3 && si % kMixed3Block == kMixed3Block - 1;
            const float kv = static_cast<float>(code) * (narrow ? wide : m.scale) + m.min_val;
            sdst[tt] += qd * kv;
          }
        }
      }
      tok_off += t_seg;
    }
    for (int64_t j = 0; j < tail_len; ++j) {
      float acc = 0.0f;
      for (int d = 0; d < D; ++d) acc += qrow[d] * cache.key_tail_at(bi, hi, j, d);
      srow[tok_off + j] = acc;
    }
    for (int j = 0; j < total; ++j) srow[j] *= inv;
  }
  return scores;
}

void softmax_inplace(std::span<float> row) {
  if (row.empty()) throw std::invalid_argument("softmax over an empty row");
  float mx = row[0];
  for (float v : row) mx = v > mx ? v : mx;
  float sum = 0.0f;
  for (float& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  const float inv = 1.0f / sum;
  for (float& v : row) v *= inv;
}

Tensor4f softmax_rows(Tensor4f scores) {
  if (scores.d == 0) throw std::invalid_argument("softmax over an empty row");
  const int rows = scores.b * scores.nh * scores.t;
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    softmax_inplace(std::span<float>(scores.data.data() + static_cast<size_t>(r) * scores.d,
                                     static_cast<size_t>(scores.d)));
  }
  return scores;
}

Tensor4f fused_pv(const Tensor4f& probs, const KVLayerCache& cache) {
  if (probs.d != static_cast<int>(cache.total_tokens())) {
    throw std::invalid_argument("fused_pv: probability columns do not match cached tokens");
  }
  const int B = probs.b, NH = probs.nh, T = probs.t, D = cache.head_dim();
  if (B != cache.batch() || NH != cache.heads()) {
    throw std::invalid_argument("fused_pv: probability shape does not match cache");
  }
  Tensor4f out(B, NH, T, D);
  const int rows = B * NH * T;
  const int64_t tail_len = cache.value_tail_tokens();

#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int bi = r / (NH * T);
    const int hi = r / T % NH;
    const int qi = r % T;
    const float* prow = probs.row(bi, hi, qi);
    float* orow = out.row(bi, hi, qi);

    int64_t tok_off = 0;
    for (const QuantizedGroups& seg : cache.value_segments()) {
      const int t_seg = seg.shape.t;
      const int gs = seg.spec.group_size;
      const int groups_per_token = (D + gs - 1) / gs;
      const int bits = seg.spec.bits;
      for (int tt = 0; tt < t_seg; ++tt) {
        const float p = prow[tok_off + tt];
        const size_t token = (static_cast<size_t>(bi) * NH + hi) * t_seg + tt;
        const size_t stream_base = token * D;
        const size_t meta_base = token * groups_per_token;
        for (int g = 0; g < groups_per_token; ++g) {
          const GroupMeta& m = seg.meta[meta_base + g];
          const float wide = mixed3_wide_scale(m.scale);
          const int d_end = (g + 1) * gs < D ? (g + 1) * gs : D;
          for (int d = g * gs; d < d_end; ++d) {
            const size_t si = stream_base + d;
            const uint32_t code = seg.codes.get(si);
            const bool narrow = bits == 3 && si % kMixed3Block == kMixed3Block - 1;
            const float vv = static_cast<float>(code) * (narrow ? wide : m.scale) + m.min_val;
            orow[d] += p * vv;
          }
        }
      }
      tok_off += t_seg;
    }
    for (int64_t j = 0; j < tail_len; ++j) {
      const float p = prow[tok_off + j];
      for (int d = 0; d < D; ++d) orow[d] += p * cache.value_tail_at(bi, hi, j, d);
    }
  }
  return out;
}

AttentionOutput attend(const Tensor4f& query, const KVLayerCache& cache) {
  Tensor4f scores = fused_qk_scores(query, cache);
  const double sum = checksum(scores);
  const Tensor4f probs = softmax_rows(std::move(scores));
  return AttentionOutput{fused_pv(probs, cache), sum};
}

AttentionOutput reference_attend(const Tensor4f& query, const KVLayerCache& cache) {
  check_query(query, cache);
  const auto [keys, values] = cache.snapshot_dequantized();
  const int total = keys.t;
  const int B = query.b, NH = query.nh, T = query.t, D = query.d;
  const float inv = attention_inv_scale(D);

  Tensor4f scores(B, NH, T, total);
  for (int bi = 0; bi < B; ++bi) {
    for (int hi = 0; hi < NH; ++hi) {
      for (int qi = 0; qi < T; ++qi) {
        const float* qrow = query.row(bi, hi, qi);
        float* srow = scores.row(bi, hi, qi);
        for (int j = 0; j < total; ++j) {
          float acc = 0.0f;
          for (int d = 0; d < D; ++d) acc += qrow[d] * keys.at(bi, hi, j, d);
          srow[j] = acc;
        }
        for (int j = 0; j < total; ++j) srow[j] *= inv;
      }
    }
  }
  const double sum = checksum(scores);

  for (int r = 0; r < B * NH * T; ++r) {
    softmax_inplace(std::span<float>(scores.data.data() + static_cast<size_t>(r) * scores.d,
                                     static_cast<size_t>(scores.d)));
  }

  Tensor4f out(B, NH, T, D);
  for (int bi = 0; bi < B; ++bi) {
    for (int hi = 0; hi < NH; ++hi) {
      for (int qi = 0; qi < T; ++qi) {
        const float* prow = scores.row(bi, hi, qi);
        float* orow = out.row(bi, hi, qi);
        for (int j = 0; j < total; ++j) {
          const float p = prow[j];
          for (int d = 0; d < D; ++d) orow[d] += p * values.at(bi, hi, j, d);
        }
      }
    }
  }
  return AttentionOutput{std::move(out), sum};
}

void dump_scores_csv(std::ostream& os, const Tensor4f& scores) {
  os << "b,h,query,token,score\n";
  for (int bi = 0; bi < scores.b; ++bi)
    for (int hi = 0; hi < scores.nh; ++hi)
      for (int qi = 0; qi < scores.t; ++qi)
        for (int j = 0; j < scores.d; ++j)
          os << bi << ',' << hi << ',' << qi << ',' << j << ',' << scores.at(bi, hi, qi, j)
             << '\n';
}

}  // namespace kvmix
