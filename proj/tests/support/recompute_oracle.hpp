// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0
//
// Cache-free reference forward pass in double precision. Every call recomputes
// the whole sequence from the embeddings, so it shares no state or kernels
// with the decoders under test.

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "specache/model.hpp"

namespace oracle {

using Vec = std::vector<double>;

inline Vec row_times(const Vec& x, const specache::Matrix& w) {
  Vec out(w.cols(), 0.0);
  for (std::size_t i = 0; i < w.rows(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j) out[j] += x[i] * double(w(i, j));
  }
  return out;
}

inline Vec norm(const Vec& x, const std::vector<float>& gain) {
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double inv = 1.0 / std::sqrt(ss / double(x.size()) + 1e-5);
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * double(gain[i]);
  return out;
}

// Rotates adjacent pairs (2i, 2i+1) of one head by pos * base^(-2i/d).
inline void rotate(Vec& x, std::size_t offset, std::size_t d, std::size_t pos, double base) {
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double angle = double(pos) * std::pow(base, -2.0 * double(i) / double(d));
    const double a = x[offset + 2 * i], b = x[offset + 2 * i + 1];
    x[offset + 2 * i] = a * std::cos(angle) - b * std::sin(angle);
    x[offset + 2 * i + 1] = a * std::sin(angle) + b * std::cos(angle);
  }
}

/// Logits after the last token of `tokens`.
inline Vec next_logits(const specache::Weights& w, const std::vector<specache::TokenId>& tokens) {
  const auto& c = w.config;
  const std::size_t n = tokens.size();
  const std::size_t d = c.head_dim;
  std::vector<Vec> x(n);
  for (std::size_t t = 0; t < n; ++t) {
    auto e = w.embedding.row(tokens[t]);
    x[t].assign(e.begin(), e.end());
  }
  for (const auto& lw : w.layers) {
    std::vector<Vec> q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
      const Vec h = norm(x[t], lw.attn_norm);
      q[t] = row_times(h, lw.wq);
      k[t] = row_times(h, lw.wk);
      v[t] = row_times(h, lw.wv);
      for (std::size_t hd = 0; hd < c.q_heads; ++hd) rotate(q[t], hd * d, d, t, c.rope_base);
      for (std::size_t hd = 0; hd < c.kv_heads; ++hd) rotate(k[t], hd * d, d, t, c.rope_base);
    }
    const std::size_t share = c.q_heads / c.kv_heads;
    for (std::size_t t = 0; t < n; ++t) {
      Vec merged(c.q_heads * d, 0.0);
      for (std::size_t hd = 0; hd < c.q_heads; ++hd) {
        const std::size_t kvh = hd / share;
        Vec s(t + 1);
        double peak = -INFINITY;
        for (std::size_t j = 0; j <= t; ++j) {
          double dot = 0.0;
          for (std::size_t i = 0; i < d; ++i) dot += q[t][hd * d + i] * k[j][kvh * d + i];
          s[j] = dot / std::sqrt(double(d));
          peak = std::max(peak, s[j]);
        }
        double z = 0.0;
        for (double& sj : s) z += (sj = std::exp(sj - peak));
        for (std::size_t j = 0; j <= t; ++j) {
          for (std::size_t i = 0; i < d; ++i) merged[hd * d + i] += s[j] / z * v[j][kvh * d + i];
        }
      }
      const Vec attn = row_times(merged, lw.wo);
      for (std::size_t i = 0; i < c.hidden; ++i) x[t][i] += attn[i];
    }
    for (std::size_t t = 0; t < n; ++t) {
      const Vec h = norm(x[t], lw.ffn_norm);
      Vec gate = row_times(h, lw.w_gate);
      const Vec up = row_times(h, lw.w_up);
      for (std::size_t i = 0; i < gate.size(); ++i) gate[i] = gate[i] / (1.0 + std::exp(-gate[i])) * up[i];
      const Vec down = row_times(gate, lw.w_down);
      for (std::size_t i = 0; i < c.hidden; ++i) x[t][i] += down[i];
    }
  }
  return row_times(norm(x.back(), w.final_norm), w.output);
}

inline std::size_t argmax(const Vec& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace oracle
