// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy LLaMA-style decoder: RMSNorm, grouped-query attention with RoPE, SwiGLU
// feed-forward, untied output head. Weights are seeded pseudo-random.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "specache/kvcache.hpp"
#include "specache/numerics.hpp"

namespace specache {

using TokenId = std::uint32_t;

struct DecoderConfig {
  std::size_t layers = 2;
  std::size_t q_heads = 4;
  std::size_t kv_heads = 2;
  std::size_t head_dim = 32;
  std::size_t vocab = 256;
  std::size_t hidden = 128;
  std::size_t ffn = 256;
  double rope_base = 10000.0;
  std::uint32_t seed = 1;

  void validate() const;
  std::size_t group_ratio() const { return q_heads / kv_heads; }
  CacheGeometry cache_geometry() const { return {layers, kv_heads, head_dim}; }

  friend bool operator==(const DecoderConfig&, const DecoderConfig&) = default;
};

struct LayerWeights {
  Matrix wq;  // hidden x (q_heads * head_dim)
  Matrix wk;  // hidden x (kv_heads * head_dim)
  Matrix wv;  // hidden x (kv_heads * head_dim)
  Matrix wo;  // (q_heads * head_dim) x hidden
  std::vector<float> attn_norm;
  std::vector<float> ffn_norm;
  Matrix w_gate;  // hidden x ffn
  Matrix w_up;    // hidden x ffn
  Matrix w_down;  // ffn x hidden

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct Weights {
  DecoderConfig config;
  Matrix embedding;  // vocab x hidden
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;
  Matrix output;  // hidden x vocab

  friend bool operator==(const Weights&, const Weights&) = default;
};

/// Same config (seed included) gives bitwise-identical weights.
Weights init_decoder(const DecoderConfig& config);

/// Weight file, little-endian:
///   "SPKC", u32 version (1), u32 layers, q_heads, kv_heads, head_dim, vocab,
///   hidden, ffn, seed, then f32 arrays row-major in this order: embedding;
///   per layer wq, wk, wv, wo, attn_norm, ffn_norm, w_gate, w_up, w_down;
///   final_norm; output.
void save_weights(const Weights& weights, const std::filesystem::path& path);
Weights load_weights(const std::filesystem::path& path);

/// Per-head projections of a batch of rows, RoPE already applied to q and k.
struct HeadProjections {
  std::vector<Matrix> q;  // q_heads of (rows x head_dim)
  std::vector<Matrix> k;  // kv_heads of (rows x head_dim)
  std::vector<Matrix> v;  // kv_heads of (rows x head_dim)
};

/// Single-head attention: softmax(q kᵀ / sqrt(d), mask) v.
struct AttentionResult {
  Matrix outputs;  // rows x head_dim
  Matrix scores;   // rows x keys, post-softmax
};
AttentionResult attend(const Matrix& q, const Matrix& keys, const Matrix& values, const AttendMask& mask);

/// Stateless forward-pass pieces shared by every decoding path, so that the
/// tiered and baseline decoders execute the same float operations.
class Transformer {
 public:
  explicit Transformer(const Weights& weights);

  const DecoderConfig& config() const { return weights_->config; }
  std::size_t kv_head_of(std::size_t q_head) const { return q_head / config().group_ratio(); }

  Matrix embed(std::span<const TokenId> tokens) const;
  HeadProjections project(std::size_t layer, const Matrix& x, std::span<const std::size_t> positions) const;
  /// Output projection + residual, then the feed-forward block + residual.
  void finish_layer(std::size_t layer, Matrix& x, const std::vector<Matrix>& head_outputs) const;
  Matrix logits(const Matrix& x) const;

 private:
  const Weights* weights_;
};

}  // namespace specache
