// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0
//
// Two-tier KV cache.
//
// The slow tier holds every verified token's full-precision key/value rows.
// The fast tier holds, per layer and kv head:
//   - packed:   positions [0, frontier) as group-quantized blocks of g tokens
//               (keys grouped per channel, values per token),
//   - residual: positions [frontier, length) verbatim, fewer than r + g rows,
//   - pinned:   up to k packed positions overridden by full-precision rows.
// When the residual reaches r + g rows its oldest g rows migrate to packed.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "specache/numerics.hpp"
#include "specache/quant.hpp"

namespace specache {

struct CacheGeometry {
  std::size_t layers = 1;
  std::size_t kv_heads = 1;
  std::size_t head_dim = 2;
};

/// Budget of the fast tier. bits = 16 keeps the fast copy unquantized.
struct CacheBudget {
  /// group_size value meaning "no per-group side constants" in memory_ratio.
  static constexpr std::size_t kUngrouped = 0;

  int bits = 2;
  std::size_t group_size = 32;
  std::size_t context_length = 0;
  std::size_t residual = 64;
  std::size_t prefetch_k = 64;

  /// Checks the fields a live cache needs (context_length is not one).
  void validate() const;
};

/// Fast-tier size relative to a 16-bit cache of context_length tokens:
/// B/16 + 2/g + (r + k)/L, unrounded.
double memory_ratio(const CacheBudget& budget);

/// Two-decimal display rounding used by the ratio table.
double round_ratio(double ratio);

/// Full-precision rows for a set of positions of one layer. Row i of every
/// per-head matrix belongs to positions[i].
struct FetchedRows {
  std::vector<std::size_t> positions;
  std::vector<Matrix> keys;
  std::vector<Matrix> values;
  std::size_t bytes = 0;
};

/// Bytes moved for `count` positions, accounted at 16-bit storage:
/// count * 2 (K and V) * head_dim * 2 bytes * kv_heads.
std::size_t fetch_bytes(const CacheGeometry& geometry, std::size_t count);

class SlowTier {
 public:
  explicit SlowTier(const CacheGeometry& geometry);

  /// keys/values: one row per kv head.
  void append(std::size_t layer, const Matrix& keys, const Matrix& values);
  std::size_t length(std::size_t layer) const;
  std::span<const float> key_row(std::size_t layer, std::size_t head, std::size_t position) const;
  std::span<const float> value_row(std::size_t layer, std::size_t head, std::size_t position) const;
  const Matrix& keys(std::size_t layer, std::size_t head) const { return layers_.at(layer).keys.at(head); }
  const Matrix& values(std::size_t layer, std::size_t head) const { return layers_.at(layer).values.at(head); }

  FetchedRows fetch(std::size_t layer, std::span<const std::size_t> positions) const;

 private:
  struct Layer {
    std::vector<Matrix> keys;
    std::vector<Matrix> values;
  };
  CacheGeometry geometry_;
  std::vector<Layer> layers_;
};

/// g consecutive tokens of one kv head in fast-tier form.
struct PackedBlock {
  std::size_t first_position = 0;
  std::size_t tokens = 0;
  /// One group per channel, each spanning the block's tokens.
  std::vector<PackedGroup> key_groups;
  /// Token-major; ceil(head_dim / g) channel groups per token.
  std::vector<PackedGroup> value_groups;
  /// Used instead of the groups when the fast tier is 16-bit.
  std::vector<float> raw_keys;
  std::vector<float> raw_values;
};

struct IntegrityReport {
  bool coverage = true;
  bool residual_exact = true;
  bool pinned_subset = true;
  bool pinned_exact = true;
  bool packed_within_bound = true;
  std::vector<std::string> problems;

  bool ok() const { return problems.empty(); }
};

class TwoTierCache {
 public:
  TwoTierCache(const CacheGeometry& geometry, const CacheBudget& budget);

  const CacheGeometry& geometry() const { return geometry_; }
  const CacheBudget& budget() const { return budget_; }

  /// Persists one verified position for every kv head of `layer`; migrates
  /// the oldest group once the residual window reaches r + g rows.
  void append_verified(std::size_t layer, const Matrix& keys, const Matrix& values);

  /// Quantizes the oldest g residual rows into the packed store.
  void migrate_residual(std::size_t layer);

  /// Replaces the layer's pinned set wholesale.
  void pin(std::size_t layer, FetchedRows rows);

  /// Effective keys/values over all positions: dequantized packed rows with
  /// pinned overrides, followed by the residual rows.
  std::pair<Matrix, Matrix> materialize(std::size_t layer, std::size_t head) const;

  FetchedRows slow_fetch(std::size_t layer, std::span<const std::size_t> positions) const;

  std::size_t length(std::size_t layer) const { return slow_.length(layer); }
  std::size_t packed_length(std::size_t layer) const { return fast_.at(layer).frontier; }
  std::size_t residual_length(std::size_t layer) const;
  const FetchedRows& pinned(std::size_t layer) const { return fast_.at(layer).pinned; }
  const std::vector<PackedBlock>& blocks(std::size_t layer, std::size_t head) const {
    return fast_.at(layer).heads.at(head).blocks;
  }
  const SlowTier& slow() const { return slow_; }

  IntegrityReport check_integrity() const;

  /// Binary dump of the packed store, little-endian:
  ///   "SPKS" u32 version u32 bits u32 g u32 layers u32 kv_heads u32 head_dim
  ///   per layer: u32 packed_length, then per head, per block:
  ///     key groups (channel order), then value groups (token-major);
  ///     each group is u16 zero, u16 scale, ceil(count * bits / 8) code bytes.
  ///   16-bit tiers write each block's raw f32 keys then values instead.
  void write_snapshot(std::ostream& out) const;

 private:
  struct HeadStore {
    std::vector<PackedBlock> blocks;
    Matrix dequant_keys;
    Matrix dequant_values;
    Matrix residual_keys;
    Matrix residual_values;
  };
  struct LayerStore {
    std::vector<HeadStore> heads;
    std::size_t frontier = 0;
    FetchedRows pinned;
  };

  PackedBlock pack_block(const Matrix& keys, const Matrix& values, std::size_t first) const;
  void check_layer(std::size_t layer) const;

  CacheGeometry geometry_;
  CacheBudget budget_;
  SlowTier slow_;
  std::vector<LayerStore> fast_;
};

}  // namespace specache
