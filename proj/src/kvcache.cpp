// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0

#include "specache/kvcache.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <ostream>
#include <set>

#include "byte_io.hpp"

namespace specache {

void CacheBudget::validate() const {
  if (bits != 16) validate_bits(bits);
  if (group_size == 0) throw InvalidArgument("cache budget: group size must be positive");
  if (residual == 0) throw InvalidArgument("cache budget: residual length must be positive");
}

double memory_ratio(const CacheBudget& b) {
  if (b.context_length == 0) throw InvalidArgument("memory_ratio: context length must be positive");
  const double side = b.group_size == CacheBudget::kUngrouped ? 0.0 : 2.0 / static_cast<double>(b.group_size);
  return static_cast<double>(b.bits) / 16.0 + side +
         static_cast<double>(b.residual + b.prefetch_k) / static_cast<double>(b.context_length);
}

double round_ratio(double ratio) { return std::round(ratio * 100.0) / 100.0; }

std::size_t fetch_bytes(const CacheGeometry& geometry, std::size_t count) {
  return count * 2 * geometry.head_dim * 2 * geometry.kv_heads;
}

// ---------------------------------------------------------------------------
// SlowTier

SlowTier::SlowTier(const CacheGeometry& geometry) : geometry_(geometry), layers_(geometry.layers) {
  for (auto& layer : layers_) {
    layer.keys.assign(geometry.kv_heads, Matrix(0, geometry.head_dim));
    layer.values.assign(geometry.kv_heads, Matrix(0, geometry.head_dim));
  }
}

void SlowTier::append(std::size_t layer, const Matrix& keys, const Matrix& values) {
  auto& store = layers_.at(layer);
  for (std::size_t h = 0; h < geometry_.kv_heads; ++h) {
    store.keys[h].append_row(keys.row(h));
    store.values[h].append_row(values.row(h));
  }
}

std::size_t SlowTier::length(std::size_t layer) const { return layers_.at(layer).keys.front().rows(); }

std::span<const float> SlowTier::key_row(std::size_t layer, std::size_t head, std::size_t position) const {
  return layers_.at(layer).keys.at(head).row(position);
}

std::span<const float> SlowTier::value_row(std::size_t layer, std::size_t head, std::size_t position) const {
  return layers_.at(layer).values.at(head).row(position);
}

FetchedRows SlowTier::fetch(std::size_t layer, std::span<const std::size_t> positions) const {
  const auto& store = layers_.at(layer);
  const std::size_t len = length(layer);
  FetchedRows out;
  out.positions.assign(positions.begin(), positions.end());
  out.keys.assign(geometry_.kv_heads, Matrix(0, geometry_.head_dim));
  out.values.assign(geometry_.kv_heads, Matrix(0, geometry_.head_dim));
  for (std::size_t pos : positions) {
    if (pos >= len) {
      throw InvalidArgument("slow_fetch: position " + std::to_string(pos) + " not in slow tier (length " +
                            std::to_string(len) + ")");
    }
    for (std::size_t h = 0; h < geometry_.kv_heads; ++h) {
      out.keys[h].append_row(store.keys[h].row(pos));
      out.values[h].append_row(store.values[h].row(pos));
    }
  }
  out.bytes = fetch_bytes(geometry_, positions.size());
  return out;
}

// ---------------------------------------------------------------------------
// TwoTierCache

TwoTierCache::TwoTierCache(const CacheGeometry& geometry, const CacheBudget& budget)
    : geometry_(geometry), budget_(budget), slow_(geometry), fast_(geometry.layers) {
  budget_.validate();
  if (geometry.layers == 0 || geometry.kv_heads == 0 || geometry.head_dim == 0) {
    throw InvalidArgument("cache geometry must be positive");
  }
  for (auto& layer : fast_) {
    layer.heads.resize(geometry.kv_heads);
    for (auto& head : layer.heads) {
      head.dequant_keys = Matrix(0, geometry.head_dim);
      head.dequant_values = Matrix(0, geometry.head_dim);
      head.residual_keys = Matrix(0, geometry.head_dim);
      head.residual_values = Matrix(0, geometry.head_dim);
    }
    layer.pinned.keys.assign(geometry.kv_heads, Matrix(0, geometry.head_dim));
    layer.pinned.values.assign(geometry.kv_heads, Matrix(0, geometry.head_dim));
  }
}

void TwoTierCache::check_layer(std::size_t layer) const {
  if (layer >= geometry_.layers) throw InvalidArgument("layer " + std::to_string(layer) + " out of range");
}

std::size_t TwoTierCache::residual_length(std::size_t layer) const {
  return fast_.at(layer).heads.front().residual_keys.rows();
}

void TwoTierCache::append_verified(std::size_t layer, const Matrix& keys, const Matrix& values) {
  check_layer(layer);
  if (keys.rows() != geometry_.kv_heads || keys.cols() != geometry_.head_dim || values.rows() != keys.rows() ||
      values.cols() != keys.cols()) {
    throw InvalidArgument("append_verified: expected one head_dim row per kv head");
  }
  slow_.append(layer, keys, values);
  auto& store = fast_[layer];
  for (std::size_t h = 0; h < geometry_.kv_heads; ++h) {
    store.heads[h].residual_keys.append_row(keys.row(h));
    store.heads[h].residual_values.append_row(values.row(h));
  }
  if (residual_length(layer) >= budget_.residual + budget_.group_size) migrate_residual(layer);
}

PackedBlock TwoTierCache::pack_block(const Matrix& keys, const Matrix& values, std::size_t first) const {
  const std::size_t tokens = keys.rows();
  const std::size_t dim = geometry_.head_dim;
  PackedBlock block;
  block.first_position = first;
  block.tokens = tokens;
  if (budget_.bits == 16) {
    block.raw_keys.assign(keys.data().begin(), keys.data().end());
    block.raw_values.assign(values.data().begin(), values.data().end());
    return block;
  }

  std::vector<float> channel(tokens);
  for (std::size_t c = 0; c < dim; ++c) {
    for (std::size_t t = 0; t < tokens; ++t) channel[t] = keys(t, c);
    block.key_groups.push_back(pack_group(channel, budget_.bits));
  }
  for (std::size_t t = 0; t < tokens; ++t) {
    auto row = values.row(t);
    for (std::size_t start = 0; start < dim; start += budget_.group_size) {
      const std::size_t len = std::min(budget_.group_size, dim - start);
      block.value_groups.push_back(pack_group(row.subspan(start, len), budget_.bits));
    }
  }
  return block;
}

namespace {

// Dequantized block as (tokens x dim) key and value matrices.
std::pair<Matrix, Matrix> unpack_block(const PackedBlock& block, std::size_t dim, int bits) {
  if (bits == 16) {
    return {Matrix(block.tokens, dim, block.raw_keys), Matrix(block.tokens, dim, block.raw_values)};
  }
  Matrix keys(block.tokens, dim);
  Matrix values(block.tokens, dim);
  for (std::size_t c = 0; c < dim; ++c) {
    const auto channel = unpack_group(block.key_groups[c]);
    for (std::size_t t = 0; t < block.tokens; ++t) keys(t, c) = channel[t];
  }
  std::size_t g = 0;
  for (std::size_t t = 0; t < block.tokens; ++t) {
    std::size_t c = 0;
    while (c < dim) {
      const auto chunk = unpack_group(block.value_groups[g++]);
      for (float v : chunk) values(t, c++) = v;
    }
  }
  return {std::move(keys), std::move(values)};
}

Matrix leading_rows(const Matrix& m, std::size_t count) {
  std::vector<float> data(m.data().begin(), m.data().begin() + static_cast<std::ptrdiff_t>(count * m.cols()));
  return Matrix(count, m.cols(), std::move(data));
}

}  // namespace

void TwoTierCache::migrate_residual(std::size_t layer) {
  check_layer(layer);
  const std::size_t g = budget_.group_size;
  if (residual_length(layer) < budget_.residual + g) {
    throw ProtocolError("migrate_residual: residual holds " + std::to_string(residual_length(layer)) +
                        " rows, needs " + std::to_string(budget_.residual + g));
  }
  auto& store = fast_[layer];
  for (auto& head : store.heads) {
    PackedBlock block =
        pack_block(leading_rows(head.residual_keys, g), leading_rows(head.residual_values, g), store.frontier);
    auto [keys, values] = unpack_block(block, geometry_.head_dim, budget_.bits);
    for (std::size_t t = 0; t < g; ++t) {
      head.dequant_keys.append_row(keys.row(t));
      head.dequant_values.append_row(values.row(t));
    }
    head.blocks.push_back(std::move(block));
    head.residual_keys.erase_leading_rows(g);
    head.residual_values.erase_leading_rows(g);
  }
  store.frontier += g;
}

void TwoTierCache::pin(std::size_t layer, FetchedRows rows) {
  check_layer(layer);
  auto& store = fast_[layer];
  if (rows.positions.size() > budget_.prefetch_k) {
    throw InvalidArgument("pin: " + std::to_string(rows.positions.size()) + " positions exceed budget k = " +
                          std::to_string(budget_.prefetch_k));
  }
  if (rows.positions.empty() && rows.keys.empty() && rows.values.empty()) {
    rows.keys.assign(geometry_.kv_heads, Matrix(0, geometry_.head_dim));
    rows.values.assign(geometry_.kv_heads, Matrix(0, geometry_.head_dim));
  }
  if (rows.keys.size() != geometry_.kv_heads || rows.values.size() != geometry_.kv_heads) {
    throw InvalidArgument("pin: rows must carry every kv head");
  }
  std::set<std::size_t> seen;
  for (std::size_t pos : rows.positions) {
    if (pos >= store.frontier) {
      throw InvalidArgument(pos < length(layer) ? "pin: position " + std::to_string(pos) +
                                                      " is in the residual window (already full precision)"
                                                : "pin: unknown position " + std::to_string(pos));
    }
    if (!seen.insert(pos).second) throw InvalidArgument("pin: duplicate position " + std::to_string(pos));
  }
  for (std::size_t h = 0; h < geometry_.kv_heads; ++h) {
    if (rows.keys[h].rows() != rows.positions.size() || rows.values[h].rows() != rows.positions.size() ||
        (!rows.positions.empty() &&
         (rows.keys[h].cols() != geometry_.head_dim || rows.values[h].cols() != geometry_.head_dim))) {
      throw InvalidArgument("pin: row shape does not match positions and head_dim");
    }
  }
  store.pinned = std::move(rows);
}

std::pair<Matrix, Matrix> TwoTierCache::materialize(std::size_t layer, std::size_t head) const {
  check_layer(layer);
  const auto& store = fast_[layer];
  const auto& h = store.heads.at(head);
  Matrix keys = h.dequant_keys;
  Matrix values = h.dequant_values;
  const auto& pinned = store.pinned;
  for (std::size_t i = 0; i < pinned.positions.size(); ++i) {
    const std::size_t pos = pinned.positions[i];
    std::copy_n(pinned.keys[head].row(i).begin(), geometry_.head_dim, keys.row(pos).begin());
    std::copy_n(pinned.values[head].row(i).begin(), geometry_.head_dim, values.row(pos).begin());
  }
  for (std::size_t t = 0; t < h.residual_keys.rows(); ++t) {
    keys.append_row(h.residual_keys.row(t));
    values.append_row(h.residual_values.row(t));
  }
  return {std::move(keys), std::move(values)};
}

FetchedRows TwoTierCache::slow_fetch(std::size_t layer, std::span<const std::size_t> positions) const {
  check_layer(layer);
  return slow_.fetch(layer, positions);
}

namespace {

bool same_bits(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

IntegrityReport TwoTierCache::check_integrity() const {
  IntegrityReport report;
  auto fail = [&report](bool& flag, std::string message) {
    flag = false;
    report.problems.push_back(std::move(message));
  };
  const std::size_t g = budget_.group_size;

  for (std::size_t l = 0; l < geometry_.layers; ++l) {
    const auto& store = fast_[l];
    const std::size_t len = slow_.length(l);
    const std::string where = "layer " + std::to_string(l) + ": ";

    for (std::size_t h = 0; h < geometry_.kv_heads; ++h) {
      const auto& head = store.heads[h];
      if (slow_.keys(l, h).rows() != len || slow_.values(l, h).rows() != len) {
        fail(report.coverage, where + "slow tier heads disagree on length");
      }
      // packed blocks must tile [0, frontier) with no gaps or repeats
      std::size_t next = 0;
      for (const auto& block : head.blocks) {
        if (block.first_position != next || block.tokens != g) {
          fail(report.coverage, where + "packed blocks do not tile the quantized prefix");
          break;
        }
        next += block.tokens;
      }
      if (next != store.frontier || head.dequant_keys.rows() != store.frontier) {
        fail(report.coverage, where + "packed store disagrees with frontier");
      }
      if (store.frontier + head.residual_keys.rows() != len) {
        fail(report.coverage, where + "packed + residual != slow tier length");
      }
      if (head.residual_keys.rows() >= budget_.residual + g) {
        fail(report.coverage, where + "residual window exceeds r + g - 1");
      }
      for (std::size_t t = 0; t < head.residual_keys.rows() && store.frontier + t < len; ++t) {
        const std::size_t pos = store.frontier + t;
        if (!same_bits(head.residual_keys.row(t), slow_.key_row(l, h, pos)) ||
            !same_bits(head.residual_values.row(t), slow_.value_row(l, h, pos))) {
          fail(report.residual_exact, where + "residual row " + std::to_string(pos) + " differs from slow tier");
          break;
        }
      }

      // unpinned packed rows stay within the quantization bound of their group
      if (budget_.bits != 16) {
        for (const auto& block : head.blocks) {
          for (std::size_t c = 0; c < geometry_.head_dim; ++c) {
            float lo = slow_.key_row(l, h, block.first_position)[c];
            float hi = lo;
            for (std::size_t t = 0; t < block.tokens; ++t) {
              const float v = slow_.key_row(l, h, block.first_position + t)[c];
              lo = std::min(lo, v);
              hi = std::max(hi, v);
            }
            const double bound = packed_error_bound(lo, hi, budget_.bits);
            for (std::size_t t = 0; t < block.tokens; ++t) {
              const std::size_t pos = block.first_position + t;
              const double err = std::abs(static_cast<double>(head.dequant_keys(pos, c)) -
                                          static_cast<double>(slow_.key_row(l, h, pos)[c]));
              if (err > bound) {
                fail(report.packed_within_bound, where + "packed key at " + std::to_string(pos) + " exceeds bound");
              }
            }
          }
          for (std::size_t t = 0; t < block.tokens; ++t) {
            const std::size_t pos = block.first_position + t;
            const auto orig = slow_.value_row(l, h, pos);
            for (std::size_t start = 0; start < geometry_.head_dim; start += g) {
              const auto chunk = orig.subspan(start, std::min(g, geometry_.head_dim - start));
              const auto [lo, hi] = std::minmax_element(chunk.begin(), chunk.end());
              const double bound = packed_error_bound(*lo, *hi, budget_.bits);
              for (std::size_t c = 0; c < chunk.size(); ++c) {
                const double err = std::abs(static_cast<double>(head.dequant_values(pos, start + c)) -
                                            static_cast<double>(chunk[c]));
                if (err > bound) {
                  fail(report.packed_within_bound,
                       where + "packed value at " + std::to_string(pos) + " exceeds bound");
                }
              }
            }
          }
        }
      } else {
        for (std::size_t pos = 0; pos < store.frontier; ++pos) {
          if (!same_bits(head.dequant_keys.row(pos), slow_.key_row(l, h, pos)) ||
              !same_bits(head.dequant_values.row(pos), slow_.value_row(l, h, pos))) {
            fail(report.packed_within_bound, where + "16-bit packed row " + std::to_string(pos) + " differs");
            break;
          }
        }
      }
    }

    const auto& pinned = store.pinned;
    if (pinned.positions.size() > budget_.prefetch_k) fail(report.pinned_subset, where + "more than k pinned rows");
    std::set<std::size_t> unique(pinned.positions.begin(), pinned.positions.end());
    if (unique.size() != pinned.positions.size()) fail(report.pinned_subset, where + "duplicate pinned positions");
    for (std::size_t i = 0; i < pinned.positions.size(); ++i) {
      const std::size_t pos = pinned.positions[i];
      if (pos >= store.frontier) {
        fail(report.pinned_subset, where + "pinned position " + std::to_string(pos) + " is not packed");
        continue;
      }
      for (std::size_t h = 0; h < geometry_.kv_heads; ++h) {
        if (!same_bits(pinned.keys[h].row(i), slow_.key_row(l, h, pos)) ||
            !same_bits(pinned.values[h].row(i), slow_.value_row(l, h, pos))) {
          fail(report.pinned_exact, where + "pinned row " + std::to_string(pos) + " differs from slow tier");
        }
      }
    }
    // the override must be visible through materialize as well
    for (std::size_t h = 0; h < geometry_.kv_heads && report.pinned_subset; ++h) {
      auto [keys, values] = materialize(l, h);
      for (std::size_t pos : pinned.positions) {
        if (!same_bits(keys.row(pos), slow_.key_row(l, h, pos)) ||
            !same_bits(values.row(pos), slow_.value_row(l, h, pos))) {
          fail(report.pinned_exact, where + "materialized pinned row " + std::to_string(pos) + " not exact");
        }
      }
    }
  }
  return report;
}

void TwoTierCache::write_snapshot(std::ostream& out) const {
  using namespace detail;
  out.write("SPKS", 4);
  put_u32(out, 1);
  put_u32(out, static_cast<std::uint32_t>(budget_.bits));
  put_u32(out, static_cast<std::uint32_t>(budget_.group_size));
  put_u32(out, static_cast<std::uint32_t>(geometry_.layers));
  put_u32(out, static_cast<std::uint32_t>(geometry_.kv_heads));
  put_u32(out, static_cast<std::uint32_t>(geometry_.head_dim));
  auto put_group = [&out](const PackedGroup& group) {
    put_u16(out, group.zero_point_half);
    put_u16(out, group.scale_half);
    out.write(reinterpret_cast<const char*>(group.bytes.data()), static_cast<std::streamsize>(group.bytes.size()));
  };
  for (const auto& store : fast_) {
    put_u32(out, static_cast<std::uint32_t>(store.frontier));
    for (const auto& head : store.heads) {
      for (const auto& block : head.blocks) {
        if (budget_.bits == 16) {
          for (float v : block.raw_keys) put_f32(out, v);
          for (float v : block.raw_values) put_f32(out, v);
          continue;
        }
        for (const auto& group : block.key_groups) put_group(group);
        for (const auto& group : block.value_groups) put_group(group);
      }
    }
  }
}

}  // namespace specache
