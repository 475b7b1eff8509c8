// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0
//
// Hit rates of sparse attention policies against full attention.
//
// A hit rate is the share of a query's full attention mass that lands on the
// positions a policy keeps. Query-dependent top-k keeps each query's own k
// best positions. Greedy eviction (H2O-style) keeps one running set of k
// positions chosen by cumulative score and can never recover a dropped one.

#pragma once

#include <cstddef>
#include <vector>

namespace specache {

/// Full-attention probability rows, one series per (layer, head). Within a
/// series, row t covers positions [0, len_t) with len_t non-decreasing; the
/// last entry is the newest position.
struct AttentionTrace {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::vector<std::vector<std::vector<float>>> series;

  AttentionTrace() = default;
  AttentionTrace(std::size_t layers, std::size_t heads);

  std::vector<std::vector<float>>& at(std::size_t layer, std::size_t head) { return series[layer * heads + head]; }
  const std::vector<std::vector<float>>& at(std::size_t layer, std::size_t head) const {
    return series[layer * heads + head];
  }

  /// Throws InvalidArgument unless every row sums to 1 within `tolerance`
  /// and row lengths never shrink within a series.
  void validate(double tolerance = 1e-6) const;
};

/// Sum of the k largest entries of each row.
std::vector<double> topk_hitrate(const std::vector<std::vector<float>>& rows, std::size_t k);

/// Sequential greedy eviction with budget k. For each query the newly
/// visible positions join the retained set, the query's row renormalized over
/// that set is added to the cumulative scores, and the lowest-cumulative
/// positions (oldest on ties) are evicted until at most k remain. The rate is
/// the full-row mass on what survives.
std::vector<double> eviction_hitrate(const std::vector<std::vector<float>>& rows, std::size_t k);

/// Per-query rates for every series of a trace, concatenated in series order.
std::vector<double> topk_hitrate(const AttentionTrace& trace, std::size_t k);
std::vector<double> eviction_hitrate(const AttentionTrace& trace, std::size_t k);

}  // namespace specache
