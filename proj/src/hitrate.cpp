// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0

#include "specache/hitrate.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "specache/numerics.hpp"

namespace specache {

AttentionTrace::AttentionTrace(std::size_t layers_, std::size_t heads_)
    : layers(layers_), heads(heads_), series(layers_ * heads_) {}

void AttentionTrace::validate(double tolerance) const {
  if (series.size() != layers * heads) throw InvalidArgument("attention trace: series count != layers * heads");
  for (std::size_t s = 0; s < series.size(); ++s) {
    std::size_t previous = 0;
    for (std::size_t t = 0; t < series[s].size(); ++t) {
      const auto& row = series[s][t];
      if (row.empty() || row.size() < previous) {
        throw InvalidArgument("attention trace: series " + std::to_string(s) + " row " + std::to_string(t) +
                              " shrinks or is empty");
      }
      previous = row.size();
      double total = 0.0;
      for (float v : row) {
        if (v < 0.0f) throw InvalidArgument("attention trace: negative probability");
        total += v;
      }
      if (std::abs(total - 1.0) > tolerance) {
        throw InvalidArgument("attention trace: series " + std::to_string(s) + " row " + std::to_string(t) +
                              " sums to " + std::to_string(total));
      }
    }
  }
}

namespace {

// Sums largest-first. Both policies total their kept mass this way, so a kept
// set that is elementwise no larger never rounds to a larger sum.
double descending_sum(std::vector<float>& values, std::size_t take) {
  take = std::min(take, values.size());
  std::partial_sort(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(take), values.end(),
                    std::greater<>());
  double mass = 0.0;
  for (std::size_t i = 0; i < take; ++i) mass += values[i];
  return mass;
}

}  // namespace

std::vector<double> topk_hitrate(const std::vector<std::vector<float>>& rows, std::size_t k) {
  std::vector<double> rates;
  rates.reserve(rows.size());
  std::vector<float> values;
  for (const auto& row : rows) {
    values.assign(row.begin(), row.end());
    rates.push_back(descending_sum(values, k));
  }
  return rates;
}

std::vector<double> eviction_hitrate(const std::vector<std::vector<float>>& rows, std::size_t k) {
  std::vector<double> rates;
  rates.reserve(rows.size());
  std::vector<std::size_t> retained;
  std::vector<double> cumulative;  // indexed by position
  std::size_t seen = 0;

  for (const auto& row : rows) {
    for (; seen < row.size(); ++seen) retained.push_back(seen);
    cumulative.resize(row.size(), 0.0);

    double visible = 0.0;
    for (std::size_t pos : retained) visible += row[pos];
    if (visible > 0.0) {
      for (std::size_t pos : retained) cumulative[pos] += row[pos] / visible;
    }

    while (retained.size() > k) {
      auto victim = std::min_element(retained.begin(), retained.end(), [&](std::size_t a, std::size_t b) {
        return cumulative[a] < cumulative[b] || (cumulative[a] == cumulative[b] && a < b);
      });
      retained.erase(victim);
    }

    std::vector<float> kept;
    kept.reserve(retained.size());
    for (std::size_t pos : retained) kept.push_back(row[pos]);
    rates.push_back(descending_sum(kept, kept.size()));
  }
  return rates;
}

namespace {

template <typename Fn>
std::vector<double> over_trace(const AttentionTrace& trace, std::size_t k, Fn fn) {
  std::vector<double> all;
  for (const auto& rows : trace.series) {
    const auto rates = fn(rows, k);
    all.insert(all.end(), rates.begin(), rates.end());
  }
  return all;
}

}  // namespace

std::vector<double> topk_hitrate(const AttentionTrace& trace, std::size_t k) {
  return over_trace(trace, k, [](const auto& rows, std::size_t kk) { return topk_hitrate(rows, kk); });
}

std::vector<double> eviction_hitrate(const AttentionTrace& trace, std::size_t k) {
  return over_trace(trace, k, [](const auto& rows, std::size_t kk) { return eviction_hitrate(rows, kk); });
}

}  // namespace specache
