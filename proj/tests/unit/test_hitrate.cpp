// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "specache/hitrate.hpp"
#include "specache/numerics.hpp"

using namespace specache;

namespace {

// Rows of a growing sequence: row t covers start + t + 1 positions. Logits
// are Gaussian with a random temperature so some rows are sharp, some flat.
std::vector<std::vector<float>> random_series(std::mt19937& rng, std::size_t start, std::size_t queries) {
  std::normal_distribution<double> logit(0.0, 1.0);
  std::uniform_real_distribution<double> temp(0.3, 4.0);
  std::vector<std::vector<float>> rows;
  for (std::size_t t = 0; t < queries; ++t) {
    const std::size_t n = start + t + 1;
    const double tau = temp(rng);
    std::vector<double> e(n);
    double z = 0.0;
    for (auto& v : e) z += (v = std::exp(tau * logit(rng)));
    std::vector<float> row(n);
    for (std::size_t i = 0; i < n; ++i) row[i] = static_cast<float>(e[i] / z);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

TEST_CASE("top-k examples") {
  const std::vector<std::vector<float>> rows{{0.7f, 0.2f, 0.1f}};
  CHECK(topk_hitrate(rows, 1)[0] == doctest::Approx(0.7));
  CHECK(topk_hitrate(rows, 3)[0] == doctest::Approx(1.0));
  CHECK(topk_hitrate(rows, 10)[0] == doctest::Approx(1.0));
}

TEST_CASE("eviction keeps everything when k covers the sequence") {
  std::mt19937 rng(1);
  const auto rows = random_series(rng, 5, 20);
  const auto rates = eviction_hitrate(rows, 25);
  const auto full = topk_hitrate(rows, 25);
  for (std::size_t q = 0; q < rows.size(); ++q) CHECK(rates[q] == full[q]);
  for (double r : rates) CHECK(r == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("eviction evicts the lowest cumulative score, oldest first on ties") {
  // Query 0 sees three equal positions; with k = 2 position 0 goes.
  // Query 1 sees position 3 as well and weighs position 1 least.
  const std::vector<std::vector<float>> rows{{1.0f / 3, 1.0f / 3, 1.0f / 3}, {0.4f, 0.1f, 0.2f, 0.3f}};
  const auto rates = eviction_hitrate(rows, 2);
  CHECK(rates[0] == doctest::Approx(2.0 / 3));
  // retained {1, 2, 3} renormalized over 0.6: cumulative 1/3 + 1/6, 1/3 + 1/3, 1/2
  // so position 1 is evicted and {2, 3} capture 0.5 of the full row.
  CHECK(rates[1] == doctest::Approx(0.5));
}

TEST_CASE("adversarial trace defeats greedy eviction") {
  // Query t puts 0.9 on position t, which nothing attended before.
  const std::size_t n = 32;
  std::vector<std::vector<float>> rows;
  for (std::size_t t = 0; t < n; ++t) {
    std::vector<float> row(n, 0.1f / (n - 1));
    row[t] = 0.9f;
    rows.push_back(row);
  }
  const auto top = topk_hitrate(rows, 1);
  const auto evict = eviction_hitrate(rows, 1);
  double top_mean = 0.0, evict_mean = 0.0;
  for (std::size_t q = 0; q < n; ++q) {
    top_mean += top[q] / n;
    evict_mean += evict[q] / n;
  }
  CHECK(top_mean == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(evict_mean < 0.1);
  for (std::size_t q = 1; q < n; ++q) CHECK(evict[q] < 0.01);
}

TEST_CASE("eviction never beats top-k at equal k") {
  std::mt19937 rng(2);
  std::size_t violations = 0;
  for (int trace = 0; trace < 100; ++trace) {
    const auto rows = random_series(rng, rng() % 16, 64);
    for (std::size_t k : {1, 4, 16, 64}) {
      const auto top = topk_hitrate(rows, k);
      const auto evict = eviction_hitrate(rows, k);
      for (std::size_t q = 0; q < rows.size(); ++q) violations += evict[q] > top[q];
    }
  }
  CHECK(violations == 0);
}

TEST_CASE("top-k rate is non-decreasing in k for every query") {
  std::mt19937 rng(3);
  for (int trace = 0; trace < 50; ++trace) {
    const auto rows = random_series(rng, 3, 30);
    std::vector<double> previous(rows.size(), 0.0);
    for (std::size_t k = 1; k <= 34; ++k) {
      const auto rates = topk_hitrate(rows, k);
      for (std::size_t q = 0; q < rows.size(); ++q) {
        REQUIRE(rates[q] >= previous[q]);
        previous[q] = rates[q];
      }
    }
  }
}

TEST_CASE("mean eviction curve is non-decreasing in k") {
  std::mt19937 rng(4);
  std::vector<std::vector<std::vector<float>>> traces;
  for (int trace = 0; trace < 100; ++trace) traces.push_back(random_series(rng, 0, 64));
  double previous = 0.0;
  for (std::size_t k = 1; k <= 64; ++k) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& rows : traces) {
      for (double r : eviction_hitrate(rows, k)) {
        total += r;
        ++count;
      }
    }
    const double mean = total / static_cast<double>(count);
    REQUIRE(mean >= previous);
    previous = mean;
  }
  CHECK(previous == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("trace validation and whole-trace rates") {
  std::mt19937 rng(5);
  AttentionTrace trace(2, 3);
  for (auto& series : trace.series) series = random_series(rng, 2, 5);
  CHECK_NOTHROW(trace.validate());
  CHECK(topk_hitrate(trace, 2).size() == 6 * 5);
  CHECK(eviction_hitrate(trace, 2).size() == 6 * 5);
  CHECK(topk_hitrate(trace, 2)[5] == topk_hitrate(trace.at(0, 1), 2)[0]);

  trace.at(1, 2)[3][0] += 0.01f;
  CHECK_THROWS_AS(trace.validate(), InvalidArgument);
  trace.at(1, 2)[3][0] -= 0.01f;
  trace.at(0, 0)[4].resize(2);
  CHECK_THROWS_AS(trace.validate(), InvalidArgument);
}
