// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "specache/experiments.hpp"

using namespace specache;

namespace {

DecoderConfig small_config() {
  DecoderConfig c;
  c.layers = 2;
  c.q_heads = 4;
  c.kv_heads = 2;
  c.head_dim = 8;
  c.vocab = 64;
  c.hidden = 32;
  c.ffn = 48;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("ratio table reproduces all twelve reference ratios") {
  const ExperimentReport r = ratio_table();
  CHECK(r.passed);
  REQUIRE(r.rows.size() == 12);
  const double expected[] = {0.22, 0.19, 0.22, 0.19, 0.19, 0.16, 0.13, 0.10, 0.20, 0.17, 0.14, 0.11};
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(r.rows[i]["ratio_rounded"].get<double>() == expected[i]);
    CHECK(r.rows[i]["residual_plus_k"].get<int>() == 128);
  }
  CHECK(r.rows[7]["context_length"].get<int>() == 32768);
  CHECK(r.rows[7]["bits"].get<int>() == 1);
  CHECK(r.rows[7]["group_size"].get<int>() == 64);
}

TEST_CASE("report serialization") {
  const ExperimentReport r = ratio_table();
  const Json j = r.to_json();
  CHECK(j["experiment"] == "ratio-table");
  CHECK(j.contains("config"));
  CHECK(j.contains("rows"));
  CHECK(j.contains("summary"));
  const std::string csv = r.to_csv();
  std::istringstream lines(csv);
  std::string header;
  std::getline(lines, header);
  CHECK(header == "model,context_length,bits,group_size,residual_plus_k,ratio,ratio_rounded,reference,matches");
  std::size_t count = 0;
  for (std::string line; std::getline(lines, line);) ++count;
  CHECK(count == 12);
}

TEST_CASE("top-k bytes are proportional to the full cache") {
  const CacheGeometry geo{4, 2, 16};
  const ByteSchedule s = analytic_byte_schedule(geo, 1000, 50, 3);
  REQUIRE(s.full_bytes.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const double L = static_cast<double>(s.context_lengths[i]);
    CHECK(static_cast<double>(s.topk_bytes[i]) == doctest::Approx(50.0 / L * static_cast<double>(s.full_bytes[i])));
  }
  CHECK(s.context_lengths == std::vector<std::size_t>{1000, 1001, 1002});
}

TEST_CASE("latency experiment overlaps transfer with compute") {
  const CacheGeometry geo{32, 8, 128};
  const ByteSchedule s = analytic_byte_schedule(geo, 32768, 64, 8);
  ChannelModel ch;
  const std::size_t sizes[] = {1 << 20, 1 << 24};
  const ExperimentReport r = latency_experiment(s, 2e-3, ch, sizes);
  CHECK(r.passed);
  for (const auto& row : r.rows) {
    CHECK(row["topk_overlapped_s"].get<double>() < row["topk_serialized_s"].get<double>());
    CHECK(row["full_overlapped_s"].get<double>() < row["full_serialized_s"].get<double>());
    CHECK(row["topk_bytes"].get<std::size_t>() < row["full_bytes"].get<std::size_t>());
  }
  CHECK(r.summary["topk_total_overlapped_s"].get<double>() < r.summary["topk_total_serialized_s"].get<double>());
  for (const auto& entry : r.summary["scatter_table"]) CHECK(entry["ratio"].get<double>() == doctest::Approx(5.0));

  // with no compute there is nothing to hide the transfer behind
  const ExperimentReport idle = latency_experiment(s, 0.0, ch, sizes);
  CHECK(idle.passed);
  for (const auto& row : idle.rows) {
    CHECK(row["topk_overlapped_s"].get<double>() == row["topk_serialized_s"].get<double>());
  }
  CHECK_THROWS_AS(latency_experiment(s, -1.0, ch, sizes), InvalidArgument);
}

TEST_CASE("decode report") {
  const Weights w = init_decoder(small_config());
  const auto prompt = random_prompt(30, w.config.vocab, 1);
  EngineOptions o;
  o.budget.bits = 1;
  o.budget.group_size = 4;
  o.budget.residual = 4;
  o.budget.prefetch_k = 4;
  std::ostringstream snapshot;
  const ExperimentReport r = run_decode(w, prompt, 10, o, &snapshot);
  CHECK(r.passed);
  CHECK(r.rows.size() == 10);
  CHECK(r.summary["integrity_ok"].get<bool>());
  CHECK(r.summary["tokens"].size() == 11);
  CHECK(snapshot.str().substr(0, 4) == "SPKS");
  for (const auto& row : r.rows) {
    const double mass = row["pinned_mass"].get<double>();
    CHECK(mass >= 0.0);
    CHECK(mass <= 1.0);
  }

  EngineOptions exact = o;
  exact.budget.bits = 16;
  exact.budget.prefetch_k = 1000;
  const ExperimentReport e = run_decode(w, prompt, 10, exact);
  CHECK(e.passed);
  CHECK(e.summary["matches_baseline"].get<bool>());
  CHECK(e.summary["exact_fallback_config"].get<bool>());

  CHECK(run_decode(w, prompt, 10, o).to_json().dump() == r.to_json().dump());
}

TEST_CASE("hit-rate experiment") {
  const Weights w = init_decoder(small_config());
  std::vector<std::vector<TokenId>> prompts;
  for (std::uint32_t s = 0; s < 3; ++s) prompts.push_back(random_prompt(12, w.config.vocab, s));
  const ExperimentReport r = hitrate_experiment(w, prompts, 8, {1, 4, 16});
  CHECK(r.passed);
  REQUIRE(r.rows.size() == 4);  // the full length 20 is appended
  CHECK(r.rows.back()["k"].get<std::size_t>() == 20);
  CHECK(r.summary["dominance_violations"].get<std::size_t>() == 0);
  double previous = 0.0;
  for (const auto& row : r.rows) {
    CHECK(row["topk_mean"].get<double>() >= row["eviction_mean"].get<double>());
    CHECK(row["topk_mean"].get<double>() >= previous);
    previous = row["topk_mean"].get<double>();
    CHECK(row["topk_per_query"].size() == 20);
  }
  CHECK(r.rows.back()["eviction_mean"].get<double>() == doctest::Approx(1.0).epsilon(1e-5));

  std::vector<std::vector<TokenId>> uneven{random_prompt(3, 64, 1), random_prompt(4, 64, 1)};
  CHECK_THROWS_AS(hitrate_experiment(w, uneven, 2, {1}), InvalidArgument);
  CHECK_THROWS_AS(hitrate_experiment(w, prompts, 2, {0}), InvalidArgument);
}
