// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment drivers behind the command-line tool. Every driver returns a
// report shaped {experiment, config, rows, summary}; `passed` is false when
// one of the driver's internal checks failed.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "specache/engine.hpp"

namespace specache {

using Json = nlohmann::ordered_json;

struct ExperimentReport {
  std::string experiment;
  Json config = Json::object();
  Json rows = Json::array();
  Json summary = Json::object();
  bool passed = true;
  std::vector<std::string> failures;

  void fail(std::string reason);
  Json to_json() const;
  /// Scalar columns of `rows`; array-valued fields are left out.
  std::string to_csv() const;
};

/// Deterministic token ids in [0, vocab).
std::vector<TokenId> random_prompt(std::size_t length, std::size_t vocab, std::uint32_t seed);

/// Drives generate(), compares against the baseline decoder, and checks cache
/// integrity after every step. `snapshot`, when given, receives the fast-tier
/// dump of the final cache state.
ExperimentReport run_decode(const Weights& weights, std::span<const TokenId> prompt, std::size_t steps,
                            const EngineOptions& options, std::ostream* snapshot = nullptr);

/// Captures full-attention traces with the baseline decoder over each prompt
/// and evaluates top-k and greedy-eviction hit rates across `k_sweep`. The
/// full sequence length is always added to the sweep.
ExperimentReport hitrate_experiment(const Weights& weights, const std::vector<std::vector<TokenId>>& prompts,
                                    std::size_t steps, std::vector<std::size_t> k_sweep);

struct ByteSchedule {
  std::vector<std::size_t> context_lengths;
  std::vector<std::size_t> topk_bytes;
  std::vector<std::size_t> full_bytes;
};

/// Per-step bytes for fetching the top-k rows versus the whole cache of a
/// sequence that starts at `context_length` and grows by one per step.
ByteSchedule analytic_byte_schedule(const CacheGeometry& geometry, std::size_t context_length, std::size_t k,
                                    std::size_t steps);

ExperimentReport latency_experiment(const ByteSchedule& schedule, double compute_s, const ChannelModel& channel,
                                    std::span<const std::size_t> scatter_sizes);

/// KV cache size ratios for the 2-bit/1-bit, g=32/64 configurations at the
/// 4k, 32k and 8k context lengths (12 configurations), with r + k = 128.
ExperimentReport ratio_table();

}  // namespace specache
