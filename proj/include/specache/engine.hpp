// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0
//
// Speculative-prefetch decoding over the two-tier cache.
//
//   prefill    full-precision causal pass over the prompt; every prompt KV
//              row goes to the slow tier and the fast tier. Yields T1.
//   predecode  one pass of T1 against the low-bit fast tier only. Its
//              attention row picks the first prefetch set and its logits give
//              the first speculative token T'2.
//   decode     each step runs the verified token T_t and the speculative token
//              T'_{t+1} together. T_t sees the fast tier with the prefetched
//              rows pinned; T'_{t+1}'s attention picks the next prefetch set,
//              which is fetched while the remaining layers compute. T_t's KV
//              is persisted; T'_{t+1}'s is dropped.

#pragma once

#include <chrono>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "specache/hitrate.hpp"
#include "specache/kvcache.hpp"
#include "specache/model.hpp"
#include "specache/transfer.hpp"

namespace specache {

struct EngineOptions {
  CacheBudget budget;
  ChannelModel channel;
  TransferMode transfer_mode = TransferMode::Simulated;
  /// Compute charged per decode step / pre-decode / prefill on the logical
  /// clock. When measure_compute is set, wall-clock time is used instead.
  double step_compute_s = 1e-3;
  double prefill_compute_s = 1e-3;
  bool measure_compute = false;
  std::size_t max_seq_len = 4096;
};

struct SpecState {
  std::size_t step = 0;  // index of the next decode step (1-based)
  TokenId verified = 0;
  TokenId speculative = 0;
  std::size_t position = 0;  // absolute position of `verified`
  /// Per layer, the positions whose full-precision rows are in flight.
  std::vector<std::vector<std::size_t>> prefetch;
};

struct StepMetrics {
  std::size_t step = 0;
  TokenId token = 0;             // verified output T_{t+1}
  TokenId speculative = 0;       // next speculative token T'_{t+2}
  bool speculative_hit = false;  // T'_{t+1} == T_{t+1}
  /// Verified row's attention mass on pinned positions, averaged over layers
  /// and query heads.
  double pinned_mass = 0.0;
  /// Same, over every packed (quantized) position.
  double packed_mass = 0.0;
  std::size_t bytes_fetched = 0;
  std::size_t new_pins = 0;
  std::size_t tokens_emitted = 1;
  std::size_t sequence_length = 0;  // slow-tier length after the step
};

struct StepResult {
  TokenId token = 0;
  SpecState state;
  StepMetrics metrics;
  LatencyRow latency;
  std::vector<float> logits;              // verified row
  std::vector<float> speculative_logits;  // speculative row, never emitted
};

/// The k highest-scoring positions among `eligible`, ties to the lower
/// position, returned in ascending position order.
std::vector<std::size_t> select_topk(std::span<const float> scores, std::size_t k,
                                     std::span<const std::size_t> eligible);

class SpecacheEngine {
 public:
  SpecacheEngine(const Weights& weights, EngineOptions options);

  TokenId prefill(std::span<const TokenId> prompt);
  SpecState predecode();
  StepResult decode_step(const SpecState& state);

  /// Attention for the [verified, speculative] pair of `layer` over the
  /// materialized fast tier plus the two in-step rows. The verified row
  /// cannot see the speculative column. Requires the layer's ticket to have
  /// been awaited this step.
  std::vector<AttentionResult> mixed_attention(std::size_t layer, const HeadProjections& fresh) const;

  const TwoTierCache& cache() const { return *cache_; }
  const LatencyClock& clock() const { return clock_; }
  const EngineOptions& options() const { return options_; }
  const std::vector<float>& prefill_logits() const { return prefill_logits_; }
  /// Tickets issued by the most recent predecode/decode step, in layer order.
  const std::vector<PrefetchTicket>& issued_tickets() const { return issued_; }

 private:
  enum class Phase { Fresh, Prefilled, Decoding };

  std::vector<AttentionResult> attend_fast_tier(std::size_t layer, const HeadProjections& fresh) const;
  std::vector<float> mean_head_row(const std::vector<AttentionResult>& heads, std::size_t row,
                                   std::size_t width) const;
  double compute_seconds(std::chrono::steady_clock::time_point start, double configured) const;

  const Weights* weights_;
  Transformer model_;
  EngineOptions options_;
  std::unique_ptr<TwoTierCache> cache_;
  std::unique_ptr<TransferAgent> transfer_;
  LatencyClock clock_;
  Phase phase_ = Phase::Fresh;
  TokenId first_token_ = 0;
  std::size_t next_position_ = 0;
  std::vector<float> prefill_logits_;
  std::vector<bool> awaited_;
  std::vector<PrefetchTicket> issued_;
};

/// Full-precision single-tier decoder: the reference the tiered engine must
/// match when nothing is quantized. Optionally records every attention row.
class BaselineDecoder {
 public:
  explicit BaselineDecoder(const Weights& weights, AttentionTrace* trace = nullptr);

  TokenId prefill(std::span<const TokenId> prompt);
  TokenId step(TokenId token);

  const std::vector<float>& last_logits() const { return last_logits_; }
  std::size_t length() const { return length_; }

 private:
  void record(std::size_t layer, const std::vector<AttentionResult>& heads);

  const Weights* weights_;
  Transformer model_;
  AttentionTrace* trace_;
  std::vector<std::vector<Matrix>> keys_;  // [layer][kv head]
  std::vector<std::vector<Matrix>> values_;
  std::size_t length_ = 0;
  std::vector<float> last_logits_;
};

struct GenerateResult {
  /// T1 from prefill followed by one verified token per decode step.
  std::vector<TokenId> tokens;
  /// Logits that produced each entry of `tokens`.
  std::vector<std::vector<float>> logits;
  TokenId predecode_speculative = 0;
  std::vector<StepMetrics> metrics;
  std::vector<LatencyRow> latency;
  double prefill_s = 0.0;
  double predecode_s = 0.0;
  double total_overlapped_s = 0.0;
  double total_serialized_s = 0.0;
};

using StepObserver = std::function<void(const SpecacheEngine&, const StepResult&)>;

/// prefill -> predecode -> `steps` decode steps.
GenerateResult generate(const Weights& weights, std::span<const TokenId> prompt, std::size_t steps,
                        const EngineOptions& options, const StepObserver& observer = {});

struct BaselineResult {
  std::vector<TokenId> tokens;
  std::vector<std::vector<float>> logits;
};

/// Prefill plus `steps` greedy steps with the baseline decoder.
BaselineResult baseline_generate(const Weights& weights, std::span<const TokenId> prompt, std::size_t steps,
                                 AttentionTrace* trace = nullptr);

}  // namespace specache
