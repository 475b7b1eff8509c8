// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0

#include "specache/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>
#include <sstream>

#include "specache/numerics.hpp"

namespace specache {

void ExperimentReport::fail(std::string reason) {
  passed = false;
  failures.push_back(std::move(reason));
}

Json ExperimentReport::to_json() const {
  Json out;
  out["experiment"] = experiment;
  out["config"] = config;
  out["rows"] = rows;
  out["summary"] = summary;
  out["passed"] = passed;
  out["failures"] = failures;
  return out;
}

namespace {

std::string csv_cell(const Json& value) {
  if (value.is_string()) return value.get<std::string>();
  if (value.is_null()) return "";
  return value.dump();
}

}  // namespace

std::string ExperimentReport::to_csv() const {
  std::vector<std::string> columns;
  for (const auto& row : rows) {
    for (const auto& [key, value] : row.items()) {
      if (value.is_array() || value.is_object()) continue;
      if (std::find(columns.begin(), columns.end(), key) == columns.end()) columns.push_back(key);
    }
  }
  std::ostringstream out;
  for (std::size_t c = 0; c < columns.size(); ++c) out << (c ? "," : "") << columns[c];
  out << '\n';
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < columns.size(); ++c) {
      if (c) out << ',';
      if (row.contains(columns[c])) out << csv_cell(row[columns[c]]);
    }
    out << '\n';
  }
  return out.str();
}

std::vector<TokenId> random_prompt(std::size_t length, std::size_t vocab, std::uint32_t seed) {
  if (vocab == 0) throw InvalidArgument("random_prompt: vocab must be positive");
  std::mt19937 rng(seed);
  std::vector<TokenId> prompt(length);
  for (auto& token : prompt) token = static_cast<TokenId>(rng() % vocab);
  return prompt;
}

namespace {

Json budget_json(const CacheBudget& budget) {
  Json out;
  out["bits"] = budget.bits;
  out["group_size"] = budget.group_size;
  out["residual"] = budget.residual;
  out["prefetch_k"] = budget.prefetch_k;
  return out;
}

Json channel_json(const ChannelModel& channel) {
  Json out;
  out["bandwidth"] = channel.bandwidth;
  out["scatter_penalty"] = channel.scatter_penalty;
  out["fixed_overhead"] = channel.fixed_overhead;
  return out;
}

Json decoder_json(const DecoderConfig& c) {
  Json out;
  out["layers"] = c.layers;
  out["q_heads"] = c.q_heads;
  out["kv_heads"] = c.kv_heads;
  out["head_dim"] = c.head_dim;
  out["vocab"] = c.vocab;
  out["hidden"] = c.hidden;
  out["ffn"] = c.ffn;
  out["seed"] = c.seed;
  return out;
}

double mean(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  double total = 0.0;
  for (double v : values) total += v;
  return total / static_cast<double>(values.size());
}

}  // namespace

ExperimentReport run_decode(const Weights& weights, std::span<const TokenId> prompt, std::size_t steps,
                            const EngineOptions& options, std::ostream* snapshot) {
  ExperimentReport report;
  report.experiment = "decode";
  report.config["model"] = decoder_json(weights.config);
  report.config["budget"] = budget_json(options.budget);
  report.config["channel"] = channel_json(options.channel);
  report.config["transfer_mode"] = options.transfer_mode == TransferMode::Concurrent ? "concurrent" : "simulated";
  report.config["step_compute_s"] = options.step_compute_s;
  report.config["prefill_compute_s"] = options.prefill_compute_s;
  report.config["measure_compute"] = options.measure_compute;
  report.config["prompt_length"] = prompt.size();
  report.config["steps"] = steps;

  std::size_t previous_length = prompt.size();
  bool integrity_ok = true;
  const StepObserver observer = [&](const SpecacheEngine& engine, const StepResult& step) {
    const IntegrityReport check = engine.cache().check_integrity();
    if (!check.ok()) {
      integrity_ok = false;
      for (const auto& problem : check.problems) {
        report.fail("step " + std::to_string(step.metrics.step) + ": " + problem);
      }
    }
    if (step.metrics.sequence_length != previous_length + 1) {
      report.fail("step " + std::to_string(step.metrics.step) + ": sequence grew from " +
                  std::to_string(previous_length) + " to " + std::to_string(step.metrics.sequence_length));
    }
    previous_length = step.metrics.sequence_length;
    if (step.metrics.pinned_mass < 0.0 || step.metrics.pinned_mass > step.metrics.packed_mass + 1e-6 ||
        step.metrics.packed_mass > 1.0 + 1e-6) {
      report.fail("step " + std::to_string(step.metrics.step) + ": attention mass out of range");
    }
    if (snapshot && step.metrics.step == steps) engine.cache().write_snapshot(*snapshot);
  };

  const GenerateResult result = generate(weights, prompt, steps, options, observer);
  const BaselineResult baseline = baseline_generate(weights, prompt, steps);

  std::size_t hits = 0;
  std::size_t total_bytes = 0;
  double pinned_mass = 0.0;
  double packed_mass = 0.0;
  for (std::size_t i = 0; i < result.metrics.size(); ++i) {
    const StepMetrics& m = result.metrics[i];
    const LatencyRow& lat = result.latency[i];
    hits += m.speculative_hit ? 1 : 0;
    total_bytes += m.bytes_fetched;
    pinned_mass += m.pinned_mass;
    packed_mass += m.packed_mass;
    Json row;
    row["step"] = m.step;
    row["token"] = m.token;
    row["baseline_token"] = baseline.tokens.at(i + 1);
    row["speculative"] = m.speculative;
    row["speculative_hit"] = m.speculative_hit;
    row["pinned_mass"] = m.pinned_mass;
    row["packed_mass"] = m.packed_mass;
    row["bytes_fetched"] = m.bytes_fetched;
    row["new_pins"] = m.new_pins;
    row["sequence_length"] = m.sequence_length;
    row["compute_s"] = lat.compute_s;
    row["transfer_s"] = lat.transfer_s;
    row["overlapped_s"] = lat.overlapped_s;
    row["serialized_s"] = lat.serialized_s;
    report.rows.push_back(std::move(row));
  }

  const bool matches = result.tokens == baseline.tokens;
  // A 16-bit fast tier holds exact copies, so the tiered decoder must
  // reproduce the baseline whatever k is.
  const std::size_t final_length = prompt.size() + steps;
  const bool exact_fallback = options.budget.bits == 16;
  if (exact_fallback && !matches) report.fail("exact-fallback configuration diverged from the baseline decoder");

  const double n = static_cast<double>(std::max<std::size_t>(steps, 1));
  CacheBudget at_length = options.budget;
  at_length.context_length = final_length;

  report.summary["tokens"] = result.tokens;
  report.summary["baseline_tokens"] = baseline.tokens;
  report.summary["matches_baseline"] = matches;
  report.summary["exact_fallback_config"] = exact_fallback;
  report.summary["predecode_speculative"] = result.predecode_speculative;
  report.summary["speculative_hit_rate"] = static_cast<double>(hits) / n;
  report.summary["mean_pinned_mass"] = pinned_mass / n;
  report.summary["mean_packed_mass"] = packed_mass / n;
  report.summary["total_bytes"] = total_bytes;
  report.summary["prefill_s"] = result.prefill_s;
  report.summary["predecode_s"] = result.predecode_s;
  report.summary["total_overlapped_s"] = result.total_overlapped_s;
  report.summary["total_serialized_s"] = result.total_serialized_s;
  if (options.budget.bits != 16) report.summary["memory_ratio"] = memory_ratio(at_length);
  report.summary["integrity_ok"] = integrity_ok;
  return report;
}

ExperimentReport hitrate_experiment(const Weights& weights, const std::vector<std::vector<TokenId>>& prompts,
                                    std::size_t steps, std::vector<std::size_t> k_sweep) {
  if (prompts.empty()) throw InvalidArgument("hitrate_experiment: no prompts");
  const std::size_t prompt_length = prompts.front().size();
  for (const auto& p : prompts) {
    if (p.size() != prompt_length) throw InvalidArgument("hitrate_experiment: prompts must share one length");
  }
  const std::size_t length = prompt_length + steps;
  k_sweep.push_back(length);
  std::sort(k_sweep.begin(), k_sweep.end());
  k_sweep.erase(std::unique(k_sweep.begin(), k_sweep.end()), k_sweep.end());
  if (k_sweep.front() == 0) throw InvalidArgument("hitrate_experiment: k must be positive");

  const DecoderConfig& c = weights.config;
  std::vector<AttentionTrace> traces;
  for (const auto& prompt : prompts) {
    AttentionTrace trace(c.layers, c.q_heads);
    baseline_generate(weights, prompt, steps, &trace);
    trace.validate();
    traces.push_back(std::move(trace));
  }

  ExperimentReport report;
  report.experiment = "hitrate";
  report.config["model"] = decoder_json(c);
  report.config["prompts"] = prompts.size();
  report.config["prompt_length"] = prompt_length;
  report.config["steps"] = steps;
  report.config["k_sweep"] = k_sweep;

  // Queries are indexed by position in the sequence; each per-query value is
  // the mean over prompts, layers and heads.
  std::size_t violations = 0;
  std::vector<double> previous_topk;
  std::vector<double> previous_evict;
  bool topk_monotone = true;
  bool evict_monotone = true;
  double topk_at_length = 0.0;
  double evict_at_length = 0.0;
  for (std::size_t k : k_sweep) {
    std::vector<double> topk_sum(length, 0.0);
    std::vector<double> evict_sum(length, 0.0);
    std::vector<double> all_topk;
    std::vector<double> all_evict;
    std::size_t series = 0;
    for (const auto& trace : traces) {
      for (const auto& rows : trace.series) {
        const auto t = topk_hitrate(rows, k);
        const auto e = eviction_hitrate(rows, k);
        for (std::size_t q = 0; q < rows.size(); ++q) {
          topk_sum[q] += t[q];
          evict_sum[q] += e[q];
          if (e[q] > t[q]) ++violations;
        }
        all_topk.insert(all_topk.end(), t.begin(), t.end());
        all_evict.insert(all_evict.end(), e.begin(), e.end());
        ++series;
      }
    }
    for (std::size_t q = 0; q < length; ++q) {
      topk_sum[q] /= static_cast<double>(series);
      evict_sum[q] /= static_cast<double>(series);
    }
    for (std::size_t q = 0; q < previous_topk.size(); ++q) {
      if (topk_sum[q] < previous_topk[q]) topk_monotone = false;
      if (evict_sum[q] < previous_evict[q]) evict_monotone = false;
    }
    previous_topk = topk_sum;
    previous_evict = evict_sum;

    Json row;
    row["k"] = k;
    row["topk_mean"] = mean(all_topk);
    row["eviction_mean"] = mean(all_evict);
    row["topk_min"] = *std::min_element(all_topk.begin(), all_topk.end());
    row["eviction_min"] = *std::min_element(all_evict.begin(), all_evict.end());
    row["topk_per_query"] = topk_sum;
    row["eviction_per_query"] = evict_sum;
    report.rows.push_back(std::move(row));
    if (k == length) {
      topk_at_length = *std::min_element(all_topk.begin(), all_topk.end());
      evict_at_length = *std::min_element(all_evict.begin(), all_evict.end());
    }
  }

  const double saturation_tol = 1e-5;
  report.summary["queries"] = length;
  report.summary["series"] = traces.size() * c.layers * c.q_heads;
  report.summary["dominance_violations"] = violations;
  report.summary["topk_monotone"] = topk_monotone;
  report.summary["eviction_monotone"] = evict_monotone;
  report.summary["topk_min_at_full_length"] = topk_at_length;
  report.summary["eviction_min_at_full_length"] = evict_at_length;
  if (violations != 0) report.fail(std::to_string(violations) + " queries where eviction beat top-k");
  if (!topk_monotone) report.fail("top-k curve decreases in k");
  if (!evict_monotone) report.fail("eviction curve decreases in k");
  if (std::abs(topk_at_length - 1.0) > saturation_tol || std::abs(evict_at_length - 1.0) > saturation_tol) {
    report.fail("hit rates do not reach 1 at the full sequence length");
  }
  return report;
}

ByteSchedule analytic_byte_schedule(const CacheGeometry& geometry, std::size_t context_length, std::size_t k,
                                    std::size_t steps) {
  ByteSchedule schedule;
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t length = context_length + s;
    schedule.context_lengths.push_back(length);
    schedule.topk_bytes.push_back(geometry.layers * fetch_bytes(geometry, std::min(k, length)));
    schedule.full_bytes.push_back(geometry.layers * fetch_bytes(geometry, length));
  }
  return schedule;
}

ExperimentReport latency_experiment(const ByteSchedule& schedule, double compute_s, const ChannelModel& channel,
                                    std::span<const std::size_t> scatter_sizes) {
  channel.validate();
  if (!(compute_s >= 0.0) || !std::isfinite(compute_s)) {
    throw InvalidArgument("latency_experiment: compute time must be finite and non-negative");
  }
  if (schedule.topk_bytes.size() != schedule.full_bytes.size() ||
      schedule.context_lengths.size() != schedule.full_bytes.size()) {
    throw InvalidArgument("latency_experiment: byte schedule columns differ in length");
  }

  ExperimentReport report;
  report.experiment = "latency";
  report.config["channel"] = channel_json(channel);
  report.config["compute_s"] = compute_s;
  report.config["steps"] = schedule.full_bytes.size();

  double topk_overlapped = 0.0;
  double topk_serialized = 0.0;
  double full_overlapped = 0.0;
  double full_serialized = 0.0;
  for (std::size_t s = 0; s < schedule.full_bytes.size(); ++s) {
    const double t_topk = schedule.topk_bytes[s] ? transfer_time(schedule.topk_bytes[s], channel, false) : 0.0;
    const double t_full = schedule.full_bytes[s] ? transfer_time(schedule.full_bytes[s], channel, true) : 0.0;
    const double o = step_latency(compute_s, t_topk, true);
    const double z = step_latency(compute_s, t_topk, false);
    const double fo = step_latency(compute_s, t_full, true);
    const double fz = step_latency(compute_s, t_full, false);
    topk_overlapped += o;
    topk_serialized += z;
    full_overlapped += fo;
    full_serialized += fz;
    if (o > z) report.fail("step " + std::to_string(s + 1) + ": overlapped latency exceeds serialized");
    if (compute_s > 0.0 && t_topk > 0.0 && !(o < z)) {
      report.fail("step " + std::to_string(s + 1) + ": overlap saved nothing despite compute and transfer");
    }
    Json row;
    row["step"] = s + 1;
    row["context_length"] = schedule.context_lengths[s];
    row["topk_bytes"] = schedule.topk_bytes[s];
    row["full_bytes"] = schedule.full_bytes[s];
    row["compute_s"] = compute_s;
    row["topk_transfer_s"] = t_topk;
    row["topk_overlapped_s"] = o;
    row["topk_serialized_s"] = z;
    row["full_transfer_s"] = t_full;
    row["full_overlapped_s"] = fo;
    row["full_serialized_s"] = fz;
    report.rows.push_back(std::move(row));
  }

  Json scatter = Json::array();
  for (std::size_t bytes : scatter_sizes) {
    const double contiguous = transfer_time(bytes, channel, true);
    const double scattered = transfer_time(bytes, channel, false);
    Json entry;
    entry["bytes"] = bytes;
    entry["contiguous_s"] = contiguous;
    entry["scattered_s"] = scattered;
    entry["ratio"] = contiguous > 0.0 ? scattered / contiguous : 1.0;
    scatter.push_back(std::move(entry));
  }

  report.summary["topk_total_overlapped_s"] = topk_overlapped;
  report.summary["topk_total_serialized_s"] = topk_serialized;
  report.summary["full_total_overlapped_s"] = full_overlapped;
  report.summary["full_total_serialized_s"] = full_serialized;
  report.summary["overlap_speedup"] = topk_overlapped > 0.0 ? topk_serialized / topk_overlapped : 1.0;
  report.summary["scatter_table"] = std::move(scatter);
  return report;
}

namespace {

struct RatioCase {
  const char* model;
  std::size_t context_length;
  int bits;
  std::size_t group_size;
  double reference;
};

// Reference values are the published two-decimal ratios for each model's
// context length at r + k = 128.
constexpr RatioCase kRatioCases[] = {
    {"LLaMA-2-7B-Chat", 4096, 2, 32, 0.22},          {"LLaMA-2-7B-Chat", 4096, 2, 64, 0.19},
    {"LLaMA-2-13B-Chat", 4096, 2, 32, 0.22},         {"LLaMA-2-13B-Chat", 4096, 2, 64, 0.19},
    {"Mistral-7B-Instruct-v0.2", 32768, 2, 32, 0.19}, {"Mistral-7B-Instruct-v0.2", 32768, 2, 64, 0.16},
    {"Mistral-7B-Instruct-v0.2", 32768, 1, 32, 0.13}, {"Mistral-7B-Instruct-v0.2", 32768, 1, 64, 0.10},
    {"LLaMA-3-8B-Instruct", 8192, 2, 32, 0.20},       {"LLaMA-3-8B-Instruct", 8192, 2, 64, 0.17},
    {"LLaMA-3-8B-Instruct", 8192, 1, 32, 0.14},       {"LLaMA-3-8B-Instruct", 8192, 1, 64, 0.11},
};

}  // namespace

ExperimentReport ratio_table() {
  ExperimentReport report;
  report.experiment = "ratio-table";
  report.config["residual"] = 64;
  report.config["prefetch_k"] = 64;
  for (const RatioCase& rc : kRatioCases) {
    CacheBudget budget;
    budget.bits = rc.bits;
    budget.group_size = rc.group_size;
    budget.context_length = rc.context_length;
    budget.residual = 64;
    budget.prefetch_k = 64;
    const double ratio = memory_ratio(budget);
    const double rounded = round_ratio(ratio);
    const bool matches = std::abs(rounded - rc.reference) < 1e-9;
    Json row;
    row["model"] = rc.model;
    row["context_length"] = rc.context_length;
    row["bits"] = rc.bits;
    row["group_size"] = rc.group_size;
    row["residual_plus_k"] = 128;
    row["ratio"] = ratio;
    row["ratio_rounded"] = rounded;
    row["reference"] = rc.reference;
    row["matches"] = matches;
    report.rows.push_back(std::move(row));
    if (!matches) {
      report.fail(std::string(rc.model) + " B=" + std::to_string(rc.bits) + " g=" + std::to_string(rc.group_size) +
                  ": " + std::to_string(rounded) + " != " + std::to_string(rc.reference));
    }
  }
  report.summary["configurations"] = report.rows.size();
  return report;
}

}  // namespace specache
