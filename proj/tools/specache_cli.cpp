// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0
//
// specache: weight generation and experiment runner.
//
// Exit status: 0 when the run and all of its internal checks pass, 1 when a
// check fails, 2 on invalid arguments, 3 on I/O errors.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "specache/experiments.hpp"

namespace {

using namespace specache;

struct ModelFlags {
  std::string weights;
  DecoderConfig config;
};

struct OutputFlags {
  bool json = false;
  bool csv = false;
  std::string out;
};

struct BudgetFlags {
  int bits = 2;
  std::size_t group_size = 32;
  std::size_t residual = 64;
  std::size_t k = 64;
};

struct ChannelFlags {
  double bandwidth = 16e9;
  double alpha = 5.0;
  double overhead = 0.0;
};

void add_model_flags(CLI::App* cmd, ModelFlags& f) {
  cmd->add_option("--weights", f.weights, "Weight file; when absent the decoder is generated from --seed");
  cmd->add_option("--seed", f.config.seed, "Weight seed")->capture_default_str();
  cmd->add_option("--layers", f.config.layers)->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--q-heads", f.config.q_heads)->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--kv-heads", f.config.kv_heads)->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--head-dim", f.config.head_dim)->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--vocab", f.config.vocab)->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--hidden", f.config.hidden)->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--ffn", f.config.ffn)->capture_default_str()->check(CLI::PositiveNumber);
}

void add_output_flags(CLI::App* cmd, OutputFlags& f) {
  auto* json = cmd->add_flag("--json", f.json, "Write the report as JSON (default)");
  auto* csv = cmd->add_flag("--csv", f.csv, "Write the report rows as CSV");
  json->excludes(csv);
  cmd->add_option("--out", f.out, "Output file (default stdout)");
}

void add_budget_flags(CLI::App* cmd, BudgetFlags& f) {
  cmd->add_option("--bits", f.bits, "Fast-tier bit width")->capture_default_str()->check(CLI::IsMember({1, 2, 16}));
  cmd->add_option("--g", f.group_size, "Quantization group size")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--residual", f.residual, "Residual window length r")->capture_default_str();
  cmd->add_option("--k", f.k, "Prefetched positions per layer")->capture_default_str();
}

void add_channel_flags(CLI::App* cmd, ChannelFlags& f) {
  cmd->add_option("--bandwidth", f.bandwidth, "Channel bandwidth in bytes/s")->capture_default_str();
  cmd->add_option("--alpha", f.alpha, "Scatter penalty for non-contiguous transfers")->capture_default_str();
  cmd->add_option("--overhead", f.overhead, "Fixed seconds per transfer")->capture_default_str();
}

Weights load_model(const ModelFlags& f) {
  if (!f.weights.empty()) return load_weights(f.weights);
  return init_decoder(f.config);
}

ChannelModel channel_of(const ChannelFlags& f) {
  ChannelModel channel;
  channel.bandwidth = f.bandwidth;
  channel.scatter_penalty = f.alpha;
  channel.fixed_overhead = f.overhead;
  channel.validate();
  return channel;
}

std::vector<TokenId> parse_prompt(const std::string& text) {
  std::vector<TokenId> prompt;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long value = std::stoul(item, &used);
      if (used != item.size() || value > UINT32_MAX) throw std::out_of_range(item);
      prompt.push_back(static_cast<TokenId>(value));
    } catch (const std::logic_error&) {
      throw InvalidArgument("--prompt: '" + item + "' is not a token id");
    }
  }
  return prompt;
}

class IoError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

void emit(const ExperimentReport& report, const OutputFlags& f) {
  const std::string text = f.csv ? report.to_csv() : report.to_json().dump(2) + "\n";
  if (f.out.empty()) {
    std::cout << text;
    std::cout.flush();
  } else {
    std::ofstream file(f.out, std::ios::binary);
    if (!file) throw IoError("cannot open " + f.out + " for writing");
    file << text;
    if (!file) throw IoError("write to " + f.out + " failed");
  }
  for (const auto& failure : report.failures) std::cerr << "check failed: " << failure << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-tier KV cache decoding with speculative top-k prefetch"};
  app.require_subcommand(1);

  // gen-weights
  ModelFlags gen_model;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-weights", "Write a deterministic toy decoder weight file");
  add_model_flags(gen, gen_model);
  gen->add_option("--out", gen_out, "Weight file to write")->required();

  // decode
  ModelFlags dec_model;
  BudgetFlags dec_budget;
  ChannelFlags dec_channel;
  OutputFlags dec_out;
  std::string dec_prompt;
  std::size_t dec_prompt_len = 128;
  std::optional<std::uint32_t> dec_prompt_seed;
  std::size_t dec_steps = 32;
  double dec_compute = 1e-3;
  double dec_prefill_compute = 1e-3;
  bool dec_measure = false;
  bool dec_concurrent = false;
  std::size_t dec_max_len = 4096;
  std::string dec_snapshot;
  auto* dec = app.add_subcommand("decode", "Generate with the tiered cache and compare against full attention");
  add_model_flags(dec, dec_model);
  add_budget_flags(dec, dec_budget);
  add_channel_flags(dec, dec_channel);
  add_output_flags(dec, dec_out);
  auto* prompt_opt = dec->add_option("--prompt", dec_prompt, "Comma-separated token ids");
  dec->add_option("--prompt-len", dec_prompt_len, "Length of a random prompt")
      ->capture_default_str()
      ->excludes(prompt_opt);
  dec->add_option("--prompt-seed", dec_prompt_seed, "Seed of the random prompt (default: --seed)")
      ->excludes(prompt_opt);
  dec->add_option("--steps", dec_steps, "Decode steps")->capture_default_str()->check(CLI::PositiveNumber);
  dec->add_option("--compute", dec_compute, "Seconds charged per decode step")->capture_default_str();
  dec->add_option("--prefill-compute", dec_prefill_compute, "Seconds charged for prefill")->capture_default_str();
  dec->add_flag("--measure-compute", dec_measure, "Charge wall-clock compute time (not reproducible)");
  dec->add_flag("--concurrent", dec_concurrent, "Fetch on a background thread");
  dec->add_option("--max-len", dec_max_len, "Maximum sequence length")->capture_default_str();
  dec->add_option("--snapshot", dec_snapshot, "Write the final fast-tier snapshot to this file");

  // hitrate
  ModelFlags hit_model;
  OutputFlags hit_out;
  std::size_t hit_prompts = 4;
  std::size_t hit_prompt_len = 64;
  std::size_t hit_steps = 64;
  std::vector<std::size_t> hit_sweep{1, 4, 16, 64};
  auto* hit = app.add_subcommand("hitrate", "Top-k versus greedy-eviction hit rates on full-attention traces");
  add_model_flags(hit, hit_model);
  add_output_flags(hit, hit_out);
  hit->add_option("--prompts", hit_prompts, "Number of random prompts")->capture_default_str()->check(
      CLI::PositiveNumber);
  hit->add_option("--prompt-len", hit_prompt_len)->capture_default_str()->check(CLI::PositiveNumber);
  hit->add_option("--steps", hit_steps, "Decode steps per prompt")->capture_default_str();
  hit->add_option("--k-sweep", hit_sweep, "Budgets to evaluate")->delimiter(',')->capture_default_str()->check(
      CLI::PositiveNumber);

  // latency
  ModelFlags lat_model;
  ChannelFlags lat_channel;
  OutputFlags lat_out;
  std::size_t lat_context = 32768;
  std::size_t lat_k = 64;
  std::size_t lat_steps = 16;
  double lat_compute = 1e-3;
  auto* lat = app.add_subcommand("latency", "Overlapped versus serialized fetch latency from the channel model");
  add_model_flags(lat, lat_model);
  add_channel_flags(lat, lat_channel);
  add_output_flags(lat, lat_out);
  lat->add_option("--context", lat_context, "Context length at the first step")->capture_default_str()->check(
      CLI::PositiveNumber);
  lat->add_option("--k", lat_k, "Prefetched positions per layer")->capture_default_str();
  lat->add_option("--steps", lat_steps)->capture_default_str()->check(CLI::PositiveNumber);
  lat->add_option("--compute", lat_compute, "Seconds of compute per step")->capture_default_str();

  // ratio-table
  OutputFlags ratio_out;
  auto* ratio = app.add_subcommand("ratio-table", "Fast-tier size ratios for the reference model configurations");
  add_output_flags(ratio, ratio_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    std::optional<ExperimentReport> report;
    const OutputFlags* out = nullptr;
    if (*gen) {
      gen_model.config.validate();
      save_weights(init_decoder(gen_model.config), gen_out);
      return 0;
    }
    if (*dec) {
      const Weights weights = load_model(dec_model);
      std::vector<TokenId> prompt =
          dec_prompt.empty()
              ? random_prompt(dec_prompt_len, weights.config.vocab, dec_prompt_seed.value_or(weights.config.seed))
              : parse_prompt(dec_prompt);
      EngineOptions options;
      options.budget.bits = dec_budget.bits;
      options.budget.group_size = dec_budget.group_size;
      options.budget.residual = dec_budget.residual;
      options.budget.prefetch_k = dec_budget.k;
      options.channel = channel_of(dec_channel);
      options.transfer_mode = dec_concurrent ? TransferMode::Concurrent : TransferMode::Simulated;
      options.step_compute_s = dec_compute;
      options.prefill_compute_s = dec_prefill_compute;
      options.measure_compute = dec_measure;
      options.max_seq_len = dec_max_len;
      std::ofstream snapshot;
      if (!dec_snapshot.empty()) {
        snapshot.open(dec_snapshot, std::ios::binary);
        if (!snapshot) throw IoError("cannot open " + dec_snapshot + " for writing");
      }
      report = run_decode(weights, prompt, dec_steps, options, dec_snapshot.empty() ? nullptr : &snapshot);
      if (!dec_snapshot.empty() && !snapshot) throw IoError("write to " + dec_snapshot + " failed");
      out = &dec_out;
    } else if (*hit) {
      const Weights weights = load_model(hit_model);
      std::vector<std::vector<TokenId>> prompts;
      for (std::size_t i = 0; i < hit_prompts; ++i) {
        prompts.push_back(random_prompt(hit_prompt_len, weights.config.vocab,
                                        weights.config.seed + static_cast<std::uint32_t>(i)));
      }
      report = hitrate_experiment(weights, prompts, hit_steps, hit_sweep);
      out = &hit_out;
    } else if (*lat) {
      CacheGeometry geometry = lat_model.config.cache_geometry();
      if (!lat_model.weights.empty()) geometry = load_weights(lat_model.weights).config.cache_geometry();
      const ChannelModel channel = channel_of(lat_channel);
      const ByteSchedule schedule = analytic_byte_schedule(geometry, lat_context, lat_k, lat_steps);
      const std::vector<std::size_t> sizes{schedule.topk_bytes.front(), schedule.full_bytes.front()};
      report = latency_experiment(schedule, lat_compute, channel, sizes);
      report->config["layers"] = geometry.layers;
      report->config["kv_heads"] = geometry.kv_heads;
      report->config["head_dim"] = geometry.head_dim;
      report->config["context_length"] = lat_context;
      report->config["prefetch_k"] = lat_k;
      out = &lat_out;
    } else if (*ratio) {
      report = ratio_table();
      out = &ratio_out;
    }
    emit(*report, *out);
    return report->passed ? 0 : 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}
