// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "specache/engine.hpp"
#include "specache/experiments.hpp"
#include "specache/quant.hpp"

using namespace specache;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::vector<float> random_group(std::mt19937& rng, std::size_t size) {
  std::uniform_real_distribution<float> centre(-10.0f, 10.0f);
  std::uniform_real_distribution<float> spread(1e-3f, 8.0f);
  const float c = centre(rng);
  const float w = spread(rng);
  std::uniform_real_distribution<float> dist(c - w, c + w);
  std::vector<float> g(size);
  for (auto& v : g) v = dist(rng);
  return g;
}

std::vector<float> round_trip(const std::vector<float>& g, int bits) {
  const QuantParams p = quant_params(g, bits);
  return dequantize_group(quantize_group(g, p), p);
}

DecoderConfig toy_config(std::uint32_t seed) {
  DecoderConfig c;
  c.layers = 2;
  c.q_heads = 4;
  c.kv_heads = 2;
  c.head_dim = 16;
  c.vocab = 128;
  c.hidden = 64;
  c.ffn = 128;
  c.seed = seed;
  return c;
}

// ---------------------------------------------------------------------------

Outcome ratio_reproduction() {
  struct Case {
    std::size_t L;
    int bits;
    std::size_t g;
    double want;
  };
  const Case cases[] = {{4096, 2, 32, 0.22},  {4096, 2, 64, 0.19},  {4096, 2, 32, 0.22},  {4096, 2, 64, 0.19},
                        {32768, 2, 32, 0.19}, {32768, 2, 64, 0.16}, {32768, 1, 32, 0.13}, {32768, 1, 64, 0.10},
                        {8192, 2, 32, 0.20},  {8192, 2, 64, 0.17},  {8192, 1, 32, 0.14},  {8192, 1, 64, 0.11}};
  const auto start = std::chrono::steady_clock::now();
  int matched = 0;
  for (const Case& c : cases) {
    CacheBudget b;
    b.bits = c.bits;
    b.group_size = c.g;
    b.context_length = c.L;
    b.residual = 64;
    b.prefetch_k = 64;
    if (std::abs(round_ratio(memory_ratio(b)) - c.want) < 1e-12) ++matched;
  }
  const ExperimentReport table = ratio_table();
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {matched == 12 && table.passed && table.rows.size() == 12 && seconds < 1.0,
          std::to_string(matched) + "/12 ratios match, runtime " + fmt(seconds) + " s"};
}

Outcome one_bit_midpoints() {
  std::mt19937 rng(101);
  int violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto g = random_group(rng, 32);
    // on a 2^-14 grid the midpoint of any two values is a float, so the
    // planted boundary element sits exactly on the threshold
    for (auto& v : g) v = std::ldexp(std::nearbyint(std::ldexp(v, 14)), -14);
    const auto [lo, hi] = std::minmax_element(g.begin(), g.end());
    const double mn = *lo, mx = *hi;
    std::size_t slot = rng() % g.size();
    while (&g[slot] == &*lo || &g[slot] == &*hi) slot = (slot + 1) % g.size();
    g[slot] = static_cast<float>((mn + mx) / 2);
    const auto r = round_trip(g, 1);
    const float lower = static_cast<float>((3 * mn + mx) / 4);
    const float upper = static_cast<float>((mn + 3 * mx) / 4);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (r[i] != lower && r[i] != upper) ++violations;
      if (double(g[i]) >= (mn + mx) / 2 && r[i] != upper) ++violations;
    }
    if (r[slot] != upper) ++violations;
  }
  return {violations == 0, "1000 groups, " + std::to_string(violations) + " violations"};
}

Outcome error_bounds() {
  std::mt19937 rng(102);
  int violations = 0;
  double worst2 = 0.0, worst1 = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto g = random_group(rng, 64);
    const auto [lo, hi] = std::minmax_element(g.begin(), g.end());
    const double range = double(*hi) - double(*lo);
    const double s = quant_params(g, 2).scale;
    const auto r2 = round_trip(g, 2);
    const auto r1 = round_trip(g, 1);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double e2 = std::abs(double(r2[i]) - g[i]);
      const double e1 = std::abs(double(r1[i]) - g[i]);
      if (e2 > s / 2 + 1e-6) ++violations;
      if (e1 > range / 4 + 1e-6) ++violations;
      worst2 = std::max(worst2, s > 0 ? e2 / s : 0.0);
      worst1 = std::max(worst1, range > 0 ? e1 / range : 0.0);
    }
  }
  return {violations == 0, "1000 groups, " + std::to_string(violations) + " violations, worst err/s (B=2) " +
                               fmt(worst2) + ", worst err/range (B=1) " + fmt(worst1)};
}

Outcome one_bit_mse() {
  std::mt19937 rng(103);
  bool ok = true;
  std::string detail;
  const double ranges[][2] = {{0.0, 1.0}, {-3.0, 5.0}, {10.0, 10.5}};
  for (const auto& rg : ranges) {
    std::uniform_real_distribution<double> dist(rg[0], rg[1]);
    std::vector<float> g(100000);
    for (auto& v : g) v = static_cast<float>(dist(rng));
    const auto [lo, hi] = std::minmax_element(g.begin(), g.end());
    const double mn = *lo, range = double(*hi) - double(*lo);
    const auto r = round_trip(g, 1);
    double mse = 0.0, endpoint = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      mse += (double(r[i]) - g[i]) * (double(r[i]) - g[i]);
      const double rec = mn + std::nearbyint((double(g[i]) - mn) / range) * range;
      endpoint += (rec - g[i]) * (rec - g[i]);
    }
    mse /= double(g.size());
    endpoint /= double(g.size());
    const double rel = mse / (range * range / 48.0);
    const double ratio = endpoint / mse;
    ok = ok && std::abs(rel - 1.0) <= 0.10 && ratio >= 3.5 && ratio <= 4.5;
    detail += (detail.empty() ? "" : "; ") + std::string("mse/(range^2/48) ") + fmt(rel) + ", endpoint ratio " +
              fmt(ratio);
  }
  return {ok, detail};
}

Outcome exact_fallback() {
  int seeds_ok = 0;
  double worst = 0.0;
  for (std::uint32_t seed = 1; seed <= 10; ++seed) {
    const Weights w = init_decoder(toy_config(seed));
    const auto prompt = random_prompt(24, w.config.vocab, 1000 + seed);
    EngineOptions o;
    o.budget.bits = 16;
    o.budget.group_size = 8;
    o.budget.residual = 8;
    o.budget.prefetch_k = 24 + 64 + 1;
    const GenerateResult got = generate(w, prompt, 64, o);
    const BaselineResult want = baseline_generate(w, prompt, 64);
    bool ok = got.tokens == want.tokens && got.logits.size() == want.logits.size();
    for (std::size_t t = 0; ok && t < got.logits.size(); ++t) {
      for (std::size_t i = 0; i < got.logits[t].size(); ++i) {
        const double d = std::abs(double(got.logits[t][i]) - double(want.logits[t][i]));
        worst = std::max(worst, d);
        if (d > 1e-5) ok = false;
      }
    }
    seeds_ok += ok;
  }
  return {seeds_ok == 10, std::to_string(seeds_ok) + "/10 seeds match over 64 steps, max logit diff " + fmt(worst)};
}

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

Outcome topk_dominance() {
  std::mt19937 rng(106);
  std::vector<std::vector<std::vector<float>>> traces;
  for (int t = 0; t < 100; ++t) traces.push_back(random_series(rng, rng() % 32, 64));

  std::size_t violations = 0;
  for (const auto& rows : traces) {
    for (std::size_t k : {1, 4, 16, 64}) {
      const auto top = topk_hitrate(rows, k);
      const auto evict = eviction_hitrate(rows, k);
      for (std::size_t q = 0; q < rows.size(); ++q) violations += evict[q] > top[q];
    }
  }

  // Curves: mean over queries of all traces, for every k up to the longest row.
  std::size_t longest = 0;
  for (const auto& rows : traces) longest = std::max(longest, rows.back().size());
  bool monotone = true;
  bool saturated = true;
  double prev_top = 0.0, prev_evict = 0.0;
  for (std::size_t k = 1; k <= longest; ++k) {
    double top_sum = 0.0, evict_sum = 0.0;
    std::size_t n = 0;
    for (const auto& rows : traces) {
      const auto top = topk_hitrate(rows, k);
      const auto evict = eviction_hitrate(rows, k);
      for (std::size_t q = 0; q < rows.size(); ++q) {
        top_sum += top[q];
        evict_sum += evict[q];
        ++n;
        if (k >= rows.back().size() && (std::abs(top[q] - 1.0) > 1e-5 || std::abs(evict[q] - 1.0) > 1e-5)) {
          saturated = false;
        }
      }
    }
    const double top_mean = top_sum / double(n), evict_mean = evict_sum / double(n);
    if (top_mean < prev_top || evict_mean < prev_evict) monotone = false;
    prev_top = top_mean;
    prev_evict = evict_mean;
  }

  // The same properties on full-attention traces of the toy decoder.
  const Weights w = init_decoder(toy_config(7));
  std::vector<std::vector<TokenId>> prompts;
  for (std::uint32_t s = 0; s < 4; ++s) prompts.push_back(random_prompt(32, w.config.vocab, s));
  const ExperimentReport model = hitrate_experiment(w, prompts, 32, {1, 4, 16, 64});

  return {violations == 0 && monotone && saturated && model.passed,
          "100 traces, " + std::to_string(violations) + " dominance violations, curves " +
              (monotone ? "non-decreasing" : "DECREASING") + ", " + (saturated ? "reach 1.0" : "DO NOT reach 1.0") +
              " at k = length; toy-decoder study " + (model.passed ? "passes" : "fails")};
}

Outcome overlap_property() {
  std::mt19937 rng(107);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  int violations = 0;
  for (int i = 0; i < 1000; ++i) {
    const double c = i % 50 == 0 ? 0.0 : dist(rng);
    const double t = i % 70 == 0 ? 0.0 : dist(rng);
    const double o = step_latency(c, t, true), s = step_latency(c, t, false);
    if (o > s) ++violations;
    if (c > 0 && t > 0 && !(o < s)) ++violations;
  }

  const Weights w = init_decoder(toy_config(8));
  EngineOptions opt;
  opt.budget.bits = 2;
  opt.budget.group_size = 8;
  opt.budget.residual = 8;
  opt.budget.prefetch_k = 8;
  opt.channel.bandwidth = 2e6;
  opt.channel.scatter_penalty = 5.0;
  opt.channel.fixed_overhead = 1e-5;
  opt.step_compute_s = 1e-3;
  const GenerateResult g = generate(w, random_prompt(64, w.config.vocab, 8), 32, opt);
  int rows_with_transfer = 0;
  for (const auto& row : g.latency) {
    if (row.overlapped_s > row.serialized_s) ++violations;
    if (row.compute_s > 0 && row.transfer_s > 0) {
      ++rows_with_transfer;
      if (!(row.overlapped_s < row.serialized_s)) ++violations;
    }
  }
  const bool end_to_end = rows_with_transfer > 0 && g.total_overlapped_s < g.total_serialized_s;
  return {violations == 0 && end_to_end,
          "1000 pairs + 32-step run, " + std::to_string(violations) + " violations, " +
              std::to_string(rows_with_transfer) + " steps with transfer, total " + fmt(g.total_overlapped_s) +
              " s overlapped vs " + fmt(g.total_serialized_s) + " s serialized"};
}

Outcome scatter_penalty() {
  const ChannelModel defaults;
  int violations = defaults.scatter_penalty == 5.0 ? 0 : 1;
  std::mt19937 rng(108);
  for (int i = 0; i < 1000; ++i) {
    ChannelModel m;
    m.bandwidth = 1e3 + double(rng() % 1000000000);
    const std::size_t bytes = rng() % 1000000000;
    const double contiguous = transfer_time(bytes, m, true);
    const double scattered = transfer_time(bytes, m, false);
    if (scattered != m.scatter_penalty * contiguous) ++violations;
  }
  return {violations == 0, "alpha " + fmt(defaults.scatter_penalty) + ", scattered == alpha * contiguous in " +
                               std::to_string(1000 - violations) + "/1000 cases"};
}

Outcome cache_integrity() {
  std::mt19937 rng(109);
  int failures = 0;
  std::string first_problem;
  const int runs = 24;
  for (int run = 0; run < runs; ++run) {
    const Weights w = init_decoder(toy_config(200 + run));
    EngineOptions o;
    o.budget.bits = run % 2 ? 1 : 2;
    o.budget.group_size = std::size_t{4} << (rng() % 3);
    o.budget.residual = 1 + rng() % 16;
    o.budget.prefetch_k = rng() % 24;
    const std::size_t len = 1 + rng() % 80;
    std::size_t expected = len;
    bool ok = true;
    generate(w, random_prompt(len, w.config.vocab, run), 24, o, [&](const SpecacheEngine& e, const StepResult& r) {
      ++expected;
      const TwoTierCache& cache = e.cache();
      const IntegrityReport check = cache.check_integrity();
      if (!check.ok()) {
        ok = false;
        if (first_problem.empty()) first_problem = check.problems.front();
      }
      if (r.metrics.sequence_length != expected) ok = false;
      for (std::size_t l = 0; l < cache.geometry().layers; ++l) {
        if (cache.length(l) != expected) ok = false;
        const auto& pinned = cache.pinned(l).positions;
        for (std::size_t h = 0; h < cache.geometry().kv_heads; ++h) {
          const auto [keys, values] = cache.materialize(l, h);
          for (std::size_t pos : pinned) {
            const auto sk = cache.slow().key_row(l, h, pos);
            const auto sv = cache.slow().value_row(l, h, pos);
            if (std::memcmp(keys.row(pos).data(), sk.data(), sk.size() * sizeof(float)) != 0 ||
                std::memcmp(values.row(pos).data(), sv.data(), sv.size() * sizeof(float)) != 0) {
              ok = false;
            }
          }
        }
      }
    });
    failures += !ok;
  }
  return {failures == 0, std::to_string(runs - failures) + "/" + std::to_string(runs) + " randomized runs clean" +
                             (first_problem.empty() ? "" : "; first problem: " + first_problem)};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + SPECACHE_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome determinism() {
  const std::string commands[] = {
      "decode --bits 2 --g 32 --k 64 --residual 64 --steps 16 --prompt-len 160 --bandwidth 1e7 --alpha 5",
      "decode --bits 1 --g 32 --steps 16 --prompt-len 128 --concurrent --csv",
      "decode --bits 16 --k 100000 --steps 8 --prompt-len 64",
      "hitrate --prompts 3 --prompt-len 24 --steps 16",
      "latency --context 32768 --k 64 --steps 8",
      "ratio-table",
      "ratio-table --csv",
  };
  int identical = 0, total = 0;
  for (const auto& args : commands) {
    ++total;
    const bool ran = run_cli(args + " --out acceptance_det_a.out") == 0 && run_cli(args + " --out acceptance_det_b.out") == 0;
    const std::string a = slurp("acceptance_det_a.out");
    if (ran && !a.empty() && a == slurp("acceptance_det_b.out")) ++identical;
  }
  return {identical == total, std::to_string(identical) + "/" + std::to_string(total) +
                                  " invocations byte-identical across two runs"};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> check;
  };
  const Criterion criteria[] = {
      {"KV cache size ratio table", ratio_reproduction},
      {"1-bit midpoint dequantization", one_bit_midpoints},
      {"quantization error bounds", error_bounds},
      {"1-bit MSE improvement", one_bit_mse},
      {"exact-fallback equivalence", exact_fallback},
      {"top-k dominance over greedy eviction", topk_dominance},
      {"prefetch overlap", overlap_property},
      {"scatter penalty", scatter_penalty},
      {"cache integrity", cache_integrity},
      {"report determinism", determinism},
  };
  int failed = 0;
  int index = 0;
  for (const auto& c : criteria) {
    ++index;
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("%s criterion %d: %s (%s)\n", o.pass ? "PASS" : "FAIL", index, c.name, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("%d/%d criteria passed\n", index - failed, index);
  return failed == 0 ? 0 : 1;
}
