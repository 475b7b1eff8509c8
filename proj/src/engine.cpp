// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0

#include "specache/engine.hpp"

#include <algorithm>
#include <iterator>
#include <numeric>
#include <string>
#include <unordered_map>

namespace specache {

namespace {

using LayerHook =
    std::function<void(std::size_t layer, const HeadProjections&, const std::vector<AttentionResult>&)>;

// Causal full-precision pass over a prompt at positions [0, n). Returns the
// logits of the last position.
std::vector<float> prefill_forward(const Transformer& model, std::span<const TokenId> tokens,
                                   const LayerHook& on_layer) {
  const auto& c = model.config();
  const std::size_t n = tokens.size();
  std::vector<std::size_t> positions(n);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  const AttendMask mask = AttendMask::causal(n, n);

  Matrix x = model.embed(tokens);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const HeadProjections proj = model.project(l, x, positions);
    std::vector<AttentionResult> heads;
    heads.reserve(c.q_heads);
    for (std::size_t h = 0; h < c.q_heads; ++h) {
      const std::size_t kvh = model.kv_head_of(h);
      heads.push_back(attend(proj.q[h], proj.k[kvh], proj.v[kvh], mask));
    }
    on_layer(l, proj, heads);
    std::vector<Matrix> outputs;
    for (auto& head : heads) outputs.push_back(std::move(head.outputs));
    model.finish_layer(l, x, outputs);
  }
  Matrix last(0, c.hidden);
  last.append_row(x.row(n - 1));
  const Matrix logits = model.logits(last);
  return {logits.data().begin(), logits.data().end()};
}

// Row `row` of every kv head's projection, stacked as (kv_heads x head_dim).
Matrix stack_row(const std::vector<Matrix>& per_head, std::size_t row) {
  Matrix out(0, per_head.front().cols());
  for (const auto& m : per_head) out.append_row(m.row(row));
  return out;
}

std::vector<float> row_vector(const Matrix& m, std::size_t r) { return {m.row(r).begin(), m.row(r).end()}; }

}  // namespace

std::vector<std::size_t> select_topk(std::span<const float> scores, std::size_t k,
                                     std::span<const std::size_t> eligible) {
  std::vector<std::size_t> order(eligible.begin(), eligible.end());
  for (std::size_t pos : order) {
    if (pos >= scores.size()) throw InvalidArgument("select_topk: eligible position outside score row");
  }
  const std::size_t take = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  order.resize(take);
  std::sort(order.begin(), order.end());
  return order;
}

// ---------------------------------------------------------------------------
// SpecacheEngine

SpecacheEngine::SpecacheEngine(const Weights& weights, EngineOptions options)
    : weights_(&weights),
      model_(weights),
      options_(std::move(options)),
      cache_(std::make_unique<TwoTierCache>(weights.config.cache_geometry(), options_.budget)),
      clock_(options_.channel),
      awaited_(weights.config.layers, false) {
  if (options_.max_seq_len == 0) throw InvalidArgument("max_seq_len must be positive");
  if (options_.step_compute_s < 0.0 || options_.prefill_compute_s < 0.0) {
    throw InvalidArgument("compute time must be non-negative");
  }
  const TwoTierCache* cache = cache_.get();
  transfer_ = std::make_unique<TransferAgent>(
      [cache](std::size_t layer, std::span<const std::size_t> positions) { return cache->slow_fetch(layer, positions); },
      options_.transfer_mode);
}

double SpecacheEngine::compute_seconds(std::chrono::steady_clock::time_point start, double configured) const {
  if (!options_.measure_compute) return configured;
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

TokenId SpecacheEngine::prefill(std::span<const TokenId> prompt) {
  if (phase_ != Phase::Fresh) throw ProtocolError("prefill: engine already holds a sequence");
  if (prompt.empty()) throw InvalidArgument("prefill: empty prompt");
  if (prompt.size() > options_.max_seq_len) {
    throw InvalidArgument("prefill: prompt length " + std::to_string(prompt.size()) + " exceeds max length " +
                          std::to_string(options_.max_seq_len));
  }
  const auto start = std::chrono::steady_clock::now();
  prefill_logits_ = prefill_forward(model_, prompt, [this](std::size_t layer, const HeadProjections& proj,
                                                           const std::vector<AttentionResult>&) {
    for (std::size_t t = 0; t < proj.k.front().rows(); ++t) {
      cache_->append_verified(layer, stack_row(proj.k, t), stack_row(proj.v, t));
    }
  });
  clock_.charge_prefill(compute_seconds(start, options_.prefill_compute_s));
  first_token_ = static_cast<TokenId>(argmax_row(prefill_logits_));
  next_position_ = prompt.size();
  phase_ = Phase::Prefilled;
  return first_token_;
}

std::vector<AttentionResult> SpecacheEngine::attend_fast_tier(std::size_t layer,
                                                              const HeadProjections& fresh) const {
  const auto& c = model_.config();
  std::vector<std::pair<Matrix, Matrix>> kv(c.kv_heads);
  for (std::size_t kvh = 0; kvh < c.kv_heads; ++kvh) {
    kv[kvh] = cache_->materialize(layer, kvh);
    for (std::size_t r = 0; r < fresh.k[kvh].rows(); ++r) {
      kv[kvh].first.append_row(fresh.k[kvh].row(r));
      kv[kvh].second.append_row(fresh.v[kvh].row(r));
    }
  }
  const std::size_t rows = fresh.q.front().rows();
  const std::size_t cached = kv.front().first.rows() - rows;
  // in-step row i sees the cache and in-step rows [0, i]
  const AttendMask mask = AttendMask::causal(rows, cached + rows, cached);
  std::vector<AttentionResult> heads;
  heads.reserve(c.q_heads);
  for (std::size_t h = 0; h < c.q_heads; ++h) {
    const auto& [keys, values] = kv[model_.kv_head_of(h)];
    heads.push_back(attend(fresh.q[h], keys, values, mask));
  }
  return heads;
}

std::vector<AttentionResult> SpecacheEngine::mixed_attention(std::size_t layer, const HeadProjections& fresh) const {
  if (layer >= awaited_.size() || !awaited_[layer]) {
    throw ProtocolError("mixed_attention: prefetch for layer " + std::to_string(layer) + " not awaited");
  }
  if (fresh.q.empty() || fresh.q.front().rows() != 2) {
    throw InvalidArgument("mixed_attention: expects the [verified, speculative] row pair");
  }
  return attend_fast_tier(layer, fresh);
}

std::vector<float> SpecacheEngine::mean_head_row(const std::vector<AttentionResult>& heads, std::size_t row,
                                                 std::size_t width) const {
  std::vector<float> mean(width, 0.0f);
  for (const auto& head : heads) {
    auto scores = head.scores.row(row);
    for (std::size_t i = 0; i < width; ++i) mean[i] += scores[i];
  }
  const float inv = 1.0f / static_cast<float>(heads.size());
  for (float& v : mean) v *= inv;
  return mean;
}

SpecState SpecacheEngine::predecode() {
  if (phase_ != Phase::Prefilled) throw ProtocolError("predecode: requires a completed prefill and no decoding yet");
  const auto& c = model_.config();
  if (next_position_ + 1 >= options_.max_seq_len) throw InvalidArgument("predecode: sequence at max length");
  const auto start = std::chrono::steady_clock::now();

  SpecState state;
  state.step = 1;
  state.verified = first_token_;
  state.position = next_position_;
  state.prefetch.resize(c.layers);
  issued_.clear();

  const TokenId token[1] = {first_token_};
  const std::size_t position[1] = {next_position_};
  Matrix x = model_.embed(token);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const HeadProjections proj = model_.project(l, x, position);
    auto heads = attend_fast_tier(l, proj);

    const std::size_t frontier = cache_->packed_length(l);
    std::vector<std::size_t> eligible(frontier);
    std::iota(eligible.begin(), eligible.end(), std::size_t{0});
    state.prefetch[l] = select_topk(mean_head_row(heads, 0, frontier), options_.budget.prefetch_k, eligible);

    PrefetchTicket ticket{0, l, state.prefetch[l], fetch_bytes(cache_->geometry(), state.prefetch[l].size())};
    issued_.push_back(ticket);
    transfer_->schedule_prefetch(std::move(ticket));

    std::vector<Matrix> outputs;
    for (auto& head : heads) outputs.push_back(std::move(head.outputs));
    model_.finish_layer(l, x, outputs);
  }
  const Matrix logits = model_.logits(x);
  state.speculative = static_cast<TokenId>(argmax_row(logits.row(0)));
  clock_.charge_predecode(compute_seconds(start, options_.step_compute_s));
  phase_ = Phase::Decoding;
  return state;
}

StepResult SpecacheEngine::decode_step(const SpecState& state) {
  if (phase_ != Phase::Decoding) throw ProtocolError("decode_step: predecode has not run");
  if (state.position != next_position_) {
    throw ProtocolError("decode_step: state position " + std::to_string(state.position) +
                        " does not continue the cached sequence at " + std::to_string(next_position_));
  }
  const auto& c = model_.config();
  if (state.prefetch.size() != c.layers) throw InvalidArgument("decode_step: prefetch sets must cover every layer");
  if (state.position + 2 > options_.max_seq_len) throw InvalidArgument("decode_step: sequence at max length");
  const auto start = std::chrono::steady_clock::now();

  const std::size_t p = state.position;
  const TokenId tokens[2] = {state.verified, state.speculative};
  const std::size_t positions[2] = {p, p + 1};

  StepResult result;
  result.state.step = state.step + 1;
  result.state.position = p + 1;
  result.state.prefetch.resize(c.layers);
  StepMetrics& m = result.metrics;
  m.step = state.step;
  issued_.clear();

  Matrix x = model_.embed(tokens);
  for (std::size_t l = 0; l < c.layers; ++l) {
    // Pin K_t: rows already pinned last step carry over, the rest arrive now.
    FetchedRows fetched = transfer_->await_layer(state.step, l);
    awaited_[l] = true;
    m.bytes_fetched += fetched.bytes;
    m.new_pins += fetched.positions.size();

    const FetchedRows& previous = cache_->pinned(l);
    std::unordered_map<std::size_t, std::size_t> fetched_at;
    std::unordered_map<std::size_t, std::size_t> previous_at;
    for (std::size_t i = 0; i < fetched.positions.size(); ++i) fetched_at.emplace(fetched.positions[i], i);
    for (std::size_t i = 0; i < previous.positions.size(); ++i) previous_at.emplace(previous.positions[i], i);

    FetchedRows pinned;
    pinned.keys.assign(c.kv_heads, Matrix(0, c.head_dim));
    pinned.values.assign(c.kv_heads, Matrix(0, c.head_dim));
    for (std::size_t pos : state.prefetch[l]) {
      const FetchedRows* source = &fetched;
      std::size_t index = 0;
      if (auto it = fetched_at.find(pos); it != fetched_at.end()) {
        index = it->second;
      } else if (auto jt = previous_at.find(pos); jt != previous_at.end()) {
        source = &previous;
        index = jt->second;
      } else {
        throw ProtocolError("decode_step: prefetch position " + std::to_string(pos) + " was never fetched");
      }
      pinned.positions.push_back(pos);
      for (std::size_t h = 0; h < c.kv_heads; ++h) {
        pinned.keys[h].append_row(source->keys[h].row(index));
        pinned.values[h].append_row(source->values[h].row(index));
      }
    }
    pinned.bytes = fetch_bytes(cache_->geometry(), pinned.positions.size());
    cache_->pin(l, std::move(pinned));

    const HeadProjections proj = model_.project(l, x, positions);
    auto heads = mixed_attention(l, proj);

    const std::size_t frontier = cache_->packed_length(l);
    for (const auto& head : heads) {
      auto verified_row = head.scores.row(0);
      for (std::size_t pos : state.prefetch[l]) m.pinned_mass += verified_row[pos];
      for (std::size_t pos = 0; pos < frontier; ++pos) m.packed_mass += verified_row[pos];
    }

    std::vector<std::size_t> eligible(frontier);
    std::iota(eligible.begin(), eligible.end(), std::size_t{0});
    auto& next = result.state.prefetch[l];
    next = select_topk(mean_head_row(heads, 1, frontier), options_.budget.prefetch_k, eligible);

    cache_->append_verified(l, stack_row(proj.k, 0), stack_row(proj.v, 0));

    std::vector<std::size_t> fresh_positions;
    std::set_difference(next.begin(), next.end(), state.prefetch[l].begin(), state.prefetch[l].end(),
                        std::back_inserter(fresh_positions));
    PrefetchTicket ticket{state.step, l, fresh_positions, fetch_bytes(cache_->geometry(), fresh_positions.size())};
    issued_.push_back(ticket);
    transfer_->schedule_prefetch(std::move(ticket));
    awaited_[l] = false;

    std::vector<Matrix> outputs;
    for (auto& head : heads) outputs.push_back(std::move(head.outputs));
    model_.finish_layer(l, x, outputs);
  }

  const Matrix logits = model_.logits(x);
  result.logits = row_vector(logits, 0);
  result.speculative_logits = row_vector(logits, 1);
  result.token = static_cast<TokenId>(argmax_row(result.logits));
  result.state.verified = result.token;
  result.state.speculative = static_cast<TokenId>(argmax_row(result.speculative_logits));

  const double heads_total = static_cast<double>(c.layers * c.q_heads);
  m.pinned_mass = std::clamp(m.pinned_mass / heads_total, 0.0, 1.0);
  m.packed_mass = std::clamp(m.packed_mass / heads_total, 0.0, 1.0);
  m.token = result.token;
  m.speculative = result.state.speculative;
  m.speculative_hit = state.speculative == result.token;
  m.tokens_emitted = 1;
  m.sequence_length = cache_->length(0);

  result.latency =
      clock_.charge_step(state.step, compute_seconds(start, options_.step_compute_s), m.bytes_fetched, m.new_pins);
  next_position_ = p + 1;
  return result;
}

// ---------------------------------------------------------------------------
// BaselineDecoder

BaselineDecoder::BaselineDecoder(const Weights& weights, AttentionTrace* trace)
    : weights_(&weights), model_(weights), trace_(trace) {
  const auto& c = weights.config;
  keys_.assign(c.layers, std::vector<Matrix>(c.kv_heads, Matrix(0, c.head_dim)));
  values_.assign(c.layers, std::vector<Matrix>(c.kv_heads, Matrix(0, c.head_dim)));
  if (trace_ && (trace_->layers != c.layers || trace_->heads != c.q_heads)) {
    *trace_ = AttentionTrace(c.layers, c.q_heads);
  }
}

void BaselineDecoder::record(std::size_t layer, const std::vector<AttentionResult>& heads) {
  if (!trace_) return;
  for (std::size_t h = 0; h < heads.size(); ++h) {
    const Matrix& scores = heads[h].scores;
    const std::size_t offset = scores.cols() - scores.rows();
    for (std::size_t r = 0; r < scores.rows(); ++r) {
      auto row = scores.row(r);
      trace_->at(layer, h).emplace_back(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(offset + r + 1));
    }
  }
}

TokenId BaselineDecoder::prefill(std::span<const TokenId> prompt) {
  if (length_ != 0) throw ProtocolError("baseline prefill: decoder already holds a sequence");
  if (prompt.empty()) throw InvalidArgument("baseline prefill: empty prompt");
  last_logits_ = prefill_forward(model_, prompt, [this](std::size_t layer, const HeadProjections& proj,
                                                        const std::vector<AttentionResult>& heads) {
    keys_[layer] = proj.k;
    values_[layer] = proj.v;
    record(layer, heads);
  });
  length_ = prompt.size();
  return static_cast<TokenId>(argmax_row(last_logits_));
}

TokenId BaselineDecoder::step(TokenId token) {
  if (length_ == 0) throw ProtocolError("baseline step: prefill first");
  const auto& c = model_.config();
  const TokenId tokens[1] = {token};
  const std::size_t positions[1] = {length_};
  Matrix x = model_.embed(tokens);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const HeadProjections proj = model_.project(l, x, positions);
    for (std::size_t kvh = 0; kvh < c.kv_heads; ++kvh) {
      keys_[l][kvh].append_row(proj.k[kvh].row(0));
      values_[l][kvh].append_row(proj.v[kvh].row(0));
    }
    const AttendMask mask(1, length_ + 1, true);
    std::vector<AttentionResult> heads;
    for (std::size_t h = 0; h < c.q_heads; ++h) {
      const std::size_t kvh = model_.kv_head_of(h);
      heads.push_back(attend(proj.q[h], keys_[l][kvh], values_[l][kvh], mask));
    }
    record(l, heads);
    std::vector<Matrix> outputs;
    for (auto& head : heads) outputs.push_back(std::move(head.outputs));
    model_.finish_layer(l, x, outputs);
  }
  const Matrix logits = model_.logits(x);
  last_logits_ = row_vector(logits, 0);
  ++length_;
  return static_cast<TokenId>(argmax_row(last_logits_));
}

// ---------------------------------------------------------------------------

GenerateResult generate(const Weights& weights, std::span<const TokenId> prompt, std::size_t steps,
                        const EngineOptions& options, const StepObserver& observer) {
  if (steps == 0) throw InvalidArgument("generate: steps must be >= 1");
  SpecacheEngine engine(weights, options);
  GenerateResult out;
  out.tokens.push_back(engine.prefill(prompt));
  out.logits.push_back(engine.prefill_logits());
  SpecState state = engine.predecode();
  out.predecode_speculative = state.speculative;
  for (std::size_t s = 0; s < steps; ++s) {
    StepResult step = engine.decode_step(state);
    if (observer) observer(engine, step);
    out.tokens.push_back(step.token);
    out.logits.push_back(std::move(step.logits));
    out.metrics.push_back(step.metrics);
    out.latency.push_back(step.latency);
    state = std::move(step.state);
  }
  const LatencyClock& clock = engine.clock();
  out.prefill_s = clock.prefill_s();
  out.predecode_s = clock.predecode_s();
  out.total_overlapped_s = clock.total_overlapped_s();
  out.total_serialized_s = clock.total_serialized_s();
  return out;
}

BaselineResult baseline_generate(const Weights& weights, std::span<const TokenId> prompt, std::size_t steps,
                                 AttentionTrace* trace) {
  BaselineDecoder decoder(weights, trace);
  BaselineResult out;
  out.tokens.push_back(decoder.prefill(prompt));
  out.logits.push_back(decoder.last_logits());
  for (std::size_t s = 0; s < steps; ++s) {
    out.tokens.push_back(decoder.step(out.tokens.back()));
    out.logits.push_back(decoder.last_logits());
  }
  return out;
}

}  // namespace specache
