// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0
//
// Simulated slow-to-fast tier channel and the prefetch ticket protocol.
//
// A ticket issued while computing layer l of step t must be awaited at layer
// l of step t + 1. Latency is modelled per step: the transfer consumed by a
// step overlaps that step's compute, so the step costs max(compute, transfer)
// instead of compute + transfer.

#pragma once

#include <condition_variable>
#include <cstddef>
#include <deque>
#include <functional>
#include <future>
#include <map>
#include <mutex>
#include <span>
#include <thread>
#include <utility>
#include <vector>

#include "specache/kvcache.hpp"

namespace specache {

struct ChannelModel {
  double bandwidth = 16e9;        // bytes / second
  double scatter_penalty = 5.0;   // multiplier for non-contiguous gathers
  double fixed_overhead = 0.0;    // seconds per transfer

  void validate() const;
};

/// fixed_overhead + bytes / bandwidth, times scatter_penalty if non-contiguous.
double transfer_time(std::size_t bytes, const ChannelModel& model, bool contiguous);

/// max(compute, transfer) when overlapped, otherwise their sum.
double step_latency(double compute_s, double transfer_s, bool overlapped);

struct PrefetchTicket {
  std::size_t issue_step = 0;
  std::size_t layer = 0;
  std::vector<std::size_t> positions;
  std::size_t bytes = 0;
};

enum class TransferMode {
  Simulated,   // fetch runs inline when the ticket is scheduled
  Concurrent,  // a background agent fetches; await blocks on completion
};

class TransferAgent {
 public:
  using FetchFn = std::function<FetchedRows(std::size_t layer, std::span<const std::size_t> positions)>;

  TransferAgent(FetchFn fetch, TransferMode mode);
  ~TransferAgent();

  TransferAgent(const TransferAgent&) = delete;
  TransferAgent& operator=(const TransferAgent&) = delete;

  TransferMode mode() const { return mode_; }

  void schedule_prefetch(PrefetchTicket ticket);

  /// Rows for the ticket issued at (step - 1, layer). Throws ProtocolError if
  /// no such ticket exists.
  FetchedRows await_layer(std::size_t step, std::size_t layer);

  std::size_t pending() const;

 private:
  using Key = std::pair<std::size_t, std::size_t>;
  struct Job {
    PrefetchTicket ticket;
    std::promise<FetchedRows> result;
  };

  void run();

  FetchFn fetch_;
  TransferMode mode_;
  mutable std::mutex mutex_;
  std::condition_variable wake_;
  std::deque<Job> queue_;
  std::map<Key, std::future<FetchedRows>> outstanding_;
  bool stopping_ = false;
  std::thread worker_;
};

/// One row of the latency report.
struct LatencyRow {
  std::size_t step = 0;
  double compute_s = 0.0;
  double transfer_s = 0.0;
  double overlapped_s = 0.0;
  double serialized_s = 0.0;
  std::size_t bytes = 0;
  std::size_t new_pins = 0;
};

/// Logical clock for a generation run.
class LatencyClock {
 public:
  explicit LatencyClock(ChannelModel model) : model_(model) { model_.validate(); }

  void charge_prefill(double compute_s) { prefill_s_ += compute_s; }
  void charge_predecode(double compute_s) { predecode_s_ += compute_s; }

  /// Charges one decode step whose awaited tickets moved `bytes` as a
  /// scattered gather.
  const LatencyRow& charge_step(std::size_t step, double compute_s, std::size_t bytes, std::size_t new_pins);

  const ChannelModel& model() const { return model_; }
  const std::vector<LatencyRow>& rows() const { return rows_; }
  double prefill_s() const { return prefill_s_; }
  double predecode_s() const { return predecode_s_; }
  double total_overlapped_s() const;
  double total_serialized_s() const;

 private:
  ChannelModel model_;
  double prefill_s_ = 0.0;
  double predecode_s_ = 0.0;
  std::vector<LatencyRow> rows_;
};

}  // namespace specache
