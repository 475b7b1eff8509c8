// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0

#include "specache/transfer.hpp"

#include <algorithm>
#include <string>

namespace specache {

void ChannelModel::validate() const {
  if (!(bandwidth > 0.0)) throw InvalidArgument("channel bandwidth must be positive");
  if (!(scatter_penalty >= 1.0)) throw InvalidArgument("scatter penalty must be >= 1");
  if (!(fixed_overhead >= 0.0)) throw InvalidArgument("fixed overhead must be >= 0");
}

double transfer_time(std::size_t bytes, const ChannelModel& model, bool contiguous) {
  model.validate();
  const double wire = static_cast<double>(bytes) / model.bandwidth;
  return model.fixed_overhead + (contiguous ? wire : wire * model.scatter_penalty);
}

double step_latency(double compute_s, double transfer_s, bool overlapped) {
  if (compute_s < 0.0 || transfer_s < 0.0) throw InvalidArgument("step_latency: negative duration");
  return overlapped ? std::max(compute_s, transfer_s) : compute_s + transfer_s;
}

// ---------------------------------------------------------------------------

TransferAgent::TransferAgent(FetchFn fetch, TransferMode mode) : fetch_(std::move(fetch)), mode_(mode) {
  if (mode_ == TransferMode::Concurrent) worker_ = std::thread([this] { run(); });
}

TransferAgent::~TransferAgent() {
  {
    std::lock_guard lock(mutex_);
    stopping_ = true;
  }
  wake_.notify_all();
  if (worker_.joinable()) worker_.join();
}

void TransferAgent::schedule_prefetch(PrefetchTicket ticket) {
  const Key key{ticket.issue_step, ticket.layer};
  Job job{std::move(ticket), {}};
  auto future = job.result.get_future();
  {
    std::lock_guard lock(mutex_);
    if (outstanding_.contains(key)) {
      throw ProtocolError("prefetch ticket for step " + std::to_string(key.first) + " layer " +
                          std::to_string(key.second) + " already issued");
    }
    outstanding_.emplace(key, std::move(future));
    if (mode_ == TransferMode::Concurrent) {
      queue_.push_back(std::move(job));
      wake_.notify_one();
      return;
    }
  }
  try {
    job.result.set_value(fetch_(job.ticket.layer, job.ticket.positions));
  } catch (...) {
    job.result.set_exception(std::current_exception());
  }
}

FetchedRows TransferAgent::await_layer(std::size_t step, std::size_t layer) {
  std::future<FetchedRows> future;
  {
    std::lock_guard lock(mutex_);
    auto it = step == 0 ? outstanding_.end() : outstanding_.find(Key{step - 1, layer});
    if (it == outstanding_.end()) {
      throw ProtocolError("no prefetch ticket issued for layer " + std::to_string(layer) + " before step " +
                          std::to_string(step));
    }
    future = std::move(it->second);
    outstanding_.erase(it);
  }
  return future.get();
}

std::size_t TransferAgent::pending() const {
  std::lock_guard lock(mutex_);
  return outstanding_.size();
}

void TransferAgent::run() {
  for (;;) {
    Job job;
    {
      std::unique_lock lock(mutex_);
      wake_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) return;
      job = std::move(queue_.front());
      queue_.pop_front();
    }
    try {
      job.result.set_value(fetch_(job.ticket.layer, job.ticket.positions));
    } catch (...) {
      job.result.set_exception(std::current_exception());
    }
  }
}

// ---------------------------------------------------------------------------

const LatencyRow& LatencyClock::charge_step(std::size_t step, double compute_s, std::size_t bytes,
                                            std::size_t new_pins) {
  LatencyRow row;
  row.step = step;
  row.compute_s = compute_s;
  row.transfer_s = bytes == 0 ? 0.0 : transfer_time(bytes, model_, /*contiguous=*/false);
  row.overlapped_s = step_latency(compute_s, row.transfer_s, true);
  row.serialized_s = step_latency(compute_s, row.transfer_s, false);
  row.bytes = bytes;
  row.new_pins = new_pins;
  rows_.push_back(row);
  return rows_.back();
}

double LatencyClock::total_overlapped_s() const {
  double total = prefill_s_ + predecode_s_;
  for (const auto& row : rows_) total += row.overlapped_s;
  return total;
}

double LatencyClock::total_serialized_s() const {
  double total = prefill_s_ + predecode_s_;
  for (const auto& row : rows_) total += row.serialized_s;
  return total;
}

}  // namespace specache
