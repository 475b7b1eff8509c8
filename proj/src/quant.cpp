// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0

#include "specache/quant.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "specache/half.hpp"
#include "specache/numerics.hpp"

namespace specache {

namespace {

std::pair<float, float> min_max(std::span<const float> group) {
  const auto [lo, hi] = std::minmax_element(group.begin(), group.end());
  return {*lo, *hi};
}

std::uint32_t max_code(int bits) { return (1u << bits) - 1u; }

}  // namespace

void validate_bits(int bits) {
  if (bits != 1 && bits != 2 && bits != 4 && bits != 8) {
    throw InvalidArgument("unsupported quantization width " + std::to_string(bits));
  }
}

QuantParams quant_params(std::span<const float> group, int bits) {
  validate_bits(bits);
  if (group.empty()) throw InvalidArgument("quant_params: empty group");
  const auto [lo_f, hi_f] = min_max(group);
  const double lo = lo_f;
  const double hi = hi_f;

  QuantParams p;
  p.bits = bits;
  if (hi == lo) {
    p.zero_point = lo;
    p.scale = 0.0;
    p.degenerate = true;
    return p;
  }
  if (bits == 1) {
    p.zero_point = (3.0 * lo + hi) / 4.0;
    p.scale = (hi - lo) / 2.0;
  } else {
    p.zero_point = lo;
    p.scale = (hi - lo) / static_cast<double>(max_code(bits));
  }
  return p;
}

std::vector<std::uint8_t> quantize_group(std::span<const float> group, const QuantParams& params) {
  validate_bits(params.bits);
  std::vector<std::uint8_t> codes(group.size(), 0);
  if (group.empty() || params.degenerate || params.scale == 0.0) return codes;

  if (params.bits == 1) {
    const auto [lo, hi] = min_max(group);
    const double threshold = (static_cast<double>(lo) + static_cast<double>(hi)) / 2.0;
    for (std::size_t i = 0; i < group.size(); ++i) codes[i] = group[i] >= threshold ? 1 : 0;
    return codes;
  }

  const double top = max_code(params.bits);
  for (std::size_t i = 0; i < group.size(); ++i) {
    // nearbyint honours the default round-half-to-even mode
    const double q = std::nearbyint((group[i] - params.zero_point) / params.scale);
    codes[i] = static_cast<std::uint8_t>(std::clamp(q, 0.0, top));
  }
  return codes;
}

std::vector<float> dequantize_group(std::span<const std::uint8_t> codes, const QuantParams& params) {
  std::vector<float> out(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    out[i] = static_cast<float>(codes[i] * params.scale + params.zero_point);
  }
  return out;
}

std::size_t packed_byte_count(std::size_t count, int bits) {
  return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, int bits) {
  validate_bits(bits);
  std::vector<std::uint8_t> bytes(packed_byte_count(codes.size(), bits), 0);
  const std::uint32_t limit = max_code(bits);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] > limit) {
      throw InvalidArgument("pack_codes: code " + std::to_string(codes[i]) + " exceeds " +
                            std::to_string(bits) + "-bit range");
    }
    const std::size_t bit = i * static_cast<std::size_t>(bits);
    // widths divide 8, so a code never straddles a byte
    bytes[bit / 8] |= static_cast<std::uint8_t>(codes[i] << (bit % 8));
  }
  return bytes;
}

std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> bytes, std::size_t count, int bits) {
  validate_bits(bits);
  if (bytes.size() < packed_byte_count(count, bits)) {
    throw InvalidArgument("unpack_codes: " + std::to_string(bytes.size()) + " bytes cannot hold " +
                          std::to_string(count) + " codes of " + std::to_string(bits) + " bits");
  }
  const std::uint32_t limit = max_code(bits);
  std::vector<std::uint8_t> codes(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t bit = i * static_cast<std::size_t>(bits);
    codes[i] = static_cast<std::uint8_t>((bytes[bit / 8] >> (bit % 8)) & limit);
  }
  return codes;
}

QuantParams PackedGroup::stored_params() const {
  QuantParams p;
  p.bits = bits;
  p.zero_point = half_to_float(zero_point_half);
  p.scale = half_to_float(scale_half);
  p.degenerate = scale_half == 0;
  return p;
}

PackedGroup pack_group(std::span<const float> group, int bits) {
  const QuantParams exact = quant_params(group, bits);
  PackedGroup packed;
  packed.bits = bits;
  packed.count = static_cast<std::uint32_t>(group.size());
  packed.zero_point_half = float_to_half(static_cast<float>(exact.zero_point));
  packed.scale_half = exact.degenerate ? 0 : float_to_half(static_cast<float>(exact.scale));

  // 1-bit codes come from the threshold rule and ignore the stored constants.
  QuantParams stored = packed.stored_params();
  std::vector<std::uint8_t> codes =
      bits == 1 && !exact.degenerate ? quantize_group(group, exact) : quantize_group(group, stored);
  packed.bytes = pack_codes(codes, bits);
  return packed;
}

std::vector<float> unpack_group(const PackedGroup& group) {
  return dequantize_group(unpack_codes(group.bytes, group.count, group.bits), group.stored_params());
}

double packed_error_bound(float lo, float hi, int bits) {
  validate_bits(bits);
  const double range = static_cast<double>(hi) - static_cast<double>(lo);
  const double rounding = bits == 1 ? range / 4.0 : range / (2.0 * max_code(bits));
  // binary16 keeps 11 significant bits; z and code * s each pick up at most
  // half an ulp relative error, doubled for slack on the clamp edge.
  const double storage = 2.0 * std::ldexp(1.0, -11) *
                         (std::max(std::abs(static_cast<double>(lo)), std::abs(static_cast<double>(hi))) + range);
  return rounding + storage + 1e-6;
}

}  // namespace specache
