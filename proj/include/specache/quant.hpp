// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0
//
// Asymmetric group quantization for the low-bit KV copy.
//
//   B >= 2:  z = min, s = (max - min) / (2^B - 1), code = clamp(rne((x - z) / s))
//   B == 1:  z = (3 min + max) / 4, s = (max - min) / 2,
//            code = 1 iff x >= (min + max) / 2
//
// so a 1-bit group reconstructs to the midpoints of its lower and upper
// half-ranges. Reconstruction is x' = code * s + z for every width.
//
// Packed layout: code i occupies bits [i*B, (i+1)*B) of a little-endian byte
// stream, least-significant bit first. Side constants are stored as binary16.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace specache {

struct QuantParams {
  double zero_point = 0.0;
  double scale = 0.0;
  int bits = 2;
  /// max == min; every code is 0 and reconstruction is exactly zero_point.
  bool degenerate = false;
};

/// Accepts widths 1, 2, 4 and 8.
void validate_bits(int bits);

QuantParams quant_params(std::span<const float> group, int bits);

std::vector<std::uint8_t> quantize_group(std::span<const float> group, const QuantParams& params);

std::vector<float> dequantize_group(std::span<const std::uint8_t> codes, const QuantParams& params);

std::size_t packed_byte_count(std::size_t count, int bits);

std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, int bits);

std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> bytes, std::size_t count, int bits);

/// One quantized group in its storage form.
struct PackedGroup {
  std::vector<std::uint8_t> bytes;
  std::uint16_t zero_point_half = 0;
  std::uint16_t scale_half = 0;
  std::uint32_t count = 0;
  int bits = 2;

  QuantParams stored_params() const;
};

/// Quantizes with side constants rounded to binary16 first, so codes and
/// stored constants agree.
PackedGroup pack_group(std::span<const float> group, int bits);

std::vector<float> unpack_group(const PackedGroup& group);

/// Worst-case |x - x'| for a packed group spanning [lo, hi]: the rounding
/// bound of the scheme plus the binary16 error of the side constants.
double packed_error_bound(float lo, float hi, int bits);

}  // namespace specache
