// Copyright 2026 The SpeCache Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace specache {

/// IEEE-754 binary16 bit pattern, round-to-nearest-even from float32.
std::uint16_t float_to_half(float value);
float half_to_float(std::uint16_t bits);

inline float round_to_half(float value) { return half_to_float(float_to_half(value)); }

}  // namespace specache
