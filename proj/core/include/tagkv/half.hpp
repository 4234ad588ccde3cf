/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The tagkv Authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstdint>

namespace tagkv {

// IEEE 754 binary16 storage helpers. Quantization parameters are stored in
// this width inside the packed buffers.

/// Round-to-nearest-even narrowing. Overflow yields +-inf, NaN stays NaN.
std::uint16_t float_to_half(float value) noexcept;

float half_to_float(std::uint16_t bits) noexcept;

/// Narrow then widen: the value a parameter takes after a trip through storage.
inline float round_to_half(float value) noexcept { return half_to_float(float_to_half(value)); }

inline constexpr float kHalfMax = 65504.0f;

}  // namespace tagkv
