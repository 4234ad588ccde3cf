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

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tagkv/tensor.hpp"
#include "tagkv/trace_model.hpp"

namespace tagkv {

enum class Bitwidth : std::uint8_t { kInt2 = 2, kInt4 = 4 };

constexpr int bit_count(Bitwidth b) noexcept { return static_cast<int>(b); }
constexpr std::uint8_t max_code(Bitwidth b) noexcept { return static_cast<std::uint8_t>((1u << bit_count(b)) - 1); }

/// Throws ValidationError unless bits is 2 or 4.
Bitwidth bitwidth_from_int(int bits);

/// Asymmetric group: x ~ code * scale + zero_offset, zero_offset the group minimum.
struct QuantGroup {
    std::vector<std::uint8_t> codes;
    float scale = 0.0f;
    float zero_offset = 0.0f;
    Bitwidth bits = Bitwidth::kInt4;

    friend bool operator==(const QuantGroup&, const QuantGroup&) = default;
};

/// scale = (max - min) / (2^b - 1), or 0 for a constant group; codes round half
/// away from zero and clamp to [0, 2^b - 1]. Throws ValidationError on empty
/// or non-finite input, or when a parameter exceeds the 16-bit float range.
QuantGroup quantize_group(std::span<const float> values, Bitwidth bits);

/// Parameters are narrowed to binary16 first, exactly as stored in the buffers.
std::vector<float> dequantize_group(const QuantGroup& group);

/// Code i sits at bits [i*b mod 8, i*b mod 8 + b) of byte floor(i*b / 8).
std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, Bitwidth bits);
std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> bytes, Bitwidth bits, std::size_t count);

// ---------------------------------------------------------------------------
// Buffer layouts. Parameters are (scale, zero_offset) binary16 pairs, little-endian.

/// d*G*2/8 code bytes (channel-major, G codes per channel) + d*4 parameter bytes.
std::size_t key_page_bytes(std::size_t head_dim, std::size_t group_size = kGroupSize);

/// d*b/8 code bytes + (d/G)*4 parameter bytes.
std::size_t token_block_bytes(std::size_t head_dim, Bitwidth bits, std::size_t group_size = kGroupSize);

/// Per-channel INT2 keys for one (page, head): G tokens of one page.
struct KeyPageBlock {
    std::size_t head = 0;
    std::size_t head_dim = 0;
    std::size_t group_size = kGroupSize;
    std::vector<std::uint8_t> payload;

    friend bool operator==(const KeyPageBlock&, const KeyPageBlock&) = default;
};

/// Per-token codes for one (token, head); channels split into d/G groups.
struct TokenBlock {
    Bitwidth bits = Bitwidth::kInt4;
    std::size_t head_dim = 0;
    std::size_t group_size = kGroupSize;
    std::vector<std::uint8_t> payload;

    friend bool operator==(const TokenBlock&, const TokenBlock&) = default;
};

/// keys is [G, d]. Throws ShapeError when the row count is not G.
KeyPageBlock encode_key_page_int2(const Tensor2& keys, std::size_t head, std::size_t group_size = kGroupSize);
Tensor2 decode_key_page_int2(const KeyPageBlock& block);

/// Throws ShapeError when d is not a multiple of G.
TokenBlock encode_token_block(std::span<const float> vec, Bitwidth bits, std::size_t group_size = kGroupSize);
std::vector<float> decode_token_block(const TokenBlock& block);

// Span-level forms that read and write pool buffers in place. `keys` is a
// row-major [G, d] block; output spans must be exactly the layout size.
void encode_key_page_into(std::span<const float> keys, std::size_t head_dim, std::size_t group_size,
                          std::span<std::uint8_t> out);
void decode_key_page_row(std::span<const std::uint8_t> payload, std::size_t head_dim, std::size_t group_size,
                         std::size_t row, std::span<float> out);
void encode_token_into(std::span<const float> vec, Bitwidth bits, std::size_t group_size,
                       std::span<std::uint8_t> out);
void decode_token_from(std::span<const std::uint8_t> payload, Bitwidth bits, std::size_t group_size,
                       std::span<float> out);

/// Throws ValidationError unless group_size is a positive multiple of 4.
void check_group_size(std::size_t group_size);

}  // namespace tagkv
