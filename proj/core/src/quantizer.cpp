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

#include "tagkv/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tagkv/error.hpp"
#include "tagkv/half.hpp"

namespace tagkv {
namespace {

struct Params {
    float scale;
    float zero;
};

/// Writes one code per value; returns the unnarrowed parameters.
Params quantize_into(std::span<const float> values, Bitwidth bits, std::span<std::uint8_t> codes) {
    if (values.empty()) {
        throw ValidationError("cannot quantize an empty group");
    }
    float lo = values[0];
    float hi = values[0];
    for (float x : values) {
        if (!std::isfinite(x)) {
            throw ValidationError("cannot quantize a non-finite value");
        }
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    const std::uint8_t qmax = max_code(bits);
    const float scale = hi > lo ? (hi - lo) / static_cast<float>(qmax) : 0.0f;
    if (std::fabs(lo) > kHalfMax || scale > kHalfMax) {
        throw ValidationError("group parameters exceed the 16-bit float range");
    }
    if (scale == 0.0f) {
        std::fill(codes.begin(), codes.end(), std::uint8_t{0});
        return {0.0f, lo};
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        const float q = std::round((values[i] - lo) / scale);
        codes[i] = static_cast<std::uint8_t>(std::clamp(q, 0.0f, static_cast<float>(qmax)));
    }
    return {scale, lo};
}

inline float dequant(std::uint8_t code, float scale_h, float zero_h) {
    return static_cast<float>(code) * scale_h + zero_h;
}

void store_half(std::uint8_t* dst, float value) {
    const std::uint16_t h = float_to_half(value);
    dst[0] = static_cast<std::uint8_t>(h & 0xffu);
    dst[1] = static_cast<std::uint8_t>(h >> 8);
}

float load_half(const std::uint8_t* src) {
    return half_to_float(static_cast<std::uint16_t>(src[0] | (src[1] << 8)));
}

inline void put_code(std::uint8_t* bytes, std::size_t index, int b, std::uint8_t code) {
    const std::size_t bit = index * static_cast<std::size_t>(b);
    bytes[bit / 8] |= static_cast<std::uint8_t>(code << (bit % 8));
}

inline std::uint8_t get_code(const std::uint8_t* bytes, std::size_t index, int b) {
    const std::size_t bit = index * static_cast<std::size_t>(b);
    return static_cast<std::uint8_t>((bytes[bit / 8] >> (bit % 8)) & ((1u << b) - 1u));
}

void check_divisible(std::size_t head_dim, std::size_t group_size) {
    check_group_size(group_size);
    if (head_dim == 0 || head_dim % group_size != 0) {
        throw ShapeError("head_dim " + std::to_string(head_dim) + " is not a multiple of group size " +
                         std::to_string(group_size));
    }
}

void check_span(std::size_t actual, std::size_t expected, const char* what) {
    if (actual != expected) {
        throw ShapeError(std::string(what) + ": expected " + std::to_string(expected) + " bytes, got " +
                         std::to_string(actual));
    }
}

}  // namespace

Bitwidth bitwidth_from_int(int bits) {
    if (bits == 2) return Bitwidth::kInt2;
    if (bits == 4) return Bitwidth::kInt4;
    throw ValidationError("unsupported bitwidth " + std::to_string(bits));
}

void check_group_size(std::size_t group_size) {
    if (group_size == 0 || group_size % 4 != 0) {
        throw ValidationError("group size must be a positive multiple of 4, got " + std::to_string(group_size));
    }
}

QuantGroup quantize_group(std::span<const float> values, Bitwidth bits) {
    QuantGroup group;
    group.bits = bits;
    group.codes.resize(values.size());
    const Params p = quantize_into(values, bits, group.codes);
    group.scale = p.scale;
    group.zero_offset = p.zero;
    return group;
}

std::vector<float> dequantize_group(const QuantGroup& group) {
    const float scale_h = round_to_half(group.scale);
    const float zero_h = round_to_half(group.zero_offset);
    std::vector<float> out(group.codes.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = dequant(group.codes[i], scale_h, zero_h);
    }
    return out;
}

std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, Bitwidth bits) {
    const int b = bit_count(bits);
    std::vector<std::uint8_t> bytes((codes.size() * b + 7) / 8, 0);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] > max_code(bits)) {
            throw ValidationError("code " + std::to_string(codes[i]) + " does not fit in " + std::to_string(b) +
                                  " bits");
        }
        put_code(bytes.data(), i, b, codes[i]);
    }
    return bytes;
}

std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> bytes, Bitwidth bits, std::size_t count) {
    const int b = bit_count(bits);
    if (bytes.size() * 8 < count * static_cast<std::size_t>(b)) {
        throw ShapeError("too few bytes to unpack " + std::to_string(count) + " codes");
    }
    std::vector<std::uint8_t> codes(count);
    for (std::size_t i = 0; i < count; ++i) {
        codes[i] = get_code(bytes.data(), i, b);
    }
    return codes;
}

std::size_t key_page_bytes(std::size_t head_dim, std::size_t group_size) {
    return head_dim * group_size * 2 / 8 + head_dim * 4;
}

std::size_t token_block_bytes(std::size_t head_dim, Bitwidth bits, std::size_t group_size) {
    return head_dim * static_cast<std::size_t>(bit_count(bits)) / 8 + (head_dim / group_size) * 4;
}

// ---------------------------------------------------------------------------
// Key pages: channel c occupies code bytes [c*G/4, (c+1)*G/4), token row r is
// code r within that run. Parameter pair for channel c follows the codes.

void encode_key_page_into(std::span<const float> keys, std::size_t head_dim, std::size_t group_size,
                          std::span<std::uint8_t> out) {
    check_group_size(group_size);
    check_span(keys.size(), head_dim * group_size, "key page input");
    check_span(out.size(), key_page_bytes(head_dim, group_size), "key page payload");
    std::fill(out.begin(), out.end(), std::uint8_t{0});

    const std::size_t channel_bytes = group_size / 4;
    std::uint8_t* params = out.data() + head_dim * channel_bytes;
    std::vector<float> column(group_size);
    std::vector<std::uint8_t> codes(group_size);
    for (std::size_t c = 0; c < head_dim; ++c) {
        for (std::size_t r = 0; r < group_size; ++r) {
            column[r] = keys[r * head_dim + c];
        }
        const Params p = quantize_into(column, Bitwidth::kInt2, codes);
        std::uint8_t* run = out.data() + c * channel_bytes;
        for (std::size_t r = 0; r < group_size; ++r) {
            put_code(run, r, 2, codes[r]);
        }
        store_half(params + c * 4, p.scale);
        store_half(params + c * 4 + 2, p.zero);
    }
}

void decode_key_page_row(std::span<const std::uint8_t> payload, std::size_t head_dim, std::size_t group_size,
                         std::size_t row, std::span<float> out) {
    check_span(payload.size(), key_page_bytes(head_dim, group_size), "key page payload");
    check_span(out.size(), head_dim, "key row output");
    const std::size_t channel_bytes = group_size / 4;
    const std::uint8_t* params = payload.data() + head_dim * channel_bytes;
    for (std::size_t c = 0; c < head_dim; ++c) {
        const std::uint8_t code = get_code(payload.data() + c * channel_bytes, row, 2);
        out[c] = dequant(code, load_half(params + c * 4), load_half(params + c * 4 + 2));
    }
}

KeyPageBlock encode_key_page_int2(const Tensor2& keys, std::size_t head, std::size_t group_size) {
    if (keys.dim(0) != group_size) {
        throw ShapeError("key page needs exactly " + std::to_string(group_size) + " token rows, got " +
                         std::to_string(keys.dim(0)));
    }
    KeyPageBlock block{head, keys.dim(1), group_size, std::vector<std::uint8_t>(key_page_bytes(keys.dim(1), group_size))};
    encode_key_page_into(keys.data(), block.head_dim, group_size, block.payload);
    return block;
}

Tensor2 decode_key_page_int2(const KeyPageBlock& block) {
    Tensor2 keys({block.group_size, block.head_dim});
    for (std::size_t r = 0; r < block.group_size; ++r) {
        decode_key_page_row(block.payload, block.head_dim, block.group_size, r, keys.row(r));
    }
    return keys;
}

// ---------------------------------------------------------------------------
// Token blocks: all d codes first, then one parameter pair per channel group.

void encode_token_into(std::span<const float> vec, Bitwidth bits, std::size_t group_size,
                       std::span<std::uint8_t> out) {
    const std::size_t d = vec.size();
    check_divisible(d, group_size);
    check_span(out.size(), token_block_bytes(d, bits, group_size), "token block payload");
    std::fill(out.begin(), out.end(), std::uint8_t{0});

    const int b = bit_count(bits);
    std::uint8_t* params = out.data() + d * b / 8;
    std::vector<std::uint8_t> codes(group_size);
    for (std::size_t g = 0; g < d / group_size; ++g) {
        const Params p = quantize_into(vec.subspan(g * group_size, group_size), bits, codes);
        for (std::size_t i = 0; i < group_size; ++i) {
            put_code(out.data(), g * group_size + i, b, codes[i]);
        }
        store_half(params + g * 4, p.scale);
        store_half(params + g * 4 + 2, p.zero);
    }
}

void decode_token_from(std::span<const std::uint8_t> payload, Bitwidth bits, std::size_t group_size,
                       std::span<float> out) {
    const std::size_t d = out.size();
    check_divisible(d, group_size);
    check_span(payload.size(), token_block_bytes(d, bits, group_size), "token block payload");
    const int b = bit_count(bits);
    const std::uint8_t* params = payload.data() + d * b / 8;
    for (std::size_t g = 0; g < d / group_size; ++g) {
        const float scale_h = load_half(params + g * 4);
        const float zero_h = load_half(params + g * 4 + 2);
        for (std::size_t i = 0; i < group_size; ++i) {
            const std::size_t c = g * group_size + i;
            out[c] = dequant(get_code(payload.data(), c, b), scale_h, zero_h);
        }
    }
}

TokenBlock encode_token_block(std::span<const float> vec, Bitwidth bits, std::size_t group_size) {
    check_divisible(vec.size(), group_size);
    TokenBlock block{bits, vec.size(), group_size,
                     std::vector<std::uint8_t>(token_block_bytes(vec.size(), bits, group_size))};
    encode_token_into(vec, bits, group_size, block.payload);
    return block;
}

std::vector<float> decode_token_block(const TokenBlock& block) {
    std::vector<float> out(block.head_dim);
    decode_token_from(block.payload, block.bits, block.group_size, out);
    return out;
}

}  // namespace tagkv
