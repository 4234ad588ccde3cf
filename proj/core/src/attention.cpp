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

#include "tagkv/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "tagkv/error.hpp"

namespace tagkv {
namespace {

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

float resolve_scale(float softmax_scale, std::size_t d) {
    return softmax_scale != 0.0f ? softmax_scale : 1.0f / std::sqrt(static_cast<float>(d));
}

void check_inputs(const AttentionInputs& in, bool causal) {
    const std::size_t d = in.q.dim(2);
    if (in.k.shape() != in.v.shape() || in.k.dim(2) != d || d == 0) {
        throw ShapeError("attention: K and V must share [N, n_kv_heads, d] with Q's d");
    }
    if (in.k.dim(1) == 0 || in.q.dim(1) % in.k.dim(1) != 0) {
        throw ShapeError("attention: n_heads must be a multiple of n_kv_heads");
    }
    if (in.k.dim(0) == 0) {
        throw ShapeError("attention: empty KV sequence");
    }
    if (causal && in.q.dim(0) > in.k.dim(0)) {
        throw ShapeError("attention: causal replay needs n_q <= N");
    }
}

float dot(std::span<const float> a, std::span<const float> b) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

/// Softmax row over the visible prefix of K for one (query, head).
std::size_t softmax_row(const AttentionInputs& in, bool causal, std::size_t i, std::size_t h, float scale,
                        std::vector<float>& weights) {
    const std::size_t n = in.k.dim(0);
    const std::size_t group = in.q.dim(1) / in.k.dim(1);
    const std::size_t kv = h / group;
    const std::size_t visible = causal ? i + (n - in.q.dim(0)) + 1 : n;
    weights.resize(visible);
    const auto q = in.q.row(i, h);
    float max_logit = kNegInf;
    for (std::size_t j = 0; j < visible; ++j) {
        weights[j] = scale * dot(q, in.k.row(j, kv));
        max_logit = std::max(max_logit, weights[j]);
    }
    float sum = 0.0f;
    for (std::size_t j = 0; j < visible; ++j) {
        weights[j] = std::exp(weights[j] - max_logit);
        sum += weights[j];
    }
    for (std::size_t j = 0; j < visible; ++j) {
        weights[j] /= sum;
    }
    return kv;
}

}  // namespace

Tensor3 attention_full(const AttentionInputs& inputs, bool causal) {
    check_inputs(inputs, causal);
    const std::size_t n_q = inputs.q.dim(0);
    const std::size_t heads = inputs.q.dim(1);
    const std::size_t d = inputs.q.dim(2);
    const float scale = resolve_scale(inputs.softmax_scale, d);
    Tensor3 out({n_q, heads, d});
    std::vector<float> weights;
    for (std::size_t i = 0; i < n_q; ++i) {
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t kv = softmax_row(inputs, causal, i, h, scale, weights);
            auto o = out.row(i, h);
            for (std::size_t j = 0; j < weights.size(); ++j) {
                const float w = weights[j];
                const auto v = inputs.v.row(j, kv);
                for (std::size_t c = 0; c < d; ++c) {
                    o[c] += w * v[c];
                }
            }
        }
    }
    return out;
}

std::vector<float> attention_weights(const AttentionInputs& inputs, bool causal, std::size_t query,
                                     std::size_t head) {
    check_inputs(inputs, causal);
    if (query >= inputs.q.dim(0) || head >= inputs.q.dim(1)) {
        throw ShapeError("attention_weights: query or head out of range");
    }
    std::vector<float> weights;
    softmax_row(inputs, causal, query, head, resolve_scale(inputs.softmax_scale, inputs.q.dim(2)), weights);
    return weights;
}

StoredKV simulate_storage(const Tensor3& k, const Tensor3& v, std::span<const std::optional<Bitwidth>> bits,
                          std::size_t group_size) {
    if (k.shape() != v.shape() || bits.size() != k.dim(0)) {
        throw ShapeError("simulate_storage: bits must cover every K/V row");
    }
    check_group_size(group_size);
    const std::size_t n = k.dim(0);
    const std::size_t heads = k.dim(1);
    const std::size_t d = k.dim(2);
    StoredKV out{k, v};

    std::vector<std::size_t> int2_rows;
    for (std::size_t t = 0; t < n; ++t) {
        if (bits[t] == Bitwidth::kInt2) {
            int2_rows.push_back(t);
        }
    }
    const std::size_t pages = int2_rows.size() / group_size;
    std::vector<bool> paged(n, false);

    std::vector<float> page_keys(group_size * d);
    std::vector<std::uint8_t> key_payload(key_page_bytes(d, group_size));
    std::vector<std::uint8_t> int2_payload(token_block_bytes(d, Bitwidth::kInt2, group_size));
    std::vector<std::uint8_t> int4_payload(token_block_bytes(d, Bitwidth::kInt4, group_size));

    for (std::size_t p = 0; p < pages; ++p) {
        const std::span<const std::size_t> rows(int2_rows.data() + p * group_size, group_size);
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t r = 0; r < group_size; ++r) {
                std::copy_n(k.row(rows[r], h).begin(), d, page_keys.begin() + static_cast<std::ptrdiff_t>(r * d));
            }
            encode_key_page_into(page_keys, d, group_size, key_payload);
            for (std::size_t r = 0; r < group_size; ++r) {
                decode_key_page_row(key_payload, d, group_size, r, out.k.row(rows[r], h));
                encode_token_into(v.row(rows[r], h), Bitwidth::kInt2, group_size, int2_payload);
                decode_token_from(int2_payload, Bitwidth::kInt2, group_size, out.v.row(rows[r], h));
            }
        }
        for (std::size_t r : rows) {
            paged[r] = true;
        }
    }
    for (std::size_t t = 0; t < n; ++t) {
        if (!bits[t] || paged[t]) {
            continue;
        }
        for (std::size_t h = 0; h < heads; ++h) {
            encode_token_into(k.row(t, h), Bitwidth::kInt4, group_size, int4_payload);
            decode_token_from(int4_payload, Bitwidth::kInt4, group_size, out.k.row(t, h));
            encode_token_into(v.row(t, h), Bitwidth::kInt4, group_size, int4_payload);
            decode_token_from(int4_payload, Bitwidth::kInt4, group_size, out.v.row(t, h));
        }
    }
    return out;
}

Tensor3 attention_selective_quant(const AttentionInputs& inputs, std::span<const TagCode> tags, int target_code,
                                  Bitwidth bits, bool causal, std::size_t group_size) {
    const TagCode target(target_code);
    if (tags.size() != inputs.k.dim(0)) {
        throw ShapeError("attention_selective_quant: tags length != N");
    }
    std::vector<std::optional<Bitwidth>> row_bits(tags.size());
    for (std::size_t t = 0; t < tags.size(); ++t) {
        if (tags[t] == target) {
            row_bits[t] = bits;
        }
    }
    const StoredKV stored = simulate_storage(inputs.k, inputs.v, row_bits, group_size);
    return attention_full(AttentionInputs{inputs.q, stored.k, stored.v, inputs.softmax_scale}, causal);
}

std::vector<double> output_mse_per_head(const Tensor3& reference, const Tensor3& approx) {
    if (reference.shape() != approx.shape()) {
        throw ShapeError("output_mse: shape mismatch");
    }
    const std::size_t n = reference.dim(0);
    const std::size_t heads = reference.dim(1);
    std::vector<double> per_head(heads, 0.0);
    if (n == 0) {
        return per_head;
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t h = 0; h < heads; ++h) {
            const auto a = reference.row(i, h);
            const auto b = approx.row(i, h);
            double sq = 0.0;
            for (std::size_t c = 0; c < a.size(); ++c) {
                const double diff = static_cast<double>(a[c]) - static_cast<double>(b[c]);
                sq += diff * diff;
            }
            per_head[h] += sq;
        }
    }
    for (auto& value : per_head) {
        value /= static_cast<double>(n);
    }
    return per_head;
}

double output_mse(const Tensor3& reference, const Tensor3& approx) {
    const auto per_head = output_mse_per_head(reference, approx);
    if (per_head.empty()) {
        return 0.0;
    }
    double sum = 0.0;
    for (double value : per_head) {
        sum += value;
    }
    return sum / static_cast<double>(per_head.size());
}

// ---------------------------------------------------------------------------
// Split partials

SplitPartial make_partial(std::span<const float> logits, const Tensor2& values) {
    const std::size_t d = values.dim(1);
    SplitPartial part{std::vector<float>(d, 0.0f), kNegInf, kNegInf};
    if (logits.empty()) {
        return part;
    }
    if (values.dim(0) != logits.size()) {
        throw ShapeError("make_partial: one value row per logit");
    }
    part.max_logit = *std::max_element(logits.begin(), logits.end());
    float sum = 0.0f;
    for (std::size_t j = 0; j < logits.size(); ++j) {
        const float w = std::exp(logits[j] - part.max_logit);
        sum += w;
        const auto v = values.row(j);
        for (std::size_t c = 0; c < d; ++c) {
            part.accumulator[c] += w * v[c];
        }
    }
    part.log_sum_exp = part.max_logit + std::log(sum);
    return part;
}

SplitPartial combine_partials(const SplitPartial& a, const SplitPartial& b) {
    if (a.max_logit == kNegInf) return b;
    if (b.max_logit == kNegInf) return a;
    if (a.accumulator.size() != b.accumulator.size()) {
        throw ShapeError("combine_partials: accumulator width mismatch");
    }
    const float m = std::max(a.max_logit, b.max_logit);
    const float fa = std::exp(a.max_logit - m);
    const float fb = std::exp(b.max_logit - m);
    SplitPartial out{std::vector<float>(a.accumulator.size()), 0.0f, m};
    for (std::size_t c = 0; c < out.accumulator.size(); ++c) {
        out.accumulator[c] = a.accumulator[c] * fa + b.accumulator[c] * fb;
    }
    out.log_sum_exp = m + std::log(std::exp(a.log_sum_exp - m) + std::exp(b.log_sum_exp - m));
    return out;
}

std::vector<float> merge_partials(std::span<const SplitPartial> parts) {
    if (parts.empty()) {
        throw ValidationError("merge_partials: no partials");
    }
    float m = kNegInf;
    for (const auto& p : parts) {
        m = std::max(m, p.max_logit);
    }
    if (m == kNegInf) {
        throw ValidationError("merge_partials: every split is empty");
    }
    const std::size_t d = parts.front().accumulator.size();
    std::vector<float> out(d, 0.0f);
    float denom = 0.0f;
    for (const auto& p : parts) {
        if (p.max_logit == kNegInf) {
            continue;
        }
        if (p.accumulator.size() != d) {
            throw ShapeError("merge_partials: accumulator width mismatch");
        }
        const float f = std::exp(p.max_logit - m);
        for (std::size_t c = 0; c < d; ++c) {
            out[c] += p.accumulator[c] * f;
        }
        denom += std::exp(p.log_sum_exp - m);
    }
    for (auto& x : out) {
        x /= denom;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Flash decoding

Tensor2 flash_decode(const Tensor2& q, const PageTable& table, const KvPool& pool, std::size_t layer,
                     std::size_t split_len, float softmax_scale) {
    const auto& dims = pool.config().dims;
    const std::size_t heads = q.dim(0);
    const std::size_t d = q.dim(1);
    if (d != dims.head_dim || heads == 0 || heads % dims.n_kv_heads != 0) {
        throw ShapeError("flash_decode: q must be [n_heads, d] with n_heads a multiple of n_kv_heads");
    }
    if (split_len == 0) {
        throw ValidationError("flash_decode: split_len must be positive");
    }
    if (table.entries.empty()) {
        throw ValidationError("flash_decode: empty page table");
    }

    const auto& entries = table.entries;
    std::size_t boundary = entries.size();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const bool int2 = pool.precision(entries[i]) == Precision::kInt2;
        if (int2 && boundary != entries.size()) {
            throw ValidationError("flash_decode: page table is not partitioned (INT2 address at entry " +
                                  std::to_string(i) + " follows an INT4 address)");
        }
        if (!int2 && boundary == entries.size()) {
            boundary = i;
        }
    }

    struct Split {
        std::size_t begin;
        std::size_t end;
    };
    std::vector<Split> splits;
    for (auto [lo, hi] : {std::pair{std::size_t{0}, boundary}, std::pair{boundary, entries.size()}}) {
        for (std::size_t s = lo; s < hi; s += split_len) {
            splits.push_back({s, std::min(hi, s + split_len)});
        }
    }

    const float scale = resolve_scale(softmax_scale, d);
    const std::size_t group = heads / dims.n_kv_heads;
    std::vector<std::vector<SplitPartial>> partials(heads);
    std::vector<float> logits;
    for (std::size_t kv = 0; kv < dims.n_kv_heads; ++kv) {
        for (const Split& split : splits) {
            const std::size_t len = split.end - split.begin;
            Tensor2 keys({len, d});
            Tensor2 values({len, d});
            for (std::size_t j = 0; j < len; ++j) {
                const SlotAddress a = entries[split.begin + j];
                pool.read_key(a, layer, kv, keys.row(j));
                pool.read_value(a, layer, kv, values.row(j));
            }
            for (std::size_t h = kv * group; h < (kv + 1) * group; ++h) {
                logits.resize(len);
                for (std::size_t j = 0; j < len; ++j) {
                    logits[j] = scale * dot(q.row(h), keys.row(j));
                }
                partials[h].push_back(make_partial(logits, values));
            }
        }
    }

    Tensor2 out({heads, d});
    for (std::size_t h = 0; h < heads; ++h) {
        const auto merged = merge_partials(partials[h]);
        std::copy(merged.begin(), merged.end(), out.row(h).begin());
    }
    return out;
}

}  // namespace tagkv
