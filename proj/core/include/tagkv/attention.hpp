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
#include <optional>
#include <span>
#include <vector>

#include "tagkv/kv_pool.hpp"
#include "tagkv/quantizer.hpp"
#include "tagkv/tag.hpp"
#include "tagkv/tensor.hpp"

namespace tagkv {

inline constexpr std::size_t kDefaultSplitLen = 128;

/// Q is [n_q, n_heads, d]; K and V are [N, n_kv_heads, d]. Query head h reads
/// KV head h / (n_heads / n_kv_heads). A softmax_scale of 0 means 1/sqrt(d).
/// With causal masking the queries are the last n_q positions of the sequence.
struct AttentionInputs {
    const Tensor3& q;
    const Tensor3& k;
    const Tensor3& v;
    float softmax_scale = 0.0f;
};

Tensor3 attention_full(const AttentionInputs& inputs, bool causal);

/// Softmax row for one (query, head) over the positions it can see; exposed so
/// tests can probe normalization.
std::vector<float> attention_weights(const AttentionInputs& inputs, bool causal, std::size_t query,
                                     std::size_t head);

/// Replaces K and V rows by their stored-and-decoded images following the pool
/// rules: rows marked INT2 are taken in order in pages of G (per-channel INT2
/// keys, per-token INT2 values), the trailing count mod G INT2 rows and all
/// INT4 rows go through per-token INT4. Unmarked rows stay full precision.
struct StoredKV {
    Tensor3 k;
    Tensor3 v;
};
StoredKV simulate_storage(const Tensor3& k, const Tensor3& v, std::span<const std::optional<Bitwidth>> bits,
                          std::size_t group_size = kGroupSize);

/// Quantizes only rows tagged `target` at `bits`, then replays attention.
/// Throws ValidationError for an out-of-range tag code or a tags/K mismatch.
Tensor3 attention_selective_quant(const AttentionInputs& inputs, std::span<const TagCode> tags, int target_code,
                                  Bitwidth bits, bool causal = true, std::size_t group_size = kGroupSize);

/// Mean over positions and heads of the squared L2 distance between outputs.
double output_mse(const Tensor3& reference, const Tensor3& approx);

/// Same, reported per head (mean over positions only).
std::vector<double> output_mse_per_head(const Tensor3& reference, const Tensor3& approx);

/// Un-normalized result of attending over one split of the KV sequence:
/// accumulator = sum_j exp(l_j - max_logit) v_j, log_sum_exp = log sum_j exp(l_j).
struct SplitPartial {
    std::vector<float> accumulator;
    float log_sum_exp = 0.0f;
    float max_logit = 0.0f;
};

SplitPartial make_partial(std::span<const float> logits, const Tensor2& values);

/// Associative pairwise combination, used to merge in arbitrary orders.
SplitPartial combine_partials(const SplitPartial& a, const SplitPartial& b);

/// Rescales every partial to the global max logit, sums, normalizes.
/// Throws ValidationError on empty input.
std::vector<float> merge_partials(std::span<const SplitPartial> parts);

/// Decode attention for one query over a partitioned page table. Splits are
/// contiguous, at most split_len slots, and never cross the INT2/INT4 boundary,
/// so each split runs a single dequantization path. q is [n_heads, d]; the
/// result has the same shape. Throws ValidationError for an unpartitioned table
/// (an INT4 address ahead of an INT2 one) or a dangling slot.
Tensor2 flash_decode(const Tensor2& q, const PageTable& table, const KvPool& pool, std::size_t layer,
                     std::size_t split_len = kDefaultSplitLen, float softmax_scale = 0.0f);

}  // namespace tagkv
