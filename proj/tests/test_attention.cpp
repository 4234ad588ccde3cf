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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include <gtest/gtest.h>

#include "oracle.hpp"
#include "pool_fill.hpp"
#include "tagkv/attention.hpp"
#include "tagkv/error.hpp"
#include "tagkv/kv_pool.hpp"
#include "tagkv/quantizer.hpp"

using namespace tagkv;

namespace {

Tensor2 query_row(const Tensor3& q, std::size_t i) {
    Tensor2 out({q.dim(1), q.dim(2)});
    for (std::size_t h = 0; h < q.dim(1); ++h) {
        std::copy(q.row(i, h).begin(), q.row(i, h).end(), out.row(h).begin());
    }
    return out;
}

}  // namespace

TEST(Attention, SingleTokenReturnsValue) {
    Rng rng(1);
    const Tensor3 q = oracle::random_tensor(rng, 1, 2, 8);
    const Tensor3 k = oracle::random_tensor(rng, 1, 1, 8);
    const Tensor3 v = oracle::random_tensor(rng, 1, 1, 8);
    const Tensor3 out = attention_full({q, k, v}, true);
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t c = 0; c < 8; ++c) EXPECT_FLOAT_EQ(out(0, h, c), v(0, 0, c));
}

TEST(Attention, IdenticalRowsReturnThatRow) {
    Rng rng(2);
    const Tensor3 q = oracle::random_tensor(rng, 4, 1, 8);
    Tensor3 k({6, 1, 8}), v({6, 1, 8});
    for (std::size_t t = 0; t < 6; ++t)
        for (std::size_t c = 0; c < 8; ++c) {
            k(t, 0, c) = 0.3f * static_cast<float>(c);
            v(t, 0, c) = 1.0f - static_cast<float>(c);
        }
    const Tensor3 out = attention_full({q, k, v}, false);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out(i, 0, c), v(0, 0, c), 1e-6);
}

TEST(Attention, MatchesDoubleOracle) {
    Rng rng(3);
    for (bool causal : {false, true}) {
        const Tensor3 q = oracle::random_tensor(rng, 8, 4, 4);
        const Tensor3 k = oracle::random_tensor(rng, 8, 2, 4);
        const Tensor3 v = oracle::random_tensor(rng, 8, 2, 4);
        const Tensor3 out = attention_full({q, k, v}, causal);
        EXPECT_LE(oracle::max_relative_error(out, oracle::attention(q, k, v, causal)), 1e-6);
    }
}

TEST(Attention, CausalQueriesAreTheLastPositions) {
    Rng rng(4);
    const Tensor3 q = oracle::random_tensor(rng, 3, 1, 8);
    const Tensor3 k = oracle::random_tensor(rng, 10, 1, 8);
    const Tensor3 v = oracle::random_tensor(rng, 10, 1, 8);
    const auto w = attention_weights({q, k, v}, true, 0, 0);
    // Query 0 sits at position 7 and sees 8 keys.
    EXPECT_EQ(w.size(), 8u);
    EXPECT_EQ(attention_weights({q, k, v}, true, 2, 0).size(), 10u);
    EXPECT_LE(oracle::max_relative_error(attention_full({q, k, v}, true), oracle::attention(q, k, v, true)), 1e-6);
}

TEST(Attention, SoftmaxRowsSumToOne) {
    Rng rng(5);
    const Tensor3 q = oracle::random_tensor(rng, 5, 2, 16, 3.0);
    const Tensor3 k = oracle::random_tensor(rng, 40, 1, 16, 3.0);
    const Tensor3 v = oracle::random_tensor(rng, 40, 1, 16);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t h = 0; h < 2; ++h) {
            const auto w = attention_weights({q, k, v}, false, i, h);
            EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-6);
        }
}

TEST(Attention, ShapeChecks) {
    const Tensor3 q({2, 3, 8}), k({4, 2, 8}), v({4, 2, 8});
    EXPECT_THROW(attention_full({q, k, v}, false), ShapeError);
    const Tensor3 q2({5, 2, 8});
    EXPECT_THROW(attention_full({q2, k, v}, true), ShapeError);
}

TEST(Mse, Examples) {
    Tensor3 a({3, 2, 4}, 1.0f);
    EXPECT_EQ(output_mse(a, a), 0.0);
    Tensor3 b({3, 2, 4}, 2.0f);
    EXPECT_DOUBLE_EQ(output_mse(a, b), 4.0);
    Rng rng(6);
    const Tensor3 x = oracle::random_tensor(rng, 7, 3, 5), y = oracle::random_tensor(rng, 7, 3, 5);
    const auto per_head = output_mse_per_head(x, y);
    const auto expected = oracle::mse_per_head(x, y);
    for (std::size_t h = 0; h < 3; ++h) EXPECT_NEAR(per_head[h], expected[h], 1e-12 * expected[h]);
    EXPECT_NEAR(output_mse(x, y), (expected[0] + expected[1] + expected[2]) / 3.0, 1e-12);
}

TEST(SelectiveQuant, AbsentTagChangesNothing) {
    Rng rng(7);
    const Tensor3 q = oracle::random_tensor(rng, 40, 2, 32);
    const Tensor3 k = oracle::random_tensor(rng, 40, 1, 32), v = oracle::random_tensor(rng, 40, 1, 32);
    const std::vector<TagCode> tags(40, TagCode(3));
    const Tensor3 ref = attention_full({q, k, v}, true);
    EXPECT_EQ(attention_selective_quant({q, k, v}, tags, 9, Bitwidth::kInt2), ref);
    EXPECT_THROW(attention_selective_quant({q, k, v}, tags, 56, Bitwidth::kInt2), ValidationError);
    const std::vector<TagCode> short_tags(39, TagCode(3));
    EXPECT_THROW(attention_selective_quant({q, k, v}, short_tags, 3, Bitwidth::kInt2), ValidationError);
}

TEST(SelectiveQuant, GridAlignedFourBitIsLossless) {
    Rng rng(8);
    const Tensor3 q = oracle::random_tensor(rng, 16, 1, 32, 0.1);
    Tensor3 k({16, 1, 32}), v({16, 1, 32});
    for (std::size_t t = 0; t < 16; ++t)
        for (std::size_t c = 0; c < 32; ++c) {
            k(t, 0, c) = c == 0 ? 0.0f : c == 1 ? 15.0f : static_cast<float>(rng.uniform_int(0, 15));
            v(t, 0, c) = c == 0 ? 0.0f : c == 1 ? 15.0f : static_cast<float>(rng.uniform_int(0, 15));
        }
    const std::vector<TagCode> tags(16, TagCode(1));
    EXPECT_EQ(attention_selective_quant({q, k, v}, tags, 1, Bitwidth::kInt4), attention_full({q, k, v}, true));
}

TEST(SelectiveQuant, MatchesManualDequantOracle) {
    Rng rng(9);
    const std::size_t n = 80;
    const Tensor3 q = oracle::random_tensor(rng, n, 2, 32);
    const Tensor3 k = oracle::random_tensor(rng, n, 1, 32), v = oracle::random_tensor(rng, n, 1, 32);
    std::vector<TagCode> tags;
    std::vector<bool> marked;
    for (std::size_t t = 0; t < n; ++t) {
        const bool m = t % 2 == 0;  // 40 rows: one page and 8 residual rows
        tags.push_back(TagCode(m ? 5 : 6));
        marked.push_back(m);
    }
    for (Bitwidth b : {Bitwidth::kInt2, Bitwidth::kInt4}) {
        const auto [ko, vo] = oracle::manual_storage(k, v, marked, b);
        const Tensor3 expected = attention_full({q, ko, vo}, true);
        const Tensor3 got = attention_selective_quant({q, k, v}, tags, 5, b);
        EXPECT_EQ(got, expected);
        EXPECT_GT(output_mse(attention_full({q, k, v}, true), got), 0.0);
    }
}

TEST(SelectiveQuant, TwoBitHurtsMoreThanFourBit) {
    Rng rng(10);
    for (int inst = 0; inst < 20; ++inst) {
        const std::size_t n = 96;
        const Tensor3 q = oracle::random_tensor(rng, n, 2, 32);
        const Tensor3 k = oracle::random_tensor(rng, n, 1, 32), v = oracle::random_tensor(rng, n, 1, 32);
        std::vector<TagCode> tags;
        for (std::size_t t = 0; t < n; ++t) tags.push_back(TagCode(t < 64 ? 2 : 3));
        const Tensor3 ref = attention_full({q, k, v}, true);
        const double m2 = output_mse(ref, attention_selective_quant({q, k, v}, tags, 2, Bitwidth::kInt2));
        const double m4 = output_mse(ref, attention_selective_quant({q, k, v}, tags, 2, Bitwidth::kInt4));
        EXPECT_GE(m2, m4);
    }
}

TEST(SimulateStorage, ResidualRowsTakeFourBits) {
    Rng rng(11);
    const Tensor3 k = oracle::random_tensor(rng, 40, 1, 32), v = oracle::random_tensor(rng, 40, 1, 32);
    std::vector<std::optional<Bitwidth>> bits(40, Bitwidth::kInt2);
    const StoredKV s = simulate_storage(k, v, bits);
    for (std::size_t t = 32; t < 40; ++t) {
        const auto kk = decode_token_block(encode_token_block(k.row(t, 0), Bitwidth::kInt4));
        for (std::size_t c = 0; c < 32; ++c) EXPECT_EQ(s.k(t, 0, c), kk[c]);
    }
    const std::vector<std::optional<Bitwidth>> none(40);
    EXPECT_EQ(simulate_storage(k, v, none).k, k);
}

TEST(Merge, SinglePartialNormalizes) {
    Tensor2 values({3, 2}, std::vector<float>{1, 2, 3, 4, 5, 6});
    const std::vector<float> logits{0.1f, -0.4f, 0.7f};
    const SplitPartial p = make_partial(logits, values);
    const auto out = merge_partials(std::vector<SplitPartial>{p});
    double z = 0.0, o0 = 0.0, o1 = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
        const double w = std::exp(static_cast<double>(logits[j]));
        z += w;
        o0 += w * values(j, 0);
        o1 += w * values(j, 1);
    }
    EXPECT_NEAR(out[0], o0 / z, 1e-6);
    EXPECT_NEAR(out[1], o1 / z, 1e-6);
    EXPECT_NEAR(p.log_sum_exp, std::log(z), 1e-6);
    EXPECT_THROW(merge_partials(std::vector<SplitPartial>{}), ValidationError);
}

TEST(Merge, OrderDoesNotMatter) {
    Rng rng(12);
    std::vector<SplitPartial> parts;
    for (int s = 0; s < 4; ++s) {
        Tensor2 values({5, 8});
        for (float& x : values.data()) x = static_cast<float>(rng.normal());
        std::vector<float> logits(5);
        for (float& x : logits) x = static_cast<float>(4.0 * rng.normal());
        parts.push_back(make_partial(logits, values));
    }
    const SplitPartial ab = combine_partials(parts[0], parts[1]);
    const SplitPartial ba = combine_partials(parts[1], parts[0]);
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(ab.accumulator[c], ba.accumulator[c], 1e-6);
    const auto left = merge_partials(std::vector<SplitPartial>{
        combine_partials(combine_partials(parts[0], parts[1]), combine_partials(parts[2], parts[3]))});
    const auto right = merge_partials(std::vector<SplitPartial>{
        combine_partials(parts[3], combine_partials(parts[2], combine_partials(parts[1], parts[0])))});
    const auto flat = merge_partials(parts);
    for (std::size_t c = 0; c < 8; ++c) {
        EXPECT_NEAR(left[c], flat[c], 1e-6);
        EXPECT_NEAR(right[c], flat[c], 1e-6);
    }
}

TEST(FlashDecode, SingleTokenReturnsStoredValue) {
    KvPool pool(init_pool(3.0, 128, PoolDims{1, 1, 32, 32}));
    Rng rng(13);
    const Tensor3 k = oracle::random_tensor(rng, 1, 1, 32), v = oracle::random_tensor(rng, 1, 1, 32);
    const PageTable& table = fixture::fill(pool, "r", {Bitwidth::kInt4}, k, v);
    Tensor2 q({2, 32});
    for (float& x : q.data()) x = static_cast<float>(rng.normal());
    const Tensor2 out = flash_decode(q, table, pool, 0);
    const auto stored = pool.read_slot(table.entries[0], 0, 0).second;
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t c = 0; c < 32; ++c) EXPECT_FLOAT_EQ(out(h, c), stored[c]);
}

TEST(FlashDecode, MixedTableMatchesDenseOracle) {
    Rng rng(14);
    const std::size_t n = 150, d = 64;
    KvPool pool(init_pool(3.0, 512, PoolDims{1, 2, d, 32}));
    const Tensor3 k = oracle::random_tensor(rng, n, 2, d), v = oracle::random_tensor(rng, n, 2, d);
    std::vector<Bitwidth> bits;
    for (std::size_t t = 0; t < n; ++t) bits.push_back(rng.bernoulli(0.6) ? Bitwidth::kInt2 : Bitwidth::kInt4);
    const std::vector<SlotAddress> order = fixture::fill_unpartitioned(pool, "r", bits, {&k}, {&v}).entries;
    const PageTable& table = pool.partition("r");
    ASSERT_TRUE(std::is_permutation(order.begin(), order.end(), table.entries.begin()));
    const StoredKV stored = simulate_storage(k, v, fixture::stored_bits(bits, 32));
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t h = 0; h < 2; ++h) {
            const auto [key, value] = pool.read_slot(order[t], 0, h);
            ASSERT_TRUE(std::equal(key.begin(), key.end(), stored.k.row(t, h).begin())) << t;
            ASSERT_TRUE(std::equal(value.begin(), value.end(), stored.v.row(t, h).begin())) << t;
        }
    }
    const Tensor3 q3 = oracle::random_tensor(rng, 1, 8, d);
    const Tensor2 q = query_row(q3, 0);
    const auto ref = oracle::attention(q3, stored.k, stored.v, false);
    for (std::size_t split : {std::size_t{1}, std::size_t{32}, std::size_t{128}, n}) {
        const Tensor2 out = flash_decode(q, table, pool, 0, split);
        EXPECT_LE(oracle::max_relative_error(out.storage(), ref), 1e-5) << split;
    }
}

TEST(FlashDecode, RejectsUnpartitionedTables) {
    KvPool pool(init_pool(3.0, 256, PoolDims{1, 1, 32, 32}));
    Rng rng(15);
    const Tensor3 k = oracle::random_tensor(rng, 40, 1, 32), v = oracle::random_tensor(rng, 40, 1, 32);
    std::vector<Bitwidth> bits(40, Bitwidth::kInt4);
    for (std::size_t t = 8; t < 40; ++t) bits[t] = Bitwidth::kInt2;
    const PageTable table = fixture::fill(pool, "r", bits, k, v);
    Tensor2 q({1, 32}, 0.1f);
    PageTable swapped = table;
    std::reverse(swapped.entries.begin(), swapped.entries.end());
    EXPECT_THROW(flash_decode(q, swapped, pool, 0), ValidationError);
    PageTable dangling = table;
    dangling.entries.push_back(SlotAddress{255});
    EXPECT_THROW(flash_decode(q, dangling, pool, 0), ValidationError);
    EXPECT_THROW(flash_decode(q, table, pool, 0, 0), ValidationError);
}
