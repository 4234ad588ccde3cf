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

#include <map>
#include <vector>

#include <benchmark/benchmark.h>

#include "tagkv/attention.hpp"
#include "tagkv/kv_pool.hpp"
#include "tagkv/rng.hpp"

using namespace tagkv;

namespace {

// N tokens at d = 128, 2 KV heads, 8 query heads; the first int2_percent go INT2.
void BM_FlashDecode(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto int2 = n * static_cast<std::size_t>(state.range(1)) / 100;
    const std::size_t d = 128, kv = 2, heads = 8;
    const PoolDims dims{1, kv, d, kGroupSize};
    KvPool pool(init_pool(3.0, 2 * n + 2 * kGroupSize, dims));
    std::vector<Bitwidth> bits(n, Bitwidth::kInt4);
    std::fill_n(bits.begin(), int2, Bitwidth::kInt2);
    const PageTable table = pool.alloc("r", bits);

    Rng rng(2);
    std::vector<float> keys(kGroupSize * d), values(kGroupSize * d), row(d);
    std::map<std::uint32_t, std::vector<SlotAddress>> pages;
    for (SlotAddress a : table.entries) {
        if (pool.precision(a) == Precision::kInt2) pages[a.index / kGroupSize].push_back(a);
    }
    for (std::size_t h = 0; h < kv; ++h) {
        for (const auto& [page, slots] : pages) {
            for (float& x : keys) x = static_cast<float>(rng.normal());
            for (float& x : values) x = static_cast<float>(rng.normal());
            pool.write_page(slots, 0, h, keys, values);
        }
        for (SlotAddress a : table.entries) {
            if (pool.precision(a) != Precision::kInt4) continue;
            for (float& x : row) x = static_cast<float>(rng.normal());
            pool.write_token(a, 0, h, row, row);
        }
    }
    const PageTable& parted = pool.partition("r");
    Tensor2 q({heads, d});
    for (float& x : q.data()) x = static_cast<float>(rng.normal());
    const auto split = static_cast<std::size_t>(state.range(2));
    for (auto _ : state) benchmark::DoNotOptimize(flash_decode(q, parted, pool, 0, split));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_FlashDecode)
    ->Args({1024, 0, 128})
    ->Args({1024, 65, 128})
    ->Args({1024, 100, 128})
    ->Args({4096, 65, 128})
    ->Args({4096, 65, 32});

}  // namespace

BENCHMARK_MAIN();
