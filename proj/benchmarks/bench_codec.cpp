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

#include <vector>

#include <benchmark/benchmark.h>

#include "tagkv/quantizer.hpp"
#include "tagkv/rng.hpp"

using namespace tagkv;

namespace {

Tensor2 random_page(std::size_t d) {
    Rng rng(1);
    Tensor2 t({kGroupSize, d});
    for (float& x : t.data()) x = static_cast<float>(rng.normal());
    return t;
}

void BM_EncodeKeyPage(benchmark::State& state) {
    const auto d = static_cast<std::size_t>(state.range(0));
    const Tensor2 page = random_page(d);
    for (auto _ : state) benchmark::DoNotOptimize(encode_key_page_int2(page, 0));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(kGroupSize));
}
BENCHMARK(BM_EncodeKeyPage)->Arg(64)->Arg(128);

void BM_DecodeKeyPage(benchmark::State& state) {
    const auto d = static_cast<std::size_t>(state.range(0));
    const KeyPageBlock block = encode_key_page_int2(random_page(d), 0);
    for (auto _ : state) benchmark::DoNotOptimize(decode_key_page_int2(block));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(kGroupSize));
}
BENCHMARK(BM_DecodeKeyPage)->Arg(64)->Arg(128);

void BM_TokenBlock(benchmark::State& state) {
    const Bitwidth bits = state.range(0) == 2 ? Bitwidth::kInt2 : Bitwidth::kInt4;
    const Tensor2 page = random_page(128);
    const auto row = page.row(0);
    for (auto _ : state) benchmark::DoNotOptimize(decode_token_block(encode_token_block(row, bits)));
}
BENCHMARK(BM_TokenBlock)->Arg(2)->Arg(4);

}  // namespace

BENCHMARK_MAIN();
