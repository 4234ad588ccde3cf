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

#include <cmath>

#include <benchmark/benchmark.h>

#include "tagkv/allocator.hpp"
#include "tagkv/rng.hpp"

using namespace tagkv;

namespace {

SensitivityTable random_table(std::size_t n_tags) {
    Rng rng(3);
    SensitivityTable t;
    for (std::size_t i = 0; i < n_tags; ++i) {
        const double d4 = rng.uniform(0.0, 1.0);
        t.entries.push_back({TagCode(static_cast<int>(i)), d4 + std::exp(rng.normal()), d4,
                             static_cast<std::size_t>(rng.uniform_int(1, 500))});
    }
    return t;
}

void BM_Exhaustive(benchmark::State& state) {
    const SensitivityTable t = random_table(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(allocate_exhaustive(t, 2.7));
}
BENCHMARK(BM_Exhaustive)->Arg(8)->Arg(12)->Arg(16)->Arg(20);

void BM_Greedy(benchmark::State& state) {
    const SensitivityTable t = random_table(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(allocate_greedy(t, 2.7));
}
BENCHMARK(BM_Greedy)->Arg(12)->Arg(56);

}  // namespace

BENCHMARK_MAIN();
