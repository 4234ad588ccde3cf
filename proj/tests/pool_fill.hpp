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

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tagkv/kv_pool.hpp"
#include "tagkv/tensor.hpp"

namespace tagkv::fixture {

/// Allocates `request` with per-token bits and writes every layer's K and V
/// ([N, n_kv_heads, d]) into the pool: INT2 pages whole, INT4 slots one by one.
/// Returns the token-order table; the pool's copy is left unpartitioned.
inline PageTable fill_unpartitioned(KvPool& pool, const std::string& request, const std::vector<Bitwidth>& bits,
                                    const std::vector<const Tensor3*>& ks, const std::vector<const Tensor3*>& vs) {
    const PageTable table = pool.alloc(request, bits);
    const std::size_t g = pool.config().dims.page_size;
    std::map<std::uint32_t, std::vector<std::pair<SlotAddress, std::size_t>>> pages;
    for (std::size_t t = 0; t < table.entries.size(); ++t) {
        const SlotAddress a = table.entries[t];
        if (pool.precision(a) == Precision::kInt2) {
            pages[a.index / static_cast<std::uint32_t>(g)].push_back({a, t});
        }
    }
    for (std::size_t l = 0; l < ks.size(); ++l) {
        const Tensor3& k = *ks[l];
        const Tensor3& v = *vs[l];
        for (std::size_t h = 0; h < k.dim(1); ++h) {
            for (auto& [page, members] : pages) {
                std::sort(members.begin(), members.end());
                std::vector<SlotAddress> addresses;
                std::vector<float> kr, vr;
                for (auto [a, t] : members) {
                    addresses.push_back(a);
                    kr.insert(kr.end(), k.row(t, h).begin(), k.row(t, h).end());
                    vr.insert(vr.end(), v.row(t, h).begin(), v.row(t, h).end());
                }
                pool.write_page(addresses, l, h, kr, vr);
            }
            for (std::size_t t = 0; t < table.entries.size(); ++t) {
                const SlotAddress a = table.entries[t];
                if (pool.precision(a) == Precision::kInt4) {
                    pool.write_token(a, l, h, k.row(t, h), v.row(t, h));
                }
            }
        }
    }
    return table;
}

inline const PageTable& fill(KvPool& pool, const std::string& request, const std::vector<Bitwidth>& bits,
                             const Tensor3& k, const Tensor3& v) {
    fill_unpartitioned(pool, request, bits, {&k}, {&v});
    return pool.partition(request);
}

/// Per-token bits after the pool's residual rule: INT2 beyond the last whole
/// page become INT4.
inline std::vector<std::optional<Bitwidth>> stored_bits(const std::vector<Bitwidth>& bits, std::size_t g) {
    std::size_t int2 = 0;
    for (Bitwidth b : bits) int2 += b == Bitwidth::kInt2;
    const std::size_t paged = int2 / g * g;
    std::vector<std::optional<Bitwidth>> out;
    std::size_t seen = 0;
    for (Bitwidth b : bits) {
        if (b == Bitwidth::kInt2) {
            out.push_back(seen < paged ? Bitwidth::kInt2 : Bitwidth::kInt4);
            ++seen;
        } else {
            out.push_back(Bitwidth::kInt4);
        }
    }
    return out;
}

}  // namespace tagkv::fixture
