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

#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <shared_mutex>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tagkv/quantizer.hpp"

namespace tagkv {

enum class Precision : std::uint8_t { kInt2, kInt4 };

/// Index into the shared slot space. Slots below the pool offset are INT2.
struct SlotAddress {
    std::uint32_t index = 0;

    friend auto operator<=>(SlotAddress, SlotAddress) = default;
};

struct PoolDims {
    std::size_t n_layers = 1;
    std::size_t n_kv_heads = 1;
    std::size_t head_dim = 128;
    std::size_t page_size = kGroupSize;
};

struct PoolConfig {
    std::size_t total_slots = 0;
    std::size_t offset = 0;  // first INT4 slot; a multiple of page_size
    PoolDims dims;

    std::size_t int2_slots() const noexcept { return offset; }
    std::size_t int4_slots() const noexcept { return total_slots - offset; }
    std::size_t int2_pages() const noexcept { return offset / dims.page_size; }

    /// Throws ValidationError when offset or dims are inconsistent.
    void validate() const;
};

/// Fraction of slots in the INT2 region for average bitwidth B: (4 - B) / 2.
double int2_fraction(double budget);

/// Offset is the INT2 fraction of total_slots rounded down to whole pages.
/// Throws ValidationError when B is outside [2, 4] or fewer than two pages fit.
PoolConfig init_pool(double budget, std::size_t total_slots, const PoolDims& dims);

/// Largest pool at average bitwidth B whose buffers fit in total_bytes.
PoolConfig init_pool_from_bytes(double budget, std::size_t total_bytes, const PoolDims& dims);

// Storage per token across all layers and KV heads, parameters included.
std::size_t int2_token_bytes(const PoolDims& dims);
std::size_t int4_token_bytes(const PoolDims& dims);
std::size_t bf16_token_bytes(const PoolDims& dims);
std::size_t pool_bytes(const PoolConfig& config);

struct PageTable {
    std::string request_id;
    std::vector<SlotAddress> entries;  // one per cached token
    bool partitioned = false;

    friend bool operator==(const PageTable&, const PageTable&) = default;
};

/// Stable partition putting every INT2 address (index < offset) ahead of every
/// INT4 address. Idempotent.
PageTable partition(PageTable table, std::size_t offset);

struct RegionStats {
    std::size_t total_slots = 0;
    std::size_t live_slots = 0;
    std::size_t free_slots = 0;
    std::size_t code_bytes = 0;   // whole region
    std::size_t param_bytes = 0;  // whole region
};

struct PoolStats {
    PoolConfig config;
    RegionStats int2;
    RegionStats int4;
    std::size_t live_requests = 0;
    double live_avg_bits = 0.0;  // 0 when nothing is live
};

/// Dual-precision paged KV store over one shared slot space.
///
/// INT2 slots are handed out a page (G slots) at a time and hold per-channel
/// INT2 keys per (page, head) plus per-token INT2 values. INT4 slots hold
/// per-token INT4 keys and values. Each region has its own LIFO free list and
/// the two never exchange state.
///
/// Mutations take an exclusive lock; reads of written slots take a shared one.
class KvPool {
public:
    explicit KvPool(PoolConfig config);

    const PoolConfig& config() const noexcept { return config_; }

    Precision precision(SlotAddress address) const noexcept {
        return address.index < config_.offset ? Precision::kInt2 : Precision::kInt4;
    }

    /// Routes INT2 tokens into full pages in token order; the trailing
    /// count mod G INT2 tokens fall back to INT4 slots. Returns the table, one
    /// address per token in token order. Throws CapacityError naming the
    /// region that cannot satisfy the request; nothing is allocated then.
    const PageTable& alloc(const std::string& request, std::span<const Bitwidth> per_token_bits);

    /// Throws ValidationError for unknown requests and double frees.
    void free(const std::string& request);

    const PageTable& partition(const std::string& request);
    const PageTable& table(const std::string& request) const;
    std::vector<std::string> live_requests() const;

    /// INT4 slots only; an INT2 address is a partial page write and throws.
    void write_token(SlotAddress address, std::size_t layer, std::size_t head, std::span<const float> key,
                     std::span<const float> value);

    /// Writes one whole INT2 page. `addresses` must be the page's G slots in
    /// ascending order; keys and values are row-major [G, d].
    void write_page(std::span<const SlotAddress> addresses, std::size_t layer, std::size_t head,
                    std::span<const float> keys, std::span<const float> values);

    void read_key(SlotAddress address, std::size_t layer, std::size_t head, std::span<float> out) const;
    void read_value(SlotAddress address, std::size_t layer, std::size_t head, std::span<float> out) const;
    std::pair<std::vector<float>, std::vector<float>> read_slot(SlotAddress address, std::size_t layer,
                                                                std::size_t head) const;

    /// Allocates and writes one INT4 slot and appends it to a partitioned table.
    /// key and value are [n_layers, n_kv_heads, d] flattened.
    SlotAddress append_decode_token(const std::string& request, std::span<const float> key,
                                    std::span<const float> value);

    std::size_t free_int2_pages() const;
    std::size_t free_int4_slots() const;
    PoolStats stats() const;

private:
    std::size_t unit(SlotAddress address, std::size_t layer, std::size_t head) const noexcept;
    void check_readable(SlotAddress address, std::size_t layer, std::size_t head) const;
    void write_int4_unlocked(SlotAddress address, std::size_t layer, std::size_t head, std::span<const float> key,
                             std::span<const float> value);

    PoolConfig config_;
    std::size_t key_page_stride_;
    std::size_t int2_value_stride_;
    std::size_t int4_stride_;

    std::vector<std::uint8_t> int2_keys_;    // [page][layer][head][key page]
    std::vector<std::uint8_t> int2_values_;  // [slot][layer][head][INT2 token block]
    std::vector<std::uint8_t> int4_keys_;    // [slot - offset][layer][head][INT4 token block]
    std::vector<std::uint8_t> int4_values_;
    std::vector<std::uint8_t> written_;      // [slot][layer][head]
    std::vector<std::uint8_t> live_;         // [slot]

    std::vector<std::uint32_t> free_pages_;  // LIFO, INT2 page indices
    std::vector<std::uint32_t> free_slots_;  // LIFO, INT4 slot indices

    std::map<std::string, PageTable> tables_;
    std::set<std::string> released_;
    mutable std::shared_mutex mutex_;
};

}  // namespace tagkv
