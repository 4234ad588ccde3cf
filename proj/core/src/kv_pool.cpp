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

#include "tagkv/kv_pool.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>

#include "tagkv/error.hpp"

namespace tagkv {
namespace {

constexpr double kBudgetEps = 1e-9;

void check_budget(double budget) {
    if (!(budget >= 2.0 - kBudgetEps && budget <= 4.0 + kBudgetEps)) {
        throw ValidationError("average bitwidth must lie in [2, 4], got " + std::to_string(budget));
    }
}

std::string slot_name(SlotAddress address) { return "slot " + std::to_string(address.index); }

}  // namespace

void PoolConfig::validate() const {
    check_group_size(dims.page_size);
    if (dims.n_layers == 0 || dims.n_kv_heads == 0 || dims.head_dim == 0 ||
        dims.head_dim % dims.page_size != 0) {
        throw ValidationError("pool dims need layers, heads, and head_dim a multiple of the page size");
    }
    if (offset > total_slots || offset % dims.page_size != 0) {
        throw ValidationError("pool offset must be a page-aligned slot index within the pool");
    }
    if (total_slots > std::size_t{0xffffffffu}) {
        throw ValidationError("pool exceeds 2^32 slots");
    }
}

double int2_fraction(double budget) {
    check_budget(budget);
    return std::clamp((4.0 - budget) / 2.0, 0.0, 1.0);
}

PoolConfig init_pool(double budget, std::size_t total_slots, const PoolDims& dims) {
    const double fraction = int2_fraction(budget);
    check_group_size(dims.page_size);
    if (total_slots < 2 * dims.page_size) {
        throw ValidationError("pool needs at least two pages of slots");
    }
    // The epsilon absorbs binary round-off in B (2.7 is not exact), not real slack.
    const double pages = fraction * static_cast<double>(total_slots) / static_cast<double>(dims.page_size);
    const auto int2_pages = static_cast<std::size_t>(std::floor(pages + 1e-6));
    PoolConfig config{total_slots, int2_pages * dims.page_size, dims};
    config.validate();
    return config;
}

std::size_t int2_token_bytes(const PoolDims& dims) {
    const std::size_t per_head = key_page_bytes(dims.head_dim, dims.page_size) / dims.page_size +
                                 token_block_bytes(dims.head_dim, Bitwidth::kInt2, dims.page_size);
    return dims.n_layers * dims.n_kv_heads * per_head;
}

std::size_t int4_token_bytes(const PoolDims& dims) {
    return dims.n_layers * dims.n_kv_heads * 2 * token_block_bytes(dims.head_dim, Bitwidth::kInt4, dims.page_size);
}

std::size_t bf16_token_bytes(const PoolDims& dims) { return dims.n_layers * dims.n_kv_heads * 2 * dims.head_dim * 2; }

std::size_t pool_bytes(const PoolConfig& config) {
    return config.int2_slots() * int2_token_bytes(config.dims) + config.int4_slots() * int4_token_bytes(config.dims);
}

PoolConfig init_pool_from_bytes(double budget, std::size_t total_bytes, const PoolDims& dims) {
    const double fraction = int2_fraction(budget);
    check_group_size(dims.page_size);
    const double per_token = fraction * static_cast<double>(int2_token_bytes(dims)) +
                             (1.0 - fraction) * static_cast<double>(int4_token_bytes(dims));
    auto slots = static_cast<std::size_t>(std::floor(static_cast<double>(total_bytes) / per_token));
    // Page rounding moves slots from INT2 to INT4, which can overshoot by a few tokens.
    while (slots >= 2 * dims.page_size) {
        PoolConfig config = init_pool(budget, slots, dims);
        if (pool_bytes(config) <= total_bytes) {
            return config;
        }
        --slots;
    }
    throw ValidationError("byte budget holds fewer than two pages");
}

PageTable partition(PageTable table, std::size_t offset) {
    std::stable_partition(table.entries.begin(), table.entries.end(),
                          [offset](SlotAddress a) { return a.index < offset; });
    table.partitioned = true;
    return table;
}

// ---------------------------------------------------------------------------

KvPool::KvPool(PoolConfig config) : config_(config) {
    config_.validate();
    const auto& dims = config_.dims;
    const std::size_t per_slot = dims.n_layers * dims.n_kv_heads;
    key_page_stride_ = key_page_bytes(dims.head_dim, dims.page_size);
    int2_value_stride_ = token_block_bytes(dims.head_dim, Bitwidth::kInt2, dims.page_size);
    int4_stride_ = token_block_bytes(dims.head_dim, Bitwidth::kInt4, dims.page_size);

    int2_keys_.resize(config_.int2_pages() * per_slot * key_page_stride_);
    int2_values_.resize(config_.int2_slots() * per_slot * int2_value_stride_);
    int4_keys_.resize(config_.int4_slots() * per_slot * int4_stride_);
    int4_values_.resize(config_.int4_slots() * per_slot * int4_stride_);
    written_.assign(config_.total_slots * per_slot, 0);
    live_.assign(config_.total_slots, 0);

    // Pushed in reverse so the first pops hand out ascending indices.
    for (std::size_t p = config_.int2_pages(); p-- > 0;) {
        free_pages_.push_back(static_cast<std::uint32_t>(p));
    }
    for (std::size_t s = config_.total_slots; s-- > config_.offset;) {
        free_slots_.push_back(static_cast<std::uint32_t>(s));
    }
}

std::size_t KvPool::unit(SlotAddress address, std::size_t layer, std::size_t head) const noexcept {
    return (static_cast<std::size_t>(address.index) * config_.dims.n_layers + layer) * config_.dims.n_kv_heads + head;
}

const PageTable& KvPool::alloc(const std::string& request, std::span<const Bitwidth> per_token_bits) {
    std::unique_lock lock(mutex_);
    if (tables_.contains(request)) {
        throw ValidationError("request " + request + " is already live");
    }
    const std::size_t g = config_.dims.page_size;
    std::vector<std::size_t> int2_tokens;
    for (std::size_t t = 0; t < per_token_bits.size(); ++t) {
        if (per_token_bits[t] == Bitwidth::kInt2) {
            int2_tokens.push_back(t);
        }
    }
    const std::size_t pages = int2_tokens.size() / g;
    const std::size_t paged_tokens = pages * g;
    const std::size_t int4_needed = per_token_bits.size() - paged_tokens;
    if (pages > free_pages_.size()) {
        throw CapacityError(PoolRegion::kInt2, "INT2 region exhausted: request " + request + " needs " +
                                                   std::to_string(pages) + " pages, " +
                                                   std::to_string(free_pages_.size()) + " free");
    }
    if (int4_needed > free_slots_.size()) {
        throw CapacityError(PoolRegion::kInt4, "INT4 region exhausted: request " + request + " needs " +
                                                   std::to_string(int4_needed) + " slots, " +
                                                   std::to_string(free_slots_.size()) + " free");
    }

    PageTable table{request, std::vector<SlotAddress>(per_token_bits.size()), false};
    std::vector<bool> paged(per_token_bits.size(), false);
    for (std::size_t p = 0; p < pages; ++p) {
        const std::uint32_t page = free_pages_.back();
        free_pages_.pop_back();
        for (std::size_t j = 0; j < g; ++j) {
            const std::size_t token = int2_tokens[p * g + j];
            table.entries[token] = SlotAddress{static_cast<std::uint32_t>(page * g + j)};
            paged[token] = true;
        }
    }
    for (std::size_t t = 0; t < per_token_bits.size(); ++t) {
        if (!paged[t]) {
            table.entries[t] = SlotAddress{free_slots_.back()};
            free_slots_.pop_back();
        }
    }
    for (SlotAddress a : table.entries) {
        live_[a.index] = 1;
    }
    released_.erase(request);
    return tables_.emplace(request, std::move(table)).first->second;
}

void KvPool::free(const std::string& request) {
    std::unique_lock lock(mutex_);
    auto it = tables_.find(request);
    if (it == tables_.end()) {
        throw ValidationError(released_.contains(request) ? "double free of request " + request
                                                          : "unknown request " + request);
    }
    const std::size_t per_slot = config_.dims.n_layers * config_.dims.n_kv_heads;
    for (SlotAddress a : it->second.entries) {
        if (precision(a) == Precision::kInt2) {
            if (a.index % config_.dims.page_size == 0) {
                free_pages_.push_back(static_cast<std::uint32_t>(a.index / config_.dims.page_size));
            }
        } else {
            free_slots_.push_back(a.index);
        }
        live_[a.index] = 0;
        std::fill_n(written_.begin() + static_cast<std::ptrdiff_t>(a.index * per_slot), per_slot, std::uint8_t{0});
    }
    tables_.erase(it);
    released_.insert(request);
}

const PageTable& KvPool::partition(const std::string& request) {
    std::unique_lock lock(mutex_);
    auto it = tables_.find(request);
    if (it == tables_.end()) {
        throw ValidationError("unknown request " + request);
    }
    if (!it->second.partitioned) {
        it->second = tagkv::partition(std::move(it->second), config_.offset);
    }
    return it->second;
}

const PageTable& KvPool::table(const std::string& request) const {
    std::shared_lock lock(mutex_);
    auto it = tables_.find(request);
    if (it == tables_.end()) {
        throw ValidationError("unknown request " + request);
    }
    return it->second;
}

std::vector<std::string> KvPool::live_requests() const {
    std::shared_lock lock(mutex_);
    std::vector<std::string> ids;
    for (const auto& [id, table] : tables_) {
        ids.push_back(id);
    }
    return ids;
}

void KvPool::write_int4_unlocked(SlotAddress address, std::size_t layer, std::size_t head,
                                 std::span<const float> key, std::span<const float> value) {
    const std::size_t d = config_.dims.head_dim;
    if (key.size() != d || value.size() != d) {
        throw ShapeError("write_token expects head_dim-sized key and value");
    }
    const std::size_t local = (static_cast<std::size_t>(address.index - config_.offset) * config_.dims.n_layers + layer) *
                              config_.dims.n_kv_heads + head;
    const std::span<std::uint8_t> k_dst(int4_keys_.data() + local * int4_stride_, int4_stride_);
    const std::span<std::uint8_t> v_dst(int4_values_.data() + local * int4_stride_, int4_stride_);
    encode_token_into(key, Bitwidth::kInt4, config_.dims.page_size, k_dst);
    encode_token_into(value, Bitwidth::kInt4, config_.dims.page_size, v_dst);
    written_[unit(address, layer, head)] = 1;
}

void KvPool::write_token(SlotAddress address, std::size_t layer, std::size_t head, std::span<const float> key,
                         std::span<const float> value) {
    std::unique_lock lock(mutex_);
    if (address.index >= config_.total_slots || !live_[address.index]) {
        throw ValidationError("write to dangling " + slot_name(address));
    }
    if (layer >= config_.dims.n_layers || head >= config_.dims.n_kv_heads) {
        throw ShapeError("layer or head out of range");
    }
    if (precision(address) == Precision::kInt2) {
        throw ValidationError("partial INT2 page write at " + slot_name(address) + "; INT2 pages are written whole");
    }
    write_int4_unlocked(address, layer, head, key, value);
}

void KvPool::write_page(std::span<const SlotAddress> addresses, std::size_t layer, std::size_t head,
                        std::span<const float> keys, std::span<const float> values) {
    std::unique_lock lock(mutex_);
    const std::size_t g = config_.dims.page_size;
    const std::size_t d = config_.dims.head_dim;
    if (addresses.size() != g) {
        throw ValidationError("partial INT2 page write: " + std::to_string(addresses.size()) + " of " +
                              std::to_string(g) + " slots");
    }
    if (layer >= config_.dims.n_layers || head >= config_.dims.n_kv_heads) {
        throw ShapeError("layer or head out of range");
    }
    const std::uint32_t first = addresses[0].index;
    if (first >= config_.offset || first % g != 0) {
        throw ValidationError("write_page expects the INT2 page starting at a page boundary");
    }
    for (std::size_t j = 0; j < g; ++j) {
        if (addresses[j].index != first + j || !live_[addresses[j].index]) {
            throw ValidationError("write_page addresses must be the live slots of one page in order");
        }
    }
    if (keys.size() != g * d || values.size() != g * d) {
        throw ShapeError("write_page expects [G, d] keys and values");
    }
    const std::size_t page = first / g;
    const std::size_t key_unit = (page * config_.dims.n_layers + layer) * config_.dims.n_kv_heads + head;
    encode_key_page_into(keys, d, g, std::span(int2_keys_.data() + key_unit * key_page_stride_, key_page_stride_));
    for (std::size_t j = 0; j < g; ++j) {
        const SlotAddress a = addresses[j];
        const std::size_t u = unit(a, layer, head);
        encode_token_into(values.subspan(j * d, d), Bitwidth::kInt2, g,
                          std::span(int2_values_.data() + u * int2_value_stride_, int2_value_stride_));
        written_[u] = 1;
    }
}

void KvPool::check_readable(SlotAddress address, std::size_t layer, std::size_t head) const {
    if (address.index >= config_.total_slots || !live_[address.index]) {
        throw ValidationError("dangling " + slot_name(address));
    }
    if (layer >= config_.dims.n_layers || head >= config_.dims.n_kv_heads) {
        throw ShapeError("layer or head out of range");
    }
    if (!written_[unit(address, layer, head)]) {
        throw ValidationError("read of unwritten " + slot_name(address));
    }
}

void KvPool::read_key(SlotAddress address, std::size_t layer, std::size_t head, std::span<float> out) const {
    std::shared_lock lock(mutex_);
    check_readable(address, layer, head);
    const std::size_t g = config_.dims.page_size;
    const std::size_t d = config_.dims.head_dim;
    if (precision(address) == Precision::kInt2) {
        const std::size_t page = address.index / g;
        const std::size_t key_unit = (page * config_.dims.n_layers + layer) * config_.dims.n_kv_heads + head;
        decode_key_page_row(std::span(int2_keys_.data() + key_unit * key_page_stride_, key_page_stride_), d, g,
                            address.index % g, out);
        return;
    }
    const std::size_t local = (static_cast<std::size_t>(address.index - config_.offset) * config_.dims.n_layers + layer) *
                              config_.dims.n_kv_heads + head;
    decode_token_from(std::span(int4_keys_.data() + local * int4_stride_, int4_stride_), Bitwidth::kInt4, g, out);
}

void KvPool::read_value(SlotAddress address, std::size_t layer, std::size_t head, std::span<float> out) const {
    std::shared_lock lock(mutex_);
    check_readable(address, layer, head);
    const std::size_t g = config_.dims.page_size;
    if (precision(address) == Precision::kInt2) {
        const std::size_t u = unit(address, layer, head);
        decode_token_from(std::span(int2_values_.data() + u * int2_value_stride_, int2_value_stride_),
                          Bitwidth::kInt2, g, out);
        return;
    }
    const std::size_t local = (static_cast<std::size_t>(address.index - config_.offset) * config_.dims.n_layers + layer) *
                              config_.dims.n_kv_heads + head;
    decode_token_from(std::span(int4_values_.data() + local * int4_stride_, int4_stride_), Bitwidth::kInt4, g, out);
}

std::pair<std::vector<float>, std::vector<float>> KvPool::read_slot(SlotAddress address, std::size_t layer,
                                                                    std::size_t head) const {
    std::vector<float> key(config_.dims.head_dim);
    std::vector<float> value(config_.dims.head_dim);
    read_key(address, layer, head, key);
    read_value(address, layer, head, value);
    return {std::move(key), std::move(value)};
}

SlotAddress KvPool::append_decode_token(const std::string& request, std::span<const float> key,
                                        std::span<const float> value) {
    std::unique_lock lock(mutex_);
    auto it = tables_.find(request);
    if (it == tables_.end()) {
        throw ValidationError("unknown request " + request);
    }
    if (!it->second.partitioned) {
        throw ValidationError("request " + request + " must be partitioned before decode");
    }
    const auto& dims = config_.dims;
    const std::size_t per_slot = dims.n_layers * dims.n_kv_heads * dims.head_dim;
    if (key.size() != per_slot || value.size() != per_slot) {
        throw ShapeError("decode token needs [n_layers, n_kv_heads, d] keys and values");
    }
    if (free_slots_.empty()) {
        throw CapacityError(PoolRegion::kInt4, "INT4 region exhausted during decode of " + request);
    }
    const SlotAddress address{free_slots_.back()};
    free_slots_.pop_back();
    live_[address.index] = 1;
    for (std::size_t l = 0; l < dims.n_layers; ++l) {
        for (std::size_t h = 0; h < dims.n_kv_heads; ++h) {
            const std::size_t off = (l * dims.n_kv_heads + h) * dims.head_dim;
            write_int4_unlocked(address, l, h, key.subspan(off, dims.head_dim), value.subspan(off, dims.head_dim));
        }
    }
    it->second.entries.push_back(address);
    return address;
}

std::size_t KvPool::free_int2_pages() const {
    std::shared_lock lock(mutex_);
    return free_pages_.size();
}

std::size_t KvPool::free_int4_slots() const {
    std::shared_lock lock(mutex_);
    return free_slots_.size();
}

PoolStats KvPool::stats() const {
    std::shared_lock lock(mutex_);
    const auto& dims = config_.dims;
    const std::size_t units = dims.n_layers * dims.n_kv_heads;
    const std::size_t d = dims.head_dim;
    const std::size_t g = dims.page_size;

    PoolStats s;
    s.config = config_;
    s.live_requests = tables_.size();
    s.int2.total_slots = config_.int2_slots();
    s.int2.free_slots = free_pages_.size() * g;
    s.int2.live_slots = s.int2.total_slots - s.int2.free_slots;
    s.int2.code_bytes = config_.int2_slots() * units * (d * 2 / 8 + d * 2 / 8);
    s.int2.param_bytes = int2_keys_.size() + int2_values_.size() - s.int2.code_bytes;

    s.int4.total_slots = config_.int4_slots();
    s.int4.free_slots = free_slots_.size();
    s.int4.live_slots = s.int4.total_slots - s.int4.free_slots;
    s.int4.code_bytes = config_.int4_slots() * units * 2 * (d * 4 / 8);
    s.int4.param_bytes = int4_keys_.size() + int4_values_.size() - s.int4.code_bytes;

    const std::size_t live = s.int2.live_slots + s.int4.live_slots;
    if (live > 0) {
        s.live_avg_bits = static_cast<double>(2 * s.int2.live_slots + 4 * s.int4.live_slots) / static_cast<double>(live);
    }
    return s;
}

}  // namespace tagkv
