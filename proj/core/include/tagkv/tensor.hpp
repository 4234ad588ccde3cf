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

#include <array>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

namespace tagkv {

/// Dense row-major float tensor of fixed rank. The last axis is contiguous.
template <std::size_t Rank>
class Tensor {
public:
    using Shape = std::array<std::size_t, Rank>;

    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f)
        : shape_(shape), data_(element_count(shape), fill) {}
    Tensor(Shape shape, std::vector<float> data) : shape_(shape), data_(std::move(data)) {}

    const Shape& shape() const noexcept { return shape_; }
    std::size_t dim(std::size_t axis) const noexcept { return shape_[axis]; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    const std::vector<float>& storage() const noexcept { return data_; }

    template <typename... Index>
    float& operator()(Index... index) noexcept {
        static_assert(sizeof...(Index) == Rank);
        return data_[offset({static_cast<std::size_t>(index)...})];
    }
    template <typename... Index>
    float operator()(Index... index) const noexcept {
        static_assert(sizeof...(Index) == Rank);
        return data_[offset({static_cast<std::size_t>(index)...})];
    }

    /// Contiguous innermost slice addressed by the leading Rank-1 indices.
    template <typename... Index>
    std::span<float> row(Index... index) noexcept {
        static_assert(sizeof...(Index) == Rank - 1);
        return {data_.data() + offset({static_cast<std::size_t>(index)..., 0}), shape_[Rank - 1]};
    }
    template <typename... Index>
    std::span<const float> row(Index... index) const noexcept {
        static_assert(sizeof...(Index) == Rank - 1);
        return {data_.data() + offset({static_cast<std::size_t>(index)..., 0}), shape_[Rank - 1]};
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    static std::size_t element_count(const Shape& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }
    std::size_t offset(const Shape& index) const noexcept {
        std::size_t flat = 0;
        for (std::size_t axis = 0; axis < Rank; ++axis) {
            flat = flat * shape_[axis] + index[axis];
        }
        return flat;
    }

    Shape shape_{};
    std::vector<float> data_;
};

using Tensor2 = Tensor<2>;
using Tensor3 = Tensor<3>;

}  // namespace tagkv
