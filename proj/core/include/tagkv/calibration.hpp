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
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tagkv/quantizer.hpp"
#include "tagkv/tag.hpp"
#include "tagkv/trace_model.hpp"

namespace tagkv {

struct RawKey {
    std::size_t layer = 0;
    std::size_t request = 0;
    std::size_t head = 0;
    TagCode tag;
    Bitwidth bits = Bitwidth::kInt2;

    friend auto operator<=>(const RawKey&, const RawKey&) = default;
};

/// Per (layer, request, head, tag, bitwidth) attention-output MSE.
struct RawDistortion {
    std::map<RawKey, double> entries;
};

struct CalibrationOptions {
    std::size_t group_size = kGroupSize;
};

/// For every layer, request, active tag and bitwidth in {2, 4}: quantize only
/// that tag's rows, replay causal attention over all prefill queries, and
/// record the per-head MSE against the full-precision output. Request index r
/// is the position in `captures`.
RawDistortion measure_raw(std::span<const KVCapture> captures, const CalibrationOptions& options = {});

using DistortionKey = std::pair<TagCode, Bitwidth>;

struct AggregateResult {
    std::map<DistortionKey, double> distortion;
    std::vector<std::string> warnings;  // one per excluded (tag, bitwidth)
};

/// D_k(b) = sum over layers of (mean over requests of (max over heads)).
/// The mean runs over the requests where the tag occurs. A (tag, bitwidth)
/// missing from some layer that appears elsewhere in `raw` is excluded with a
/// warning.
AggregateResult aggregate(const RawDistortion& raw);

/// N_k: inst-semantic tags take the lower median of per-request counts over
/// the requests containing the tag (the shared prompt is cached once); all
/// other tags sum their counts.
std::map<TagCode, std::size_t> estimate_counts(std::span<const std::vector<TagCode>> tag_arrays);
std::map<TagCode, std::size_t> estimate_counts(std::span<const KVCapture> captures);

struct TagSensitivity {
    TagCode tag;
    double d2 = 0.0;
    double d4 = 0.0;
    std::size_t count = 0;

    friend bool operator==(const TagSensitivity&, const TagSensitivity&) = default;
};

struct SensitivityTable {
    std::vector<TagSensitivity> entries;  // ascending tag code
    std::optional<double> budget;

    const TagSensitivity* find(TagCode tag) const;
    std::map<TagCode, std::size_t> counts() const;

    friend bool operator==(const SensitivityTable&, const SensitivityTable&) = default;
};

/// measure_raw -> aggregate, joined with estimate_counts. Tags whose
/// distortions were excluded during aggregation are left out of the table.
SensitivityTable build_table(std::span<const KVCapture> captures, const CalibrationOptions& options = {},
                             std::vector<std::string>* warnings = nullptr);

/// {"tags": [{"code", "D2", "D4", "N"}], "budget": float|null}
std::string sensitivity_to_json(const SensitivityTable& table);
SensitivityTable parse_sensitivity(std::string_view json_text);
void save_sensitivity(const SensitivityTable& table, const std::filesystem::path& path);
SensitivityTable load_sensitivity(const std::filesystem::path& path);

}  // namespace tagkv
