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

#include "tagkv/calibration.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tagkv/attention.hpp"
#include "tagkv/error.hpp"
#include "tagkv/tagger.hpp"

namespace tagkv {

RawDistortion measure_raw(std::span<const KVCapture> captures, const CalibrationOptions& options) {
    RawDistortion raw;
    for (std::size_t r = 0; r < captures.size(); ++r) {
        const KVCapture& capture = captures[r];
        capture.validate(options.group_size);
        const auto active = collect_active_tags(std::span(&capture.tags, 1));

        for (std::size_t l = 0; l < capture.n_layers(); ++l) {
            const auto& layer = capture.layers[l];
            const AttentionInputs inputs{layer.q, layer.k, layer.v};
            const Tensor3 reference = attention_full(inputs, true);
            for (TagCode tag : active.tags) {
                for (Bitwidth bits : {Bitwidth::kInt2, Bitwidth::kInt4}) {
                    const Tensor3 approx =
                        attention_selective_quant(inputs, capture.tags, tag.value(), bits, true, options.group_size);
                    const auto per_head = output_mse_per_head(reference, approx);
                    for (std::size_t h = 0; h < per_head.size(); ++h) {
                        raw.entries[RawKey{l, r, h, tag, bits}] = per_head[h];
                    }
                }
            }
        }
    }
    return raw;
}

AggregateResult aggregate(const RawDistortion& raw) {
    // (tag, bits) -> layer -> request -> max over heads
    std::map<DistortionKey, std::map<std::size_t, std::map<std::size_t, double>>> grouped;
    std::set<std::size_t> all_layers;
    for (const auto& [key, value] : raw.entries) {
        all_layers.insert(key.layer);
        auto& per_request = grouped[{key.tag, key.bits}][key.layer];
        auto [it, inserted] = per_request.emplace(key.request, value);
        if (!inserted) {
            it->second = std::max(it->second, value);
        }
    }

    AggregateResult result;
    for (const auto& [key, layers] : grouped) {
        if (layers.size() != all_layers.size()) {
            result.warnings.push_back("tag " + describe(key.first) + " at " + std::to_string(bit_count(key.second)) +
                                      " bits covers " + std::to_string(layers.size()) + " of " +
                                      std::to_string(all_layers.size()) + " layers; excluded");
            continue;
        }
        double total = 0.0;
        for (const auto& [layer, requests] : layers) {
            double sum = 0.0;
            for (const auto& [request, worst_head] : requests) {
                sum += worst_head;
            }
            total += sum / static_cast<double>(requests.size());
        }
        result.distortion[key] = total;
    }
    return result;
}

std::map<TagCode, std::size_t> estimate_counts(std::span<const std::vector<TagCode>> tag_arrays) {
    std::map<TagCode, std::vector<std::size_t>> per_request;
    for (const auto& tags : tag_arrays) {
        std::map<TagCode, std::size_t> histogram;
        for (TagCode tag : tags) {
            ++histogram[tag];
        }
        for (const auto& [tag, count] : histogram) {
            per_request[tag].push_back(count);
        }
    }
    std::map<TagCode, std::size_t> counts;
    for (auto& [tag, values] : per_request) {
        if (code_to_tag(tag).semantic == Semantic::kInst) {
            std::sort(values.begin(), values.end());
            counts[tag] = values[(values.size() - 1) / 2];
        } else {
            std::size_t sum = 0;
            for (std::size_t v : values) {
                sum += v;
            }
            counts[tag] = sum;
        }
    }
    return counts;
}

std::map<TagCode, std::size_t> estimate_counts(std::span<const KVCapture> captures) {
    std::vector<std::vector<TagCode>> arrays;
    arrays.reserve(captures.size());
    for (const auto& capture : captures) {
        arrays.push_back(capture.tags);
    }
    return estimate_counts(arrays);
}

const TagSensitivity* SensitivityTable::find(TagCode tag) const {
    auto it = std::lower_bound(entries.begin(), entries.end(), tag,
                               [](const TagSensitivity& e, TagCode t) { return e.tag < t; });
    return it != entries.end() && it->tag == tag ? &*it : nullptr;
}

std::map<TagCode, std::size_t> SensitivityTable::counts() const {
    std::map<TagCode, std::size_t> out;
    for (const auto& e : entries) {
        out[e.tag] = e.count;
    }
    return out;
}

SensitivityTable build_table(std::span<const KVCapture> captures, const CalibrationOptions& options,
                             std::vector<std::string>* warnings) {
    if (captures.empty()) {
        throw ValidationError("calibration needs at least one capture");
    }
    const AggregateResult agg = aggregate(measure_raw(captures, options));
    if (warnings) {
        *warnings = agg.warnings;
    }
    SensitivityTable table;
    for (const auto& [tag, count] : estimate_counts(captures)) {
        auto d2 = agg.distortion.find({tag, Bitwidth::kInt2});
        auto d4 = agg.distortion.find({tag, Bitwidth::kInt4});
        if (d2 == agg.distortion.end() || d4 == agg.distortion.end()) {
            continue;
        }
        table.entries.push_back({tag, d2->second, d4->second, count});
    }
    return table;
}

// ---------------------------------------------------------------------------

std::string sensitivity_to_json(const SensitivityTable& table) {
    nlohmann::json tags = nlohmann::json::array();
    for (const auto& e : table.entries) {
        tags.push_back({{"code", e.tag.value()}, {"D2", e.d2}, {"D4", e.d4}, {"N", e.count}});
    }
    nlohmann::json j;
    j["tags"] = tags;
    j["budget"] = table.budget ? nlohmann::json(*table.budget) : nlohmann::json(nullptr);
    return j.dump(2) + "\n";
}

SensitivityTable parse_sensitivity(std::string_view json_text) {
    SensitivityTable table;
    try {
        const auto j = nlohmann::json::parse(json_text);
        for (const auto& e : j.at("tags")) {
            table.entries.push_back({TagCode(e.at("code").get<int>()), e.at("D2").get<double>(),
                                     e.at("D4").get<double>(), e.at("N").get<std::size_t>()});
        }
        if (j.contains("budget") && !j.at("budget").is_null()) {
            table.budget = j.at("budget").get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("sensitivity table: ") + e.what());
    }
    std::sort(table.entries.begin(), table.entries.end(),
              [](const TagSensitivity& a, const TagSensitivity& b) { return a.tag < b.tag; });
    for (std::size_t i = 0; i < table.entries.size(); ++i) {
        const auto& e = table.entries[i];
        if (i > 0 && table.entries[i - 1].tag == e.tag) {
            throw FormatError("sensitivity table lists tag " + std::to_string(e.tag.value()) + " twice");
        }
        if (e.count == 0 || e.d2 < 0.0 || e.d4 < 0.0) {
            throw FormatError("sensitivity table entry for tag " + std::to_string(e.tag.value()) +
                              " needs N >= 1 and non-negative distortions");
        }
    }
    return table;
}

void save_sensitivity(const SensitivityTable& table, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write " + path.string());
    }
    out << sensitivity_to_json(table);
}

SensitivityTable load_sensitivity(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_sensitivity(buffer.str());
}

}  // namespace tagkv
