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

#include "tagkv/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "tagkv/attention.hpp"
#include "tagkv/error.hpp"
#include "tagkv/rng.hpp"
#include "tagkv/tagger.hpp"

namespace fs = std::filesystem;

namespace tagkv {

namespace {

std::string request_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "req-%03zu", i);
    return buf;
}

nlohmann::json bits_json(const std::map<TagCode, Bitwidth>& bits) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [tag, b] : bits) {
        j[std::to_string(tag.value())] = bit_count(b);
    }
    return j;
}

nlohmann::json region_json(const RegionStats& r) {
    return {{"total_slots", r.total_slots},
            {"live_slots", r.live_slots},
            {"free_slots", r.free_slots},
            {"code_bytes", r.code_bytes},
            {"param_bytes", r.param_bytes}};
}

nlohmann::json stats_json(const PoolStats& s) {
    const auto& d = s.config.dims;
    return {{"total_slots", s.config.total_slots},
            {"offset", s.config.offset},
            {"n_layers", d.n_layers},
            {"n_kv_heads", d.n_kv_heads},
            {"head_dim", d.head_dim},
            {"page_size", d.page_size},
            {"pool_bytes", pool_bytes(s.config)},
            {"int2", region_json(s.int2)},
            {"int4", region_json(s.int4)},
            {"live_requests", s.live_requests},
            {"live_avg_bits", s.live_avg_bits}};
}

// Smallest page-multiple pool at `budget` whose regions hold the demand.
std::size_t fit_total_slots(double budget, std::size_t int2_slots, std::size_t int4_slots, const PoolDims& dims) {
    const std::size_t g = dims.page_size;
    const std::size_t need = int2_slots + int4_slots;
    std::size_t total = std::max<std::size_t>(2 * g, (need + g - 1) / g * g);
    const std::size_t limit = 64 * total + 64 * g;
    for (std::size_t t = total; t <= limit; t += g) {
        const PoolConfig c = init_pool(budget, t, dims);
        if (c.int2_slots() >= int2_slots && c.int4_slots() >= int4_slots) {
            return t;
        }
    }
    return total;  // the budget cannot host this mix; alloc reports the region
}

}  // namespace

// ---- generate --------------------------------------------------------------

GeneratedSet cmd_generate(const GenerateOptions& options, const fs::path& out_dir) {
    if (options.n_traces == 0) {
        throw ValidationError("generate needs at least one trace");
    }
    const TemplateDescriptor tmpl = default_template();
    fs::create_directories(out_dir / "traces");
    fs::create_directories(out_dir / "captures");
    save_template(tmpl, out_dir / "template.json");

    GeneratedSet set;
    for (std::size_t i = 0; i < options.n_traces; ++i) {
        const std::uint64_t seed = mix_seed(options.seed, i);
        Trace trace = generate_synthetic_trace(seed, options.n_turns, tmpl, options.include_images);
        trace.request_id = request_name(i);
        const auto tags = tag_tokens(trace, tmpl);
        const KVCapture capture =
            generate_synthetic_capture(trace, tags, options.shape, mix_seed(seed, 1), options.capture);

        const fs::path trace_file = out_dir / "traces" / (trace.request_id + ".json");
        const fs::path capture_dir = out_dir / "captures" / trace.request_id;
        save_trace(trace, trace_file);
        save_capture(capture, capture_dir);
        set.trace_files.push_back(trace_file);
        set.capture_dirs.push_back(capture_dir);
    }
    return set;
}

// ---- tag -------------------------------------------------------------------

std::string tags_to_json(const std::string& request_id, std::span<const TagCode> tags) {
    nlohmann::json codes = nlohmann::json::array();
    for (TagCode t : tags) {
        codes.push_back(t.value());
    }
    nlohmann::json j;
    j["request_id"] = request_id;
    j["tags"] = codes;
    return j.dump() + "\n";
}

std::string cmd_tag(const Trace& trace, const TemplateDescriptor& tmpl) {
    return tags_to_json(trace.request_id, tag_tokens(trace, tmpl));
}

// ---- capture sets ----------------------------------------------------------

std::vector<fs::path> list_capture_dirs(const fs::path& dir) {
    if (fs::is_regular_file(dir / "manifest.json")) {
        return {dir};
    }
    std::vector<fs::path> dirs;
    if (fs::is_directory(dir)) {
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (entry.is_directory() && fs::is_regular_file(entry.path() / "manifest.json")) {
                dirs.push_back(entry.path());
            }
        }
    }
    if (dirs.empty() && fs::is_directory(dir / "captures")) {
        return list_capture_dirs(dir / "captures");
    }
    if (dirs.empty()) {
        throw FormatError("no captures under " + dir.string());
    }
    std::sort(dirs.begin(), dirs.end());
    return dirs;
}

std::vector<KVCapture> load_captures(std::span<const fs::path> dirs) {
    std::vector<KVCapture> out;
    out.reserve(dirs.size());
    for (const auto& d : dirs) {
        out.push_back(load_capture(d));
    }
    return out;
}

std::size_t calibration_set_size(std::size_t n, double fraction, std::size_t min_traces) {
    if (!(fraction > 0.0 && fraction <= 1.0)) {
        throw ValidationError("calibration fraction must lie in (0, 1]");
    }
    const auto by_fraction = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));
    return std::min(n, std::max(by_fraction, std::min(min_traces, n)));
}

CalibrationRun cmd_calibrate(std::span<const KVCapture> captures, const CalibrateOptions& options) {
    const std::size_t k = calibration_set_size(captures.size(), options.fraction, options.min_traces);
    if (k == 0) {
        throw ValidationError("calibration needs at least one capture");
    }
    const auto subset = captures.first(k);
    CalibrationRun run;
    run.table = build_table(subset, CalibrationOptions{options.group_size}, &run.warnings);
    for (const auto& c : subset) {
        run.request_ids.push_back(c.request_id);
    }
    return run;
}

// ---- joint distortion ------------------------------------------------------

JointDistortion::JointDistortion(std::span<const KVCapture> captures, std::size_t group_size)
    : captures_(captures), group_size_(group_size) {
    references_.reserve(captures.size());
    for (const auto& c : captures) {
        c.validate(group_size);
        std::vector<Tensor3> per_layer;
        for (const auto& layer : c.layers) {
            per_layer.push_back(attention_full(AttentionInputs{layer.q, layer.k, layer.v}, true));
        }
        references_.push_back(std::move(per_layer));
    }
}

double JointDistortion::operator()(const std::map<TagCode, Bitwidth>& bits) const {
    std::size_t n_layers = 0;
    for (const auto& c : captures_) {
        n_layers = std::max(n_layers, c.n_layers());
    }
    std::vector<double> layer_sum(n_layers, 0.0);
    std::vector<std::size_t> layer_requests(n_layers, 0);
    for (std::size_t r = 0; r < captures_.size(); ++r) {
        const auto& c = captures_[r];
        const auto per_token = bits_for_tags(c.tags, bits);
        const std::vector<std::optional<Bitwidth>> marked(per_token.begin(), per_token.end());
        for (std::size_t l = 0; l < c.n_layers(); ++l) {
            const auto& layer = c.layers[l];
            const StoredKV stored = simulate_storage(layer.k, layer.v, marked, group_size_);
            const Tensor3 out = attention_full(AttentionInputs{layer.q, stored.k, stored.v}, true);
            const auto per_head = output_mse_per_head(references_[r][l], out);
            layer_sum[l] += *std::max_element(per_head.begin(), per_head.end());
            ++layer_requests[l];
        }
    }
    double total = 0.0;
    for (std::size_t l = 0; l < n_layers; ++l) {
        if (layer_requests[l] > 0) {
            total += layer_sum[l] / static_cast<double>(layer_requests[l]);
        }
    }
    return total;
}

// ---- sweep -----------------------------------------------------------------

SweepResult cmd_sweep(const SensitivityTable& table, std::span<const KVCapture> calibration_set,
                      const SweepOptions& options) {
    const JointDistortion measure(calibration_set, options.group_size);
    return sweep_budget(
        table, options.grid, [&](const Allocation& a) { return measure(a.bits); }, options.threshold,
        options.solver);
}

std::string sweep_to_json(const SweepResult& result, double threshold) {
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& p : result.curve) {
        curve.push_back({{"budget", p.budget},
                         {"measured_mse", p.score},
                         {"objective", p.allocation.objective},
                         {"realized_avg", p.allocation.realized_avg},
                         {"bits", bits_json(p.allocation.bits)}});
    }
    nlohmann::json j;
    j["chosen"] = result.chosen;
    j["flagged"] = result.flagged;
    j["threshold"] = threshold;
    j["baseline_mse"] = result.baseline_score;
    j["curve"] = curve;
    return j.dump(2) + "\n";
}

// ---- replay ----------------------------------------------------------------

std::vector<Bitwidth> bits_for_tags(std::span<const TagCode> tags, const std::map<TagCode, Bitwidth>& bits) {
    std::vector<Bitwidth> out;
    out.reserve(tags.size());
    for (TagCode t : tags) {
        auto it = bits.find(t);
        if (it == bits.end()) {
            throw ValidationError("allocation does not cover tag " + std::to_string(t.value()) + " (" +
                                  describe(t) + ")");
        }
        out.push_back(it->second);
    }
    return out;
}

ReplayReport cmd_replay(std::span<const KVCapture> captures, const Allocation& allocation,
                        const ReplayOptions& options) {
    if (captures.empty()) {
        throw ValidationError("replay needs at least one capture");
    }
    const std::size_t g = options.group_size;
    const KVCapture& first = captures.front();
    const PoolDims dims{first.n_layers(), first.n_kv_heads(), first.head_dim, g};

    std::vector<std::vector<Bitwidth>> per_request_bits;
    std::size_t int2_demand = 0;
    std::size_t int4_demand = 0;
    for (const auto& c : captures) {
        c.validate(g);
        if (c.n_layers() != dims.n_layers || c.n_kv_heads() != dims.n_kv_heads || c.head_dim != dims.head_dim) {
            throw ShapeError("replay captures disagree on dims (" + c.request_id + ")");
        }
        auto bits = bits_for_tags(c.tags, allocation.bits);
        const auto n2 = static_cast<std::size_t>(std::count(bits.begin(), bits.end(), Bitwidth::kInt2));
        int2_demand += n2 / g * g;
        int4_demand += bits.size() - n2 / g * g;
        per_request_bits.push_back(std::move(bits));
    }

    // Without an explicit budget the split follows the stored mix, residuals included.
    const double demand_bits = static_cast<double>(2 * int2_demand + 4 * int4_demand) /
                               static_cast<double>(int2_demand + int4_demand);
    const double pool_budget = options.budget.value_or(std::clamp(demand_bits, 2.0, 4.0));
    const std::size_t total = options.total_slots > 0 ? options.total_slots
                                                      : fit_total_slots(pool_budget, int2_demand, int4_demand, dims);
    KvPool pool(init_pool(pool_budget, total, dims));

    ReplayReport report;
    report.budget = allocation.budget;
    report.pool_budget = pool_budget;
    report.bits = allocation.bits;
    report.split_len = options.split_len;
    report.probe_queries = options.probe_queries;

    std::map<TagCode, std::pair<double, std::size_t>> stored_bits;  // tag -> (bit sum, tokens)
    const std::size_t d = dims.head_dim;

    for (std::size_t r = 0; r < captures.size(); ++r) {
        const KVCapture& c = captures[r];
        const std::size_t n = c.n_tokens();
        const PageTable& table = pool.alloc(c.request_id, per_request_bits[r]);

        RequestReplay rr;
        rr.request_id = c.request_id;
        rr.n_tokens = n;
        rr.int2_requested = static_cast<std::size_t>(
            std::count(per_request_bits[r].begin(), per_request_bits[r].end(), Bitwidth::kInt2));

        // Group INT2 tokens by page, keeping slot order.
        std::map<std::uint32_t, std::vector<std::pair<SlotAddress, std::size_t>>> pages;
        std::vector<std::size_t> int4_tokens;
        for (std::size_t t = 0; t < n; ++t) {
            const SlotAddress a = table.entries[t];
            if (pool.precision(a) == Precision::kInt2) {
                pages[a.index / static_cast<std::uint32_t>(g)].emplace_back(a, t);
                auto& acc = stored_bits[c.tags[t]];
                acc.first += 2.0;
                ++acc.second;
            } else {
                int4_tokens.push_back(t);
                auto& acc = stored_bits[c.tags[t]];
                acc.first += 4.0;
                ++acc.second;
            }
        }
        rr.int2_stored = pages.size() * g;

        std::vector<SlotAddress> addresses(g);
        std::vector<float> keys(g * d);
        std::vector<float> values(g * d);
        for (std::size_t l = 0; l < dims.n_layers; ++l) {
            const auto& layer = c.layers[l];
            for (std::size_t h = 0; h < dims.n_kv_heads; ++h) {
                for (auto& [page, members] : pages) {
                    std::sort(members.begin(), members.end());
                    for (std::size_t j = 0; j < g; ++j) {
                        addresses[j] = members[j].first;
                        const auto kr = layer.k.row(members[j].second, h);
                        const auto vr = layer.v.row(members[j].second, h);
                        std::copy(kr.begin(), kr.end(), keys.begin() + static_cast<std::ptrdiff_t>(j * d));
                        std::copy(vr.begin(), vr.end(), values.begin() + static_cast<std::ptrdiff_t>(j * d));
                    }
                    pool.write_page(addresses, l, h, keys, values);
                }
                for (std::size_t t : int4_tokens) {
                    pool.write_token(table.entries[t], l, h, layer.k.row(t, h), layer.v.row(t, h));
                }
            }
        }
        const PageTable& parted = pool.partition(c.request_id);

        const std::size_t n_q = c.n_query();
        const std::size_t probes = std::min(options.probe_queries, n_q);
        const std::size_t n_heads = c.n_heads();
        double mse_sum = 0.0;
        for (std::size_t l = 0; l < dims.n_layers; ++l) {
            const auto& layer = c.layers[l];
            Tensor3 probe_q({probes, n_heads, d});
            Tensor3 decoded({probes, n_heads, d});
            for (std::size_t p = 0; p < probes; ++p) {
                const std::size_t qi = n_q - probes + p;
                Tensor2 q({n_heads, d});
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const auto src = layer.q.row(qi, h);
                    std::copy(src.begin(), src.end(), q.row(h).begin());
                    std::copy(src.begin(), src.end(), probe_q.row(p, h).begin());
                }
                const Tensor2 out = flash_decode(q, parted, pool, l, options.split_len);
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const auto src = out.row(h);
                    std::copy(src.begin(), src.end(), decoded.row(p, h).begin());
                }
            }
            const Tensor3 reference = attention_full(AttentionInputs{probe_q, layer.k, layer.v}, false);
            const double mse = probes > 0 ? output_mse(reference, decoded) : 0.0;
            rr.layer_mse.push_back(mse);
            mse_sum += mse;
        }
        rr.mse = dims.n_layers > 0 ? mse_sum / static_cast<double>(dims.n_layers) : 0.0;
        report.requests.push_back(std::move(rr));
    }

    double mse_total = 0.0;
    for (const auto& rr : report.requests) {
        mse_total += rr.mse;
    }
    report.mean_mse = mse_total / static_cast<double>(report.requests.size());

    const auto counts = estimate_counts(captures);
    double weighted = 0.0;
    double n_total = 0.0;
    for (const auto& [tag, count] : counts) {
        const auto& [bit_sum, tokens] = stored_bits.at(tag);
        weighted += static_cast<double>(count) * bit_sum / static_cast<double>(tokens);
        n_total += static_cast<double>(count);
    }
    report.realized_avg = weighted / n_total;
    report.page_slack = 2.0 * static_cast<double>(g * captures.size()) / n_total;
    report.pool = pool.stats();
    report.stored_avg_bits = report.pool.live_avg_bits;
    return report;
}

std::string replay_report_to_json(const ReplayReport& report) {
    nlohmann::json requests = nlohmann::json::array();
    for (const auto& rr : report.requests) {
        requests.push_back({{"request_id", rr.request_id},
                            {"n_tokens", rr.n_tokens},
                            {"int2_requested", rr.int2_requested},
                            {"int2_stored", rr.int2_stored},
                            {"layer_mse", rr.layer_mse},
                            {"mse", rr.mse}});
    }
    nlohmann::json j;
    j["budget"] = report.budget;
    j["pool_budget"] = report.pool_budget;
    j["bits"] = bits_json(report.bits);
    j["split_len"] = report.split_len;
    j["probe_queries"] = report.probe_queries;
    j["requests"] = requests;
    j["mean_mse"] = report.mean_mse;
    j["realized_avg"] = report.realized_avg;
    j["stored_avg_bits"] = report.stored_avg_bits;
    j["page_slack"] = report.page_slack;
    j["pool"] = stats_json(report.pool);
    return j.dump(2) + "\n";
}

// ---- pool stats ------------------------------------------------------------

std::string pool_stats_to_json(const PoolStats& stats) {
    return stats_json(stats).dump(2) + "\n";
}

AdmissionReport simulate_admission(double budget, std::size_t total_bytes, const PoolDims& dims,
                                   std::size_t request_tokens, double int2_fraction) {
    if (request_tokens == 0) {
        throw ValidationError("admission needs a positive request length");
    }
    if (!(int2_fraction >= 0.0 && int2_fraction <= 1.0)) {
        throw ValidationError("INT2 fraction must lie in [0, 1]");
    }
    AdmissionReport rep;
    rep.config = init_pool_from_bytes(budget, total_bytes, dims);
    rep.request_tokens = request_tokens;
    rep.int2_tokens_per_request =
        static_cast<std::size_t>(std::llround(int2_fraction * static_cast<double>(request_tokens)));

    std::vector<Bitwidth> bits(request_tokens, Bitwidth::kInt4);
    std::fill_n(bits.begin(), rep.int2_tokens_per_request, Bitwidth::kInt2);

    KvPool pool(rep.config);
    for (;;) {
        try {
            pool.alloc(request_name(rep.admitted_requests), bits);
        } catch (const CapacityError&) {
            break;
        }
        ++rep.admitted_requests;
    }
    rep.admitted_tokens = rep.admitted_requests * request_tokens;

    const std::size_t baseline_capacity = total_bytes / bf16_token_bytes(dims);
    rep.baseline_requests = baseline_capacity / request_tokens;
    rep.baseline_tokens = rep.baseline_requests * request_tokens;
    rep.request_multiplier = rep.baseline_tokens > 0 ? static_cast<double>(rep.admitted_tokens) /
                                                           static_cast<double>(rep.baseline_tokens)
                                                     : 0.0;
    rep.token_multiplier =
        static_cast<double>(rep.admitted_tokens) / static_cast<double>(std::max<std::size_t>(baseline_capacity, 1));
    return rep;
}

std::string admission_to_json(const AdmissionReport& report) {
    nlohmann::json j;
    j["pool_bytes"] = pool_bytes(report.config);
    j["total_slots"] = report.config.total_slots;
    j["offset"] = report.config.offset;
    j["request_tokens"] = report.request_tokens;
    j["int2_tokens_per_request"] = report.int2_tokens_per_request;
    j["admitted_requests"] = report.admitted_requests;
    j["admitted_tokens"] = report.admitted_tokens;
    j["baseline_requests"] = report.baseline_requests;
    j["baseline_tokens"] = report.baseline_tokens;
    j["request_multiplier"] = report.request_multiplier;
    j["token_multiplier"] = report.token_multiplier;
    return j.dump(2) + "\n";
}

}  // namespace tagkv
