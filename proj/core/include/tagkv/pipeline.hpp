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

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tagkv/allocator.hpp"
#include "tagkv/calibration.hpp"
#include "tagkv/kv_pool.hpp"
#include "tagkv/tag.hpp"
#include "tagkv/trace_model.hpp"

namespace tagkv {

// ---- generate --------------------------------------------------------------

struct GenerateOptions {
    std::uint64_t seed = 0;
    std::size_t n_traces = 4;
    std::size_t n_turns = 3;
    CaptureShape shape;
    bool include_images = true;
    CaptureOptions capture;
};

struct GeneratedSet {
    std::vector<std::filesystem::path> trace_files;
    std::vector<std::filesystem::path> capture_dirs;
};

/// Writes out/template.json, out/traces/req-NNN.json and out/captures/req-NNN/.
GeneratedSet cmd_generate(const GenerateOptions& options, const std::filesystem::path& out_dir);

// ---- tag -------------------------------------------------------------------

/// {"request_id": ..., "tags": [codes]}
std::string tags_to_json(const std::string& request_id, std::span<const TagCode> tags);
std::string cmd_tag(const Trace& trace, const TemplateDescriptor& tmpl);

// ---- capture sets ----------------------------------------------------------

/// `dir` itself if it holds a manifest, otherwise its capture subdirectories in
/// name order. Throws FormatError when none are found.
std::vector<std::filesystem::path> list_capture_dirs(const std::filesystem::path& dir);
std::vector<KVCapture> load_captures(std::span<const std::filesystem::path> dirs);

/// The first max(ceil(fraction * n), min(min_traces, n)) entries.
std::size_t calibration_set_size(std::size_t n, double fraction, std::size_t min_traces);

struct CalibrateOptions {
    double fraction = 0.05;
    std::size_t min_traces = 3;
    std::size_t group_size = kGroupSize;
};

struct CalibrationRun {
    SensitivityTable table;
    std::vector<std::string> request_ids;
    std::vector<std::string> warnings;
};

CalibrationRun cmd_calibrate(std::span<const KVCapture> captures, const CalibrateOptions& options = {});

// ---- joint distortion ------------------------------------------------------

/// Measures the jointly quantized distortion of whole allocations over a fixed
/// capture set, aggregated like the per-tag table: sum over layers of the mean
/// over requests of the worst head's causal MSE. Full-precision references are
/// computed once.
class JointDistortion {
public:
    explicit JointDistortion(std::span<const KVCapture> captures, std::size_t group_size = kGroupSize);

    /// Throws ValidationError when an active tag has no bitwidth.
    double operator()(const std::map<TagCode, Bitwidth>& bits) const;

private:
    std::span<const KVCapture> captures_;
    std::size_t group_size_;
    std::vector<std::vector<Tensor3>> references_;  // [request][layer]
};

// ---- sweep -----------------------------------------------------------------

struct SweepOptions {
    std::vector<double> grid = default_budget_grid();
    double threshold = 0.0;
    Solver solver = Solver::kAuto;
    std::size_t group_size = kGroupSize;
};

SweepResult cmd_sweep(const SensitivityTable& table, std::span<const KVCapture> calibration_set,
                      const SweepOptions& options);
std::string sweep_to_json(const SweepResult& result, double threshold);

// ---- replay ----------------------------------------------------------------

struct ReplayOptions {
    std::optional<double> budget;  // pool split; fit to the stored mix when unset
    std::size_t split_len = 128;
    std::size_t probe_queries = 16;
    std::size_t group_size = kGroupSize;
    std::size_t total_slots = 0;  // 0 sizes the pool to fit every request
};

struct RequestReplay {
    std::string request_id;
    std::size_t n_tokens = 0;
    std::size_t int2_requested = 0;
    std::size_t int2_stored = 0;
    std::vector<double> layer_mse;
    double mse = 0.0;  // mean over layers
};

struct ReplayReport {
    double budget = 0.0;       // the allocation's
    double pool_budget = 0.0;  // the one init_pool ran with
    std::map<TagCode, Bitwidth> bits;
    std::size_t split_len = 0;
    std::size_t probe_queries = 0;
    std::vector<RequestReplay> requests;
    double mean_mse = 0.0;
    /// Allocator convention (inst tags counted once, others summed) evaluated
    /// with the bitwidths actually stored, residual upgrades included.
    double realized_avg = 0.0;
    double stored_avg_bits = 0.0;  // plain per-token mean over the pool
    double page_slack = 0.0;       // 2 * G * requests / sum of N_k
    PoolStats pool;
};

/// Per request: tags -> bits, alloc with residual routing, quantized writes,
/// partition, flash-decode of the last probe_queries captured queries against
/// the whole cache, and MSE against full-precision attention. Every request
/// stays resident so the report's pool stats cover the whole set.
ReplayReport cmd_replay(std::span<const KVCapture> captures, const Allocation& allocation,
                        const ReplayOptions& options = {});
std::string replay_report_to_json(const ReplayReport& report);

/// Per-token bitwidths for a tag array. Throws ValidationError for a tag the
/// allocation does not cover.
std::vector<Bitwidth> bits_for_tags(std::span<const TagCode> tags, const std::map<TagCode, Bitwidth>& bits);

// ---- pool stats ------------------------------------------------------------

std::string pool_stats_to_json(const PoolStats& stats);

struct AdmissionReport {
    PoolConfig config;
    std::size_t request_tokens = 0;
    std::size_t int2_tokens_per_request = 0;
    std::size_t admitted_requests = 0;
    std::size_t admitted_tokens = 0;
    std::size_t baseline_requests = 0;  // whole requests a 16-bit cache of the same bytes holds
    std::size_t baseline_tokens = 0;
    double request_multiplier = 0.0;  // admitted_tokens / baseline_tokens
    double token_multiplier = 0.0;    // admitted_tokens / (bytes / bf16 bytes per token)
};

/// Fills a pool built from `total_bytes` at `budget` with identical requests
/// whose first int2_fraction of tokens are INT2 until an allocation fails.
AdmissionReport simulate_admission(double budget, std::size_t total_bytes, const PoolDims& dims,
                                   std::size_t request_tokens, double int2_fraction);
std::string admission_to_json(const AdmissionReport& report);

}  // namespace tagkv
