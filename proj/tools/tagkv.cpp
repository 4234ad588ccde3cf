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

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tagkv/allocator.hpp"
#include "tagkv/calibration.hpp"
#include "tagkv/error.hpp"
#include "tagkv/kv_pool.hpp"
#include "tagkv/pipeline.hpp"
#include "tagkv/trace_model.hpp"

namespace fs = std::filesystem;
using namespace tagkv;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitValidation = 2;
constexpr int kExitCapacity = 3;
constexpr int kExitInfeasible = 4;

void emit(const std::string& text, const std::string& out) {
    if (out.empty() || out == "-") {
        std::cout << text;
        return;
    }
    const fs::path path(out);
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw FormatError("cannot write " + out);
    }
    f << text;
}

std::vector<double> parse_grid(const std::string& text) {
    if (text.empty() || text == "default") {
        return default_budget_grid();
    }
    std::vector<double> grid;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            grid.push_back(std::stod(item, &used));
            if (used != item.size()) {
                throw std::invalid_argument(item);
            }
        } catch (const std::logic_error&) {
            throw ValidationError("bad budget grid entry '" + item + "'");
        }
    }
    return grid;
}

struct Common {
    std::size_t group_size = kGroupSize;
    std::size_t split_len = 128;
    std::uint64_t seed = 0;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--out", c.out, "Output path (stdout when omitted)");
    cmd->add_option("--group-size", c.group_size, "Quantization group and page size")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tagkv: tag-aware mixed-precision KV cache toolkit"};
    app.require_subcommand(1);

    Common common;

    // generate
    GenerateOptions gen;
    auto* generate = app.add_subcommand("generate", "Write synthetic traces and captures");
    add_common(generate, common);
    generate->add_option("--seed", gen.seed)->capture_default_str();
    generate->add_option("--traces", gen.n_traces)->capture_default_str();
    generate->add_option("--turns", gen.n_turns)->capture_default_str();
    generate->add_option("--layers", gen.shape.n_layers)->capture_default_str();
    generate->add_option("--heads", gen.shape.n_heads)->capture_default_str();
    generate->add_option("--kv-heads", gen.shape.n_kv_heads)->capture_default_str();
    generate->add_option("--head-dim", gen.shape.head_dim)->capture_default_str();
    bool no_images = false;
    generate->add_flag("--no-images", no_images);
    generate->add_flag("--grid-aligned", gen.capture.grid_aligned, "Lossless-at-4-bit integer captures");

    // tag
    std::string trace_path;
    std::string template_path;
    auto* tag = app.add_subcommand("tag", "Tag one trace file");
    add_common(tag, common);
    tag->add_option("--trace", trace_path)->required();
    tag->add_option("--template", template_path, "Template descriptor (built-in default when omitted)");

    // calibrate
    std::string captures_path;
    CalibrateOptions cal;
    auto* calibrate = app.add_subcommand("calibrate", "Build the per-tag sensitivity table");
    add_common(calibrate, common);
    calibrate->add_option("--captures", captures_path)->required();
    calibrate->add_option("--fraction", cal.fraction)->capture_default_str();
    calibrate->add_option("--min-traces", cal.min_traces)->capture_default_str();

    // allocate
    std::string table_path;
    double budget = 4.0;
    std::string solver_name = "auto";
    auto* alloc = app.add_subcommand("allocate", "Solve the budgeted bitwidth assignment");
    add_common(alloc, common);
    alloc->add_option("--table", table_path)->required();
    alloc->add_option("--budget", budget)->required();
    alloc->add_option("--solver", solver_name)->check(CLI::IsMember({"exhaustive", "greedy", "auto"}))
        ->capture_default_str();

    // sweep
    std::string grid_text;
    double threshold = 0.0;
    auto* sweep = app.add_subcommand("sweep", "Sweep the budget over the calibration set");
    add_common(sweep, common);
    sweep->add_option("--captures", captures_path)->required();
    sweep->add_option("--table", table_path, "Sensitivity table (recalibrated when omitted)");
    sweep->add_option("--grid", grid_text, "Comma-separated budgets (2.0..4.0 by 0.1 when omitted)");
    sweep->add_option("--threshold", threshold)->capture_default_str();
    sweep->add_option("--solver", solver_name)->check(CLI::IsMember({"exhaustive", "greedy", "auto"}));
    sweep->add_option("--fraction", cal.fraction)->capture_default_str();
    sweep->add_option("--min-traces", cal.min_traces)->capture_default_str();

    // replay
    std::string allocation_path;
    ReplayOptions rep;
    double replay_budget = 0.0;
    auto* replay = app.add_subcommand("replay", "Replay captures through the mixed-precision pool");
    add_common(replay, common);
    replay->add_option("--captures", captures_path)->required();
    replay->add_option("--allocation", allocation_path)->required();
    replay->add_option("--budget", replay_budget, "Pool split budget (fit to the stored mix when omitted)");
    replay->add_option("--split-len", common.split_len)->capture_default_str();
    replay->add_option("--probes", rep.probe_queries)->capture_default_str();
    replay->add_option("--total-slots", rep.total_slots, "Pool size (fit to the requests when 0)");

    // pool-stats
    PoolDims dims;
    std::size_t total_slots = 0;
    std::size_t total_bytes = 0;
    std::size_t request_tokens = 0;
    double int2_fraction = 0.65;
    double pool_budget = 2.7;
    auto* stats = app.add_subcommand("pool-stats", "Report pool geometry and admission headroom");
    add_common(stats, common);
    stats->add_option("--budget", pool_budget)->capture_default_str();
    stats->add_option("--total-slots", total_slots);
    stats->add_option("--bytes", total_bytes);
    stats->add_option("--layers", dims.n_layers)->capture_default_str();
    stats->add_option("--kv-heads", dims.n_kv_heads)->capture_default_str();
    stats->add_option("--head-dim", dims.head_dim)->capture_default_str();
    stats->add_option("--request-tokens", request_tokens, "Simulate admission of requests of this length");
    stats->add_option("--int2-fraction", int2_fraction)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (*generate) {
            gen.include_images = !no_images;
            gen.capture.group_size = common.group_size;
            if (common.out.empty()) {
                throw ValidationError("generate needs --out <dir>");
            }
            const auto set = cmd_generate(gen, common.out);
            std::cerr << "wrote " << set.trace_files.size() << " traces and captures to " << common.out << "\n";
        } else if (*tag) {
            const TemplateDescriptor tmpl = template_path.empty() ? default_template() : load_template(template_path);
            emit(cmd_tag(load_trace(trace_path), tmpl), common.out);
        } else if (*calibrate) {
            cal.group_size = common.group_size;
            const auto dirs = list_capture_dirs(captures_path);
            const auto captures = load_captures(dirs);
            const auto run = cmd_calibrate(captures, cal);
            for (const auto& w : run.warnings) {
                std::cerr << "warning: " << w << "\n";
            }
            emit(sensitivity_to_json(run.table), common.out);
        } else if (*alloc) {
            const auto table = load_sensitivity(table_path);
            Allocation a = allocate(table, budget, solver_from_string(solver_name));
            if (a.greedy_objective && *a.greedy_objective < a.objective) {
                std::cerr << "warning: greedy objective below exhaustive\n";
            }
            emit(allocation_to_json(a), common.out);
        } else if (*sweep) {
            cal.group_size = common.group_size;
            const auto dirs = list_capture_dirs(captures_path);
            const auto captures = load_captures(dirs);
            const std::size_t k = calibration_set_size(captures.size(), cal.fraction, cal.min_traces);
            const std::span<const KVCapture> subset(captures.data(), k);
            const SensitivityTable table =
                table_path.empty() ? cmd_calibrate(captures, cal).table : load_sensitivity(table_path);
            SweepOptions so;
            so.grid = parse_grid(grid_text);
            so.threshold = threshold;
            so.solver = solver_from_string(solver_name);
            so.group_size = common.group_size;
            const auto result = cmd_sweep(table, subset, so);
            if (result.flagged) {
                std::cerr << "warning: no budget below 4 met the threshold\n";
            }
            emit(sweep_to_json(result, threshold), common.out);
        } else if (*replay) {
            const auto dirs = list_capture_dirs(captures_path);
            const auto captures = load_captures(dirs);
            const auto allocation = load_allocation(allocation_path);
            rep.group_size = common.group_size;
            rep.split_len = common.split_len;
            if (replay->count("--budget") > 0) {
                rep.budget = replay_budget;
            }
            emit(replay_report_to_json(cmd_replay(captures, allocation, rep)), common.out);
        } else if (*stats) {
            dims.page_size = common.group_size;
            if ((total_slots == 0) == (total_bytes == 0)) {
                throw ValidationError("pool-stats needs exactly one of --total-slots or --bytes");
            }
            if (request_tokens > 0) {
                if (total_bytes == 0) {
                    throw ValidationError("admission simulation needs --bytes");
                }
                emit(admission_to_json(simulate_admission(pool_budget, total_bytes, dims, request_tokens,
                                                          int2_fraction)),
                     common.out);
            } else {
                const PoolConfig config = total_slots > 0 ? init_pool(pool_budget, total_slots, dims)
                                                          : init_pool_from_bytes(pool_budget, total_bytes, dims);
                emit(pool_stats_to_json(KvPool(config).stats()), common.out);
            }
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        switch (e.kind()) {
            case ErrorKind::kValidation:
                return kExitValidation;
            case ErrorKind::kCapacity:
                return kExitCapacity;
            case ErrorKind::kInfeasible:
                return kExitInfeasible;
        }
        return kExitOther;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitOther;
    }
    return kExitOk;
}
