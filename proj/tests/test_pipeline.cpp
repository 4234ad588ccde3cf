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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "oracle.hpp"
#include "tagkv/attention.hpp"
#include "tagkv/error.hpp"
#include "tagkv/pipeline.hpp"
#include "tagkv/tagger.hpp"

using namespace tagkv;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::path(::testing::TempDir()) / ("tagkv_pipeline_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<KVCapture> in_memory(std::size_t n, std::uint64_t seed, const CaptureShape& shape, bool grid) {
    const auto tmpl = default_template();
    std::vector<KVCapture> out;
    for (std::size_t i = 0; i < n; ++i) {
        Trace t = generate_synthetic_trace(seed + i, 3, tmpl, true);
        t.request_id = "r" + std::to_string(i);
        const auto tags = tag_tokens(t, tmpl);
        CaptureOptions opt;
        opt.grid_aligned = grid;
        out.push_back(generate_synthetic_capture(t, tags, shape, seed * 7 + i, opt));
    }
    return out;
}

Allocation uniform(const std::vector<KVCapture>& caps, Bitwidth b) {
    Allocation a;
    a.budget = static_cast<double>(bit_count(b));
    for (const auto& c : caps)
        for (TagCode t : c.tags) a.bits[t] = b;
    a.realized_avg = a.budget;
    return a;
}

}  // namespace

TEST(Generate, DeterministicAndLoadable) {
    GenerateOptions opt;
    opt.seed = 11;
    opt.n_traces = 3;
    opt.shape = {2, 4, 2, 32};
    const fs::path a = scratch("gen_a");
    const fs::path b = scratch("gen_b");
    const GeneratedSet sa = cmd_generate(opt, a);
    cmd_generate(opt, b);
    ASSERT_EQ(sa.trace_files.size(), 3u);
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (!e.is_regular_file()) continue;
        const fs::path rel = fs::relative(e.path(), a);
        EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
        ++files;
    }
    EXPECT_GT(files, 4u);

    const auto dirs = list_capture_dirs(a);
    ASSERT_EQ(dirs.size(), 3u);
    EXPECT_TRUE(std::is_sorted(dirs.begin(), dirs.end()));
    const auto caps = load_captures(dirs);
    for (std::size_t i = 0; i < caps.size(); ++i) {
        EXPECT_NO_THROW(caps[i].validate());
        const Trace t = load_trace(sa.trace_files[i]);
        EXPECT_EQ(caps[i].request_id, t.request_id);
        EXPECT_EQ(caps[i].tags, tag_tokens(t, load_template(a / "template.json")));
    }
    EXPECT_EQ(list_capture_dirs(dirs[0]), std::vector<fs::path>{dirs[0]});
    EXPECT_THROW(list_capture_dirs(scratch("empty")), FormatError);
    GenerateOptions none = opt;
    none.n_traces = 0;
    EXPECT_THROW(cmd_generate(none, scratch("none")), ValidationError);
}

TEST(Calibrate, GridDataIsLosslessAtFourBits) {
    const auto caps = in_memory(3, 5, {1, 2, 1, 32}, true);
    const CalibrationRun run = cmd_calibrate(caps);
    ASSERT_FALSE(run.table.entries.empty());
    EXPECT_EQ(run.request_ids.size(), 3u);
    for (const auto& e : run.table.entries) {
        EXPECT_EQ(e.d4, 0.0) << e.tag.value();
        EXPECT_GE(e.d2, e.d4);
    }
    const fs::path p = scratch("table") / "sensitivity.json";
    save_sensitivity(run.table, p);
    EXPECT_EQ(load_sensitivity(p), run.table);
}

TEST(Calibrate, SubsetSize) {
    EXPECT_EQ(calibration_set_size(100, 0.05, 3), 5u);
    EXPECT_EQ(calibration_set_size(10, 0.05, 3), 3u);
    EXPECT_EQ(calibration_set_size(2, 0.05, 3), 2u);
    EXPECT_EQ(calibration_set_size(10, 1.0, 3), 10u);
    EXPECT_THROW(calibration_set_size(10, 0.0, 3), ValidationError);
    EXPECT_THROW(calibration_set_size(10, 1.5, 3), ValidationError);
    EXPECT_THROW(cmd_calibrate(std::vector<KVCapture>{}), ValidationError);
}

TEST(Replay, AllFourBitsOnGridData) {
    const auto caps = in_memory(2, 9, {1, 2, 1, 32}, true);
    const ReplayReport r = cmd_replay(caps, uniform(caps, Bitwidth::kInt4));
    ASSERT_EQ(r.requests.size(), 2u);
    // Lossless storage: only float reassociation remains, 1e-5 of the largest
    // possible output (15) per element.
    EXPECT_LE(r.mean_mse, 32 * std::pow(1e-5 * 15.0, 2));
    EXPECT_EQ(r.realized_avg, 4.0);
    EXPECT_EQ(r.stored_avg_bits, 4.0);
    EXPECT_EQ(r.pool.live_requests, 2u);
}

TEST(Replay, MatchesJointOracle) {
    const auto caps = in_memory(3, 21, {2, 4, 2, 64}, false);
    const CalibrationRun run = cmd_calibrate(caps);
    const Allocation a = allocate(run.table, 2.7);
    ReplayOptions opt;
    opt.probe_queries = 8;
    opt.split_len = 32;
    const ReplayReport r = cmd_replay(caps, a, opt);
    ASSERT_EQ(r.requests.size(), caps.size());
    for (std::size_t i = 0; i < caps.size(); ++i) {
        const auto& c = caps[i];
        const auto bits = bits_for_tags(c.tags, a.bits);
        const std::vector<std::optional<Bitwidth>> marked(bits.begin(), bits.end());
        double sum = 0.0;
        for (std::size_t l = 0; l < c.n_layers(); ++l) {
            const auto& layer = c.layers[l];
            const StoredKV s = simulate_storage(layer.k, layer.v, marked);
            const std::size_t nq = c.n_query(), p = std::min<std::size_t>(8, nq);
            Tensor3 q({p, c.n_heads(), c.head_dim});
            for (std::size_t j = 0; j < p; ++j)
                for (std::size_t h = 0; h < c.n_heads(); ++h)
                    std::copy(layer.q.row(nq - p + j, h).begin(), layer.q.row(nq - p + j, h).end(),
                              q.row(j, h).begin());
            const auto ref = oracle::attention(q, layer.k, layer.v, false);
            const auto got = oracle::attention(q, s.k, s.v, false);
            double mse = 0.0;
            for (std::size_t j = 0; j < ref.size(); ++j) mse += (ref[j] - got[j]) * (ref[j] - got[j]);
            mse /= static_cast<double>(p * c.n_heads());
            EXPECT_NEAR(r.requests[i].layer_mse[l], mse, 1e-3 * mse) << c.request_id << " layer " << l;
            sum += mse;
        }
        EXPECT_NEAR(r.requests[i].mse, sum / static_cast<double>(c.n_layers()), 1e-3 * sum);
    }
    EXPECT_LE(std::fabs(r.realized_avg - a.realized_avg), r.page_slack);
    EXPECT_GE(r.realized_avg, a.realized_avg);
}

TEST(Replay, Errors) {
    const auto caps = in_memory(2, 31, {1, 2, 1, 32}, false);
    Allocation a = uniform(caps, Bitwidth::kInt2);
    Allocation missing = a;
    missing.bits.erase(caps[0].tags.front());
    EXPECT_THROW(cmd_replay(caps, missing), ValidationError);
    ReplayOptions tiny;
    tiny.total_slots = 64;
    EXPECT_THROW(cmd_replay(caps, a, tiny), CapacityError);
    EXPECT_THROW(cmd_replay(std::vector<KVCapture>{}, a), ValidationError);
}

TEST(Sweep, SingleCandidate) {
    const auto caps = in_memory(2, 41, {1, 2, 1, 32}, false);
    const CalibrationRun run = cmd_calibrate(caps);
    SweepOptions opt;
    opt.grid = {4.0};
    const SweepResult r = cmd_sweep(run.table, caps, opt);
    EXPECT_EQ(r.chosen, 4.0);
    ASSERT_EQ(r.curve.size(), 1u);
    const JointDistortion measure(caps);
    EXPECT_EQ(r.curve[0].score, measure(r.curve[0].allocation.bits));
}
