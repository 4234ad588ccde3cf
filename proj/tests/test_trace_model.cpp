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
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "tagkv/error.hpp"
#include "tagkv/tagger.hpp"
#include "tagkv/trace_model.hpp"

using namespace tagkv;
namespace fs = std::filesystem;

namespace {

const TemplateDescriptor kTmpl = default_template();

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("tagkv_trace_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
}

KVCapture capture_for(std::uint64_t seed, const CaptureShape& shape, std::size_t turns = 2) {
    Trace trace = generate_synthetic_trace(seed, turns, kTmpl, true);
    trace.request_id = "req-" + std::to_string(seed);
    return generate_synthetic_capture(trace, tag_tokens(trace, kTmpl), shape, seed);
}

}  // namespace

TEST(Template, DefaultValidatesAndRoundTrips) {
    EXPECT_NO_THROW(kTmpl.validate());
    EXPECT_EQ(parse_template(template_to_json(kTmpl)), kTmpl);
    EXPECT_TRUE(kTmpl.is_special(kTmpl.role_end_id));
    EXPECT_TRUE(kTmpl.is_special(*kTmpl.delimiter_ids.begin()));
    EXPECT_FALSE(kTmpl.is_special(7));
}

TEST(Template, RejectsDuplicatesAndMissingRoles) {
    TemplateDescriptor dup = kTmpl;
    dup.think_close_id = dup.think_open_id;
    EXPECT_THROW(dup.validate(), ValidationError);
    TemplateDescriptor missing = kTmpl;
    missing.role_begin_ids.erase("tool");
    EXPECT_THROW(missing.validate(), ValidationError);
    TemplateDescriptor unknown = kTmpl;
    unknown.role_begin_ids["narrator"] = 5;
    EXPECT_THROW(unknown.validate(), ValidationError);
    EXPECT_THROW(parse_template("{\"role_end\": 1}"), FormatError);
}

TEST(Trace, JsonRoundTrip) {
    Trace t = generate_synthetic_trace(4, 2, kTmpl, true);
    t.request_id = "req-004";
    EXPECT_EQ(parse_trace(trace_to_json(t)), t);
    EXPECT_THROW(parse_trace("{\"request_id\": \"x\"}"), FormatError);
    EXPECT_THROW(parse_trace("not json"), FormatError);
}

TEST(Trace, SingleTurnWithoutImagesHasOneUserMessage) {
    const Trace t = generate_synthetic_trace(0, 1, kTmpl, false);
    const TokenId user = kTmpl.role_begin_ids.at("user");
    EXPECT_EQ(std::count(t.token_ids.begin(), t.token_ids.end(), user), 1);
    EXPECT_EQ(std::count(t.token_ids.begin(), t.token_ids.end(), kTmpl.image_token_id), 0);
}

TEST(Trace, SameSeedSameTrace) {
    EXPECT_EQ(generate_synthetic_trace(9, 3, kTmpl, true), generate_synthetic_trace(9, 3, kTmpl, true));
    EXPECT_NE(generate_synthetic_trace(9, 3, kTmpl, true), generate_synthetic_trace(10, 3, kTmpl, true));
}

TEST(Trace, ImagesOnlyInsideToolMessages) {
    const TokenId tool = kTmpl.role_begin_ids.at("tool");
    std::size_t images = 0;
    for (std::uint64_t seed = 1; seed < 40; ++seed) {
        const Trace t = generate_synthetic_trace(seed, 2, kTmpl, true);
        TokenId open_role = -1;
        for (TokenId id : t.token_ids) {
            bool is_role = false;
            for (const auto& [name, rid] : kTmpl.role_begin_ids) is_role |= id == rid;
            if (is_role) open_role = id;
            if (id == kTmpl.role_end_id) open_role = -1;
            if (id == kTmpl.image_token_id) {
                ++images;
                EXPECT_EQ(open_role, tool) << "seed " << seed;
            }
        }
    }
    EXPECT_GT(images, 0u);
}

TEST(Trace, BracketsBalanceOverManySeeds) {
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        const Trace t = generate_synthetic_trace(seed, 1 + seed % 5, kTmpl, seed % 3 != 0);
        EXPECT_NO_THROW(tag_tokens(t, kTmpl)) << seed;
    }
}

TEST(Capture, ShapesFollowTheTrace) {
    Trace trace{"hand", {}};
    trace.token_ids.push_back(kTmpl.role_begin_ids.at("user"));
    for (int i = 0; i < 30; ++i) trace.token_ids.push_back(100 + i);
    trace.token_ids.push_back(kTmpl.role_end_id);
    ASSERT_EQ(trace.size(), 32u);
    const CaptureShape shape{2, 4, 2, 32};
    const KVCapture c = generate_synthetic_capture(trace, tag_tokens(trace, kTmpl), shape, 1);
    ASSERT_EQ(c.n_layers(), 2u);
    EXPECT_EQ(c.layers[0].k.shape(), (Tensor3::Shape{32, 2, 32}));
    EXPECT_EQ(c.layers[0].v.shape(), (Tensor3::Shape{32, 2, 32}));
    EXPECT_EQ(c.layers[0].q.shape(), (Tensor3::Shape{32, 4, 32}));
    EXPECT_EQ(c.n_tokens(), 32u);
    EXPECT_NO_THROW(c.validate());
}

TEST(Capture, Deterministic) {
    const CaptureShape shape{1, 2, 1, 32};
    EXPECT_EQ(capture_for(7, shape), capture_for(7, shape));
}

TEST(Capture, KeyChannelOutliers) {
    Trace trace = generate_synthetic_trace(3, 3, kTmpl, false);
    const KVCapture c = generate_synthetic_capture(trace, tag_tokens(trace, kTmpl), {1, 1, 1, 64}, 3);
    const auto& k = c.layers[0].k;
    const std::size_t n = k.dim(0);
    double lo = INFINITY, hi = 0.0;
    for (std::size_t ch = 0; ch < 64; ++ch) {
        double mean = 0.0, sq = 0.0;
        for (std::size_t t = 0; t < n; ++t) mean += k(t, 0, ch);
        mean /= static_cast<double>(n);
        for (std::size_t t = 0; t < n; ++t) sq += (k(t, 0, ch) - mean) * (k(t, 0, ch) - mean);
        const double var = sq / static_cast<double>(n);
        lo = std::min(lo, var);
        hi = std::max(hi, var);
    }
    EXPECT_GE(hi / lo, 4.0);
}

TEST(Capture, GridAlignedValuesAreIntegerLevels) {
    Trace trace = generate_synthetic_trace(2, 1, kTmpl, false);
    CaptureOptions opts;
    opts.grid_aligned = true;
    const KVCapture c = generate_synthetic_capture(trace, tag_tokens(trace, kTmpl), {1, 1, 1, 64}, 2, opts);
    for (float x : c.layers[0].k.data()) {
        EXPECT_EQ(x, std::round(x));
        EXPECT_GE(x, 0.0f);
        EXPECT_LE(x, 15.0f);
    }
}

TEST(Capture, ShapeErrors) {
    Trace trace = generate_synthetic_trace(2, 1, kTmpl, false);
    auto tags = tag_tokens(trace, kTmpl);
    EXPECT_THROW(generate_synthetic_capture(trace, tags, {1, 1, 1, 48}, 0), ShapeError);
    EXPECT_THROW(generate_synthetic_capture(trace, tags, {1, 3, 2, 32}, 0), ShapeError);
    tags.pop_back();
    EXPECT_THROW(generate_synthetic_capture(trace, tags, {1, 1, 1, 32}, 0), ShapeError);
}

TEST(Capture, SaveLoadRoundTrip) {
    const fs::path dir = scratch("roundtrip");
    const KVCapture c = capture_for(5, {2, 2, 1, 32});
    save_capture(c, dir / "c");
    const KVCapture back = load_capture(dir / "c");
    EXPECT_EQ(back, c);
    Trace trace = generate_synthetic_trace(5, 2, kTmpl, true);
    EXPECT_EQ(back.tags, tag_tokens(trace, kTmpl));
}

TEST(Capture, CorruptInputsAreFormatErrors) {
    const fs::path dir = scratch("corrupt");
    const KVCapture c = capture_for(6, {1, 1, 1, 32});

    save_capture(c, dir / "short");
    const fs::path blob = dir / "short" / "layer0.k.f32le";
    std::string bytes = slurp(blob);
    bytes.resize(bytes.size() - 4);
    spit(blob, bytes);
    EXPECT_THROW(load_capture(dir / "short"), FormatError);

    save_capture(c, dir / "lying");
    auto manifest = nlohmann::json::parse(slurp(dir / "lying" / "manifest.json"));
    manifest["tensors"][0]["bytes"] = 12;
    spit(dir / "lying" / "manifest.json", manifest.dump());
    EXPECT_THROW(load_capture(dir / "lying"), FormatError);

    save_capture(c, dir / "version");
    manifest = nlohmann::json::parse(slurp(dir / "version" / "manifest.json"));
    manifest["format_version"] = 2;
    spit(dir / "version" / "manifest.json", manifest.dump());
    EXPECT_THROW(load_capture(dir / "version"), FormatError);

    save_capture(c, dir / "escape");
    manifest = nlohmann::json::parse(slurp(dir / "escape" / "manifest.json"));
    manifest["tensors"][0]["file"] = "../short/layer0.q.f32le";
    spit(dir / "escape" / "manifest.json", manifest.dump());
    EXPECT_THROW(load_capture(dir / "escape"), FormatError);

    EXPECT_THROW(load_capture(dir / "absent"), FormatError);
}
