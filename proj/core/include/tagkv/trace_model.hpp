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
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "tagkv/tag.hpp"
#include "tagkv/tensor.hpp"

namespace tagkv {

using TokenId = std::int32_t;

inline constexpr std::size_t kGroupSize = 32;
inline constexpr int kCaptureFormatVersion = 1;

/// Special-token IDs of a chat template. Tagging is driven only by these.
struct TemplateDescriptor {
    std::map<std::string, TokenId> role_begin_ids;  // system, user, assistant, tool
    TokenId role_end_id = 0;
    TokenId think_open_id = 0;
    TokenId think_close_id = 0;
    TokenId tool_call_open_id = 0;
    TokenId tool_call_close_id = 0;
    TokenId image_token_id = 0;
    std::set<TokenId> delimiter_ids;

    /// Throws ValidationError on duplicate IDs or missing/unknown roles.
    void validate() const;

    /// True for every ID above, delimiters included.
    bool is_special(TokenId id) const;

    friend bool operator==(const TemplateDescriptor&, const TemplateDescriptor&) = default;
};

/// An arbitrary but fixed descriptor used by the generator and the CLI when
/// no template file is supplied.
TemplateDescriptor default_template();

TemplateDescriptor parse_template(std::string_view json_text);
std::string template_to_json(const TemplateDescriptor& tmpl);

struct Trace {
    std::string request_id;
    std::vector<TokenId> token_ids;

    std::size_t size() const noexcept { return token_ids.size(); }
    friend bool operator==(const Trace&, const Trace&) = default;
};

Trace parse_trace(std::string_view json_text);
std::string trace_to_json(const Trace& trace);
Trace load_trace(const std::filesystem::path& path);
void save_trace(const Trace& trace, const std::filesystem::path& path);
TemplateDescriptor load_template(const std::filesystem::path& path);
void save_template(const TemplateDescriptor& tmpl, const std::filesystem::path& path);

/// Synthetic multi-turn agentic trace. Each turn has a user message and one or
/// more assistant messages, with optional think spans, tool calls and tool
/// observations; image runs appear only inside observations.
Trace generate_synthetic_trace(std::uint64_t seed, std::size_t n_turns, const TemplateDescriptor& tmpl,
                               bool include_images);

/// Q is [n_query, n_heads, d]; K and V are [N, n_kv_heads, d].
struct LayerCapture {
    Tensor3 q;
    Tensor3 k;
    Tensor3 v;

    friend bool operator==(const LayerCapture&, const LayerCapture&) = default;
};

struct KVCapture {
    std::string request_id;
    std::size_t head_dim = 0;
    std::vector<LayerCapture> layers;
    std::vector<TagCode> tags;

    std::size_t n_tokens() const noexcept { return tags.size(); }
    std::size_t n_layers() const noexcept { return layers.size(); }
    std::size_t n_heads() const noexcept { return layers.empty() ? 0 : layers.front().q.dim(1); }
    std::size_t n_kv_heads() const noexcept { return layers.empty() ? 0 : layers.front().k.dim(1); }
    std::size_t n_query() const noexcept { return layers.empty() ? 0 : layers.front().q.dim(0); }

    /// Throws ShapeError when any capture invariant is violated.
    void validate(std::size_t group_size = kGroupSize) const;

    friend bool operator==(const KVCapture&, const KVCapture&) = default;
};

struct CaptureShape {
    std::size_t n_layers = 1;
    std::size_t n_heads = 1;
    std::size_t n_kv_heads = 1;
    std::size_t head_dim = 32;
};

struct CaptureOptions {
    std::size_t group_size = kGroupSize;
    /// K and V take integer values in [0, 15] with both extremes present in every
    /// channel group, so per-token 4-bit quantization is lossless.
    bool grid_aligned = false;
};

/// Keys carry per-channel scale multipliers spanning [0.5, 4.0] log-uniformly
/// (extremes pinned), so channel outliers exist at every head.
KVCapture generate_synthetic_capture(const Trace& trace, const std::vector<TagCode>& tags,
                                     const CaptureShape& shape, std::uint64_t seed,
                                     const CaptureOptions& options = {});

/// Directory with manifest.json and one raw little-endian float32 blob per tensor.
void save_capture(const KVCapture& capture, const std::filesystem::path& dir);
KVCapture load_capture(const std::filesystem::path& dir);

}  // namespace tagkv
