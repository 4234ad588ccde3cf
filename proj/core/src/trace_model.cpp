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

#include "tagkv/trace_model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tagkv/error.hpp"
#include "tagkv/rng.hpp"

namespace tagkv {
namespace {

using nlohmann::json;

const std::vector<std::string> kRoles = {"system", "user", "assistant", "tool"};

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write " + path.string());
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

json parse_json(std::string_view text, std::string_view what) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string(what) + ": " + e.what());
    }
}

template <typename T>
T field(const json& j, const char* key, std::string_view what) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw FormatError(std::string(what) + ": missing or invalid field '" + key + "'");
    }
}

std::string encode_f32le(std::span<const float> values) {
    std::string bytes(values.size() * 4, '\0');
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto word = std::bit_cast<std::uint32_t>(values[i]);
        for (int b = 0; b < 4; ++b) {
            bytes[i * 4 + b] = static_cast<char>((word >> (8 * b)) & 0xffu);
        }
    }
    return bytes;
}

std::vector<float> decode_f32le(std::string_view bytes) {
    std::vector<float> values(bytes.size() / 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint32_t word = 0;
        for (int b = 0; b < 4; ++b) {
            word |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
        }
        values[i] = std::bit_cast<float>(word);
    }
    return values;
}

}  // namespace

void TemplateDescriptor::validate() const {
    for (const auto& role : kRoles) {
        if (!role_begin_ids.contains(role)) {
            throw ValidationError("template is missing role '" + role + "'");
        }
    }
    for (const auto& [role, id] : role_begin_ids) {
        if (std::find(kRoles.begin(), kRoles.end(), role) == kRoles.end()) {
            throw ValidationError("template has unsupported role '" + role + "'");
        }
    }
    std::vector<TokenId> ids;
    for (const auto& [role, id] : role_begin_ids) {
        ids.push_back(id);
    }
    ids.insert(ids.end(), {role_end_id, think_open_id, think_close_id, tool_call_open_id, tool_call_close_id,
                           image_token_id});
    ids.insert(ids.end(), delimiter_ids.begin(), delimiter_ids.end());
    std::sort(ids.begin(), ids.end());
    if (auto dup = std::adjacent_find(ids.begin(), ids.end()); dup != ids.end()) {
        throw ValidationError("template special token id " + std::to_string(*dup) + " is used twice");
    }
}

bool TemplateDescriptor::is_special(TokenId id) const {
    if (id == role_end_id || id == think_open_id || id == think_close_id || id == tool_call_open_id ||
        id == tool_call_close_id || id == image_token_id || delimiter_ids.contains(id)) {
        return true;
    }
    return std::any_of(role_begin_ids.begin(), role_begin_ids.end(),
                       [id](const auto& entry) { return entry.second == id; });
}

TemplateDescriptor default_template() {
    TemplateDescriptor tmpl;
    tmpl.role_begin_ids = {{"system", 151000}, {"user", 151001}, {"assistant", 151002}, {"tool", 151003}};
    tmpl.role_end_id = 151004;
    tmpl.think_open_id = 151005;
    tmpl.think_close_id = 151006;
    tmpl.tool_call_open_id = 151007;
    tmpl.tool_call_close_id = 151008;
    tmpl.image_token_id = 151009;
    tmpl.delimiter_ids = {151010, 151011};
    return tmpl;
}

TemplateDescriptor parse_template(std::string_view json_text) {
    constexpr std::string_view what = "template";
    const json j = parse_json(json_text, what);
    TemplateDescriptor tmpl;
    tmpl.role_begin_ids = field<std::map<std::string, TokenId>>(j, "role_begin", what);
    tmpl.role_end_id = field<TokenId>(j, "role_end", what);
    tmpl.think_open_id = field<TokenId>(j, "think_open", what);
    tmpl.think_close_id = field<TokenId>(j, "think_close", what);
    tmpl.tool_call_open_id = field<TokenId>(j, "tool_call_open", what);
    tmpl.tool_call_close_id = field<TokenId>(j, "tool_call_close", what);
    tmpl.image_token_id = field<TokenId>(j, "image_token", what);
    const auto delimiters = field<std::vector<TokenId>>(j, "delimiters", what);
    tmpl.delimiter_ids = {delimiters.begin(), delimiters.end()};
    tmpl.validate();
    return tmpl;
}

std::string template_to_json(const TemplateDescriptor& tmpl) {
    json j;
    j["role_begin"] = tmpl.role_begin_ids;
    j["role_end"] = tmpl.role_end_id;
    j["think_open"] = tmpl.think_open_id;
    j["think_close"] = tmpl.think_close_id;
    j["tool_call_open"] = tmpl.tool_call_open_id;
    j["tool_call_close"] = tmpl.tool_call_close_id;
    j["image_token"] = tmpl.image_token_id;
    j["delimiters"] = std::vector<TokenId>(tmpl.delimiter_ids.begin(), tmpl.delimiter_ids.end());
    return j.dump(2) + "\n";
}

Trace parse_trace(std::string_view json_text) {
    constexpr std::string_view what = "trace";
    const json j = parse_json(json_text, what);
    return Trace{field<std::string>(j, "request_id", what), field<std::vector<TokenId>>(j, "token_ids", what)};
}

std::string trace_to_json(const Trace& trace) {
    json j;
    j["request_id"] = trace.request_id;
    j["token_ids"] = trace.token_ids;
    return j.dump() + "\n";
}

Trace load_trace(const std::filesystem::path& path) { return parse_trace(read_file(path)); }

void save_trace(const Trace& trace, const std::filesystem::path& path) { write_file(path, trace_to_json(trace)); }

TemplateDescriptor load_template(const std::filesystem::path& path) { return parse_template(read_file(path)); }

void save_template(const TemplateDescriptor& tmpl, const std::filesystem::path& path) {
    write_file(path, template_to_json(tmpl));
}

// ---------------------------------------------------------------------------
// Synthetic traces

namespace {

class TraceBuilder {
public:
    TraceBuilder(Rng& rng, const TemplateDescriptor& tmpl) : rng_(rng), tmpl_(tmpl) {
        if (!tmpl.delimiter_ids.empty()) {
            separator_ = *tmpl.delimiter_ids.begin();
        }
    }

    void prose(int lo, int hi) {
        const auto count = rng_.uniform_int(lo, hi);
        for (std::int64_t i = 0; i < count; ++i) {
            if (separator_ && rng_.bernoulli(0.04)) {
                tokens_.push_back(*separator_);
                continue;
            }
            TokenId id;
            do {
                id = static_cast<TokenId>(rng_.uniform_int(0, 31999));
            } while (tmpl_.is_special(id));
            tokens_.push_back(id);
        }
    }

    void begin(const std::string& role) { tokens_.push_back(tmpl_.role_begin_ids.at(role)); }

    void end() {
        tokens_.push_back(tmpl_.role_end_id);
        if (separator_) {
            tokens_.push_back(*separator_);
        }
    }

    void think() {
        tokens_.push_back(tmpl_.think_open_id);
        prose(16, 64);
        tokens_.push_back(tmpl_.think_close_id);
    }

    void tool_call() {
        tokens_.push_back(tmpl_.tool_call_open_id);
        prose(8, 32);
        tokens_.push_back(tmpl_.tool_call_close_id);
    }

    void images(int lo, int hi) {
        tokens_.insert(tokens_.end(), static_cast<std::size_t>(rng_.uniform_int(lo, hi)), tmpl_.image_token_id);
    }

    std::vector<TokenId> take() { return std::move(tokens_); }

private:
    Rng& rng_;
    const TemplateDescriptor& tmpl_;
    std::optional<TokenId> separator_;
    std::vector<TokenId> tokens_;
};

}  // namespace

Trace generate_synthetic_trace(std::uint64_t seed, std::size_t n_turns, const TemplateDescriptor& tmpl,
                               bool include_images) {
    if (n_turns == 0) {
        throw ValidationError("n_turns must be at least 1");
    }
    tmpl.validate();
    Rng rng(seed);
    TraceBuilder b(rng, tmpl);

    b.begin("system");
    b.prose(64, 192);
    b.end();

    for (std::size_t turn = 0; turn < n_turns; ++turn) {
        b.begin("user");
        b.prose(16, 64);
        b.end();

        const auto tool_rounds = rng.uniform_int(0, 2);
        for (std::int64_t round = 0; round < tool_rounds; ++round) {
            b.begin("assistant");
            if (rng.bernoulli(0.5)) {
                b.think();
            }
            b.prose(0, 12);
            b.tool_call();
            b.end();

            b.begin("tool");
            b.prose(32, 128);
            if (include_images && rng.bernoulli(0.6)) {
                b.images(32, 96);
            }
            b.prose(0, 16);
            b.end();
        }

        b.begin("assistant");
        if (rng.bernoulli(0.5)) {
            b.think();
        }
        b.prose(16, 64);
        b.end();
    }
    return Trace{"trace-" + std::to_string(seed), b.take()};
}

// ---------------------------------------------------------------------------
// Captures

void KVCapture::validate(std::size_t group_size) const {
    if (layers.empty()) {
        throw ShapeError("capture has no layers");
    }
    if (head_dim == 0 || group_size == 0 || head_dim % group_size != 0) {
        throw ShapeError("head_dim " + std::to_string(head_dim) + " is not a positive multiple of group size " +
                         std::to_string(group_size));
    }
    const std::size_t n = tags.size();
    const auto& first = layers.front();
    const std::size_t n_q = first.q.dim(0);
    const std::size_t heads = first.q.dim(1);
    const std::size_t kv_heads = first.k.dim(1);
    if (n == 0 || n_q == 0 || heads == 0 || kv_heads == 0 || heads % kv_heads != 0) {
        throw ShapeError("capture needs tokens, queries, and n_heads a multiple of n_kv_heads");
    }
    const Tensor3::Shape q_shape{n_q, heads, head_dim};
    const Tensor3::Shape kv_shape{n, kv_heads, head_dim};
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& layer = layers[l];
        if (layer.q.shape() != q_shape || layer.k.shape() != kv_shape || layer.v.shape() != kv_shape) {
            throw ShapeError("layer " + std::to_string(l) + " tensor shapes disagree with the capture dims");
        }
        if (layer.q.size() != n_q * heads * head_dim || layer.k.size() != n * kv_heads * head_dim ||
            layer.v.size() != n * kv_heads * head_dim) {
            throw ShapeError("layer " + std::to_string(l) + " payload size disagrees with its shape");
        }
    }
}

KVCapture generate_synthetic_capture(const Trace& trace, const std::vector<TagCode>& tags,
                                     const CaptureShape& shape, std::uint64_t seed,
                                     const CaptureOptions& options) {
    const std::size_t n = trace.size();
    const std::size_t d = shape.head_dim;
    if (tags.size() != n) {
        throw ShapeError("tags length " + std::to_string(tags.size()) + " != trace length " + std::to_string(n));
    }
    if (n == 0 || shape.n_layers == 0 || shape.n_heads == 0 || shape.n_kv_heads == 0 ||
        shape.n_heads % shape.n_kv_heads != 0) {
        throw ShapeError("capture dims must be positive with n_heads a multiple of n_kv_heads");
    }
    if (d == 0 || options.group_size == 0 || d % options.group_size != 0) {
        throw ShapeError("head_dim must be a positive multiple of the group size");
    }

    Rng rng(seed);

    // Per-tag magnitude so tags differ in how much quantization hurts them.
    std::array<double, kTagCount> tag_gain{};
    for (auto& gain : tag_gain) {
        gain = std::exp(0.35 * rng.normal());
    }

    KVCapture capture;
    capture.request_id = trace.request_id;
    capture.head_dim = d;
    capture.tags = tags;
    capture.layers.reserve(shape.n_layers);

    for (std::size_t l = 0; l < shape.n_layers; ++l) {
        LayerCapture layer{Tensor3({n, shape.n_heads, d}), Tensor3({n, shape.n_kv_heads, d}),
                           Tensor3({n, shape.n_kv_heads, d})};

        if (options.grid_aligned) {
            const std::size_t g = options.group_size;
            for (std::size_t t = 0; t < n; ++t) {
                for (std::size_t h = 0; h < shape.n_kv_heads; ++h) {
                    for (std::size_t c = 0; c < d; ++c) {
                        const std::size_t in_group = c % g;
                        auto level = [&]() -> float {
                            if (in_group == 0) return 0.0f;
                            if (in_group == 1 || g == 1) return 15.0f;
                            return static_cast<float>(rng.uniform_int(0, 15));
                        };
                        layer.k(t, h, c) = level();
                        layer.v(t, h, c) = level();
                    }
                }
            }
            for (auto& x : layer.q.data()) {
                x = static_cast<float>(0.05 * rng.normal());
            }
            capture.layers.push_back(std::move(layer));
            continue;
        }

        for (std::size_t h = 0; h < shape.n_kv_heads; ++h) {
            // Log-uniform channel scales, stretched so the extremes are exactly 0.5 and 4.
            std::vector<double> log_scale(d);
            for (auto& s : log_scale) {
                s = rng.uniform(std::log(0.5), std::log(4.0));
            }
            const auto [lo_it, hi_it] = std::minmax_element(log_scale.begin(), log_scale.end());
            const double lo = *lo_it;
            const double hi = *hi_it;
            std::vector<double> scale(d);
            std::vector<double> bias(d);
            for (std::size_t c = 0; c < d; ++c) {
                const double unit = hi > lo ? (log_scale[c] - lo) / (hi - lo) : 0.0;
                scale[c] = std::exp(std::log(0.5) + unit * (std::log(4.0) - std::log(0.5)));
                bias[c] = 0.5 * rng.normal();
            }

            for (std::size_t t = 0; t < n; ++t) {
                const TriTag tag = code_to_tag(tags[t]);
                const bool image = tag.modal == Modal::kImage;
                const double gain = tag_gain[tags[t].value()] * (image ? 1.5 : 1.0);
                const double token_gain = std::exp(0.25 * rng.normal());
                for (std::size_t c = 0; c < d; ++c) {
                    const bool sparse = image && rng.bernoulli(0.3);
                    const double kz = rng.normal();
                    const double vz = rng.normal();
                    layer.k(t, h, c) = static_cast<float>(bias[c] + (sparse ? 0.0 : scale[c] * gain * kz));
                    layer.v(t, h, c) = static_cast<float>(sparse ? 0.0 : gain * token_gain * vz);
                }
            }
        }
        for (auto& x : layer.q.data()) {
            x = static_cast<float>(rng.normal());
        }
        capture.layers.push_back(std::move(layer));
    }
    capture.validate(options.group_size);
    return capture;
}

namespace {

struct BlobRef {
    std::string name;
    const Tensor3* tensor;
};

}  // namespace

void save_capture(const KVCapture& capture, const std::filesystem::path& dir) {
    capture.validate(1);
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["format_version"] = kCaptureFormatVersion;
    manifest["request_id"] = capture.request_id;
    manifest["n_tokens"] = capture.n_tokens();
    manifest["n_query"] = capture.n_query();
    manifest["n_layers"] = capture.n_layers();
    manifest["n_heads"] = capture.n_heads();
    manifest["n_kv_heads"] = capture.n_kv_heads();
    manifest["head_dim"] = capture.head_dim;
    std::vector<int> tag_values;
    tag_values.reserve(capture.tags.size());
    for (auto tag : capture.tags) {
        tag_values.push_back(tag.value());
    }
    manifest["tags"] = tag_values;

    json tensors = json::array();
    for (std::size_t l = 0; l < capture.layers.size(); ++l) {
        const auto& layer = capture.layers[l];
        for (const BlobRef& blob : {BlobRef{"q", &layer.q}, BlobRef{"k", &layer.k}, BlobRef{"v", &layer.v}}) {
            const std::string name = "layer" + std::to_string(l) + "." + blob.name;
            const std::string file = name + ".f32le";
            const std::string bytes = encode_f32le(blob.tensor->data());
            write_file(dir / file, bytes);
            const auto& s = blob.tensor->shape();
            tensors.push_back({{"name", name}, {"file", file}, {"shape", {s[0], s[1], s[2]}}, {"bytes", bytes.size()}});
        }
    }
    manifest["tensors"] = tensors;
    write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

KVCapture load_capture(const std::filesystem::path& dir) {
    constexpr std::string_view what = "capture manifest";
    const json manifest = parse_json(read_file(dir / "manifest.json"), what);
    const int version = field<int>(manifest, "format_version", what);
    if (version != kCaptureFormatVersion) {
        throw FormatError("unsupported capture format version " + std::to_string(version));
    }
    KVCapture capture;
    capture.request_id = field<std::string>(manifest, "request_id", what);
    capture.head_dim = field<std::size_t>(manifest, "head_dim", what);
    const auto n_layers = field<std::size_t>(manifest, "n_layers", what);
    const auto n_tokens = field<std::size_t>(manifest, "n_tokens", what);
    for (int value : field<std::vector<int>>(manifest, "tags", what)) {
        capture.tags.emplace_back(value);
    }
    if (capture.tags.size() != n_tokens) {
        throw FormatError("capture manifest: tags length disagrees with n_tokens");
    }

    std::map<std::string, Tensor3> blobs;
    for (const auto& entry : field<json>(manifest, "tensors", what)) {
        const auto name = field<std::string>(entry, "name", what);
        const auto file = field<std::string>(entry, "file", what);
        const auto shape = field<std::array<std::size_t, 3>>(entry, "shape", what);
        const auto bytes = field<std::size_t>(entry, "bytes", what);
        if (bytes != shape[0] * shape[1] * shape[2] * 4) {
            throw FormatError("tensor " + name + ": byte length " + std::to_string(bytes) + " disagrees with shape");
        }
        if (file.find('/') != std::string::npos || file.find("..") != std::string::npos) {
            throw FormatError("tensor " + name + ": blob path escapes the capture directory");
        }
        const std::string payload = read_file(dir / file);
        if (payload.size() != bytes) {
            throw FormatError("tensor " + name + ": blob holds " + std::to_string(payload.size()) +
                              " bytes, manifest says " + std::to_string(bytes));
        }
        blobs.emplace(name, Tensor3(shape, decode_f32le(payload)));
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        LayerCapture layer;
        for (auto [suffix, target] : {std::pair{"q", &layer.q}, std::pair{"k", &layer.k}, std::pair{"v", &layer.v}}) {
            auto it = blobs.find(prefix + suffix);
            if (it == blobs.end()) {
                throw FormatError("capture manifest: missing tensor " + prefix + suffix);
            }
            *target = std::move(it->second);
        }
        capture.layers.push_back(std::move(layer));
    }
    try {
        capture.validate(1);
    } catch (const ShapeError& e) {
        throw FormatError(std::string("capture manifest: ") + e.what());
    }
    return capture;
}

}  // namespace tagkv
