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

#include "tagkv/tag.hpp"

#include "tagkv/error.hpp"

namespace tagkv {

TagCode::TagCode(int value) {
    if (value < 0 || value >= kTagCount) {
        throw ValidationError("tag code out of range: " + std::to_string(value));
    }
    value_ = static_cast<std::uint8_t>(value);
}

TagCode tag_to_code(const TriTag& tag) noexcept {
    const int code = static_cast<int>(tag.temporal) * (kModalCount * kSemanticCount) +
                     static_cast<int>(tag.modal) * kSemanticCount + static_cast<int>(tag.semantic);
    return TagCode(code);
}

TriTag code_to_tag(TagCode code) noexcept {
    const int value = code.value();
    return TriTag{
        static_cast<Temporal>(value / (kModalCount * kSemanticCount)),
        static_cast<Modal>((value / kSemanticCount) % kModalCount),
        static_cast<Semantic>(value % kSemanticCount),
    };
}

std::string_view to_string(Temporal value) noexcept {
    switch (value) {
        case Temporal::kOlder: return "older";
        case Temporal::kTurnM2: return "turn_m2";
        case Temporal::kTurnM1: return "turn_m1";
        case Temporal::kCurrent: return "current";
    }
    return "?";
}

std::string_view to_string(Modal value) noexcept {
    return value == Modal::kText ? "text" : "image";
}

std::string_view to_string(Semantic value) noexcept {
    switch (value) {
        case Semantic::kInst: return "inst";
        case Semantic::kUser: return "user";
        case Semantic::kAssistant: return "assistant";
        case Semantic::kReasoning: return "reasoning";
        case Semantic::kToolCall: return "tool_call";
        case Semantic::kObs: return "obs";
        case Semantic::kDelim: return "delim";
    }
    return "?";
}

std::string describe(TagCode code) {
    const TriTag tag = code_to_tag(code);
    std::string out(to_string(tag.temporal));
    out += '|';
    out += to_string(tag.modal);
    out += '|';
    out += to_string(tag.semantic);
    return out;
}

}  // namespace tagkv
