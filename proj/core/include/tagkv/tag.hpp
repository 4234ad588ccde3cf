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
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace tagkv {

enum class Temporal : std::uint8_t { kOlder = 0, kTurnM2 = 1, kTurnM1 = 2, kCurrent = 3 };
enum class Modal : std::uint8_t { kText = 0, kImage = 1 };
enum class Semantic : std::uint8_t {
    kInst = 0,
    kUser = 1,
    kAssistant = 2,
    kReasoning = 3,
    kToolCall = 4,
    kObs = 5,
    kDelim = 6,
};

inline constexpr int kTemporalCount = 4;
inline constexpr int kModalCount = 2;
inline constexpr int kSemanticCount = 7;
inline constexpr int kTagCount = kTemporalCount * kModalCount * kSemanticCount;  // 56

/// A token's label on the temporal, modal and semantic axes.
struct TriTag {
    Temporal temporal = Temporal::kOlder;
    Modal modal = Modal::kText;
    Semantic semantic = Semantic::kInst;

    friend auto operator<=>(const TriTag&, const TriTag&) = default;
};

/// Compact encoding temporal*14 + modal*7 + semantic, in [0, 56).
class TagCode {
public:
    constexpr TagCode() = default;
    /// Throws ValidationError when value >= 56.
    explicit TagCode(int value);

    constexpr std::uint8_t value() const noexcept { return value_; }

    friend constexpr auto operator<=>(TagCode, TagCode) = default;

private:
    std::uint8_t value_ = 0;
};

TagCode tag_to_code(const TriTag& tag) noexcept;
TriTag code_to_tag(TagCode code) noexcept;

std::string_view to_string(Temporal value) noexcept;
std::string_view to_string(Modal value) noexcept;
std::string_view to_string(Semantic value) noexcept;

/// "current|text|user" style label.
std::string describe(TagCode code);

}  // namespace tagkv
