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

#include "tagkv/tagger.hpp"

#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>

#include "tagkv/error.hpp"

namespace tagkv {
namespace {

enum class Marker { kNone, kRoleBegin, kRoleEnd, kThinkOpen, kThinkClose, kToolOpen, kToolClose, kDelimiter };

Semantic role_semantic(const std::string& role) {
    if (role == "system") return Semantic::kInst;
    if (role == "user") return Semantic::kUser;
    if (role == "assistant") return Semantic::kAssistant;
    return Semantic::kObs;  // tool
}

struct MarkerTable {
    explicit MarkerTable(const TemplateDescriptor& tmpl) {
        for (const auto& [role, id] : tmpl.role_begin_ids) {
            markers.emplace(id, Marker::kRoleBegin);
            roles.emplace(id, role_semantic(role));
            if (role == "user") {
                user_begin = id;
            }
        }
        markers.emplace(tmpl.role_end_id, Marker::kRoleEnd);
        markers.emplace(tmpl.think_open_id, Marker::kThinkOpen);
        markers.emplace(tmpl.think_close_id, Marker::kThinkClose);
        markers.emplace(tmpl.tool_call_open_id, Marker::kToolOpen);
        markers.emplace(tmpl.tool_call_close_id, Marker::kToolClose);
        for (TokenId id : tmpl.delimiter_ids) {
            markers.emplace(id, Marker::kDelimiter);
        }
        image = tmpl.image_token_id;
    }

    Marker lookup(TokenId id) const {
        auto it = markers.find(id);
        return it == markers.end() ? Marker::kNone : it->second;
    }

    std::unordered_map<TokenId, Marker> markers;
    std::unordered_map<TokenId, Semantic> roles;
    TokenId user_begin = -1;
    TokenId image = -1;
};

Temporal temporal_for(int turn, int n_turns) {
    if (turn < 0) {
        return Temporal::kOlder;
    }
    const int distance = n_turns - 1 - turn;
    switch (distance) {
        case 0: return Temporal::kCurrent;
        case 1: return Temporal::kTurnM1;
        case 2: return Temporal::kTurnM2;
        default: return Temporal::kOlder;
    }
}

}  // namespace

std::vector<TagCode> tag_tokens(const Trace& trace, const TemplateDescriptor& tmpl) {
    tmpl.validate();
    const MarkerTable table(tmpl);
    const std::size_t n = trace.size();

    // Semantic and modal are final after the scan; turn indices become temporal
    // labels once the number of turns is known.
    std::vector<TriTag> partial(n);
    std::vector<int> turn_of(n, -1);

    std::optional<Semantic> message;  // role of the open message
    std::optional<Semantic> bracket;  // reasoning or tool_call while open
    std::size_t message_start = 0;
    std::size_t bracket_start = 0;
    int turn = -1;

    for (std::size_t i = 0; i < n; ++i) {
        const TokenId id = trace.token_ids[i];
        const Marker marker = table.lookup(id);
        Semantic semantic = Semantic::kDelim;

        switch (marker) {
            case Marker::kRoleBegin:
                if (message) {
                    throw StructuralError(i, "role marker inside the message opened at token " +
                                                 std::to_string(message_start));
                }
                if (id == table.user_begin) {
                    ++turn;
                }
                message = table.roles.at(id);
                message_start = i;
                break;
            case Marker::kRoleEnd:
                if (!message) {
                    throw StructuralError(i, "role end marker without an open message");
                }
                if (bracket) {
                    throw StructuralError(i, "message ends while the bracket opened at token " +
                                                 std::to_string(bracket_start) + " is open");
                }
                message.reset();
                break;
            case Marker::kThinkOpen:
            case Marker::kToolOpen:
                if (!message) {
                    throw StructuralError(i, "bracket opened outside any message");
                }
                if (bracket) {
                    throw StructuralError(i, "nested bracket inside the one opened at token " +
                                                 std::to_string(bracket_start));
                }
                bracket = marker == Marker::kThinkOpen ? Semantic::kReasoning : Semantic::kToolCall;
                bracket_start = i;
                break;
            case Marker::kThinkClose:
            case Marker::kToolClose: {
                const Semantic expected = marker == Marker::kThinkClose ? Semantic::kReasoning : Semantic::kToolCall;
                if (bracket != expected) {
                    throw StructuralError(i, "closing bracket does not match an open bracket");
                }
                bracket.reset();
                break;
            }
            case Marker::kDelimiter:
                break;
            case Marker::kNone:
                if (bracket) {
                    semantic = *bracket;
                } else if (message) {
                    semantic = *message;
                }
                break;
        }

        partial[i].semantic = semantic;
        partial[i].modal = id == table.image ? Modal::kImage : Modal::kText;
        turn_of[i] = turn;
    }
    if (bracket) {
        throw StructuralError(bracket_start, "bracket is never closed");
    }
    if (message) {
        throw StructuralError(message_start, "message is never closed");
    }

    const int n_turns = turn + 1;
    std::vector<TagCode> codes(n);
    for (std::size_t i = 0; i < n; ++i) {
        partial[i].temporal = temporal_for(turn_of[i], n_turns);
        codes[i] = tag_to_code(partial[i]);
    }
    return codes;
}

std::size_t ActiveTagSet::total() const {
    return std::accumulate(counts.begin(), counts.end(), std::size_t{0},
                           [](std::size_t sum, const auto& entry) { return sum + entry.second; });
}

ActiveTagSet collect_active_tags(std::span<const std::vector<TagCode>> tag_arrays) {
    ActiveTagSet active;
    for (const auto& tags : tag_arrays) {
        for (TagCode tag : tags) {
            ++active.counts[tag];
        }
    }
    for (const auto& [tag, count] : active.counts) {
        active.tags.push_back(tag);
    }
    return active;
}

}  // namespace tagkv
