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
#include <map>
#include <span>
#include <vector>

#include "tagkv/tag.hpp"
#include "tagkv/trace_model.hpp"

namespace tagkv {

/// Labels every prefill token from chat-template structure alone, in one
/// left-to-right scan.
///
/// Semantic role comes from the enclosing message (system -> inst, user -> user,
/// assistant -> assistant, tool -> obs) unless a think or tool_call bracket is
/// open, which overrides it. Role markers, bracket markers, delimiter IDs and
/// tokens between messages are delim. Image tokens keep the role of their
/// segment and only flip the modal axis.
///
/// A turn starts at a user role marker and runs up to the next one. The last
/// turn is current, the two before are turn_m1 and turn_m2, and everything
/// earlier (including a system prompt ahead of the first user message) is older.
///
/// Throws StructuralError, naming the offending position, when messages are
/// nested or unterminated, or when brackets are unbalanced or overlap.
std::vector<TagCode> tag_tokens(const Trace& trace, const TemplateDescriptor& tmpl);

/// Tags with nonzero token count across one or more tag arrays.
struct ActiveTagSet {
    std::vector<TagCode> tags;  // ascending code order
    std::map<TagCode, std::size_t> counts;

    std::size_t total() const;
};

ActiveTagSet collect_active_tags(std::span<const std::vector<TagCode>> tag_arrays);

}  // namespace tagkv
