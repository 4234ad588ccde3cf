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
#include <stdexcept>
#include <string>

namespace tagkv {

/// Failure classes. The CLI maps each one to a distinct exit code.
enum class ErrorKind {
    kValidation,  // malformed input: shapes, formats, bracket structure
    kCapacity,    // a pool region ran out of slots
    kInfeasible,  // no allocation satisfies the budget
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& what) : Error(ErrorKind::kValidation, what) {}
};

class ShapeError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class FormatError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// Unbalanced or overlapping chat-template brackets.
class StructuralError : public ValidationError {
public:
    StructuralError(std::size_t position, const std::string& what)
        : ValidationError("token " + std::to_string(position) + ": " + what), position_(position) {}
    std::size_t position() const noexcept { return position_; }

private:
    std::size_t position_;
};

enum class PoolRegion { kInt2, kInt4 };

class CapacityError : public Error {
public:
    CapacityError(PoolRegion region, const std::string& what)
        : Error(ErrorKind::kCapacity, what), region_(region) {}
    PoolRegion region() const noexcept { return region_; }

private:
    PoolRegion region_;
};

class InfeasibleError : public Error {
public:
    explicit InfeasibleError(const std::string& what) : Error(ErrorKind::kInfeasible, what) {}
};

}  // namespace tagkv
