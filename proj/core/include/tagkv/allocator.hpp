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
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tagkv/calibration.hpp"
#include "tagkv/quantizer.hpp"
#include "tagkv/tag.hpp"

namespace tagkv {

inline constexpr std::size_t kExhaustiveTagLimit = 22;

/// Relative slack on the budget constraint, scaled by the total token count.
inline constexpr double kBudgetSlack = 1e-9;

enum class Solver { kExhaustive, kGreedy, kAuto };

std::string_view to_string(Solver solver);
Solver solver_from_string(std::string_view name);

struct Allocation {
    double budget = 4.0;
    std::map<TagCode, Bitwidth> bits;
    double realized_avg = 0.0;
    double objective = 0.0;
    std::string solver;
    std::optional<double> greedy_objective;  // set when auto ran both solvers

    friend bool operator==(const Allocation&, const Allocation&) = default;
};

/// rho = (D2 - D4) / (2N). Throws ValidationError when n == 0.
double per_bit_gain(double d2, double d4, std::size_t n);

Allocation allocate_exhaustive(const SensitivityTable& table, double budget);
Allocation allocate_greedy(const SensitivityTable& table, double budget);

/// kAuto runs exhaustive up to kExhaustiveTagLimit tags (recording the greedy
/// objective as a cross-check) and greedy beyond.
Allocation allocate(const SensitivityTable& table, double budget, Solver solver = Solver::kAuto);

/// Sum over the table of D_k(b_k). Throws ValidationError if a tag is missing.
double allocation_objective(const SensitivityTable& table, const std::map<TagCode, Bitwidth>& bits);

/// sum N_k b_k / sum N_k over `counts`.
double realized_average_bitwidth(const std::map<TagCode, Bitwidth>& bits,
                                 const std::map<TagCode, std::size_t>& counts);

struct SweepPoint {
    double budget = 0.0;
    double score = 0.0;
    Allocation allocation;
};

struct SweepResult {
    double chosen = 4.0;
    bool flagged = false;  // no candidate below 4 met the threshold
    double baseline_score = 0.0;
    std::vector<SweepPoint> curve;  // ascending budget
};

using AllocationEvaluator = std::function<double(const Allocation&)>;

/// Scores every candidate (lower is better) and the B = 4 baseline, then picks
/// the smallest candidate with score - baseline <= threshold.
SweepResult sweep_budget(const SensitivityTable& table, std::span<const double> candidates,
                         const AllocationEvaluator& evaluator, double threshold, Solver solver = Solver::kAuto);

/// 2.0, 2.1, ..., 4.0
std::vector<double> default_budget_grid();

/// {"budget", "bits": {"<code>": 2|4}, "realized_avg", "objective", "solver"}
std::string allocation_to_json(const Allocation& allocation);
Allocation parse_allocation(std::string_view json_text);
void save_allocation(const Allocation& allocation, const std::filesystem::path& path);
Allocation load_allocation(const std::filesystem::path& path);

}  // namespace tagkv
