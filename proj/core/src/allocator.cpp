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

#include "tagkv/allocator.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tagkv/error.hpp"

namespace tagkv {

namespace {

void check_budget(double budget) {
    if (!std::isfinite(budget) || budget > 4.0) {
        throw ValidationError("budget must lie in [2, 4]");
    }
    if (budget < 2.0) {
        throw InfeasibleError("budget below 2 bits admits no allocation");
    }
}

std::size_t total_count(const SensitivityTable& table) {
    if (table.entries.empty()) {
        throw ValidationError("sensitivity table is empty");
    }
    std::size_t total = 0;
    for (const auto& e : table.entries) {
        if (e.count == 0) {
            throw ValidationError("tag " + std::to_string(e.tag.value()) + " has zero count");
        }
        total += e.count;
    }
    return total;
}

// Upgrade budget in bits, with the relative slack folded in.
double upgrade_room(double budget, std::size_t total) {
    const double n = static_cast<double>(total);
    return (budget - 2.0) * n + kBudgetSlack * n;
}

Allocation finish(const SensitivityTable& table, double budget, std::map<TagCode, Bitwidth> bits,
                  std::string solver) {
    Allocation a;
    a.budget = budget;
    a.realized_avg = realized_average_bitwidth(bits, table.counts());
    a.objective = allocation_objective(table, bits);
    a.bits = std::move(bits);
    a.solver = std::move(solver);
    return a;
}

// True if the ascending code list of mask a precedes that of mask b.
bool lex_less(std::uint32_t a, std::uint32_t b) {
    const std::uint32_t diff = a ^ b;
    if (diff == 0) {
        return false;
    }
    const int i = std::countr_zero(diff);
    const std::uint32_t above = ~((std::uint32_t{2} << i) - 1);
    if (a & (std::uint32_t{1} << i)) {
        return (b & above) != 0;
    }
    return (a & above) == 0;
}

}  // namespace

std::string_view to_string(Solver solver) {
    switch (solver) {
        case Solver::kExhaustive:
            return "exhaustive";
        case Solver::kGreedy:
            return "greedy";
        case Solver::kAuto:
            return "auto";
    }
    return "?";
}

Solver solver_from_string(std::string_view name) {
    if (name == "exhaustive") return Solver::kExhaustive;
    if (name == "greedy") return Solver::kGreedy;
    if (name == "auto") return Solver::kAuto;
    throw ValidationError("unknown solver '" + std::string(name) + "'");
}

double per_bit_gain(double d2, double d4, std::size_t n) {
    if (n == 0) {
        throw ValidationError("per-bit gain needs N >= 1");
    }
    return (d2 - d4) / (2.0 * static_cast<double>(n));
}

double allocation_objective(const SensitivityTable& table, const std::map<TagCode, Bitwidth>& bits) {
    double sum = 0.0;
    for (const auto& e : table.entries) {
        auto it = bits.find(e.tag);
        if (it == bits.end()) {
            throw ValidationError("allocation does not cover tag " + std::to_string(e.tag.value()));
        }
        sum += it->second == Bitwidth::kInt4 ? e.d4 : e.d2;
    }
    return sum;
}

double realized_average_bitwidth(const std::map<TagCode, Bitwidth>& bits,
                                 const std::map<TagCode, std::size_t>& counts) {
    if (counts.empty()) {
        throw ValidationError("realized average needs at least one counted tag");
    }
    double weighted = 0.0;
    double total = 0.0;
    for (const auto& [tag, n] : counts) {
        auto it = bits.find(tag);
        if (it == bits.end()) {
            throw ValidationError("allocation does not cover tag " + std::to_string(tag.value()));
        }
        weighted += static_cast<double>(n) * bit_count(it->second);
        total += static_cast<double>(n);
    }
    if (total == 0.0) {
        throw ValidationError("realized average over zero tokens");
    }
    return weighted / total;
}

Allocation allocate_exhaustive(const SensitivityTable& table, double budget) {
    check_budget(budget);
    const std::size_t n_tags = table.entries.size();
    if (n_tags > kExhaustiveTagLimit) {
        throw ValidationError("exhaustive search supports at most " + std::to_string(kExhaustiveTagLimit) +
                              " tags, got " + std::to_string(n_tags));
    }
    const double room = upgrade_room(budget, total_count(table));

    std::uint32_t best_mask = 0;
    double best_objective = 0.0;
    double best_cost = 0.0;
    bool have_best = false;
    const std::uint32_t n_masks = std::uint32_t{1} << n_tags;
    for (std::uint32_t mask = 0; mask < n_masks; ++mask) {
        double cost = 0.0;
        double objective = 0.0;
        for (std::size_t i = 0; i < n_tags; ++i) {
            const auto& e = table.entries[i];
            if (mask & (std::uint32_t{1} << i)) {
                cost += 2.0 * static_cast<double>(e.count);
                objective += e.d4;
            } else {
                objective += e.d2;
            }
        }
        if (cost > room) {
            continue;
        }
        const bool better = !have_best || objective < best_objective ||
                            (objective == best_objective &&
                             (cost < best_cost || (cost == best_cost && lex_less(mask, best_mask))));
        if (better) {
            have_best = true;
            best_mask = mask;
            best_objective = objective;
            best_cost = cost;
        }
    }

    std::map<TagCode, Bitwidth> bits;
    for (std::size_t i = 0; i < n_tags; ++i) {
        bits[table.entries[i].tag] = (best_mask & (std::uint32_t{1} << i)) ? Bitwidth::kInt4 : Bitwidth::kInt2;
    }
    return finish(table, budget, std::move(bits), "exhaustive");
}

Allocation allocate_greedy(const SensitivityTable& table, double budget) {
    check_budget(budget);
    double room = upgrade_room(budget, total_count(table));

    struct Candidate {
        TagCode tag;
        double rho;
        double gain;
        std::size_t count;
    };
    std::vector<Candidate> order;
    std::map<TagCode, Bitwidth> bits;
    for (const auto& e : table.entries) {
        bits[e.tag] = Bitwidth::kInt2;
        order.push_back({e.tag, per_bit_gain(e.d2, e.d4, e.count), e.d2 - e.d4, e.count});
    }
    std::sort(order.begin(), order.end(), [](const Candidate& a, const Candidate& b) {
        if (a.rho != b.rho) return a.rho > b.rho;
        if (a.gain != b.gain) return a.gain > b.gain;
        return a.tag < b.tag;
    });
    for (const auto& c : order) {
        if (c.rho <= 0.0) {
            continue;
        }
        const double cost = 2.0 * static_cast<double>(c.count);
        if (cost <= room) {
            bits[c.tag] = Bitwidth::kInt4;
            room -= cost;
        }
    }
    return finish(table, budget, std::move(bits), "greedy");
}

Allocation allocate(const SensitivityTable& table, double budget, Solver solver) {
    switch (solver) {
        case Solver::kExhaustive:
            return allocate_exhaustive(table, budget);
        case Solver::kGreedy:
            return allocate_greedy(table, budget);
        case Solver::kAuto:
            break;
    }
    if (table.entries.size() > kExhaustiveTagLimit) {
        return allocate_greedy(table, budget);
    }
    Allocation a = allocate_exhaustive(table, budget);
    a.greedy_objective = allocate_greedy(table, budget).objective;
    return a;
}

SweepResult sweep_budget(const SensitivityTable& table, std::span<const double> candidates,
                         const AllocationEvaluator& evaluator, double threshold, Solver solver) {
    if (candidates.empty()) {
        throw ValidationError("budget sweep needs at least one candidate");
    }
    std::vector<double> sorted(candidates.begin(), candidates.end());
    for (double b : sorted) {
        if (!(b >= 2.0 && b <= 4.0)) {
            throw ValidationError("sweep candidate outside [2, 4]");
        }
    }
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());

    SweepResult result;
    for (double b : sorted) {
        SweepPoint p;
        p.budget = b;
        p.allocation = allocate(table, b, solver);
        p.score = evaluator(p.allocation);
        result.curve.push_back(std::move(p));
    }
    if (result.curve.back().budget == 4.0) {
        result.baseline_score = result.curve.back().score;
    } else {
        result.baseline_score = evaluator(allocate(table, 4.0, solver));
    }

    result.chosen = 4.0;
    result.flagged = true;
    for (const auto& p : result.curve) {
        if (p.budget < 4.0 && p.score - result.baseline_score <= threshold) {
            result.chosen = p.budget;
            result.flagged = false;
            break;
        }
    }
    return result;
}

std::vector<double> default_budget_grid() {
    std::vector<double> grid;
    for (int i = 0; i <= 20; ++i) {
        grid.push_back(std::round((2.0 + 0.1 * i) * 10.0) / 10.0);
    }
    return grid;
}

// ---------------------------------------------------------------------------

std::string allocation_to_json(const Allocation& allocation) {
    nlohmann::json bits = nlohmann::json::object();
    for (const auto& [tag, b] : allocation.bits) {
        bits[std::to_string(tag.value())] = bit_count(b);
    }
    nlohmann::json j;
    j["budget"] = allocation.budget;
    j["bits"] = bits;
    j["realized_avg"] = allocation.realized_avg;
    j["objective"] = allocation.objective;
    j["solver"] = allocation.solver;
    if (allocation.greedy_objective) {
        j["greedy_objective"] = *allocation.greedy_objective;
    }
    return j.dump(2) + "\n";
}

Allocation parse_allocation(std::string_view json_text) {
    Allocation a;
    try {
        const auto j = nlohmann::json::parse(json_text);
        a.budget = j.at("budget").get<double>();
        for (const auto& [key, value] : j.at("bits").items()) {
            std::size_t used = 0;
            int code = std::stoi(key, &used);
            if (used != key.size()) {
                throw FormatError("allocation key '" + key + "' is not a tag code");
            }
            a.bits[TagCode(code)] = bitwidth_from_int(value.get<int>());
        }
        a.realized_avg = j.at("realized_avg").get<double>();
        a.objective = j.at("objective").get<double>();
        a.solver = j.value("solver", std::string{});
        if (j.contains("greedy_objective")) {
            a.greedy_objective = j.at("greedy_objective").get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("allocation: ") + e.what());
    } catch (const std::invalid_argument&) {
        throw FormatError("allocation key is not a tag code");
    } catch (const std::out_of_range&) {
        throw FormatError("allocation key is not a tag code");
    }
    return a;
}

void save_allocation(const Allocation& allocation, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write " + path.string());
    }
    out << allocation_to_json(allocation);
}

Allocation load_allocation(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_allocation(buffer.str());
}

}  // namespace tagkv
