#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace ledmerge {

/// Per-tensor stage counts for one task. Stages a merger does not have stay empty
/// and serialize as null.
struct TensorCounts {
    std::string name;
    std::uint64_t numel = 0;
    std::optional<std::uint64_t> selected_fine;
    std::optional<std::uint64_t> selected_base;
    std::optional<std::uint64_t> elected;
    std::optional<std::uint64_t> disjoint;
    /// Fraction of the tensor's elements through which this task's delta is applied.
    double mask_density = 0.0;
    bool excluded = false;
};

struct TaskReport {
    std::string name;
    std::optional<double> ratio;
    std::optional<double> lambda;
    std::vector<TensorCounts> tensors;
};

/// Structured summary emitted by every merger (written as report.json).
struct MergeReport {
    std::string method;
    /// Method-level settings (election mode, granularity, trim ratios, ...).
    nlohmann::json parameters = nlohmann::json::object();
    std::vector<TaskReport> tasks;
    std::vector<std::string> notes;

    nlohmann::json to_json() const;
};

} // namespace ledmerge
