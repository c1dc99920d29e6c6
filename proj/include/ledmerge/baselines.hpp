#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ledmerge/checkpoint.hpp"
#include "ledmerge/ledcore.hpp"
#include "ledmerge/report.hpp"

namespace ledmerge {

enum class BaselineMethod { TaskArithmetic, Ties, Breadcrumbs, UniformAverage };

std::string_view baseline_method_name(BaselineMethod method);
/// task_arithmetic / ties / breadcrumbs / uniform_average. Throws ConfigError.
BaselineMethod parse_baseline_method(std::string_view name);

struct BaselineConfig {
    BaselineMethod method = BaselineMethod::TaskArithmetic;
    double lambda = 1.0;
    /// ties: fraction of largest-|tau| entries each task keeps per tensor.
    double trim_keep_ratio = 0.7;
    /// breadcrumbs: fraction of largest-|tau| entries dropped as outliers.
    double top_mask_ratio = 0.01;
    /// breadcrumbs: 1 - keep_ratio of the smallest-|tau| entries is dropped.
    double keep_ratio = 0.9;

    /// Throws ConfigError.
    void validate() const;
};

/// theta_base + lambda * sum_i tau_i.
Checkpoint task_arithmetic(const Checkpoint& base, std::span<const TaskVector> taus, double lambda);

/// Trim each tau to its top trim_keep_ratio by magnitude (per tensor), elect
/// the sign with the larger summed magnitude per element (positive on a tie),
/// average the surviving values of that sign, scale by lambda.
Checkpoint ties_merge(const Checkpoint& base, std::span<const TaskVector> taus, double lambda,
                      double trim_keep_ratio);

/// Per tensor and task, rank |tau| descending (index ascending on ties), drop
/// the first floor(top * n) and the last floor((1 - keep) * n) entries, then
/// add lambda * sum of survivors. Throws ConfigError unless
/// top + (1 - keep) < 1.
Checkpoint breadcrumbs_merge(const Checkpoint& base, std::span<const TaskVector> taus, double lambda,
                             double top_mask_ratio, double keep_ratio);

/// Element-wise mean of the models. Stand-in for Model Stock, which is not
/// implemented.
Checkpoint uniform_average(std::span<const Checkpoint> models);

/// Survivor bitset of one breadcrumbs tensor.
Bitset breadcrumbs_survivors(const Tensor& tau, double top_mask_ratio, double keep_ratio);

/// Runs a baseline over fine-tuned models, streaming merged tensors into
/// `sink`. uniform_average averages the fine-tuned models and ignores base
/// values (the layout still comes from base).
MergeReport baseline_merge_into(const BaselineConfig& config, const Checkpoint& base,
                                std::span<const Checkpoint> fines, std::span<const std::string> task_names,
                                const TensorSink& sink);

struct BaselineResult {
    Checkpoint merged;
    MergeReport report;
};

BaselineResult baseline_merge(const BaselineConfig& config, const Checkpoint& base, std::span<const Checkpoint> fines,
                              std::span<const std::string> task_names);

} // namespace ledmerge
