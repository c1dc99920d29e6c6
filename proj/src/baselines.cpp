#include "ledmerge/baselines.hpp"

#include <cmath>
#include <functional>

#include <fmt/core.h>

#include "ledmerge/compensated.hpp"
#include "ledmerge/errors.hpp"

namespace ledmerge {

std::string_view baseline_method_name(BaselineMethod method) {
    switch (method) {
    case BaselineMethod::TaskArithmetic: return "task_arithmetic";
    case BaselineMethod::Ties: return "ties";
    case BaselineMethod::Breadcrumbs: return "breadcrumbs";
    case BaselineMethod::UniformAverage: return "uniform_average";
    }
    return "unknown";
}

BaselineMethod parse_baseline_method(std::string_view name) {
    for (auto m : {BaselineMethod::TaskArithmetic, BaselineMethod::Ties, BaselineMethod::Breadcrumbs,
                   BaselineMethod::UniformAverage}) {
        if (baseline_method_name(m) == name) return m;
    }
    throw ConfigError(fmt::format("unknown merge method '{}'", name));
}

namespace {

void check_breadcrumbs(double top, double keep) {
    if (!(top >= 0.0 && top < 1.0)) throw ConfigError(fmt::format("top_mask_ratio {} is outside [0, 1)", top));
    if (!(keep > 0.0 && keep <= 1.0)) throw ConfigError(fmt::format("keep_ratio {} is outside (0, 1]", keep));
    if (!(top + (1.0 - keep) < 1.0))
        throw ConfigError(fmt::format("top_mask_ratio {} and keep_ratio {} leave no survivors", top, keep));
}

} // namespace

void BaselineConfig::validate() const {
    if (!std::isfinite(lambda)) throw ConfigError("scaling factor is not finite");
    if (method == BaselineMethod::Ties && !(trim_keep_ratio > 0.0 && trim_keep_ratio <= 1.0))
        throw ConfigError(fmt::format("trim_keep_ratio {} is outside (0, 1]", trim_keep_ratio));
    if (method == BaselineMethod::Breadcrumbs) check_breadcrumbs(top_mask_ratio, keep_ratio);
}

Bitset breadcrumbs_survivors(const Tensor& tau, double top_mask_ratio, double keep_ratio) {
    check_breadcrumbs(top_mask_ratio, keep_ratio);
    const std::uint64_t n = tau.numel();
    const auto top = count_for_ratio(top_mask_ratio, n);
    const auto bottom = count_for_ratio(1.0 - keep_ratio, n);
    return tau.visit([&](const auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        std::vector<T> mag(v.size());
        for (std::size_t d = 0; d < v.size(); ++d) mag[d] = std::abs(v[d]);
        // Both cuts come from one ranking, so the top set nests inside the kept prefix.
        Bitset kept = select_top_k(std::span<const T>(mag), n - bottom);
        kept.subtract(select_top_k(std::span<const T>(mag), top));
        return kept;
    });
}

namespace {

/// Per-task inputs of one tensor: deltas as hi + lo pairs, or whole models
/// in `hi` for averaging.
using Kernel = std::function<void(Tensor& out, const std::vector<DeltaParts>& inputs, std::vector<std::uint64_t>& applied)>;

template <class T>
std::span<const T> vals(const Tensor& t) {
    return t.values<T>();
}

template <class F>
void for_precision(Tensor& out, F&& f) {
    if (out.is_f64())
        f(double{});
    else
        f(float{});
}

/// out += lambda * delta where delta is nonzero, so untouched elements keep
/// their exact base bits.
template <class T>
void add_scaled(std::span<T> out, const std::vector<Compensated<T>>& delta, double lambda) {
    if (lambda == 0.0) return;
    const T scale = static_cast<T>(lambda);
    for (std::size_t d = 0; d < out.size(); ++d) {
        if (delta[d].hi == T{0} && delta[d].lo == T{0}) continue;
        Compensated<T> acc{out[d], T{0}};
        acc.add_scaled(delta[d].hi, delta[d].lo, scale);
        out[d] = acc.value();
    }
}

Kernel arithmetic_kernel(double lambda) {
    return [lambda](Tensor& out, const std::vector<DeltaParts>& taus, std::vector<std::uint64_t>& applied) {
        for_precision(out, [&](auto tag) {
            using T = decltype(tag);
            std::vector<Compensated<T>> sum(out.numel());
            for (std::size_t i = 0; i < taus.size(); ++i) {
                auto hi = vals<T>(taus[i].hi);
                auto lo = vals<T>(taus[i].lo);
                for (std::size_t d = 0; d < sum.size(); ++d) sum[d].add(hi[d], lo[d]);
                applied[i] = lambda == 0.0 ? 0 : sum.size();
            }
            add_scaled(out.values<T>(), sum, lambda);
        });
    };
}

Kernel ties_kernel(double lambda, double keep) {
    return [lambda, keep](Tensor& out, const std::vector<DeltaParts>& taus, std::vector<std::uint64_t>& applied) {
        for_precision(out, [&](auto tag) {
            using T = decltype(tag);
            const std::size_t n = out.numel();
            const auto k = count_for_ratio(keep, n);
            std::vector<Bitset> kept;
            for (const auto& tau : taus) {
                auto v = vals<T>(tau.hi);
                std::vector<T> mag(n);
                for (std::size_t d = 0; d < n; ++d) mag[d] = std::abs(v[d]);
                kept.push_back(select_top_k(std::span<const T>(mag), k));
            }
            std::vector<Compensated<T>> delta(n);
            for (std::size_t d = 0; d < n; ++d) {
                T pos{0}, neg{0};
                for (std::size_t i = 0; i < taus.size(); ++i) {
                    if (!kept[i].test(d)) continue;
                    const T x = vals<T>(taus[i].hi)[d];
                    if (x > 0) pos += x;
                    if (x < 0) neg -= x;
                }
                if (pos == T{0} && neg == T{0}) continue;
                const bool positive = pos >= neg;
                Compensated<T> sum;
                std::size_t count = 0;
                for (std::size_t i = 0; i < taus.size(); ++i) {
                    if (!kept[i].test(d)) continue;
                    const T x = vals<T>(taus[i].hi)[d];
                    if (positive ? x > 0 : x < 0) {
                        sum.add(x, vals<T>(taus[i].lo)[d]);
                        ++count;
                        if (lambda != 0.0) ++applied[i];
                    }
                }
                const T c = static_cast<T>(count);
                delta[d] = count == 1 ? sum : Compensated<T>{sum.value() / c, T{0}};
            }
            add_scaled(out.values<T>(), delta, lambda);
        });
    };
}

Kernel breadcrumbs_kernel(double lambda, double top, double keep) {
    return [lambda, top, keep](Tensor& out, const std::vector<DeltaParts>& taus, std::vector<std::uint64_t>& applied) {
        for_precision(out, [&](auto tag) {
            using T = decltype(tag);
            std::vector<Compensated<T>> sum(out.numel());
            for (std::size_t i = 0; i < taus.size(); ++i) {
                const Bitset survivors = breadcrumbs_survivors(taus[i].hi, top, keep);
                auto hi = vals<T>(taus[i].hi);
                auto lo = vals<T>(taus[i].lo);
                survivors.for_each([&](std::size_t d) { sum[d].add(hi[d], lo[d]); });
                applied[i] = lambda == 0.0 ? 0 : survivors.count();
            }
            add_scaled(out.values<T>(), sum, lambda);
        });
    };
}

/// out = m_0 + sum_{i>0} (m_i - m_0) / K; identical inputs come back unchanged.
void average_kernel(Tensor& out, const std::vector<DeltaParts>& models, std::vector<std::uint64_t>& applied) {
    for_precision(out, [&](auto tag) {
        using T = decltype(tag);
        auto first = vals<T>(models[0].hi);
        std::vector<T> spread(out.numel(), T{0});
        for (std::size_t i = 1; i < models.size(); ++i) {
            auto m = vals<T>(models[i].hi);
            for (std::size_t d = 0; d < spread.size(); ++d) spread[d] += m[d] - first[d];
        }
        const T k = static_cast<T>(models.size());
        auto o = out.values<T>();
        for (std::size_t d = 0; d < o.size(); ++d) o[d] = first[d] + spread[d] / k;
    });
    for (auto& a : applied) a = out.numel();
}

using InputSource = std::function<DeltaParts(std::size_t task, const TensorMeta& meta)>;

/// Streams every base tensor through `kernel` and fills the per-task report.
void run_kernel(const Checkpoint& base, std::size_t tasks, const InputSource& inputs, const Kernel& kernel,
                const TensorSink& sink, MergeReport& report) {
    for (const auto& meta : base.manifest()) {
        Tensor out = base.read(meta.name);
        std::vector<DeltaParts> in;
        in.reserve(tasks);
        for (std::size_t i = 0; i < tasks; ++i) {
            in.push_back(inputs(i, meta));
            if (in.back().hi.is_f64() != out.is_f64())
                throw CompatError(fmt::format("tensor '{}': input precision differs from base", meta.name));
        }
        std::vector<std::uint64_t> applied(tasks, 0);
        kernel(out, in, applied);
        in.clear();
        out.visit([&](const auto& values) {
            for (std::size_t d = 0; d < values.size(); ++d)
                if (!std::isfinite(values[d]))
                    throw NumericsError(fmt::format("merged value {} of '{}' is not finite", d, meta.name));
        });
        for (std::size_t i = 0; i < tasks; ++i) {
            TensorCounts c;
            c.name = meta.name;
            c.numel = meta.numel();
            c.mask_density = c.numel == 0 ? 0.0 : static_cast<double>(applied[i]) / static_cast<double>(c.numel);
            report.tasks[i].tensors.push_back(std::move(c));
        }
        sink(meta, std::move(out));
    }
}

MergeReport make_report(const BaselineConfig& config, std::span<const std::string> names, std::size_t tasks) {
    MergeReport report;
    report.method = std::string(baseline_method_name(config.method));
    switch (config.method) {
    case BaselineMethod::TaskArithmetic: report.parameters = {{"lambda", config.lambda}}; break;
    case BaselineMethod::Ties:
        report.parameters = {{"lambda", config.lambda}, {"trim_keep_ratio", config.trim_keep_ratio}};
        break;
    case BaselineMethod::Breadcrumbs:
        report.parameters = {{"lambda", config.lambda},
                             {"top_mask_ratio", config.top_mask_ratio},
                             {"keep_ratio", config.keep_ratio}};
        break;
    case BaselineMethod::UniformAverage:
        report.notes.push_back("uniform_average is a plain element-wise mean standing in for Model Stock; "
                               "it does not implement Model Stock interpolation");
        break;
    }
    report.tasks.resize(tasks);
    for (std::size_t i = 0; i < tasks; ++i) {
        report.tasks[i].name = i < names.size() ? names[i] : fmt::format("task{}", i);
        if (config.method != BaselineMethod::UniformAverage) report.tasks[i].lambda = config.lambda;
    }
    return report;
}

Kernel kernel_for(const BaselineConfig& config) {
    switch (config.method) {
    case BaselineMethod::TaskArithmetic: return arithmetic_kernel(config.lambda);
    case BaselineMethod::Ties: return ties_kernel(config.lambda, config.trim_keep_ratio);
    case BaselineMethod::Breadcrumbs: return breadcrumbs_kernel(config.lambda, config.top_mask_ratio, config.keep_ratio);
    case BaselineMethod::UniformAverage: return average_kernel;
    }
    throw ConfigError("unknown merge method");
}

Checkpoint merge_taus(const Checkpoint& base, std::span<const TaskVector> taus, const BaselineConfig& config) {
    config.validate();
    for (const auto& tau : taus) validate_aligned(base.manifest(), tau.manifest());
    MergeReport report = make_report(config, {}, taus.size());
    CheckpointCollector collector;
    run_kernel(
        base, taus.size(), [&](std::size_t i, const TensorMeta& meta) { return taus[i].delta_parts(meta.name); },
        kernel_for(config), collector.sink(), report);
    return collector.finish(base.metadata());
}

} // namespace

Checkpoint task_arithmetic(const Checkpoint& base, std::span<const TaskVector> taus, double lambda) {
    return merge_taus(base, taus, BaselineConfig{BaselineMethod::TaskArithmetic, lambda});
}

Checkpoint ties_merge(const Checkpoint& base, std::span<const TaskVector> taus, double lambda,
                      double trim_keep_ratio) {
    BaselineConfig config{BaselineMethod::Ties, lambda};
    config.trim_keep_ratio = trim_keep_ratio;
    return merge_taus(base, taus, config);
}

Checkpoint breadcrumbs_merge(const Checkpoint& base, std::span<const TaskVector> taus, double lambda,
                             double top_mask_ratio, double keep_ratio) {
    BaselineConfig config{BaselineMethod::Breadcrumbs, lambda};
    config.top_mask_ratio = top_mask_ratio;
    config.keep_ratio = keep_ratio;
    return merge_taus(base, taus, config);
}

Checkpoint uniform_average(std::span<const Checkpoint> models) {
    if (models.empty()) throw ConfigError("uniform_average needs at least one model");
    for (std::size_t i = 1; i < models.size(); ++i) validate_compat(models[0], models[i]);
    BaselineConfig config{BaselineMethod::UniformAverage};
    MergeReport report = make_report(config, {}, models.size());
    CheckpointCollector collector;
    run_kernel(
        models[0], models.size(),
        [&](std::size_t i, const TensorMeta& meta) { return DeltaParts{models[i].read(meta.name), Tensor()}; }, average_kernel,
        collector.sink(), report);
    return collector.finish(models[0].metadata());
}

MergeReport baseline_merge_into(const BaselineConfig& config, const Checkpoint& base,
                                std::span<const Checkpoint> fines, std::span<const std::string> task_names,
                                const TensorSink& sink) {
    config.validate();
    if (fines.empty()) throw ConfigError("a merge needs at least one fine-tuned model");
    MergeReport report = make_report(config, task_names, fines.size());
    if (config.method == BaselineMethod::UniformAverage) {
        for (const auto& fine : fines) validate_compat(base, fine);
        run_kernel(
            base, fines.size(), [&](std::size_t i, const TensorMeta& meta) { return DeltaParts{fines[i].read(meta.name), Tensor()}; },
            average_kernel, sink, report);
        return report;
    }
    std::vector<TaskVector> taus;
    for (const auto& fine : fines) taus.push_back(TaskVector::between(fine, base));
    run_kernel(
        base, taus.size(), [&](std::size_t i, const TensorMeta& meta) { return taus[i].delta_parts(meta.name); },
        kernel_for(config), sink, report);
    return report;
}

BaselineResult baseline_merge(const BaselineConfig& config, const Checkpoint& base, std::span<const Checkpoint> fines,
                              std::span<const std::string> task_names) {
    CheckpointCollector collector;
    MergeReport report = baseline_merge_into(config, base, fines, task_names, collector.sink());
    return BaselineResult{collector.finish(base.metadata()), std::move(report)};
}

} // namespace ledmerge
