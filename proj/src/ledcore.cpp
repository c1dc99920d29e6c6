#include "ledmerge/ledcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fnmatch.h>

#include <fmt/core.h>

#include "ledmerge/compensated.hpp"
#include "ledmerge/errors.hpp"

namespace ledmerge {

BitsetMap::BitsetMap(const std::vector<TensorMeta>& layout) {
    manifest_.reserve(layout.size());
    bits_.reserve(layout.size());
    for (const auto& m : layout) {
        manifest_.push_back(TensorMeta{m.name, m.shape, m.dtype, 0, 0});
        bits_.emplace_back(m.numel());
    }
    for (std::size_t i = 1; i < manifest_.size(); ++i) {
        if (!(manifest_[i - 1].name < manifest_[i].name))
            throw CompatError("bitset layouts must be sorted by unique tensor name");
    }
}

std::size_t BitsetMap::position(std::string_view name) const {
    auto it = std::lower_bound(manifest_.begin(), manifest_.end(), name,
                               [](const TensorMeta& m, std::string_view n) { return m.name < n; });
    if (it == manifest_.end() || it->name != name) throw CompatError(fmt::format("no tensor named '{}'", name));
    return static_cast<std::size_t>(it - manifest_.begin());
}

Bitset& BitsetMap::bits(std::string_view name) { return bits_[position(name)]; }
const Bitset& BitsetMap::bits(std::string_view name) const { return bits_[position(name)]; }

std::uint64_t BitsetMap::count() const {
    std::uint64_t n = 0;
    for (const auto& b : bits_) n += b.count();
    return n;
}

void BitsetMap::check_aligned(const BitsetMap& other) const { validate_aligned(manifest_, other.manifest_); }

NeuronSet::NeuronSet(const std::vector<TensorMeta>& layout, double ratio, SetOrigin origin)
    : BitsetMap(layout), ratio_(ratio), origin_(origin) {}

std::string_view election_mode_name(ElectionMode mode) {
    switch (mode) {
    case ElectionMode::Both: return "both";
    case ElectionMode::BaseOnly: return "base_only";
    case ElectionMode::FineOnly: return "fine_only";
    }
    return "unknown";
}

ElectionMode parse_election_mode(std::string_view name) {
    if (name == "both" || name == "11") return ElectionMode::Both;
    if (name == "base_only" || name == "10") return ElectionMode::BaseOnly;
    if (name == "fine_only" || name == "01") return ElectionMode::FineOnly;
    throw ConfigError(fmt::format("unknown election mode '{}'", name));
}

std::string_view granularity_name(Granularity g) { return g == Granularity::Global ? "global" : "per_tensor"; }

Granularity parse_granularity(std::string_view name) {
    if (name == "per_tensor") return Granularity::PerTensor;
    if (name == "global") return Granularity::Global;
    throw ConfigError(fmt::format("unknown granularity '{}'", name));
}

std::uint64_t count_for_ratio(double ratio, std::uint64_t n) {
    const double x = ratio * static_cast<double>(n);
    const double nearest = std::round(x);
    if (std::abs(x - nearest) <= 1e-9 * std::max(1.0, x)) return static_cast<std::uint64_t>(nearest);
    return static_cast<std::uint64_t>(std::floor(x));
}

namespace {

template <class T, class Index>
Bitset top_k_impl(std::span<const T> scores, std::size_t k) {
    const std::size_t n = scores.size();
    if (k == 0) return Bitset(n);
    if (k >= n) return Bitset(n, true);
    std::vector<Index> idx(n);
    std::iota(idx.begin(), idx.end(), Index{0});
    const T* s = scores.data();
    auto before = [s](Index a, Index b) { return s[a] > s[b] || (s[a] == s[b] && a < b); };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
    Bitset out(n);
    for (std::size_t i = 0; i < k; ++i) out.set(idx[i]);
    return out;
}

template <class T>
Bitset top_k(std::span<const T> scores, std::size_t k) {
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (std::isnan(scores[i])) throw NumericsError(fmt::format("NaN score at index {}", i));
    }
    if (scores.size() <= std::numeric_limits<std::uint32_t>::max()) return top_k_impl<T, std::uint32_t>(scores, k);
    return top_k_impl<T, std::uint64_t>(scores, k);
}

void check_ratio(double ratio, std::string_view what) {
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError(fmt::format("{} {} is outside (0, 1]", what, ratio));
}

} // namespace

Bitset select_top_k(std::span<const float> scores, std::size_t k) { return top_k(scores, k); }
Bitset select_top_k(std::span<const double> scores, std::size_t k) { return top_k(scores, k); }

NeuronSet top_r_select(const ImportanceMap& map, double ratio, Granularity granularity, SetOrigin origin) {
    check_ratio(ratio, "mask ratio");
    NeuronSet out(map.manifest(), ratio, origin);
    const auto& layout = map.manifest();

    if (granularity == Granularity::PerTensor) {
        for (std::size_t t = 0; t < layout.size(); ++t) {
            const Tensor scores = map.scores(layout[t].name);
            const auto k = count_for_ratio(ratio, scores.numel());
            out.bits(t) = scores.visit([k](const auto& v) { return select_top_k(std::span(v), k); });
        }
        return out;
    }

    // Global ranking over the concatenation of all tensors.
    std::uint64_t total = 0;
    for (const auto& m : layout) total += m.numel();
    std::vector<double> all;
    all.reserve(total);
    for (const auto& m : layout) {
        const Tensor scores = map.scores(m.name);
        scores.visit([&all](const auto& v) { all.insert(all.end(), v.begin(), v.end()); });
    }
    const Bitset global = select_top_k(std::span<const double>(all), count_for_ratio(ratio, total));
    std::size_t offset = 0;
    for (std::size_t t = 0; t < layout.size(); ++t) {
        auto& bits = out.bits(t);
        for (std::size_t i = 0; i < bits.size(); ++i)
            if (global.test(offset + i)) bits.set(i);
        offset += bits.size();
    }
    return out;
}

NeuronSet elect(const NeuronSet& fine_set, const NeuronSet& base_set, ElectionMode mode) {
    fine_set.check_aligned(base_set);
    if (fine_set.ratio() != base_set.ratio())
        throw CompatError(fmt::format("election over sets of different ratios ({} vs {})", fine_set.ratio(),
                                      base_set.ratio()));
    NeuronSet out(fine_set.manifest(), fine_set.ratio(), SetOrigin::Elected);
    for (std::size_t t = 0; t < out.tensor_count(); ++t) {
        switch (mode) {
        case ElectionMode::Both: out.bits(t) = fine_set.bits(t) & base_set.bits(t); break;
        case ElectionMode::BaseOnly: out.bits(t) = base_set.bits(t); break;
        case ElectionMode::FineOnly: out.bits(t) = fine_set.bits(t); break;
        }
    }
    return out;
}

std::vector<NeuronSet> disjoint(std::span<const NeuronSet> elected) {
    if (elected.empty()) throw ConfigError("disjoint needs at least one task");
    for (std::size_t i = 1; i < elected.size(); ++i) elected[0].check_aligned(elected[i]);

    std::vector<NeuronSet> out;
    out.reserve(elected.size());
    for (const auto& e : elected) out.emplace_back(e.manifest(), e.ratio(), SetOrigin::Disjoint);

    for (std::size_t t = 0; t < elected[0].tensor_count(); ++t) {
        // seen_twice collects every index present in at least two sets
        Bitset seen_once(elected[0].bits(t).size());
        Bitset seen_twice(seen_once.size());
        for (const auto& e : elected) {
            seen_twice |= seen_once & e.bits(t);
            seen_once |= e.bits(t);
        }
        for (std::size_t i = 0; i < elected.size(); ++i) {
            out[i].bits(t) = elected[i].bits(t);
            out[i].bits(t).subtract(seen_twice);
        }
    }
    return out;
}

MergeMask build_mask(const NeuronSet& disjoint_set) {
    MergeMask mask(disjoint_set.manifest());
    for (std::size_t t = 0; t < mask.tensor_count(); ++t) mask.bits(t) = disjoint_set.bits(t);
    return mask;
}

namespace {

/// out[d] (+ err[d]) += lambda * (hi[d] + lo[d]) for every set bit of the
/// mask in [first, first + out.size()).
template <class T>
void apply_masked(std::span<T> out, std::span<T> err, const DeltaParts& tau, const Bitset& mask, std::size_t first,
                  double lambda, Bitset& touched) {
    const T scale = static_cast<T>(lambda);
    auto hi = tau.hi.values<T>();
    auto lo = tau.lo.values<T>();
    mask.for_each_in(first, first + out.size(), [&](std::size_t index) {
        const std::size_t d = index - first;
        Compensated<T> acc{out[d], err[d]};
        acc.add_scaled(hi[d], lo[d], scale);
        out[d] = acc.hi;
        err[d] = acc.lo;
        touched.set(d);
    });
}

} // namespace

ChunkSink assemble_tensors(TensorSink sink) {
    auto pending = std::make_shared<Tensor>();
    return [sink = std::move(sink), pending](const TensorMeta& meta, std::uint64_t first, Tensor chunk) {
        const std::uint64_t n = meta.numel();
        if (first == 0 && chunk.numel() == n) {
            sink(meta, std::move(chunk).reshaped(meta.shape));
            return;
        }
        if (first == 0) *pending = Tensor::zeros(meta.shape, chunk.dtype());
        pending->visit([&](auto& dst) {
            using T = typename std::decay_t<decltype(dst)>::value_type;
            auto src = chunk.values<T>();
            std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(first));
        });
        if (first + chunk.numel() == n) sink(meta, std::move(*pending));
    };
}

void merge_chunks(const Checkpoint& base, std::span<const TaskVector> taus, std::span<const MergeMask> masks,
                  std::span<const double> lambdas, const ChunkSink& sink, std::uint64_t chunk) {
    if (taus.size() != masks.size() || taus.size() != lambdas.size())
        throw CompatError(fmt::format("merge got {} task vectors, {} masks and {} scaling factors", taus.size(),
                                      masks.size(), lambdas.size()));
    if (chunk == 0) throw ConfigError("merge chunk size must be positive");
    for (std::size_t i = 0; i < taus.size(); ++i) {
        validate_aligned(base.manifest(), taus[i].manifest());
        validate_aligned(base.manifest(), masks[i].manifest());
        if (!std::isfinite(lambdas[i])) throw ConfigError(fmt::format("scaling factor {} is not finite", i));
    }

    const auto& layout = base.manifest();
    for (std::size_t t = 0; t < layout.size(); ++t) {
        const auto& meta = layout[t];
        const std::uint64_t n = meta.numel();
        for (std::uint64_t first = 0; first < n; first += chunk) {
            const std::uint64_t count = std::min(chunk, n - first);
            Tensor out = base.read_range(meta.name, first, count);
            out.visit([&](auto& values) {
                using T = typename std::decay_t<decltype(values)>::value_type;
                std::vector<T> err;
                Bitset touched(values.size());
                for (std::size_t i = 0; i < taus.size(); ++i) {
                    const Bitset& mask = masks[i].bits(t);
                    if (lambdas[i] == 0.0 || !mask.any_in(first, first + count)) continue;
                    const DeltaParts tau = taus[i].delta_parts(meta.name, first, count);
                    if (tau.hi.is_f64() != out.is_f64())
                        throw CompatError(
                            fmt::format("tensor '{}': task vector precision differs from base", meta.name));
                    if (err.empty()) err.assign(values.size(), T{0});
                    apply_masked<T>(std::span<T>(values), std::span<T>(err), tau, mask, first, lambdas[i], touched);
                }
                touched.for_each([&](std::size_t d) { values[d] += err[d]; });
                for (std::size_t d = 0; d < values.size(); ++d)
                    if (!std::isfinite(values[d]))
                        throw NumericsError(
                            fmt::format("merged value {} of '{}' is not finite", first + d, meta.name));
            });
            sink(meta, first, std::move(out));
        }
    }
}

void merge_into(const Checkpoint& base, std::span<const TaskVector> taus, std::span<const MergeMask> masks,
                std::span<const double> lambdas, const TensorSink& sink) {
    merge_chunks(base, taus, masks, lambdas, assemble_tensors(sink));
}

Checkpoint merge(const Checkpoint& base, std::span<const TaskVector> taus, std::span<const MergeMask> masks,
                 std::span<const double> lambdas) {
    CheckpointCollector collector;
    merge_into(base, taus, masks, lambdas, collector.sink());
    return collector.finish(base.metadata());
}

TensorSink CheckpointCollector::sink() {
    return [this](const TensorMeta& meta, Tensor tensor) { tensors_.emplace_back(meta.name, std::move(tensor)); };
}

Checkpoint CheckpointCollector::finish(Metadata metadata) {
    auto ckpt = Checkpoint::from_tensors(std::move(tensors_), std::move(metadata));
    tensors_.clear();
    return ckpt;
}

void MergeConfig::validate() const {
    if (tasks.empty()) throw ConfigError("a merge needs at least one task");
    for (const auto& t : tasks) {
        check_ratio(t.ratio, fmt::format("mask ratio of task '{}'", t.name));
        if (!std::isfinite(t.lambda)) throw ConfigError(fmt::format("scaling factor of task '{}' is not finite", t.name));
    }
}

bool MergeConfig::excluded(std::string_view tensor_name) const {
    const std::string name(tensor_name);
    for (const auto& pattern : exclusion_patterns) {
        if (::fnmatch(pattern.c_str(), name.c_str(), 0) == 0) return true;
    }
    return false;
}

LedStages led_stages(const MergeConfig& config, const std::vector<TensorMeta>& layout,
                     std::span<const TaskScores> scores, bool keep_intermediate) {
    config.validate();
    const std::size_t k = config.tasks.size();
    if (scores.size() != k)
        throw ConfigError(fmt::format("{} tasks configured but {} score pairs given", k, scores.size()));

    LedStages st;
    st.report.method = "led";
    st.report.parameters = {{"election", std::string(election_mode_name(config.election))},
                            {"location", std::string(score_method_name(config.location))},
                            {"granularity", std::string(granularity_name(config.granularity))},
                            {"disjoint", config.disjoint},
                            {"exclusion_patterns", config.exclusion_patterns},
                            {"seed", config.seed}};
    st.report.tasks.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
        auto& tr = st.report.tasks[i];
        tr.name = config.tasks[i].name;
        tr.ratio = config.tasks[i].ratio;
        tr.lambda = config.tasks[i].lambda;
        for (const auto& m : layout) {
            TensorCounts c;
            c.name = m.name;
            c.numel = m.numel();
            c.excluded = config.excluded(m.name);
            tr.tensors.push_back(std::move(c));
        }
    }

    std::vector<NeuronSet> elected;
    for (std::size_t i = 0; i < k; ++i) {
        validate_aligned(layout, scores[i].fine.manifest());
        validate_aligned(layout, scores[i].base.manifest());
        const double r = config.tasks[i].ratio;
        NeuronSet fine = top_r_select(scores[i].fine, r, config.granularity, SetOrigin::Fine);
        NeuronSet base = top_r_select(scores[i].base, r, config.granularity, SetOrigin::Base);
        NeuronSet e = elect(fine, base, config.election);
        auto& tr = st.report.tasks[i];
        for (std::size_t t = 0; t < layout.size(); ++t) {
            tr.tensors[t].selected_fine = fine.bits(t).count();
            tr.tensors[t].selected_base = base.bits(t).count();
            if (tr.tensors[t].excluded) e.bits(t).clear();
            tr.tensors[t].elected = e.bits(t).count();
        }
        if (keep_intermediate) {
            st.selected_fine.push_back(std::move(fine));
            st.selected_base.push_back(std::move(base));
        }
        elected.push_back(std::move(e));
    }

    std::vector<NeuronSet> dj = config.disjoint ? disjoint(elected) : elected;
    for (std::size_t i = 0; i < k; ++i) {
        auto& tr = st.report.tasks[i];
        for (std::size_t t = 0; t < layout.size(); ++t) {
            const auto n = dj[i].bits(t).count();
            tr.tensors[t].disjoint = n;
            tr.tensors[t].mask_density =
                tr.tensors[t].numel == 0 ? 0.0 : static_cast<double>(n) / static_cast<double>(tr.tensors[t].numel);
        }
        st.masks.push_back(build_mask(dj[i]));
    }
    if (!config.disjoint) st.report.notes.push_back("disjoint stage disabled: masks are the elected sets");
    if (keep_intermediate) {
        st.elected = std::move(elected);
        st.disjoint = std::move(dj);
    }
    return st;
}

namespace {

std::vector<TaskVector> task_vectors(const Checkpoint& base, std::span<const Checkpoint> fines, std::size_t k) {
    if (fines.size() != k) throw ConfigError(fmt::format("{} tasks configured but {} models given", k, fines.size()));
    std::vector<TaskVector> taus;
    for (const auto& fine : fines) taus.push_back(TaskVector::between(fine, base));
    return taus;
}

std::vector<double> lambdas_of(const MergeConfig& config) {
    std::vector<double> out;
    for (const auto& t : config.tasks) out.push_back(t.lambda);
    return out;
}

} // namespace

LedResult led_merge(const MergeConfig& config, const Checkpoint& base, std::span<const Checkpoint> fines,
                    std::span<const TaskScores> scores) {
    config.validate();
    auto taus = task_vectors(base, fines, config.tasks.size());
    LedStages stages = led_stages(config, base.manifest(), scores, true);
    const auto lambdas = lambdas_of(config);
    Checkpoint merged = merge(base, taus, stages.masks, lambdas);
    MergeReport report = stages.report;
    return LedResult{std::move(merged), std::move(report), std::move(stages)};
}

MergeReport led_merge_to_file(const MergeConfig& config, const Checkpoint& base, std::span<const Checkpoint> fines,
                              std::span<const TaskScores> scores, const std::filesystem::path& out) {
    config.validate();
    auto taus = task_vectors(base, fines, config.tasks.size());
    LedStages stages = led_stages(config, base.manifest(), scores, false);
    const auto lambdas = lambdas_of(config);
    CheckpointWriter writer(out, base.manifest(), base.metadata());
    merge_chunks(base, taus, stages.masks, lambdas,
                 [&writer](const TensorMeta& meta, std::uint64_t, Tensor chunk) { writer.write_chunk(meta.name, chunk); });
    writer.finish();
    return std::move(stages.report);
}

} // namespace ledmerge
