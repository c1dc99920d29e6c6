#include "ledmerge/analysis.hpp"

#include <algorithm>

#include <fmt/core.h>

#include "ledmerge/errors.hpp"

namespace ledmerge {

double jaccard(const Bitset& a, const Bitset& b) {
    if (a.size() != b.size())
        throw CompatError(fmt::format("jaccard over sets of {} and {} elements", a.size(), b.size()));
    const auto uni = a.union_count(b);
    if (uni == 0) return 0.0;
    return static_cast<double>(a.intersection_count(b)) / static_cast<double>(uni);
}

double jaccard(const BitsetMap& a, const BitsetMap& b) {
    a.check_aligned(b);
    std::uint64_t inter = 0, uni = 0;
    for (std::size_t t = 0; t < a.tensor_count(); ++t) {
        inter += a.bits(t).intersection_count(b.bits(t));
        uni += a.bits(t).union_count(b.bits(t));
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

LayerKindTagger::LayerKindTagger()
    : LayerKindTagger({{"attention", "attn|attention|q_proj|k_proj|v_proj|o_proj"},
                       {"mlp", "mlp|ffn|feed_forward|gate_proj|up_proj|down_proj"}}) {}

LayerKindTagger::LayerKindTagger(std::vector<LayerKindRule> rules) : rules_(std::move(rules)) {
    for (const auto& r : rules_) {
        try {
            compiled_.emplace_back(r.pattern, std::regex::ECMAScript);
        } catch (const std::regex_error& e) {
            throw ConfigError(fmt::format("bad layer pattern '{}': {}", r.pattern, e.what()));
        }
    }
}

std::string LayerKindTagger::tag(const std::string& tensor_name) const {
    for (std::size_t i = 0; i < rules_.size(); ++i)
        if (std::regex_search(tensor_name, compiled_[i])) return rules_[i].kind;
    return "other";
}

double JaccardReport::mean() const {
    if (rows.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : rows) s += r.jaccard;
    return s / static_cast<double>(rows.size());
}

std::map<std::string, double> JaccardReport::mean_by_kind() const {
    std::map<std::string, std::pair<double, std::size_t>> acc;
    for (const auto& r : rows) {
        acc[r.kind].first += r.jaccard;
        ++acc[r.kind].second;
    }
    std::map<std::string, double> out;
    for (const auto& [kind, v] : acc) out[kind] = v.first / static_cast<double>(v.second);
    return out;
}

nlohmann::json JaccardReport::to_json() const {
    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& r : rows) {
        rows_json.push_back({{"tensor", r.tensor},
                             {"kind", r.kind},
                             {"jaccard", r.jaccard},
                             {"size_a", r.size_a},
                             {"size_b", r.size_b},
                             {"intersection", r.intersection},
                             {"empty", r.empty}});
    }
    return {{"ratio", ratio_used},
            {"map_a", map_a},
            {"map_b", map_b},
            {"mean", mean()},
            {"mean_by_kind", mean_by_kind()},
            {"rows", std::move(rows_json)}};
}

std::string JaccardReport::to_text() const {
    std::size_t width = 6;
    for (const auto& r : rows) width = std::max(width, r.tensor.size());
    std::string out = fmt::format("ratio {}\n", ratio_used);
    out += fmt::format("{:<{}}  {:<9}  {:>8}  {:>10}  {:>10}  {:>10}\n", "tensor", width, "kind", "jaccard", "|A|",
                       "|B|", "|A&B|");
    for (const auto& r : rows) {
        out += fmt::format("{:<{}}  {:<9}  {:>8.4f}  {:>10}  {:>10}  {:>10}{}\n", r.tensor, width, r.kind, r.jaccard,
                           r.size_a, r.size_b, r.intersection, r.empty ? "  (empty)" : "");
    }
    out += fmt::format("mean {:.4f}\n", mean());
    for (const auto& [kind, m] : mean_by_kind()) out += fmt::format("mean[{}] {:.4f}\n", kind, m);
    return out;
}

std::string JaccardReport::to_csv() const {
    std::string out = "tensor,kind,jaccard,size_a,size_b,intersection,empty\n";
    for (const auto& r : rows) {
        out += fmt::format("{},{},{},{},{},{},{}\n", r.tensor, r.kind, r.jaccard, r.size_a, r.size_b, r.intersection,
                           r.empty ? 1 : 0);
    }
    return out;
}

JaccardReport layerwise_jaccard(const ImportanceMap& map_a, const ImportanceMap& map_b, double ratio,
                                const LayerKindTagger& tagger) {
    validate_aligned(map_a.manifest(), map_b.manifest());
    const NeuronSet a = top_r_select(map_a, ratio);
    const NeuronSet b = top_r_select(map_b, ratio);
    JaccardReport report;
    report.ratio_used = ratio;
    report.map_a = map_a.dataset_name();
    report.map_b = map_b.dataset_name();
    for (std::size_t t = 0; t < a.tensor_count(); ++t) {
        JaccardRow row;
        row.tensor = a.manifest()[t].name;
        row.kind = tagger.tag(row.tensor);
        row.size_a = a.bits(t).count();
        row.size_b = b.bits(t).count();
        row.intersection = a.bits(t).intersection_count(b.bits(t));
        row.empty = row.size_a == 0 && row.size_b == 0;
        row.jaccard = jaccard(a.bits(t), b.bits(t));
        report.rows.push_back(std::move(row));
    }
    return report;
}

std::vector<std::vector<std::uint64_t>> mask_overlap_matrix(std::span<const MergeMask> masks) {
    for (std::size_t i = 1; i < masks.size(); ++i) masks[0].check_aligned(masks[i]);
    const std::size_t k = masks.size();
    std::vector<std::vector<std::uint64_t>> m(k, std::vector<std::uint64_t>(k, 0));
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = i; j < k; ++j) {
            std::uint64_t n = 0;
            for (std::size_t t = 0; t < masks[i].tensor_count(); ++t)
                n += masks[i].bits(t).intersection_count(masks[j].bits(t));
            m[i][j] = m[j][i] = n;
        }
    }
    return m;
}

bool dominates(const GridRow& a, const GridRow& b) {
    bool strict = false;
    for (const auto& [name, va] : a.metrics) {
        const double vb = b.metrics.at(name);
        if (va < vb) return false;
        if (va > vb) strict = true;
    }
    return strict;
}

GridReport grid_report(std::vector<GridRow> results) {
    if (results.empty()) throw ConfigError("grid report needs at least one result");
    const GridRow* reference = nullptr;
    for (const auto& r : results) {
        if (r.error) continue;
        if (!reference) {
            reference = &r;
            continue;
        }
        bool same = r.metrics.size() == reference->metrics.size();
        for (const auto& [name, v] : reference->metrics) same = same && r.metrics.count(name) == 1;
        if (!same) throw ConfigError("grid rows report different metrics");
    }
    std::stable_sort(results.begin(), results.end(),
                     [](const GridRow& a, const GridRow& b) { return a.config < b.config; });
    for (auto& r : results) {
        r.pareto = !r.error;
        if (!r.pareto) continue;
        for (const auto& other : results) {
            if (!other.error && dominates(other, r)) {
                r.pareto = false;
                break;
            }
        }
    }
    return GridReport{std::move(results)};
}

nlohmann::json GridReport::to_json() const {
    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json row = {{"config", r.config}, {"metrics", r.metrics}, {"pareto", r.pareto}};
        row["error"] = r.error ? nlohmann::json(*r.error) : nlohmann::json(nullptr);
        rows_json.push_back(std::move(row));
    }
    return {{"rows", std::move(rows_json)}};
}

std::string GridReport::to_text() const {
    std::string out;
    for (const auto& r : rows) {
        out += fmt::format("{} {}", r.pareto ? "*" : " ", r.config.dump());
        if (r.error) {
            out += fmt::format("  error: {}\n", *r.error);
            continue;
        }
        for (const auto& [name, v] : r.metrics) out += fmt::format("  {}={:.4f}", name, v);
        out += "\n";
    }
    return out;
}

} // namespace ledmerge
