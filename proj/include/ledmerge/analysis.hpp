#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ledmerge/bitset.hpp"
#include "ledmerge/ledcore.hpp"
#include "ledmerge/scoring.hpp"

namespace ledmerge {

/// |A & B| / |A | B|; 0 when both are empty. Throws CompatError on size mismatch.
double jaccard(const Bitset& a, const Bitset& b);
/// Over the flattened index space of all tensors.
double jaccard(const BitsetMap& a, const BitsetMap& b);

struct LayerKindRule {
    std::string kind;
    std::string pattern;
};

/// First matching rule wins (regex search on the tensor name); no match is "other".
class LayerKindTagger {
public:
    LayerKindTagger();
    explicit LayerKindTagger(std::vector<LayerKindRule> rules);

    std::string tag(const std::string& tensor_name) const;
    const std::vector<LayerKindRule>& rules() const { return rules_; }

private:
    std::vector<LayerKindRule> rules_;
    std::vector<std::regex> compiled_;
};

struct JaccardRow {
    std::string tensor;
    std::string kind;
    double jaccard = 0.0;
    std::uint64_t size_a = 0;
    std::uint64_t size_b = 0;
    std::uint64_t intersection = 0;
    /// Both sets empty; jaccard is reported as 0.
    bool empty = false;
};

struct JaccardReport {
    double ratio_used = 0.2;
    std::string map_a;
    std::string map_b;
    std::vector<JaccardRow> rows;

    double mean() const;
    /// Mean jaccard per layer kind.
    std::map<std::string, double> mean_by_kind() const;

    nlohmann::json to_json() const;
    std::string to_text() const;
    std::string to_csv() const;
};

/// Per tensor: top-r of each map, then jaccard of the two sets.
JaccardReport layerwise_jaccard(const ImportanceMap& map_a, const ImportanceMap& map_b, double ratio = 0.2,
                                const LayerKindTagger& tagger = LayerKindTagger());

/// Entry (i, j) = popcount(m_i & m_j).
std::vector<std::vector<std::uint64_t>> mask_overlap_matrix(std::span<const MergeMask> masks);

struct GridRow {
    nlohmann::json config;
    /// Higher is better for every metric.
    std::map<std::string, double> metrics;
    /// Set when the cell failed; failed rows are never on the front.
    std::optional<std::string> error;
    bool pareto = false;
};

/// True if a >= b on every metric and a > b on at least one.
bool dominates(const GridRow& a, const GridRow& b);

struct GridReport {
    std::vector<GridRow> rows;

    nlohmann::json to_json() const;
    std::string to_text() const;
};

/// Sorts rows by config and flags the rows no other row dominates.
/// Throws ConfigError when empty or when successful rows disagree on metric names.
GridReport grid_report(std::vector<GridRow> results);

} // namespace ledmerge
