#pragma once

#include <algorithm>
#include <bit>
#include <iterator>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "ledmerge/ledcore.hpp"

// Naive set algebra over flat index lists, written without bitsets.
namespace oracle {

using IndexSet = std::set<std::size_t>;

/// First k indices of a full stable sort by (score desc, index asc).
template <class T>
inline IndexSet top_k(const std::vector<T>& scores, std::size_t k) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    return IndexSet(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(k, idx.size())));
}

inline IndexSet intersect(const IndexSet& a, const IndexSet& b) {
    IndexSet out;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::inserter(out, out.end()));
    return out;
}

inline IndexSet minus(const IndexSet& a, const IndexSet& b) {
    IndexSet out;
    std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::inserter(out, out.end()));
    return out;
}

/// T_i minus the union over J of the intersection of T_j for j in J, with J
/// running over subsets of [K] of size >= 2. proper_only drops J = [K].
inline std::vector<IndexSet> disjoint(const std::vector<IndexSet>& sets, bool proper_only = false) {
    const std::size_t k = sets.size();
    IndexSet removed;
    for (std::uint32_t mask = 0; mask < (1u << k); ++mask) {
        if (std::popcount(mask) < 2) continue;
        if (proper_only && mask == (1u << k) - 1) continue;
        IndexSet inter;
        bool first = true;
        for (std::size_t j = 0; j < k; ++j) {
            if (!(mask & (1u << j))) continue;
            inter = first ? sets[j] : intersect(inter, sets[j]);
            first = false;
        }
        removed.insert(inter.begin(), inter.end());
    }
    std::vector<IndexSet> out;
    for (const auto& s : sets) out.push_back(minus(s, removed));
    return out;
}

inline IndexSet to_set(const ledmerge::Bitset& b) {
    IndexSet s;
    for (std::size_t i = 0; i < b.size(); ++i)
        if (b.test(i)) s.insert(i);
    return s;
}

} // namespace oracle
