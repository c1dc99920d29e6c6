#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <limits>

#include "ledmerge/analysis.hpp"
#include "ledmerge/errors.hpp"
#include "ledmerge/ledcore.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace ledmerge;
using namespace testing_support;

namespace {

ImportanceMap map_of(const std::vector<std::vector<double>>& per_tensor) {
    std::vector<std::pair<std::string, Tensor>> ts;
    for (std::size_t i = 0; i < per_tensor.size(); ++i)
        ts.emplace_back(fmt::format("t{}", i), Tensor({per_tensor[i].size()}, per_tensor[i]));
    return ImportanceMap::from_checkpoint(Checkpoint::from_tensors(std::move(ts)), ScoreMethod::Imported, "test", 1);
}

std::vector<TensorMeta> layout_of(std::vector<std::uint64_t> sizes) {
    std::vector<TensorMeta> l;
    for (std::size_t i = 0; i < sizes.size(); ++i) l.push_back({fmt::format("t{}", i), {sizes[i]}, DType::F64});
    return l;
}

NeuronSet set_of(const std::vector<TensorMeta>& layout, std::initializer_list<std::size_t> idx,
                 SetOrigin origin = SetOrigin::Elected) {
    NeuronSet s(layout, 1.0, origin);
    for (auto i : idx) s.bits(0).set(i);
    return s;
}

std::vector<std::size_t> idx(const NeuronSet& s, std::size_t t = 0) { return s.bits(t).indices(); }

MergeMask full_mask(const std::vector<TensorMeta>& layout, bool value) {
    MergeMask m(layout);
    for (std::size_t t = 0; t < layout.size(); ++t)
        if (value) m.bits(t) = Bitset(layout[t].numel(), true);
    return m;
}

std::uint64_t bits_of(double v) { return std::bit_cast<std::uint64_t>(v); }

} // namespace

TEST(TopR, Examples) {
    const auto all = top_r_select(map_of({{0.3, 0.1, 0.2}}), 1.0);
    EXPECT_EQ(all.count(), 3u);
    const auto tie = top_r_select(map_of({{5, 1, 3, 3}}), 0.5);
    EXPECT_EQ(idx(tie), (std::vector<std::size_t>{0, 2}));
    EXPECT_THROW(top_r_select(map_of({{1}}), 0.0), ConfigError);
    EXPECT_THROW(top_r_select(map_of({{1}}), 1.5), ConfigError);
    EXPECT_THROW(top_r_select(map_of({{1, std::nan("")}}), 0.5), NumericsError);
    EXPECT_EQ(top_r_select(map_of({{1, 2, 3}}), 0.2).count(), 0u);
}

TEST(TopR, CountForRatio) {
    EXPECT_EQ(count_for_ratio(0.1, 10), 1u);
    EXPECT_EQ(count_for_ratio(0.3, 10), 3u);
    EXPECT_EQ(count_for_ratio(0.37, 10000), 3700u);
    EXPECT_EQ(count_for_ratio(0.25, 7), 1u);
    EXPECT_EQ(count_for_ratio(1.0, 64), 64u);
}

TEST(TopR, SortOracle) {
    std::mt19937_64 gen(0);
    std::vector<double> v(10000);
    for (auto& x : v) x = std::floor(uniform01(gen) * 500);  // many ties
    const auto got = top_r_select(map_of({v}), 0.37);
    EXPECT_EQ(oracle::to_set(got.bits(0)), oracle::top_k(v, 3700));
}

TEST(TopR, GlobalGranularity) {
    std::mt19937_64 gen(1);
    std::vector<double> a(30), b(50);
    for (auto& x : a) x = uniform01(gen);
    for (auto& x : b) x = uniform01(gen) * 0.5;
    const auto got = top_r_select(map_of({a, b}), 0.25, Granularity::Global);
    std::vector<double> all = a;
    all.insert(all.end(), b.begin(), b.end());
    oracle::IndexSet flat;
    for (auto i : oracle::to_set(got.bits(0))) flat.insert(i);
    for (auto i : oracle::to_set(got.bits(1))) flat.insert(30 + i);
    EXPECT_EQ(flat, oracle::top_k(all, 20));
}

TEST(Elect, Modes) {
    const auto l = layout_of({8});
    const auto fine = set_of(l, {1, 2, 3}, SetOrigin::Fine);
    const auto base = set_of(l, {2, 3, 4}, SetOrigin::Base);
    EXPECT_EQ(idx(elect(fine, base, ElectionMode::Both)), (std::vector<std::size_t>{2, 3}));
    EXPECT_EQ(elect(fine, base, ElectionMode::Both).origin(), SetOrigin::Elected);
    EXPECT_TRUE(elect(fine, base, ElectionMode::FineOnly).same_bits(fine));
    EXPECT_TRUE(elect(fine, base, ElectionMode::BaseOnly).same_bits(base));
    EXPECT_EQ(elect(set_of(l, {0, 1}), set_of(l, {5, 6}), ElectionMode::Both).count(), 0u);
    EXPECT_THROW(elect(fine, set_of(layout_of({9}), {1}), ElectionMode::Both), CompatError);
    EXPECT_EQ(parse_election_mode("10"), ElectionMode::BaseOnly);
    EXPECT_EQ(parse_election_mode("01"), ElectionMode::FineOnly);
    EXPECT_EQ(parse_election_mode("both"), ElectionMode::Both);
    EXPECT_THROW(parse_election_mode("00"), ConfigError);
}

TEST(Disjoint, Examples) {
    const auto l = layout_of({8});
    const std::vector<NeuronSet> three{set_of(l, {1, 2}), set_of(l, {2, 3}), set_of(l, {3, 4})};
    const auto out = disjoint(three);
    EXPECT_EQ(idx(out[0]), (std::vector<std::size_t>{1}));
    EXPECT_TRUE(idx(out[1]).empty());
    EXPECT_EQ(idx(out[2]), (std::vector<std::size_t>{4}));
    EXPECT_EQ(out[0].origin(), SetOrigin::Disjoint);

    const std::vector<NeuronSet> one{set_of(l, {0, 5, 7})};
    EXPECT_TRUE(disjoint(one)[0].same_bits(one[0]));

    const std::vector<NeuronSet> apart{set_of(l, {0, 1}), set_of(l, {2}), set_of(l, {6, 7})};
    const auto kept = disjoint(apart);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(kept[i].same_bits(apart[i]));

    std::vector<NeuronSet> bad{set_of(l, {1}), set_of(layout_of({4}), {1})};
    EXPECT_THROW(disjoint(bad), CompatError);
}

TEST(Disjoint, MatchesSubsetEnumeration) {
    std::mt19937_64 gen(2);
    const auto l = layout_of({40});
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t k = 1 + gen() % 4;
        std::vector<NeuronSet> sets;
        std::vector<oracle::IndexSet> ref;
        for (std::size_t i = 0; i < k; ++i) {
            NeuronSet s(l, 1.0, SetOrigin::Elected);
            for (std::size_t d = 0; d < 40; ++d)
                if (gen() % 3 == 0) s.bits(0).set(d);
            ref.push_back(oracle::to_set(s.bits(0)));
            sets.push_back(std::move(s));
        }
        const auto got = disjoint(sets);
        const auto want = oracle::disjoint(ref);
        if (k >= 3) {
            EXPECT_EQ(oracle::disjoint(ref, true), want);
        }
        for (std::size_t i = 0; i < k; ++i) EXPECT_EQ(oracle::to_set(got[i].bits(0)), want[i]);
    }
}

TEST(BuildMask, SupportEqualsSet) {
    const auto l = layout_of({70, 3});
    EXPECT_EQ(build_mask(NeuronSet(l, 1.0, SetOrigin::Disjoint)).count(), 0u);
    NeuronSet full(l, 1.0, SetOrigin::Disjoint);
    full.bits(0) = Bitset(70, true);
    full.bits(1) = Bitset(3, true);
    EXPECT_EQ(build_mask(full).count(), 73u);
    const auto s = set_of(l, {0, 63, 64, 69});
    const auto m = build_mask(s);
    EXPECT_EQ(m.count(), 4u);
    EXPECT_TRUE(m.same_bits(s));
}

TEST(Merge, IdentityCases) {
    std::mt19937_64 gen(4);
    for (bool f64 : {true, false}) {
        const std::vector<Shape> shapes{{5, 7}, {13}};
        const auto base = f64 ? random_f64(gen, shapes) : random_f32(gen, shapes);
        const auto f1 = perturbed(gen, base, 0.1), f2 = perturbed(gen, base, 0.1);
        const std::vector<TaskVector> taus{task_vector(f1, base), task_vector(f2, base)};
        const std::vector<MergeMask> full{full_mask(base.manifest(), true), full_mask(base.manifest(), true)};
        const std::vector<MergeMask> none{full_mask(base.manifest(), false), full_mask(base.manifest(), false)};
        const std::vector<double> zero{0.0, 0.0}, one{1.0, 1.0};
        EXPECT_EQ(payload(merge(base, taus, full, zero)), payload(base));
        EXPECT_EQ(payload(merge(base, taus, none, one)), payload(base));
    }
}

TEST(Merge, ScalarOracle) {
    std::mt19937_64 gen(5);
    const auto base = random_f64(gen, {{32}});
    const auto f1 = perturbed(gen, base, 0.5), f2 = perturbed(gen, base, 0.5);
    const std::vector<TaskVector> taus{task_vector(f1, base), task_vector(f2, base)};
    std::vector<MergeMask> masks{MergeMask(base.manifest()), MergeMask(base.manifest())};
    for (std::size_t d = 0; d < 32; ++d) {
        if (gen() % 2) masks[0].bits(0).set(d);
        if (gen() % 2) masks[1].bits(0).set(d);
    }
    const std::vector<double> lambdas{0.7, 1.3};
    const auto merged = flat(merge(base, taus, masks, lambdas));
    const auto b = flat(base), x = flat(f1), y = flat(f2);
    for (std::size_t d = 0; d < 32; ++d) {
        double want = b[d];
        if (masks[0].bits(0).test(d)) want += 0.7 * (x[d] - b[d]);
        if (masks[1].bits(0).test(d)) want += 1.3 * (y[d] - b[d]);
        EXPECT_NEAR(merged[d], want, 1e-12);
    }
}

TEST(Merge, Errors) {
    std::mt19937_64 gen(6);
    const auto base = random_f32(gen, {{4}});
    const std::vector<TaskVector> taus{task_vector(perturbed(gen, base, 1.0), base)};
    const std::vector<MergeMask> masks{full_mask(base.manifest(), true)};
    const std::vector<double> huge{1e300}, two{1.0, 1.0};
    EXPECT_THROW(merge(base, taus, masks, huge), NumericsError);
    EXPECT_THROW(merge(base, taus, masks, two), CompatError);
    const std::vector<MergeMask> other{full_mask(layout_of({5}), true)};
    const std::vector<double> one{1.0};
    EXPECT_THROW(merge(base, taus, other, one), CompatError);
}

TEST(Merge, ChunkedEqualsWhole) {
    std::mt19937_64 gen(7);
    const auto base = random_f32(gen, {{9, 11}, {3}, {40}});
    const auto f1 = perturbed(gen, base, 0.2), f2 = perturbed(gen, base, 0.2);
    const std::vector<TaskVector> taus{task_vector(f1, base), task_vector(f2, base)};
    std::vector<MergeMask> masks{MergeMask(base.manifest()), MergeMask(base.manifest())};
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t d = 0; d < base.manifest()[t].numel(); ++d)
            if (gen() % 3 == 0) masks[gen() % 2].bits(t).set(d);
    const std::vector<double> lambdas{0.9, 1.1};
    const auto whole = merge(base, taus, masks, lambdas);
    for (std::uint64_t chunk : {1u, 7u, 64u}) {
        CheckpointCollector c;
        merge_chunks(base, taus, masks, lambdas, assemble_tensors(c.sink()), chunk);
        EXPECT_EQ(payload(c.finish()), payload(whole)) << chunk;
    }
}

TEST(Merge, LocalityAndOrderInvariance) {
    std::mt19937_64 gen(8);
    for (bool f64 : {true, false}) {
        const std::vector<Shape> shapes{{6, 6}, {20}};
        const auto base = f64 ? random_f64(gen, shapes) : random_f32(gen, shapes);
        std::vector<Checkpoint> fines;
        std::vector<TaskScores> scores;
        MergeConfig c;
        for (int i = 0; i < 3; ++i) {
            fines.push_back(perturbed(gen, base, 0.3));
            scores.push_back({random_scores(base, gen()), random_scores(base, gen())});
            c.tasks.push_back({fmt::format("task{}", i), 0.5, 0.6 + 0.2 * i});
        }
        c.election = ElectionMode::FineOnly;
        const auto res = led_merge(c, base, fines, scores);

        const auto b = flat(base), m = flat(res.merged);
        std::size_t untouched = 0, offset = 0;
        for (std::size_t t = 0; t < base.manifest().size(); ++t) {
            for (std::size_t d = 0; d < base.manifest()[t].numel(); ++d) {
                bool any = false;
                for (const auto& mask : res.stages.masks) any = any || mask.bits(t).test(d);
                if (!any) {
                    EXPECT_EQ(bits_of(m[offset + d]), bits_of(b[offset + d]));
                    ++untouched;
                }
            }
            offset += base.manifest()[t].numel();
        }
        EXPECT_GT(untouched, 0u);

        const std::vector<std::size_t> perm{2, 0, 1};
        MergeConfig pc = c;
        std::vector<Checkpoint> pf;
        std::vector<TaskScores> ps;
        for (std::size_t i = 0; i < 3; ++i) {
            pc.tasks[i] = c.tasks[perm[i]];
            pf.push_back(fines[perm[i]]);
            ps.push_back(scores[perm[i]]);
        }
        const auto pres = led_merge(pc, base, pf, ps);
        EXPECT_EQ(payload(pres.merged), payload(res.merged));
        for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(pres.stages.masks[i].same_bits(res.stages.masks[perm[i]]));
    }
}

TEST(LedMerge, ReductionCaseIsExact) {
    std::mt19937_64 gen(9);
    for (bool f64 : {true, false}) {
        const std::vector<Shape> shapes{{17, 5}, {9}};
        const auto base = f64 ? random_f64(gen, shapes) : random_f32(gen, shapes);
        const auto fine = perturbed(gen, base, 0.05);
        const auto s = magnitude_scores(fine);
        MergeConfig c;
        c.tasks = {{"only", 1.0, 1.0}};
        const std::vector<Checkpoint> fines{fine};
        const std::vector<TaskScores> scores{{s, s}};
        EXPECT_EQ(payload(led_merge(c, base, fines, scores).merged), payload(fine));
    }
}

TEST(LedMerge, ZeroOverlapEqualsSumOfSingleMerges) {
    const auto l = layout_of({24});
    std::mt19937_64 gen(10);
    const auto base = random_f64(gen, {{24}});
    const std::vector<Checkpoint> fines{perturbed(gen, base, 0.4), perturbed(gen, base, 0.4)};
    // Task 0 scores high on the first half, task 1 on the second.
    std::vector<double> s0(24), s1(24);
    for (std::size_t d = 0; d < 24; ++d) {
        s0[d] = (d < 12 ? 10.0 : 0.0) + uniform01(gen);
        s1[d] = (d >= 12 ? 10.0 : 0.0) + uniform01(gen);
    }
    const std::vector<TaskScores> scores{{map_of({s0}), map_of({s0})}, {map_of({s1}), map_of({s1})}};
    MergeConfig c;
    c.tasks = {{"a", 0.4, 0.8}, {"b", 0.4, 1.2}};
    const auto both = led_merge(c, base, fines, scores);
    EXPECT_EQ(mask_overlap_matrix(both.stages.masks)[0][1], 0u);
    EXPECT_TRUE(both.stages.disjoint[0].same_bits(both.stages.elected[0]));

    const auto b = flat(base), m = flat(both.merged);
    std::vector<double> sum(b);
    for (std::size_t i = 0; i < 2; ++i) {
        MergeConfig single;
        single.tasks = {c.tasks[i]};
        const std::vector<Checkpoint> f{fines[i]};
        const std::vector<TaskScores> s{scores[i]};
        const auto one = flat(led_merge(single, base, f, s).merged);
        for (std::size_t d = 0; d < 24; ++d) sum[d] += one[d] - b[d];
    }
    for (std::size_t d = 0; d < 24; ++d) EXPECT_NEAR(m[d], sum[d], 1e-12);
}

TEST(LedMerge, EndToEndOracleK3) {
    std::mt19937_64 gen(11);
    const std::size_t n = 48;
    const auto base = random_f64(gen, {{n}});
    std::vector<Checkpoint> fines;
    std::vector<TaskScores> scores;
    std::vector<std::vector<double>> fs, bs;
    MergeConfig c;
    for (int i = 0; i < 3; ++i) {
        fines.push_back(perturbed(gen, base, 0.3));
        std::vector<double> a(n), b(n);
        for (auto& x : a) x = uniform01(gen);
        for (auto& x : b) x = uniform01(gen);
        fs.push_back(a);
        bs.push_back(b);
        scores.push_back({map_of({a}), map_of({b})});
        c.tasks.push_back({fmt::format("t{}", i), 0.5, 0.5 + 0.25 * i});
    }
    const auto res = led_merge(c, base, fines, scores);

    std::vector<oracle::IndexSet> elected;
    for (int i = 0; i < 3; ++i) elected.push_back(oracle::intersect(oracle::top_k(fs[i], 24), oracle::top_k(bs[i], 24)));
    const auto dj = oracle::disjoint(elected);
    const auto b = flat(base), m = flat(res.merged);
    std::vector<double> want(b);
    for (int i = 0; i < 3; ++i) {
        const auto f = flat(fines[i]);
        for (auto d : dj[i]) want[d] += c.tasks[i].lambda * (f[d] - b[d]);
        EXPECT_EQ(oracle::to_set(res.stages.disjoint[i].bits(0)), dj[i]);
    }
    for (std::size_t d = 0; d < n; ++d) EXPECT_NEAR(m[d], want[d], 1e-12);
}

TEST(LedMerge, Invariants) {
    std::mt19937_64 gen(12);
    for (int trial = 0; trial < 50; ++trial) {
        const auto base = random_f64(gen, {{1 + gen() % 30}, {1 + gen() % 30}});
        const std::size_t k = 1 + gen() % 3;
        MergeConfig c;
        std::vector<TaskScores> scores;
        for (std::size_t i = 0; i < k; ++i) {
            c.tasks.push_back({fmt::format("t{}", i), 0.1 + 0.9 * uniform01(gen), 1.0});
            scores.push_back({random_scores(base, gen()), random_scores(base, gen())});
        }
        const auto st = led_stages(c, base.manifest(), scores);
        for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t t = 0; t < 2; ++t) {
                const auto& e = st.elected[i].bits(t);
                EXPECT_EQ(e.intersection_count(st.selected_fine[i].bits(t)), e.count());
                EXPECT_EQ(e.intersection_count(st.selected_base[i].bits(t)), e.count());
                EXPECT_EQ(st.disjoint[i].bits(t).intersection_count(e), st.disjoint[i].bits(t).count());
                for (std::size_t j = 0; j < k; ++j)
                    if (j != i) {
                        EXPECT_EQ(st.disjoint[i].bits(t).intersection_count(st.disjoint[j].bits(t)), 0u);
                    }
                EXPECT_TRUE(st.masks[i].bits(t) == st.disjoint[i].bits(t));
                EXPECT_EQ(*st.report.tasks[i].tensors[t].disjoint, st.disjoint[i].bits(t).count());
            }
        }
    }
}

TEST(LedMerge, ExclusionAndAblations) {
    std::mt19937_64 gen(13);
    std::vector<std::pair<std::string, Tensor>> ts;
    ts.emplace_back("layer0.attn.weight", Tensor({8}, normals(gen, 8)));
    ts.emplace_back("layer0.mlp.weight", Tensor({8}, normals(gen, 8)));
    const auto base = Checkpoint::from_tensors(std::move(ts));
    const std::vector<Checkpoint> fines{perturbed(gen, base, 0.5), perturbed(gen, base, 0.5)};
    const auto s = magnitude_scores(fines[0]);
    const std::vector<TaskScores> scores{{s, s}, {s, s}};
    MergeConfig c;
    c.tasks = {{"a", 1.0, 1.0}, {"b", 1.0, 1.0}};
    c.disjoint = false;
    c.exclusion_patterns = {"*.attn.*"};
    const auto res = led_merge(c, base, fines, scores);
    EXPECT_EQ(res.merged.read("layer0.attn.weight"), base.read("layer0.attn.weight"));
    EXPECT_NE(res.merged.read("layer0.mlp.weight"), base.read("layer0.mlp.weight"));
    EXPECT_TRUE(res.report.tasks[0].tensors[0].excluded);
    EXPECT_EQ(res.report.notes.size(), 1u);
    EXPECT_EQ(mask_overlap_matrix(res.stages.masks)[0][1], 8u);

    c.disjoint = true;
    const auto dj = led_merge(c, base, fines, scores);
    // Identical full sets cancel each other completely.
    EXPECT_EQ(payload(dj.merged), payload(base));

    MergeConfig bad = c;
    bad.tasks[0].ratio = 0.0;
    EXPECT_THROW(led_merge(bad, base, fines, scores), ConfigError);
    bad = c;
    bad.tasks.clear();
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(LedMerge, StreamsToFile) {
    TempDir dir;
    std::mt19937_64 gen(14);
    const auto base = random_f32(gen, {{33, 3}, {7}});
    const std::vector<Checkpoint> fines{perturbed(gen, base, 0.1), perturbed(gen, base, 0.1)};
    const std::vector<TaskScores> scores{{magnitude_scores(fines[0]), magnitude_scores(base)},
                                         {magnitude_scores(fines[1]), magnitude_scores(base)}};
    MergeConfig c;
    c.tasks = {{"a", 0.3, 1.0}, {"b", 0.6, 0.5}};
    const auto mem = led_merge(c, base, fines, scores);
    const auto report = led_merge_to_file(c, base, fines, scores, dir / "m.safetensors");
    EXPECT_EQ(payload(load_checkpoint(dir / "m.safetensors")), payload(mem.merged));
    EXPECT_EQ(report.to_json(), mem.report.to_json());
    const auto j = report.to_json();
    EXPECT_EQ(j["method"], "led");
    EXPECT_EQ(j["tasks"].size(), 2u);
}
