#include <gtest/gtest.h>

#include <cmath>

#include "ledmerge/baselines.hpp"
#include "ledmerge/errors.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace ledmerge;
using namespace testing_support;

namespace {

Checkpoint vec(const std::vector<double>& v) { return Checkpoint::from_tensors({{"w", Tensor({v.size()}, v)}}); }

std::vector<TaskVector> taus_of(const Checkpoint& base, const std::vector<Checkpoint>& fines) {
    std::vector<TaskVector> out;
    for (const auto& f : fines) out.push_back(task_vector(f, base));
    return out;
}

// Elected sign and disjoint mean of one element, by trying both signs.
double ties_element(const std::vector<double>& values) {
    double best_sign = 0.0, best_mass = -1.0;
    for (double sign : {1.0, -1.0}) {
        double mass = 0.0;
        for (double v : values)
            if (v * sign > 0) mass += std::abs(v);
        if (mass > best_mass) best_mass = mass, best_sign = sign;
    }
    double sum = 0.0;
    int count = 0;
    for (double v : values)
        if (v * best_sign > 0) sum += v, ++count;
    return count == 0 ? 0.0 : sum / count;
}

} // namespace

TEST(TaskArithmetic, Cases) {
    std::mt19937_64 gen(1);
    const auto base = random_f64(gen, {{16}});
    const std::vector<Checkpoint> fines{perturbed(gen, base, 0.3), perturbed(gen, base, 0.3)};
    const auto taus = taus_of(base, fines);
    EXPECT_EQ(payload(task_arithmetic(base, taus, 0.0)), payload(base));
    const std::vector<TaskVector> one{taus[0]};
    EXPECT_EQ(payload(task_arithmetic(base, one, 1.0)), payload(fines[0]));
    const auto m = flat(task_arithmetic(base, taus, 0.6));
    const auto b = flat(base), x = flat(fines[0]), y = flat(fines[1]);
    for (std::size_t d = 0; d < 16; ++d) EXPECT_NEAR(m[d], b[d] + 0.6 * ((x[d] - b[d]) + (y[d] - b[d])), 1e-12);
}

TEST(Ties, HandCase) {
    const auto base = vec({0.0});
    const std::vector<Checkpoint> fines{vec({2.0}), vec({-1.0})};
    EXPECT_EQ(flat(ties_merge(base, taus_of(base, fines), 1.0, 1.0))[0], 2.0);
}

TEST(Ties, SignPatternsBruteForce) {
    std::mt19937_64 gen(2);
    for (std::size_t k : {2u, 3u}) {
        const std::size_t patterns = std::size_t{1} << k;
        for (int draw = 0; draw < 4; ++draw) {
            for (std::size_t p = 0; p < patterns; ++p) {
                std::vector<double> base_v(8);
                for (auto& x : base_v) x = standard_normal(gen);
                const auto base = vec(base_v);
                std::vector<std::vector<double>> deltas(k, std::vector<double>(8));
                std::vector<Checkpoint> fines;
                for (std::size_t i = 0; i < k; ++i) {
                    std::vector<double> f(8);
                    for (std::size_t d = 0; d < 8; ++d) {
                        const std::size_t pattern = (p + d) % patterns;
                        // Small integers make exact sign-mass ties common.
                        const double mag = draw == 0 ? static_cast<double>(1 + gen() % 3) : 0.1 + uniform01(gen);
                        deltas[i][d] = (pattern >> i) & 1 ? -mag : mag;
                        f[d] = base_v[d] + deltas[i][d];
                        deltas[i][d] = f[d] - base_v[d];
                    }
                    fines.push_back(vec(f));
                }
                const auto m = flat(ties_merge(base, taus_of(base, fines), 1.0, 1.0));
                for (std::size_t d = 0; d < 8; ++d) {
                    std::vector<double> col;
                    for (std::size_t i = 0; i < k; ++i) col.push_back(deltas[i][d]);
                    EXPECT_NEAR(m[d], base_v[d] + ties_element(col), 1e-12) << "k " << k << " p " << p;
                }
            }
        }
    }
}

TEST(Ties, TrimFollowsSortOracle) {
    std::mt19937_64 gen(3);
    const auto base = random_f64(gen, {{20}});
    const std::vector<Checkpoint> fines{perturbed(gen, base, 1.0), perturbed(gen, base, 1.0),
                                        perturbed(gen, base, 1.0)};
    const double keep = 0.4;
    const auto m = flat(ties_merge(base, taus_of(base, fines), 0.8, keep));
    const auto b = flat(base);
    std::vector<std::vector<double>> trimmed;
    for (const auto& f : fines) {
        const auto fv = flat(f);
        std::vector<double> tau(20), mag(20);
        for (std::size_t d = 0; d < 20; ++d) tau[d] = fv[d] - b[d], mag[d] = std::abs(tau[d]);
        const auto kept = oracle::top_k(mag, 8);
        for (std::size_t d = 0; d < 20; ++d)
            if (!kept.count(d)) tau[d] = 0.0;
        trimmed.push_back(tau);
    }
    for (std::size_t d = 0; d < 20; ++d) {
        std::vector<double> col;
        for (const auto& t : trimmed)
            if (t[d] != 0.0) col.push_back(t[d]);
        EXPECT_NEAR(m[d], b[d] + 0.8 * ties_element(col), 1e-12);
    }
}

TEST(Ties, DegenerateCases) {
    std::mt19937_64 gen(4);
    const auto base = random_f64(gen, {{12}});
    const std::vector<Checkpoint> fines{perturbed(gen, base, 0.5), perturbed(gen, base, 0.5)};
    EXPECT_EQ(payload(ties_merge(base, taus_of(base, fines), 1.0, 0.05)), payload(base));
    const std::vector<Checkpoint> one{fines[0]};
    EXPECT_EQ(payload(ties_merge(base, taus_of(base, one), 1.0, 1.0)),
              payload(task_arithmetic(base, taus_of(base, one), 1.0)));
    const std::vector<Checkpoint> same{fines[0], fines[0]};
    EXPECT_EQ(payload(ties_merge(base, taus_of(base, same), 1.0, 1.0)), payload(fines[0]));
}

TEST(Breadcrumbs, HandCases) {
    const auto tau = Tensor({4}, std::vector<double>{9, -5, 3, 1});
    EXPECT_EQ(breadcrumbs_survivors(tau, 0.25, 0.75).indices(), (std::vector<std::size_t>{1, 2}));
    const auto flat_tau = Tensor({4}, std::vector<double>{2, -2, 2, -2});
    EXPECT_EQ(breadcrumbs_survivors(flat_tau, 0.25, 0.75).indices(), (std::vector<std::size_t>{1, 2}));
    EXPECT_THROW(breadcrumbs_survivors(tau, 0.5, 0.5), ConfigError);
}

TEST(Breadcrumbs, SurvivorCountsMatchSortOracle) {
    std::mt19937_64 gen(5);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + gen() % 200;
        std::vector<double> v(n), mag(n);
        for (std::size_t d = 0; d < n; ++d) {
            v[d] = trial % 4 == 0 ? static_cast<double>(gen() % 5) - 2 : standard_normal(gen);
            mag[d] = std::abs(v[d]);
        }
        const double top = 0.3 * uniform01(gen), keep = 0.5 + 0.5 * uniform01(gen);
        const auto lo = count_for_ratio(1.0 - keep, n), hi = count_for_ratio(top, n);
        const auto want = oracle::minus(oracle::top_k(mag, n - lo), oracle::top_k(mag, hi));
        const auto got = breadcrumbs_survivors(Tensor({n}, v), top, keep);
        EXPECT_EQ(oracle::to_set(got), want);
        EXPECT_EQ(got.count(), n - hi - lo);
    }
}

TEST(Breadcrumbs, NoSparsificationIsTaskArithmetic) {
    std::mt19937_64 gen(6);
    const auto base = random_f32(gen, {{10, 3}});
    const std::vector<Checkpoint> fines{perturbed(gen, base, 0.2), perturbed(gen, base, 0.2)};
    const auto taus = taus_of(base, fines);
    EXPECT_EQ(payload(breadcrumbs_merge(base, taus, 0.7, 0.0, 1.0)), payload(task_arithmetic(base, taus, 0.7)));
    EXPECT_EQ(payload(breadcrumbs_merge(base, taus, 0.0, 0.1, 0.9)), payload(base));
}

TEST(UniformAverage, Cases) {
    std::mt19937_64 gen(7);
    const auto a = random_f64(gen, {{16}});
    const std::vector<Checkpoint> same{a, a, a};
    EXPECT_EQ(payload(uniform_average(same)), payload(a));
    const auto b = random_f64(gen, {{16}});
    const std::vector<Checkpoint> two{a, b};
    const auto mid = flat(uniform_average(two));
    const auto av = flat(a), bv = flat(b);
    for (std::size_t d = 0; d < 16; ++d) EXPECT_NEAR(mid[d], (av[d] + bv[d]) / 2, 1e-15);
    const auto c = random_f64(gen, {{16}});
    const std::vector<Checkpoint> three{a, b, c};
    const auto m = flat(uniform_average(three));
    const auto cv = flat(c);
    for (std::size_t d = 0; d < 16; ++d) EXPECT_NEAR(m[d], (av[d] + bv[d] + cv[d]) / 3, 1e-12);
    const std::vector<Checkpoint> bad{a, random_f64(gen, {{15}})};
    EXPECT_THROW(uniform_average(bad), CompatError);
}

TEST(BaselineMerge, ReportsAndConfig) {
    std::mt19937_64 gen(8);
    const auto base = random_f32(gen, {{8, 8}});
    const std::vector<Checkpoint> fines{perturbed(gen, base, 0.1), perturbed(gen, base, 0.1)};
    const std::vector<std::string> names{"a", "b"};
    for (auto method : {BaselineMethod::TaskArithmetic, BaselineMethod::Ties, BaselineMethod::Breadcrumbs,
                        BaselineMethod::UniformAverage}) {
        BaselineConfig c;
        c.method = method;
        const auto res = baseline_merge(c, base, fines, names);
        const auto j = res.report.to_json();
        EXPECT_EQ(j["method"], baseline_method_name(method));
        EXPECT_TRUE(j["tasks"][0]["tensors"][0]["elected"].is_null());
        EXPECT_EQ(parse_baseline_method(baseline_method_name(method)), method);
        validate_compat(res.merged, base);
    }
    BaselineConfig ta;
    ta.lambda = 0.0;
    EXPECT_EQ(payload(baseline_merge(ta, base, fines, names).merged), payload(base));
    BaselineConfig avg;
    avg.method = BaselineMethod::UniformAverage;
    EXPECT_FALSE(baseline_merge(avg, base, fines, names).report.notes.empty());
    BaselineConfig bad;
    bad.method = BaselineMethod::Ties;
    bad.trim_keep_ratio = 0.0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = BaselineConfig{};
    bad.method = BaselineMethod::Breadcrumbs;
    bad.top_mask_ratio = 0.6;
    bad.keep_ratio = 0.4;
    EXPECT_THROW(bad.validate(), ConfigError);
    EXPECT_THROW(parse_baseline_method("model_stock"), ConfigError);
}
