#include <gtest/gtest.h>

#include <cmath>

#include "hwnas/pareto.hpp"

using namespace hwnas;

namespace {

std::vector<FrontEntry> entries(std::initializer_list<std::vector<double>> pts)
{
    std::vector<FrontEntry> out;
    std::uint64_t id = 0;
    for (const auto& p : pts)
        out.push_back({id++, p});
    return out;
}

std::vector<FrontEntry> random_entries(Rng& rng, std::size_t n, std::size_t d)
{
    std::vector<FrontEntry> out;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> v(d);
        for (auto& x : v)
            x = uniform01(rng);
        out.push_back({i, v});
    }
    return out;
}

/// All-pairs filter written independently of pareto_front.
std::vector<std::uint64_t> brute_force_front(const std::vector<FrontEntry>& es)
{
    std::vector<std::uint64_t> ids;
    for (std::size_t i = 0; i < es.size(); ++i) {
        bool dominated = false;
        for (std::size_t j = 0; j < es.size(); ++j) {
            bool le = true, lt = false;
            for (std::size_t k = 0; k < es[i].objectives.size(); ++k) {
                le = le && es[j].objectives[k] <= es[i].objectives[k];
                lt = lt || es[j].objectives[k] < es[i].objectives[k];
            }
            dominated = dominated || (le && lt);
        }
        if (!dominated)
            ids.push_back(es[i].id);
    }
    return ids;
}

std::vector<std::uint64_t> ids_of(const std::vector<FrontEntry>& es)
{
    std::vector<std::uint64_t> out;
    for (const auto& e : es)
        out.push_back(e.id);
    return out;
}

/// Monte-Carlo-free 2-d hypervolume by exact rectangle union on a grid of breakpoints.
double hv2_oracle(const std::vector<std::vector<double>>& pts, double rx, double ry)
{
    std::vector<double> xs{rx}, ys{ry};
    for (const auto& p : pts) {
        xs.push_back(p[0]);
        ys.push_back(p[1]);
    }
    std::sort(xs.begin(), xs.end());
    std::sort(ys.begin(), ys.end());
    double vol = 0.0;
    for (std::size_t i = 0; i + 1 < xs.size(); ++i)
        for (std::size_t j = 0; j + 1 < ys.size(); ++j) {
            const double cx = 0.5 * (xs[i] + xs[i + 1]), cy = 0.5 * (ys[j] + ys[j + 1]);
            bool covered = false;
            for (const auto& p : pts)
                covered = covered || (p[0] <= cx && p[1] <= cy && cx < rx && cy < ry);
            if (covered)
                vol += (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j]);
        }
    return vol;
}

} // namespace

TEST(Dominates, Examples)
{
    const std::vector<double> a{1, 2}, b{2, 2}, c{1, 3};
    EXPECT_TRUE(dominates(a, b));
    EXPECT_FALSE(dominates(b, a));
    EXPECT_FALSE(dominates(a, a));
    EXPECT_FALSE(dominates(c, b));
    EXPECT_FALSE(dominates(b, c));
}

TEST(Dominates, DimensionMismatch)
{
    const std::vector<double> a{1, 2}, b{1, 2, 3};
    try {
        (void)dominates(a, b);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::DimensionMismatch);
    }
}

TEST(ParetoFront, Examples)
{
    auto f = pareto_front(entries({{1, 2}, {2, 1}, {2, 2}}));
    EXPECT_EQ(ids_of(f), (std::vector<std::uint64_t>{0, 1}));

    auto same = pareto_front(entries({{3, 3}, {3, 3}, {3, 3}}));
    ASSERT_EQ(same.size(), 1u);
    EXPECT_EQ(same[0].id, 0u);

    EXPECT_THROW((void)pareto_front(std::vector<FrontEntry>{}), Error);
}

TEST(ParetoFront, MatchesBruteForceOnRandom5d)
{
    Rng rng(21);
    auto es = random_entries(rng, 200, 5);
    EXPECT_EQ(ids_of(pareto_front(es)), brute_force_front(es));
}

TEST(ParetoFront, NoMemberDominatesAnother)
{
    Rng rng(22);
    for (int t = 0; t < 20; ++t) {
        auto f = pareto_front(random_entries(rng, 100, 3));
        for (const auto& a : f)
            for (const auto& b : f)
                EXPECT_FALSE(dominates(a.objectives, b.objectives));
    }
}

TEST(ParetoFront, DominatedInsertionIsIdempotent)
{
    Rng rng(23);
    auto es = random_entries(rng, 80, 4);
    const auto before = ids_of(pareto_front(es));
    for (int k = 0; k < 50; ++k) {
        auto base = es[uniform_index(rng, es.size())].objectives;
        for (auto& x : base)
            x += 0.01 + uniform01(rng);
        es.push_back({1000u + static_cast<std::uint64_t>(k), base});
        EXPECT_EQ(ids_of(pareto_front(es)), before);
    }
}

TEST(IdealPoint, TwoPointFront)
{
    auto f = entries({{1, 4}, {3, 2}});
    EXPECT_EQ(ideal_point(f), (std::vector<double>{1, 2}));
    auto n = normalize(f);
    EXPECT_EQ(n[0], (std::vector<double>{0, 1}));
    EXPECT_EQ(n[1], (std::vector<double>{1, 0}));
    EXPECT_DOUBLE_EQ(worst_objective_score(f[0], f), 1.0);
    EXPECT_DOUBLE_EQ(worst_objective_score(f[1], f), 1.0);
}

TEST(IdealPoint, IdealMemberScoresZero)
{
    auto f = entries({{1, 1}, {3, 2}, {2, 5}});
    EXPECT_DOUBLE_EQ(worst_objective_score(f[0], f), 0.0);
}

TEST(IdealPoint, BalancedSelection)
{
    auto f = entries({{0, 1}, {1, 0}, {0.3, 0.4}});
    EXPECT_DOUBLE_EQ(worst_objective_score(f[2], f), 0.4);
    std::size_t best = 0;
    for (std::size_t i = 1; i < f.size(); ++i)
        if (worst_objective_score(f[i], f) < worst_objective_score(f[best], f))
            best = i;
    EXPECT_EQ(best, 2u);
}

TEST(IdealPoint, ConstantDimensionMapsToZero)
{
    auto f = entries({{1, 7}, {2, 7}});
    EXPECT_EQ(normalize(f)[1], (std::vector<double>{1, 0}));
    EXPECT_THROW((void)ideal_point(std::vector<FrontEntry>{}), Error);
}

TEST(IdealPoint, ScoreInvariantUnderIncreasingAffineRescaling)
{
    Rng rng(24);
    for (int t = 0; t < 50; ++t) {
        auto f = pareto_front(random_entries(rng, 60, 4));
        auto g = f;
        const std::size_t dim = uniform_index(rng, 4);
        const double scale = 0.1 + 10.0 * uniform01(rng), shift = uniform(rng, -5, 5);
        for (auto& e : g)
            e.objectives[dim] = scale * e.objectives[dim] + shift;
        for (std::size_t i = 0; i < f.size(); ++i)
            EXPECT_NEAR(worst_objective_score(f[i], f), worst_objective_score(g[i], g), 1e-12);
    }
}

TEST(Hypervolume, MatchesGridOracleIn2d)
{
    Rng rng(25);
    for (int t = 0; t < 20; ++t) {
        std::vector<std::vector<double>> pts;
        for (int i = 0; i < 15; ++i)
            pts.push_back({uniform01(rng), uniform01(rng)});
        const std::vector<double> ref{1.1, 1.2};
        EXPECT_NEAR(hypervolume(pts, ref), hv2_oracle(pts, 1.1, 1.2), 1e-12);
    }
}

TEST(Hypervolume, BoxesAndUnions)
{
    const std::vector<double> ref{1, 1, 1};
    std::vector<std::vector<double>> one{{0.5, 0.5, 0.5}};
    EXPECT_DOUBLE_EQ(hypervolume(one, ref), 0.125);
    std::vector<std::vector<double>> two{{0.5, 0.5, 0.5}, {0, 0.5, 0.5}};
    EXPECT_DOUBLE_EQ(hypervolume(two, ref), 0.25);
    std::vector<std::vector<double>> outside{{1.5, 0, 0}};
    EXPECT_DOUBLE_EQ(hypervolume(outside, ref), 0.0);
    // inclusion-exclusion for two overlapping boxes
    std::vector<std::vector<double>> pair{{0.2, 0.6, 0.4}, {0.5, 0.3, 0.1}};
    const double a = 0.8 * 0.4 * 0.6, b = 0.5 * 0.7 * 0.9, both = 0.5 * 0.4 * 0.6;
    EXPECT_NEAR(hypervolume(pair, ref), a + b - both, 1e-15);
}

TEST(Hypervolume, NonDecreasingWhenFrontAbsorbsCandidates)
{
    Rng rng(26);
    auto pop = pareto_front(random_entries(rng, 20, 5));
    const std::vector<double> ref(5, 1.0);
    auto points = [](const std::vector<FrontEntry>& f) {
        std::vector<std::vector<double>> p;
        for (const auto& e : f)
            p.push_back(e.objectives);
        return p;
    };
    double prev = hypervolume(points(pop), ref);
    std::uint64_t next_id = 100;
    for (int it = 0; it < 15; ++it) {
        auto merged = pop;
        for (int k = 0; k < 5; ++k) {
            std::vector<double> v(5);
            for (auto& x : v)
                x = uniform01(rng);
            merged.push_back({next_id++, v});
        }
        pop = pareto_front(merged);
        const double cur = hypervolume(points(pop), ref);
        EXPECT_GE(cur, prev - 1e-12);
        prev = cur;
    }
}

TEST(Density, DegenerateSamples)
{
    std::vector<std::vector<double>> same{{1, 2}, {1, 2}, {1, 2}};
    try {
        (void)fit_density(same);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::DegenerateDensity);
    }
    std::vector<std::vector<double>> one{{1, 2}};
    EXPECT_THROW((void)fit_density(one), Error);
}

TEST(Density, PositiveEverywhereAndScottBandwidth)
{
    std::vector<std::vector<double>> s{{0}, {0.5}, {1}};
    auto m = fit_density(s);
    EXPECT_NEAR(m.bandwidth()[0], 0.5 * std::pow(3.0, -0.2), 1e-15);
    EXPECT_GT(m.density(std::vector<double>{3.0}), 0.0);
    EXPECT_TRUE(std::isfinite(m.log_density(std::vector<double>{1e6})));
}

TEST(Density, IsolatedPointIsMostLikely)
{
    Rng rng(27);
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 10; ++i)
        pts.push_back({0.1 + 0.001 * uniform01(rng), 0.1 + 0.001 * uniform01(rng)});
    for (int i = 0; i < 10; ++i)
        pts.push_back({0.9 + 0.001 * uniform01(rng), 0.2 + 0.001 * uniform01(rng)});
    pts.push_back({0.5, 0.9});
    auto m = fit_density(pts);
    auto w = anti_proportional_weights(m, pts);
    EXPECT_EQ(std::max_element(w.begin(), w.end()) - w.begin(), 20);
}

TEST(Density, NearUniformSelectionOnAGrid)
{
    // Dense 2-d reference grid; candidates sit in the interior, several
    // bandwidths away from the edges, where the estimate is flat.
    std::vector<std::vector<double>> grid;
    for (int i = 0; i <= 30; ++i)
        for (int j = 0; j <= 30; ++j)
            grid.push_back({i / 30.0, j / 30.0});
    auto m = fit_density(grid);
    std::vector<std::vector<double>> cands;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            cands.push_back({(13 + 2 * i) / 30.0, (13 + 2 * j) / 30.0});
    Rng rng(28);
    const int draws = 10000;
    std::vector<int> hits(cands.size(), 0);
    for (int d = 0; d < draws; ++d)
        ++hits[sample_anti_proportional(m, cands, 1, rng)[0]];
    const double p = 1.0 / static_cast<double>(cands.size());
    const double sigma = std::sqrt(p * (1 - p) / draws);
    for (int h : hits)
        EXPECT_LE(std::abs(h / double(draws) - p), 3 * sigma);
}

TEST(Density, FullCountReturnsEverything)
{
    std::vector<std::vector<double>> pts{{0}, {1}, {2}, {10}};
    auto m = fit_density(pts);
    Rng rng(1);
    auto all = sample_anti_proportional(m, pts, pts.size(), rng);
    EXPECT_EQ(all, (std::vector<std::size_t>{0, 1, 2, 3}));
    EXPECT_THROW((void)sample_anti_proportional(m, pts, 5, rng), Error);
}

TEST(Density, SamplingIsReproducibleAndWithoutReplacement)
{
    Rng gen(29);
    std::vector<std::vector<double>> pts;
    for (int i = 0; i < 40; ++i)
        pts.push_back({uniform01(gen), uniform01(gen), uniform01(gen)});
    auto m = fit_density(pts);
    Rng a(99), b(99);
    auto pa = sample_anti_proportional(m, pts, 15, a);
    auto pb = sample_anti_proportional(m, pts, 15, b);
    EXPECT_EQ(pa, pb);
    std::sort(pa.begin(), pa.end());
    EXPECT_EQ(std::unique(pa.begin(), pa.end()), pa.end());
}
