#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <omp.h>

#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "rbt/random_batch.hpp"

using namespace rbt;

TEST_CASE("philox4x32-10 known answers") {
    // published Random123 known-answer vectors
    using C = Philox4x32::Counter;
    CHECK(Philox4x32::block({0, 0, 0, 0}, {0, 0}) == C{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8});
    CHECK(Philox4x32::block({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, {0xffffffff, 0xffffffff}) ==
          C{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd});
    CHECK(Philox4x32::block({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, {0xa4093822, 0x299f31d0}) ==
          C{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1});
}

TEST_CASE("full plan draws everything") {
    BatchPlan plan{Strategy::per_time_step, 12, 12, 99, 0};
    std::vector<int> all(12);
    std::iota(all.begin(), all.end(), 0);
    for (int m = 0; m < 3; ++m)
        for (int k = 0; k < 5; ++k) {
            CHECK(draw(plan, m, k, Role::forward).indices == all);
            CHECK(draw(plan, m, k, Role::adjoint).indices == all);
        }
}

TEST_CASE("draws are pure functions of their keys") {
    BatchPlan plan{Strategy::per_time_step, 50, 7, 2024, 3};
    auto a = draw(plan, 4, 9, Role::forward);
    CHECK(a.indices.size() == 7);
    CHECK(std::is_sorted(a.indices.begin(), a.indices.end()));
    CHECK(std::adjacent_find(a.indices.begin(), a.indices.end()) == a.indices.end());
    CHECK(draw(plan, 4, 9, Role::forward).indices == a.indices);
    CHECK(draw(plan, 4, 9, Role::adjoint).indices != a.indices);
    CHECK(draw(plan, 4, 10, Role::forward).indices != a.indices);
    CHECK(draw(plan.with_lane(4), 4, 9, Role::forward).indices != a.indices);

    // call order and thread count do not matter
    std::vector<std::vector<int>> serial(200), par(200);
    for (int i = 0; i < 200; ++i) serial[i] = draw(plan, i / 20, i % 20, Role::forward).indices;
    for (int t : {1, 2, 3}) {
        omp_set_num_threads(t);
#pragma omp parallel for schedule(dynamic, 3)
        for (int i = 199; i >= 0; --i) par[i] = draw(plan, i / 20, i % 20, Role::forward).indices;
        CHECK(par == serial);
    }
}

TEST_CASE("per-iteration strategy reuses the batch over steps") {
    BatchPlan plan{Strategy::per_iteration, 40, 8, 5, 0};
    for (int m = 0; m < 5; ++m) {
        CHECK(draw(plan, m, 1, Role::forward).indices == draw(plan, m, 7, Role::forward).indices);
        CHECK(draw(plan, m, 1, Role::adjoint).indices == draw(plan, m, 30, Role::adjoint).indices);
        // forward and adjoint still independent
        CHECK(draw(plan, m, 1, Role::forward).indices != draw(plan, m, 1, Role::adjoint).indices);
    }
    CHECK(draw(plan, 0, 1, Role::forward).indices != draw(plan, 1, 1, Role::forward).indices);
}

TEST_CASE("marginal inclusion probability") {
    const int N = 20, p = 5, draws = 100000;
    BatchPlan plan{Strategy::per_time_step, N, p, 77, 0};
    std::vector<int> count(N, 0);
    for (int m = 0; m < draws; ++m)
        for (int j : draw(plan, m, 1, Role::forward).indices) ++count[j];
    const double q = double(p) / N, tol = 3.0 * std::sqrt(q * (1 - q) / draws);
    for (int j = 0; j < N; ++j) CHECK(std::abs(double(count[j]) / draws - q) <= tol);
}

TEST_CASE("strategy-1 overlaps follow the hypergeometric law") {
    // overlap of two independent 4-subsets of 10 items
    const int N = 10, p = 4, draws = 4000;
    BatchPlan plan{Strategy::per_time_step, N, p, 31337, 0};
    std::vector<int> hist(p + 1, 0);
    for (int m = 0; m < draws; ++m) {
        auto a = draw(plan, m, 1, Role::forward).indices, b = draw(plan, m, 2, Role::forward).indices;
        std::vector<int> both;
        std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
        ++hist[both.size()];
    }
    double chi2 = 0.0;
    for (int j = 0; j <= p; ++j) {
        double e = draws * binomial(p, j) * binomial(N - p, p - j) / binomial(N, p);
        chi2 += (hist[j] - e) * (hist[j] - e) / e;
    }
    CHECK(chi2 < 9.488);  // chi-square, 4 degrees of freedom, 5% level
}

TEST_CASE("enumeration") {
    CHECK(enumerate_batches(4, 2).size() == 6);
    CHECK(enumerate_batches(6, 2).size() == 15);
    for (auto [N, p] : {std::pair{7, 3}, std::pair{9, 4}, std::pair{5, 5}}) {
        auto all = enumerate_batches(N, p);
        CHECK(double(all.size()) == binomial(N, p));
        std::vector<int> seen(N, 0);
        for (auto& b : all)
            for (int j : b) ++seen[j];
        for (int j = 0; j < N; ++j) CHECK(seen[j] == binomial(N - 1, p - 1));
    }
    CHECK_THROWS_AS(enumerate_batches(40, 20), BatchError);
}

namespace {

BeamSamples gaussian_samples(int K, int N, int P, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.3, 1.0);
    BeamSamples s(K, N, P);
    for (double& v : s.v) v = nd(rng);
    return s;
}

}  // namespace

TEST_CASE("batch means are exactly unbiased over the enumeration") {
    auto s = gaussian_samples(2, 7, 5, 1);
    auto subsets = enumerate_batches(7, 3);
    for (int k = 0; k < 2; ++k)
        for (int x = 0; x < 5; ++x) {
            double full = 0.0, avg = 0.0;
            for (int j = 0; j < 7; ++j) full += s.at(k, j, x) / 7;
            for (auto& b : subsets) {
                double m = 0.0;
                for (int j : b) m += s.at(k, j, x) / 3;
                avg += m / double(subsets.size());
            }
            CHECK(std::abs(avg - full) <= 1e-12 * std::max(1.0, std::abs(full)));
        }
}

TEST_CASE("chi") {
    Grid g = Grid::make2d(3, 3, 1, 1);
    ScalarField a(g, Units::kernel), b(g, Units::kernel);
    for (std::size_t i = 0; i < g.size(); ++i) {
        a[i] = std::sin(double(i));
        b[i] = std::cos(double(i));
    }
    auto z = chi(a, a);
    for (double v : z.values) CHECK(v == 0.0);
    auto ab = chi(a, b), ba = chi(b, a);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(ab[i] == -ba[i]);
}

TEST_CASE("lambda statistic edge cases") {
    BeamSamples f(3, 5, 2), a(3, 5, 2);
    for (int k = 0; k < 3; ++k)
        for (int j = 0; j < 5; ++j)
            for (int x = 0; x < 2; ++x) {
                f.at(k, j, x) = 1.5 + k + x;
                a.at(k, j, x) = -0.5 * k + x;
            }
    for (double v : lambda_stat(f, a, 2, 0.1)) CHECK(v == 0.0);
    auto r = gaussian_samples(3, 5, 2, 9), q = gaussian_samples(3, 5, 2, 10);
    for (double v : predicted_chi_variance(r, q, 5, 0.1)) CHECK(v == 0.0);
    CHECK_THROWS_AS(lambda_stat(r, q, 6, 0.1), BatchError);
}

TEST_CASE("variance identity by enumeration, N = 4, p = 2, three steps") {
    const double tau = 0.01;
    auto f = gaussian_samples(3, 4, 6, 11), a = gaussian_samples(3, 4, 6, 12);
    auto mom = exact_chi_moments(f, a, 2, tau);
    CHECK(mom.combinations == std::pow(36.0, 3));
    auto pred = predicted_chi_variance(f, a, 2, tau);
    auto K = kernel_from_samples(f, a, tau);
    double kmax = 0.0;
    for (double v : K) kmax = std::max(kmax, std::abs(v));
    for (int x = 0; x < 6; ++x) {
        CHECK(std::abs(mom.second[x] - pred[x]) <= 1e-10 * pred[x]);
        CHECK(std::abs(mom.mean[x]) <= 1e-13 * kmax);
    }
}

TEST_CASE("plan validation") {
    CHECK_THROWS_AS((BatchPlan{Strategy::per_time_step, 10, 0, 1, 0}.validate()), BatchError);
    CHECK_THROWS_AS((BatchPlan{Strategy::per_time_step, 10, 11, 1, 0}.validate()), BatchError);
    CHECK_NOTHROW((BatchPlan{Strategy::per_iteration, 10, 10, 1, 0}.validate()));
    CHECK(strategy_from_name("per-time-step") == Strategy::per_time_step);
    CHECK(strategy_from_name("per-iteration") == Strategy::per_iteration);
    CHECK_THROWS_AS(strategy_from_name("both"), BatchError);
}
