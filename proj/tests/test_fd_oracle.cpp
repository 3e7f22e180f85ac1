#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <omp.h>

#include <cmath>
#include <random>

#include "rbt/fd_oracle.hpp"

using namespace rbt;

namespace {

const Grid kDomain = Grid::make2d(32, 32, 99, 99);

FDConfig reflecting(double h, double c) {
    FDConfig cfg;
    cfg.grid = padded_grid(kDomain, h, 0);
    cfg.boundary = Boundary::reflecting;
    cfg.sponge_cells = 0;
    cfg.dt = stable_dt(cfg.grid, c, 0.9);
    return cfg;
}

FdSource impulse(const Vec3& x, double c, double eps = 0.025) {
    FdSource s;
    s.kind = FdSource::Kind::impulse;
    s.x_s = x;
    s.c_s = c;
    s.fga.eps = eps;
    // enough directions and shells that quadrature replicas of the pulse stay
    // outside the domain
    auto bc = suggest_counts(s.fga, 2500);
    s.fga.n_dir = bc.n_dir;
    s.fga.n_shell = bc.n_shell;
    return s;
}

double onset(const std::vector<double>& tr, double tau) {
    double pk = 0.0;
    for (double v : tr) pk = std::max(pk, std::abs(v));
    for (std::size_t k = 0; k < tr.size(); ++k)
        if (std::abs(tr[k]) >= 0.01 * pk) return k * tau;
    return -1.0;
}

}  // namespace

TEST_CASE("no source, no field") {
    auto cfg = reflecting(24, 2500);
    ScalarField c(cfg.grid, Units::velocity, 2500);
    FdRequest rq;
    rq.receivers = {{1000, 1000, 0}, {2000, 2500, 0}};
    rq.tau = 0.01;
    rq.n_steps = 40;
    rq.snapshot_steps = {20};
    auto r = fd_solve(c, FdSource{}, cfg, rq);
    for (auto& t : r.record.traces)
        for (double v : t) CHECK(v == 0.0);
    for (double v : r.snapshots[0]) CHECK(v == 0.0);
}

TEST_CASE("first arrival at the ray time") {
    const double c = 2500, h = 6;
    auto cfg = reflecting(h, c);
    ScalarField cf(cfg.grid, Units::velocity, c);
    FdRequest rq;
    // sample at the FD step itself so the tolerance is two FD steps
    rq.tau = cfg.dt;
    rq.n_steps = int(0.8 / cfg.dt);
    const Vec3 xs{1584, 600, 0};
    rq.receivers = {{1584, 600 + 1584, 0}, {1584, 600 + 1000, 0}};
    auto src = impulse(xs, c, 0.004);
    auto r = fd_solve(cf, src, cfg, rq);
    double t0 = onset(r.record.traces[0], rq.tau), t1 = onset(r.record.traces[1], rq.tau);
    const double sigma_t = src.fga.eps * src.fga.ell / (c * src.fga.band_width);
    const double lead = std::sqrt(2 * std::log(100.0)) * sigma_t;
    CHECK(t0 >= 1584 / c - lead - 2 * cfg.dt);
    CHECK(t0 <= 1584 / c + 2 * cfg.dt);
    CHECK(std::abs((t0 - t1) - 584 / c) <= 2 * cfg.dt);
}

TEST_CASE("grid refinement converges at second order") {
    const double c = 2500;
    FdRequest rq;
    rq.receivers = {{2200, 1584, 0}, {1584, 2400, 0}, {1000, 1000, 0}};
    rq.tau = 0.004;
    rq.n_steps = 100;
    std::vector<SeismicRecord> recs;
    for (double h : {24.0, 12.0, 6.0}) {
        auto cfg = reflecting(h, c);
        ScalarField cf(cfg.grid, Units::velocity, c);
        recs.push_back(fd_solve(cf, impulse({1584, 1584, 0}, c), cfg, rq).record);
    }
    double e1 = compare_fields(recs[0], recs[1]), e2 = compare_fields(recs[1], recs[2]);
    CHECK(std::log2(e1 / e2) >= 1.7);
}

TEST_CASE("energy is conserved with reflecting walls") {
    const double c = 2500;
    auto cfg = reflecting(24, c);
    ScalarField cf(cfg.grid, Units::velocity, c);
    // a mild velocity contrast so the test is not only the homogeneous case
    for (std::size_t i = 0; i < cf.size(); ++i)
        if (cfg.grid.center(i)[1] > 2000) cf[i] = 3000;
    cfg.dt = stable_dt(cfg.grid, 3000, 0.9);
    FdRequest rq;
    rq.receivers = {{1000, 1000, 0}};
    rq.tau = 0.01;
    rq.n_steps = 200;  // 2 s, several wall reflections
    rq.track_energy = true;
    auto r = fd_solve(cf, impulse({1584, 1584, 0}, c), cfg, rq);
    REQUIRE(r.energy.size() > 10);
    double e0 = r.energy.front(), worst = 0.0;
    for (double e : r.energy) worst = std::max(worst, std::abs(e - e0) / e0);
    CHECK(worst < 0.01);
}

TEST_CASE("reciprocity in a homogeneous medium") {
    const double c = 2500;
    auto cfg = reflecting(12, c);
    ScalarField cf(cfg.grid, Units::velocity, c);
    // cell centres placed symmetrically about the domain centre
    const Vec3 a{1590, 1014, 0}, b{1590, 2154, 0};
    FdRequest rq;
    rq.tau = 0.004;
    rq.n_steps = 150;
    rq.receivers = {b};
    auto ab = fd_solve(cf, impulse(a, c), cfg, rq).record;
    rq.receivers = {a};
    auto ba = fd_solve(cf, impulse(b, c), cfg, rq).record;
    CHECK(compare_fields(ab, ba) <= 1e-3);
}

TEST_CASE("absorbing sponge removes the wall reflection") {
    const double c = 2500, h = 12;
    const int pad = int(1500 / h);
    FdRequest rq;
    rq.tau = 0.004;
    rq.n_steps = 400;
    rq.receivers = {{1584, 1584, 0}};
    auto wall_window = [&](const FDConfig& cfg) {
        ScalarField cf(cfg.grid, Units::velocity, c);
        auto tr = fd_solve(cf, impulse({1584, 1584, 0}, c), cfg, rq).record.traces[0];
        // the echo off the nearest wall returns at 2 * 1584 / c
        double e = 0.0;
        for (int k = 0; k <= rq.n_steps; ++k)
            if (std::abs(k * rq.tau - 2 * 1584 / c) < 0.12) e += tr[k] * tr[k];
        return e;
    };
    FDConfig sp;
    sp.grid = padded_grid(kDomain, h, pad);
    sp.sponge_cells = pad;
    sp.sponge_strength = sponge_strength_for(pad);
    sp.dt = stable_dt(sp.grid, c);
    double absorbed = wall_window(sp), reflected = wall_window(reflecting(h, c));
    CHECK(absorbed < 0.01 * reflected);
}

TEST_CASE("compare_fields") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> nd;
    std::vector<double> b(20000);
    for (double& v : b) v = std::sin(0.01 * (&v - b.data())) + 0.2;
    CHECK(compare_fields(b, b) == 0.0);
    std::vector<double> a2 = b;
    for (double& v : a2) v *= 2;
    CHECK(compare_fields(a2, b) == doctest::Approx(1.0).epsilon(1e-14));
    double nb = 0.0;
    for (double v : b) nb += v * v;
    const double rms = 0.1 * std::sqrt(nb / b.size());
    std::vector<double> noisy = b;
    for (double& v : noisy) v += rms * nd(rng);
    CHECK(std::abs(compare_fields(noisy, b) - 0.1) <= 0.01);
}

TEST_CASE("laplacian: parallel equals reference, exact on quadratics") {
    Grid g = Grid::make2d(40, 30, 2.0, 3.0);
    std::vector<double> u(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        Vec3 x = g.center(i);
        u[i] = 0.5 * x[0] * x[0] - 0.25 * x[1] * x[1] + x[0] * x[1];
    }
    for (int order : {2, 4}) {
        std::vector<double> ref, par;
        laplacian_reference(g, order, u, ref);
        for (int t : {1, 3}) {
            omp_set_num_threads(t);
            std::vector<double> par1;
            laplacian(g, order, u, par);
            omp_set_num_threads(1);
            laplacian(g, order, u, par1);
            CHECK(par == par1);
            // only summation order differs; round-off is relative to |u| / h^2
            double umax = 0.0, worst = 0.0;
            for (double v : u) umax = std::max(umax, std::abs(v));
            for (std::size_t i = 0; i < g.size(); ++i) worst = std::max(worst, std::abs(par[i] - ref[i]));
            CHECK(worst <= 1e-13 * umax / 4.0);
        }
        // interior cells away from the zero ghosts see 1 - 0.5
        for (int i = 3; i < 37; ++i)
            for (int k = 3; k < 27; ++k) CHECK(ref[g.index(i, k)] == doctest::Approx(0.5).epsilon(1e-9));
    }
}

TEST_CASE("invalid configurations") {
    auto cfg = reflecting(24, 2500);
    ScalarField c(cfg.grid, Units::velocity, 2500);
    FdRequest rq;
    rq.tau = 0.01;
    rq.n_steps = 5;
    rq.receivers = {{-50, 10, 0}};
    CHECK_THROWS_AS(fd_solve(c, FdSource{}, cfg, rq), FdError);
    rq.receivers = {{100, 100, 0}};
    cfg.dt = 1.0;  // far beyond CFL
    CHECK_THROWS_AS(fd_solve(c, FdSource{}, cfg, rq), FdError);
}
