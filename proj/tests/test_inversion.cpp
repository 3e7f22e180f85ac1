#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <omp.h>

#include <cmath>
#include <random>

#include "rbt/cli_io.hpp"
#include "rbt/inversion.hpp"

using namespace rbt;

namespace {

ScalarField random_field(const Grid& g, double mean, double spread, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-spread, spread);
    ScalarField f(g, Units::dimensionless, 0.0);
    for (double& v : f.values) v = mean + u(rng);
    return f;
}

const VelocityBounds kBounds{1000.0, 5000.0};

double dot(const ScalarField& a, const ScalarField& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

RunConfig smoke() {
    auto c = parse_config_text(R"(
preset = gaussian-two-bump-2d
dims = 24 24
spacing = 132 132
source = 1584 400
receiver = 600 2800
receiver = 1584 2800
receiver = 2568 2800
n_dir = 24
n_shell = 4
tau = 0.02
T = 1.2
observations = fga
iterations = 2
seed = 11
)");
    return c;
}

}  // namespace

TEST_CASE("regularizer") {
    const Grid g = Grid::make2d(6, 5, 10, 10);
    RegularizerSpec spec;
    spec.r = 0.7;
    spec.X_ref = random_field(g, -15.6, 0.2, 1);
    CHECK(regularizer_value(spec.X_ref, spec) == 0.0);
    for (double v : regularizer_grad(spec.X_ref, spec).values) CHECK(v == 0.0);

    auto X = random_field(g, -15.6, 0.2, 2);
    auto dX = random_field(g, 0.0, 1.0, 3);
    auto G = regularizer_grad(X, spec);
    for (double h : {1e-2, 1e-3}) {
        ScalarField xp = X, xm = X;
        for (std::size_t i = 0; i < X.size(); ++i) {
            xp[i] += h * dX[i];
            xm[i] -= h * dX[i];
        }
        double fd = (regularizer_value(xp, spec) - regularizer_value(xm, spec)) / (2 * h);
        CHECK(fd == doctest::Approx(dot(G, dX)).epsilon(1e-6));
    }

    RegularizerSpec off = spec;
    off.r = 0.0;
    CHECK_THROWS_AS(regularizer_grad(X, off), InversionError);
    CHECK_THROWS_AS(regularizer_value(X, off), InversionError);
}

TEST_CASE("gradient descent step") {
    const Grid g = Grid::make2d(4, 4, 10, 10);
    RegularizerSpec spec;
    spec.r = 0.3;
    spec.X_ref = random_field(g, -15.6, 0.1, 4);
    ScalarField zero(g, Units::kernel, 0.0);

    InversionState st;
    st.X = spec.X_ref;
    auto fixed = step_gd(st, zero, spec, 0.5, kBounds);
    CHECK(fixed.X.values == st.X.values);
    CHECK(fixed.m == 1);

    st.X = random_field(g, -15.6, 0.1, 5);
    auto K = random_field(g, 0.0, 0.05, 6);
    auto still = step_gd(st, K, spec, 0.0, kBounds);
    CHECK(still.X.values == st.X.values);
    CHECK(still.m == 1);

    // frozen K and grad V: two alpha steps equal one 2 alpha step
    RegularizerSpec none;
    none.X_ref = spec.X_ref;
    auto one = step_gd(step_gd(st, K, none, 0.1, kBounds), K, none, 0.1, kBounds);
    auto two = step_gd(st, K, none, 0.2, kBounds);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(one.X[i] == doctest::Approx(two.X[i]).epsilon(1e-14));
    CHECK(one.m == 2);

    // bounds: a huge step is clipped and counted
    ScalarField big(g, Units::kernel, -100.0);
    auto clipped = step_gd(st, big, none, 1.0, kBounds);
    CHECK(clipped.last_clipped == g.size());
    for (double v : clipped.X.values) CHECK(v == doctest::Approx(kBounds.X_hi()));
}

TEST_CASE("L-BFGS on a quadratic") {
    const Grid g = Grid::make2d(2, 2, 1, 1);
    const auto Xs = random_field(g, -15.6, 0.2, 7);
    auto J = [&](const ScalarField& X) {
        double s = 0.0;
        for (std::size_t i = 0; i < X.size(); ++i) s += 0.5 * (X[i] - Xs[i]) * (X[i] - Xs[i]);
        return s;
    };
    auto grad = [&](const ScalarField& X) {
        ScalarField G(g, Units::kernel, 0.0);
        for (std::size_t i = 0; i < X.size(); ++i) G[i] = X[i] - Xs[i];
        return G;
    };
    InversionState st;
    st.X = ScalarField(g, Units::dimensionless, -15.6);
    st.alpha = 0.3;
    double Jv = J(st.X);
    int it = 0;
    double err = 1.0;
    while (it < 6 && err > 1e-8) {
        auto r = step_lbfgs(st, grad(st.X), Jv, J, {}, kBounds);
        st = r.state;
        Jv = r.J;
        ++it;
        err = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) err = std::max(err, std::abs(st.X[i] - Xs[i]));
    }
    CHECK(err <= 1e-8);
    CHECK(it <= int(g.size()) + 2);

    // memory 0: the first trial is the steepest-descent step of length alpha
    InversionState s0;
    s0.X = ScalarField(g, Units::dimensionless, -15.6);
    s0.alpha = 0.3;
    s0.prev_X = std::vector<double>(4, -15.5);
    s0.prev_grad = std::vector<double>(4, 0.3);
    LbfgsOptions mem0;
    mem0.memory = 0;
    auto G = grad(s0.X);
    auto r0 = step_lbfgs(s0, G, J(s0.X), J, mem0, kBounds);
    CHECK(r0.state.pairs.empty());
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(r0.state.X[i] == doctest::Approx(s0.X[i] - 0.3 * G[i]).epsilon(1e-14));
    std::deque<LbfgsPair> empty;
    auto d = lbfgs_direction(empty, G.values);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(d[i] == -G[i]);

    ScalarField zero(g, Units::kernel, 0.0);
    auto rz = step_lbfgs(s0, zero, J(s0.X), J, {}, kBounds);
    CHECK(rz.state.X.values == s0.X.values);
}

TEST_CASE("acquisition taper") {
    const Grid g = Grid::make2d(20, 20, 50, 50);
    Acquisition acq;
    acq.sources = {{500, 500, 0}};
    acq.receivers = {{25, 975, 0}};
    auto w = acquisition_taper(g, acq, 100);
    for (std::size_t i = 0; i < g.size(); ++i) {
        Vec3 x = g.center(i);
        double d = std::min(std::hypot(x[0] - 500, x[1] - 500), std::hypot(x[0] - 25, x[1] - 975));
        if (d <= 100) CHECK(w[i] == 0.0);
        if (d >= 200) CHECK(w[i] == 1.0);
        CHECK(w[i] >= 0.0);
        CHECK(w[i] <= 1.0);
    }
}

TEST_CASE("deviation norm") {
    std::vector<std::vector<double>> det{{1, 2, 3}, {2, 3, 4}};
    CHECK(deviation_norm({det, det}, det, 2.0) == std::vector<double>{0.0, 0.0});
    auto shifted = det;
    for (auto& v : shifted[1]) v += 1.0;
    auto d = deviation_norm({det, shifted}, det, 2.0);
    CHECK(d[0] == 0.0);
    // mean over replicates of 3 cells * 2 volume * 1^2 = 3
    CHECK(d[1] == doctest::Approx(std::sqrt(3.0)));
    CHECK_THROWS_AS(deviation_norm(std::vector<std::vector<std::vector<double>>>{}, det, 1.0), InversionError);
}

TEST_CASE("frozen toy") {
    BeamSamples f(3, 6, 2), a(3, 6, 2);
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd;
    for (double& v : f.v) v = nd(rng);
    for (double& v : a.v) v = nd(rng);
    FrozenToy toy{f, a, 0.1, 1.0, {0.0, 0.0}, {0.5, -0.5}};
    auto det = frozen_toy_run(toy, 0.1, 5, nullptr);
    REQUIRE(det.size() == 6);
    // deterministic update: fixed point X_ref - K / r
    auto K = kernel_from_samples(f, a, 0.1);
    auto x = toy.X0;
    for (int m = 0; m < 5; ++m)
        for (int i = 0; i < 2; ++i) x[i] -= 0.1 * (K[i] + (x[i] - 0.0));
    CHECK(det[5][0] == doctest::Approx(x[0]).epsilon(1e-14));
    BatchPlan full{Strategy::per_time_step, 6, 6, 3, 0};
    CHECK(frozen_toy_run(toy, 0.1, 5, &full) == det);
    BatchPlan part{Strategy::per_time_step, 6, 2, 3, 0};
    CHECK(frozen_toy_run(toy, 0.1, 5, &part) == frozen_toy_run(toy, 0.1, 5, &part));
    CHECK(frozen_toy_run(toy, 0.1, 5, &part) != det);
}

TEST_CASE("inversion pipeline: full batch, reproducibility, thread independence") {
    auto rc = smoke();
    auto cfg = to_inversion_config(rc);
    auto obs = make_observations(cfg);

    auto det_cfg = cfg;
    det_cfg.plan.reset();
    auto det = run_inversion(det_cfg, obs);
    REQUIRE(det.error.empty());
    REQUIRE(det.state.history.size() == 3);
    CHECK(det.state.history.back() < det.state.history.front());
    CHECK_FALSE(det.clip_failure);

    // p = N, under both strategies
    for (Strategy s : {Strategy::per_time_step, Strategy::per_iteration}) {
        auto full = cfg;
        full.plan = BatchPlan{s, cfg.fga.beam_count(), cfg.fga.beam_count(), 5, 0};
        auto r = run_inversion(full, obs);
        CHECK(r.state.history == det.state.history);
        CHECK(r.state.X.values == det.state.X.values);
    }

    auto rb = cfg;
    rb.plan = BatchPlan{Strategy::per_time_step, cfg.fga.beam_count(), cfg.fga.beam_count() / 5, 5, 0};
    omp_set_num_threads(1);
    auto a = run_inversion(rb, obs);
    omp_set_num_threads(3);
    auto b = run_inversion(rb, obs);
    omp_set_num_threads(1);
    CHECK(a.state.history == b.state.history);
    CHECK(a.state.X.values == b.state.X.values);
    CHECK(deviation_norm({a, b}, a) == std::vector<double>(3, 0.0));
    CHECK(a.state.X.values != det.state.X.values);

    auto stop = cfg;
    stop.plan.reset();
    stop.J_star = det.state.history[0] * 2;
    auto early = run_inversion(stop, obs);
    CHECK(early.stopped_on_threshold);
    CHECK(early.state.history.size() == 1);
}

TEST_CASE("invalid inversion configs") {
    auto cfg = to_inversion_config(smoke());
    auto bad = cfg;
    bad.acq.receivers.clear();
    CHECK_THROWS(bad.validate());
    bad = cfg;
    bad.plan = BatchPlan{Strategy::per_time_step, cfg.fga.beam_count() + 1, 4, 1, 0};
    CHECK_THROWS(run_inversion(bad, make_observations(cfg)));
}
