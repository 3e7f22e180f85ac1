#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <omp.h>

#include <cmath>

#include "rbt/fga.hpp"
#include "rbt/random_batch.hpp"

using namespace rbt;

namespace {

double dist(const Vec3& a, const Vec3& b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

// c = c0 (1 + a sin(kx x) cos(kz z)), with exact derivatives
class WavyVelocity final : public VelocityModel {
public:
    int ndim() const override { return 2; }
    VelocitySample sample(const Vec3& x) const override {
        const double c0 = 2500, a = 0.1, kx = 2 * M_PI / 2000, kz = 2 * M_PI / 3000;
        double s = std::sin(kx * x[0]), c = std::cos(kx * x[0]);
        double sz = std::sin(kz * x[1]), cz = std::cos(kz * x[1]);
        VelocitySample v;
        v.c = c0 * (1 + a * s * cz);
        v.grad = {c0 * a * kx * c * cz, -c0 * a * kz * s * sz, 0};
        v.hess[0][0] = -c0 * a * kx * kx * s * cz;
        v.hess[1][1] = -c0 * a * kz * kz * s * cz;
        v.hess[0][1] = v.hess[1][0] = -c0 * a * kx * kz * c * sz;
        return v;
    }
};

FgaParams small_params(int ndim, int n_dir, int n_shell) {
    FgaParams fp;
    fp.ndim = ndim;
    fp.n_dir = n_dir;
    fp.n_shell = n_shell;
    return fp;
}

}  // namespace

TEST_CASE("beam counting") {
    auto fp = small_params(2, 16, 2);
    auto beams = decompose_point_source({1000, 1000, 0}, 2500, fp);
    CHECK(beams.size() == 64);
    CHECK(fp.beam_count() == 64);
    int plus = 0;
    for (auto& b : beams) plus += b.branch == 1;
    CHECK(plus == 32);
}

TEST_CASE("constant medium: straight rays, constant momentum") {
    const double c = 2500, tau = 0.01;
    for (int nd : {1, 2, 3}) {
        auto fp = small_params(nd, nd == 1 ? 1 : (nd == 2 ? 12 : 32), 2);
        ConstantVelocity cv(nd, c);
        auto beams = decompose_point_source({1000, 1100, 1200}, c, fp);
        auto tr = propagate(beams, cv, fp, tau, 50);
        double worst_q = 0.0;
        for (int k = 0; k <= 50; ++k)
            for (int j = 0; j < tr.size(); ++j) {
                const auto& b = tr.beams[j];
                const auto& s = tr.at(k, j);
                double pn = 0.0;
                for (int a = 0; a < nd; ++a) pn += b.p[a] * b.p[a];
                pn = std::sqrt(pn);
                for (int a = 0; a < nd; ++a) {
                    CHECK(s.P[a] == b.p[a]);
                    double q = b.q[a] + k * tau * b.branch * c * b.p[a] / pn;
                    worst_q = std::max(worst_q, std::abs(s.Q[a] - q) / 1000.0);
                }
                if (nd == 1) CHECK(std::abs(s.A - b.A0) <= 1e-10 * std::abs(b.A0));
            }
        CHECK(worst_q <= 1e-10);
    }
}

TEST_CASE("hamiltonian is conserved on a smooth model") {
    auto fp = small_params(2, 16, 2);
    WavyVelocity wv;
    auto beams = decompose_point_source({1500, 1500, 0}, wv.sample({1500, 1500, 0}).c, fp);
    const double tau = 0.008, T = 1.2;
    const int n = int(std::lround(T / tau));
    auto tr = propagate(beams, wv, fp, tau, n);
    double worst = 0.0;
    for (int j = 0; j < tr.size(); ++j) {
        double H0 = hamiltonian(wv, tr.beams[j], tr.at(0, j));
        worst = std::max(worst, std::abs(hamiltonian(wv, tr.beams[j], tr.at(n, j)) - H0) / std::abs(H0));
    }
    CHECK(worst / T <= 1e-8);
}

TEST_CASE("RK4 step-halving order") {
    auto fp = small_params(2, 8, 1);
    WavyVelocity wv;
    auto beams = decompose_point_source({1500, 1500, 0}, 2500, fp);
    const double T = 0.64;
    std::vector<BeamTrajectory> runs;
    for (int n : {16, 32, 64, 128}) runs.push_back(propagate(beams, wv, fp, T / n, n));
    auto diff = [&](int a) {
        const auto &x = runs[a], &y = runs[a + 1];
        double e = 0.0;
        for (int j = 0; j < x.size(); ++j) {
            const auto &s = x.at(x.n_steps, j), &t = y.at(y.n_steps, j);
            for (int i = 0; i < 2; ++i) {
                e = std::max(e, std::abs(s.Q[i] - t.Q[i]) / 1000.0);
                e = std::max(e, std::abs(s.P[i] - t.P[i]));
                for (int m = 0; m < 2; ++m) e = std::max(e, std::abs(x.z_at(x.n_steps, j)[i][m] - y.z_at(y.n_steps, j)[i][m]));
            }
            e = std::max(e, std::abs(s.A - t.A) / std::abs(s.A));
        }
        return e;
    };
    double e0 = diff(0), e1 = diff(1), e2 = diff(2);
    CHECK(std::log2(e0 / e1) >= 3.5);
    CHECK(std::log2(e1 / e2) >= 3.5);
}

TEST_CASE("beam evaluation at its centre is the amplitude") {
    auto fp = small_params(2, 8, 1);
    ConstantVelocity cv(2, 2000);
    auto tr = propagate(decompose_point_source({500, 500, 0}, 2000, fp), cv, fp, 0.01, 10);
    for (int j = 0; j < tr.size(); j += 3) {
        const auto& s = tr.at(7, j);
        CHECK(beam_value(fp, s, s.Q) == s.A);
    }
}

TEST_CASE("full subset equals full sum bit for bit") {
    auto fp = small_params(2, 16, 2);
    ConstantVelocity cv(2, 2500);
    auto tr = propagate(decompose_point_source({1584, 1584, 0}, 2500, fp), cv, fp, 0.02, 10);
    std::vector<int> all(tr.size());
    for (int j = 0; j < tr.size(); ++j) all[j] = j;
    std::vector<Vec3> pts;
    for (int i = 0; i < 15; ++i) pts.push_back({1200 + 50.0 * i, 1500 + 20.0 * i, 0});
    for (auto kind : {FieldKind::value, FieldKind::dt})
        CHECK(reconstruct(tr, all, pts, 8, kind) == reconstruct(tr, {}, pts, 8, kind));
}

TEST_CASE("initial impulse is radially symmetric") {
    auto fp = small_params(2, 64, 8);
    const Vec3 xs{1584, 1584, 0};
    ConstantVelocity cv(2, 2500);
    auto tr = propagate(decompose_point_source(xs, 2500, fp), cv, fp, 0.01, 0);
    const double el = fp.eps * fp.ell;
    for (double r : {0.0, 0.5 * el, 1.5 * el, 3.0 * el}) {
        std::vector<Vec3> ring;
        for (int i = 0; i < 12; ++i) {
            double th = 2 * M_PI * i / 12 + 0.1;
            ring.push_back({xs[0] + r * std::cos(th), xs[1] + r * std::sin(th), 0});
        }
        auto v = reconstruct(tr, {}, ring, 0, FieldKind::dt);
        auto u = reconstruct(tr, {}, ring, 0, FieldKind::value);
        double lo = 1e300, hi = -1e300, peak = std::abs(reconstruct(tr, {}, std::vector<Vec3>{xs}, 0, FieldKind::dt)[0].real());
        for (int i = 0; i < 12; ++i) {
            lo = std::min(lo, v[i].real());
            hi = std::max(hi, v[i].real());
            CHECK(std::abs(u[i].real()) <= 1e-9 * peak);  // u(0) = 0
        }
        CHECK(hi - lo <= 1e-6 * peak);
    }
}

TEST_CASE("analytic time derivative matches centred differences") {
    auto fp = small_params(2, 16, 2);
    WavyVelocity wv;
    auto beams = decompose_point_source({1500, 1500, 0}, 2500, fp);
    std::vector<Vec3> pts{{1800, 1600, 0}, {1300, 1900, 0}, {1550, 1200, 0}};
    auto err = [&](double tau) {
        // t = 0.24 s in both runs
        int k = int(std::lround(0.24 / tau));
        auto tr = propagate(beams, wv, fp, tau, k + 1);
        auto a = reconstruct(tr, {}, pts, k + 1), b = reconstruct(tr, {}, pts, k - 1);
        auto d = reconstruct(tr, {}, pts, k, FieldKind::dt);
        double e = 0.0, s = 0.0;
        for (std::size_t i = 0; i < pts.size(); ++i) {
            e = std::max(e, std::abs((a[i] - b[i]) / (2 * tau) - d[i]));
            s = std::max(s, std::abs(d[i]));
        }
        return e / s;
    };
    double e1 = err(0.004), e2 = err(0.002);
    CHECK(e1 < 1e-2);
    CHECK(e1 / e2 == doctest::Approx(4.0).epsilon(0.15));
}

TEST_CASE("batch reconstruction is unbiased") {
    auto fp = small_params(2, 16, 4);
    ConstantVelocity cv(2, 2500);
    auto tr = propagate(decompose_point_source({1584, 1584, 0}, 2500, fp), cv, fp, 0.02, 12, {.store_z = false});
    std::vector<Vec3> pts;
    for (int i = 0; i < 20; ++i) {
        double th = 2 * M_PI * i / 20;
        pts.push_back({1584 + 300 * std::cos(th) + 3.0 * i, 1584 + 300 * std::sin(th), 0});
    }
    const int draws = 10000;
    BatchPlan plan{Strategy::per_time_step, tr.size(), tr.size() / 4, 8, 0};
    auto full = reconstruct(tr, {}, pts, 12);
    std::vector<double> s1(20, 0.0), s2(20, 0.0);
    for (int m = 0; m < draws; ++m) {
        auto b = draw(plan, m, 12, Role::forward);
        auto u = reconstruct(tr, b.indices, pts, 12);
        for (int x = 0; x < 20; ++x) {
            double d = u[x].real() - full[x].real();
            s1[x] += d;
            s2[x] += d * d;
        }
    }
    for (int x = 0; x < 20; ++x) {
        double mean = s1[x] / draws, var = s2[x] / draws - mean * mean;
        CHECK(std::abs(mean) <= 3.0 * std::sqrt(var / draws));
    }
}

TEST_CASE("first arrival in a homogeneous medium") {
    // a narrow-band pulse keeps the onset close to the ray time
    FgaParams fp;
    fp.eps = 0.004;
    auto bc = suggest_counts(fp, 2000);
    fp.n_dir = bc.n_dir;
    fp.n_shell = bc.n_shell;
    const double c = 2500, tau = 0.004;
    const Vec3 xs{1584, 1584, 0};
    ConstantVelocity cv(2, c);
    auto tr = propagate(decompose_point_source(xs, c, fp), cv, fp, tau, 220, {.store_z = false});
    std::vector<Vec3> rec{{1584, 1584 + 1584, 0}, {1584 + 1000, 1584, 0}};
    auto r = record_at_receivers(tr, rec);
    auto onset = [&](const std::vector<double>& tr) {
        double pk = 0.0;
        for (double v : tr) pk = std::max(pk, std::abs(v));
        for (std::size_t k = 0; k < tr.size(); ++k)
            if (std::abs(tr[k]) >= 0.01 * pk) return k * tau;
        return -1.0;
    };
    double t0 = onset(r.traces[0]), t1 = onset(r.traces[1]);
    // a Gaussian envelope exp(-t^2 / 2 s^2) passes 1% of its peak 3.03 s early
    const double sigma_t = fp.eps * fp.ell / (c * fp.band_width);
    const double lead = std::sqrt(2 * std::log(100.0)) * sigma_t;
    CHECK(t0 >= 1584 / c - lead - 2 * tau);
    CHECK(t0 <= 1584 / c + 2 * tau);
    // moveout between the two distances is the ray time difference
    CHECK(std::abs((t0 - t1) - 584 / c) <= 2 * tau);
}

TEST_CASE("zero source function gives a zero record") {
    auto fp = small_params(2, 16, 2);
    ConstantVelocity cv(2, 2500);
    auto tr = propagate(decompose_point_source({1584, 1584, 0}, 2500, fp), cv, fp, 0.02, 20, {.store_z = false});
    std::vector<double> zero(21, 0.0);
    std::vector<Vec3> rec{{2000, 1584, 0}};
    auto r = record_at_receivers(tr, rec, nullptr, zero);
    for (double v : r.traces[0]) CHECK(v == 0.0);
}

TEST_CASE("grid accumulation: parallel matches serial reference") {
    auto fp = small_params(2, 24, 3);
    ConstantVelocity cv(2, 2500);
    auto tr = propagate(decompose_point_source({1584, 1584, 0}, 2500, fp), cv, fp, 0.02, 20, {.store_z = false});
    std::vector<BeamTerm> terms;
    for (int j = 0; j < tr.size(); ++j) terms.push_back({&tr, j, 15, cplx(0.3, -0.1 * (j % 5))});
    Grid g = Grid::make2d(40, 40, 79.2, 79.2);
    for (auto kind : {FieldKind::value, FieldKind::dt}) {
        std::vector<double> ref(g.size(), 0.0), par(g.size(), 0.0);
        accumulate_grid_reference(terms, g, kind, 0.5, ref);
        omp_set_num_threads(1);
        accumulate_grid(terms, g, kind, 0.5, par);
        double mx = 0.0, err = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            mx = std::max(mx, std::abs(ref[i]));
            err = std::max(err, std::abs(ref[i] - par[i]));
        }
        CHECK(err <= 1e-12 * mx);
        for (int t : {2, 3}) {
            omp_set_num_threads(t);
            std::vector<double> again(g.size(), 0.0);
            accumulate_grid(terms, g, kind, 0.5, again);
            CHECK(again == par);
        }
    }
}

TEST_CASE("invalid parameters") {
    FgaParams fp;
    fp.eps = -1;
    CHECK_THROWS_AS(fp.validate(), FgaError);
    fp = small_params(2, 4, 1);
    CHECK_THROWS_AS(fp.validate(), FgaError);
    fp = small_params(2, 8, 1);
    ConstantVelocity cv(3, 2500);
    CHECK_THROWS_AS(propagate(decompose_point_source({0, 0, 0}, 2500, fp), cv, fp, 0.01, 2), FgaError);
}
