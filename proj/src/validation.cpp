#include "rbt/validation.hpp"

#include <algorithm>
#include <cmath>

namespace rbt {

BeamSamples oracle_forward(int ndim, int n_dir, int n_shell, int steps, int n_probe, std::uint64_t seed,
                           BeamSamples* adj, double* tau_out) {
    const double c = 2500.0, tau = 0.05;
    FgaParams fp;
    fp.ndim = ndim;
    fp.n_dir = n_dir;
    fp.n_shell = n_shell;
    ConstantVelocity cv(ndim, c);
    const Vec3 a{1200, ndim > 1 ? 1000.0 : 0.0, 0}, b{2000, ndim > 1 ? 1800.0 : 0.0, 0};
    auto fwd = propagate(decompose_point_source(a, c, fp), cv, fp, tau, steps, {.store_z = false});
    auto rev = propagate(decompose_point_source(b, c, fp), cv, fp, tau, steps, {.store_z = false});
    // probes scattered between the two points
    PhiloxStream rng(seed, 7, 0, 0);
    std::vector<Vec3> pts;
    for (int i = 0; i < n_probe; ++i) {
        Vec3 x{1000 + 1200 * rng.uniform(), 0, 0};
        if (ndim > 1) x[1] = 800 + 1200 * rng.uniform();
        pts.push_back(x);
    }
    BeamSamples f = forward_samples(fwd, pts);
    BeamSamples r = forward_samples(rev, pts);
    if (adj) {
        *adj = BeamSamples(f.K, f.N, f.n_points);
        for (int k = 0; k < f.K; ++k)
            for (int j = 0; j < f.N; ++j)
                for (int x = 0; x < f.n_points; ++x) adj->at(k, j, x) = r.at(f.K - 1 - k, j, x);
    }
    if (tau_out) *tau_out = tau;
    return f;
}

VarianceOracle variance_oracle(int ndim, int n_dir, int n_shell, int p, int steps, int n_probe,
                               std::uint64_t seed) {
    BeamSamples adj;
    double tau = 0.0;
    BeamSamples fwd = oracle_forward(ndim, n_dir, n_shell, steps, n_probe, seed, &adj, &tau);
    VarianceOracle o;
    o.N = fwd.N;
    o.p = p;
    o.steps = steps;
    auto mom = exact_chi_moments(fwd, adj, p, tau);
    o.combinations = mom.combinations;
    o.exact_second = mom.second;
    o.exact_mean = mom.mean;
    o.predicted = predicted_chi_variance(fwd, adj, p, tau);
    auto K = kernel_from_samples(fwd, adj, tau);
    double kmax = 0.0;
    for (double v : K) kmax = std::max(kmax, std::abs(v));
    for (int x = 0; x < fwd.n_points; ++x) {
        double d = std::abs(o.exact_second[x] - o.predicted[x]);
        double rel = o.predicted[x] != 0.0 ? d / std::abs(o.predicted[x]) : (d == 0.0 ? 0.0 : INFINITY);
        o.max_rel_error = std::max(o.max_rel_error, rel);
        o.max_abs_mean = std::max(o.max_abs_mean, std::abs(o.exact_mean[x]) / (kmax > 0 ? kmax : 1.0));
    }
    return o;
}

namespace {

SeismicRecord fd_homogeneous(const Grid& dom, double h, double c, const FdSource& src, const FdRequest& rq) {
    FDConfig cfg;
    cfg.grid = padded_grid(dom, h, 0);
    cfg.boundary = Boundary::reflecting;
    cfg.sponge_cells = 0;
    cfg.dt = stable_dt(cfg.grid, c, 0.9);
    ScalarField cf(cfg.grid, Units::velocity, c);
    return fd_solve(cf, src, cfg, rq).record;
}

}  // namespace

FgaFdComparison fga_vs_fd_homogeneous(double eps, double h) {
    const double c = 2500.0, tau = 0.004, T = 0.6;
    const int n = int(std::lround(T / tau));
    FgaParams fp;
    fp.eps = eps;
    auto bc = suggest_counts(fp, 2000);
    fp.n_dir = bc.n_dir;
    fp.n_shell = bc.n_shell;
    const Grid dom = Grid::make2d(32, 32, 99, 99);
    const Vec3 xs{1584, 1584, 0};
    std::vector<Vec3> rec{{2584, 1584, 0}, {1584, 2584, 0}, {1584 + 707.1, 1584 - 707.1, 0}, {584, 1584, 0}};
    ConstantVelocity cv(2, c);
    auto tr = propagate(decompose_point_source(xs, c, fp), cv, fp, tau, n, {.store_z = false});
    FgaFdComparison out;
    out.eps = eps;
    out.h = h;
    out.N = fp.beam_count();
    out.fga = record_at_receivers(tr, rec);
    FdSource src;
    src.kind = FdSource::Kind::impulse;
    src.x_s = xs;
    src.c_s = c;
    src.fga = fp;
    FdRequest rq;
    rq.receivers = rec;
    rq.tau = tau;
    rq.n_steps = n;
    auto coarse = fd_homogeneous(dom, h, c, src, rq);
    auto fine = fd_homogeneous(dom, h / 2, c, src, rq);
    out.fd = coarse;
    for (std::size_t r = 0; r < rec.size(); ++r)
        for (int k = 0; k <= n; ++k)
            out.fd.traces[r][k] = (4.0 * fine.traces[r][k] - coarse.traces[r][k]) / 3.0;
    out.rel_l2 = compare_fields(out.fga, out.fd);
    return out;
}

}  // namespace rbt
