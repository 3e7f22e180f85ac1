#include "rbt/fd_oracle.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace rbt {

double FDConfig::cfl_limit(int ndim) { return ndim == 3 ? 0.33 : 0.4; }

void FDConfig::validate(double c_max) const {
    grid.validate();
    if (space_order != 2 && space_order != 4) throw FdError("fd: space order must be 2 or 4");
    if (!(dt > 0.0)) throw FdError("fd: dt must be positive");
    double hmin = grid.spacing[0];
    for (int a = 1; a < grid.ndim; ++a) hmin = std::min(hmin, grid.spacing[a]);
    if (dt > cfl_limit(grid.ndim) * hmin / c_max * (1.0 + 1e-12))
        throw FdError("fd: CFL violated (dt = " + std::to_string(dt) + ")");
    if (sponge_cells < 0) throw FdError("fd: negative sponge width");
}

double sponge_strength_for(int cells) { return cells > 0 ? 0.09 / cells : 0.0; }

Grid padded_grid(const Grid& domain, double h, int pad) {
    Grid g;
    g.ndim = domain.ndim;
    for (int a = 0; a < domain.ndim; ++a) {
        int n = int(std::lround(domain.extent(a) / h));
        g.dims[a] = n + 2 * pad;
        g.spacing[a] = domain.extent(a) / n;
        g.origin[a] = domain.origin[a] - pad * g.spacing[a];
    }
    g.validate();
    return g;
}

double stable_dt(const Grid& g, double c_max, double fraction) {
    double hmin = g.spacing[0];
    for (int a = 1; a < g.ndim; ++a) hmin = std::min(hmin, g.spacing[a]);
    return fraction * FDConfig::cfl_limit(g.ndim) * hmin / c_max;
}

namespace {

constexpr double c4[3] = {-2.5, 4.0 / 3.0, -1.0 / 12.0};
constexpr double c2[2] = {-2.0, 1.0};

// strides of each axis in the flat layout
std::array<std::ptrdiff_t, 3> strides(const Grid& g) {
    std::array<std::ptrdiff_t, 3> s{1, 1, 1};
    if (g.ndim == 2) {
        s = {g.dims[1], 1, 0};
    } else {
        s = {std::ptrdiff_t(g.dims[1]) * g.dims[2], g.dims[2], 1};
    }
    return s;
}

inline double lap_cell(const Grid& g, int order, const double* u, const int idx[3],
                       const std::array<std::ptrdiff_t, 3>& st) {
    std::ptrdiff_t flat = 0;
    for (int a = 0; a < g.ndim; ++a) flat += idx[a] * st[a];
    double s = 0.0;
    for (int a = 0; a < g.ndim; ++a) {
        const double ih2 = 1.0 / (g.spacing[a] * g.spacing[a]);
        const int n = g.dims[a];
        const int i = idx[a];
        auto at = [&](int off) { int j = i + off; return (j < 0 || j >= n) ? 0.0 : u[flat + off * st[a]]; };
        if (order == 4)
            s += ih2 * (c4[0] * u[flat] + c4[1] * (at(-1) + at(1)) + c4[2] * (at(-2) + at(2)));
        else
            s += ih2 * (c2[0] * u[flat] + c2[1] * (at(-1) + at(1)));
    }
    return s;
}

}  // namespace

void laplacian(const Grid& g, int order, const std::vector<double>& u, std::vector<double>& out) {
    out.resize(g.size());
    const auto st = strides(g);
    const int n0 = g.dims[0];
    const int n1 = g.dims[1];
    const int n2 = g.ndim == 3 ? g.dims[2] : 1;
    const int r = order == 4 ? 2 : 1;
    const double* up = u.data();
    double w[3][3] = {};
    for (int a = 0; a < g.ndim; ++a) {
        double ih2 = 1.0 / (g.spacing[a] * g.spacing[a]);
        for (int m = 0; m <= r; ++m) w[a][m] = ih2 * (order == 4 ? c4[m] : c2[m]);
    }
    double w0 = 0.0;
    for (int a = 0; a < g.ndim; ++a) w0 += w[a][0];
    // innermost axis and its stride
    const int nl = g.ndim == 2 ? n1 : n2;
    const std::ptrdiff_t s0 = st[0];
    const std::ptrdiff_t s1 = g.ndim == 3 ? st[1] : 0;
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n0; ++i)
        for (int j = 0; j < (g.ndim == 3 ? n1 : 1); ++j) {
            const bool edge_row = i < r || i >= n0 - r || (g.ndim == 3 && (j < r || j >= n1 - r));
            const std::size_t base = g.ndim == 2 ? g.index(i, 0) : g.index(i, j, 0);
            double* o = out.data() + base;
            const double* v = up + base;
            for (int k = 0; k < nl; ++k) {
                if (edge_row || k < r || k >= nl - r) {
                    int idx[3] = {i, g.ndim == 2 ? k : j, k};
                    o[k] = lap_cell(g, order, up, idx, st);
                    continue;
                }
                const double* c = v + k;
                double acc = w0 * c[0];
                const int al = g.ndim - 1;  // innermost axis uses unit stride
                acc += w[al][1] * (c[-1] + c[1]);
                acc += w[0][1] * (c[-s0] + c[s0]);
                if (g.ndim == 3) acc += w[1][1] * (c[-s1] + c[s1]);
                if (order == 4) {
                    acc += w[al][2] * (c[-2] + c[2]);
                    acc += w[0][2] * (c[-2 * s0] + c[2 * s0]);
                    if (g.ndim == 3) acc += w[1][2] * (c[-2 * s1] + c[2 * s1]);
                }
                o[k] = acc;
            }
        }
}

void laplacian_reference(const Grid& g, int order, const std::vector<double>& u,
                         std::vector<double>& out) {
    // straightforward gather with explicit bounds checks on every neighbour
    out.assign(g.size(), 0.0);
    const int n2 = g.ndim == 3 ? g.dims[2] : 1;
    for (int i = 0; i < g.dims[0]; ++i)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int k = 0; k < n2; ++k) {
                int idx[3] = {i, j, k};
                double s = 0.0;
                for (int a = 0; a < g.ndim; ++a) {
                    auto val = [&](int off) {
                        int m[3] = {idx[0], idx[1], idx[2]};
                        m[a] += off;
                        if (m[a] < 0 || m[a] >= g.dims[a]) return 0.0;
                        return u[g.ndim == 2 ? g.index(m[0], m[1]) : g.index(m[0], m[1], m[2])];
                    };
                    double h2 = g.spacing[a] * g.spacing[a];
                    if (order == 4)
                        s += (-2.5 * val(0) + 4.0 / 3.0 * (val(-1) + val(1)) -
                              1.0 / 12.0 * (val(-2) + val(2))) / h2;
                    else
                        s += (val(-1) - 2.0 * val(0) + val(1)) / h2;
                }
                out[g.ndim == 2 ? g.index(i, j) : g.index(i, j, k)] = s;
            }
}

namespace {

std::vector<double> sponge_profile(const FDConfig& cfg) {
    const Grid& g = cfg.grid;
    std::vector<double> damp(g.size(), 1.0);
    if (cfg.boundary != Boundary::absorbing_sponge || cfg.sponge_cells == 0) return damp;
    const int w = cfg.sponge_cells;
    for (std::size_t c = 0; c < g.size(); ++c) {
        std::size_t rest = c;
        int idx[3] = {0, 0, 0};
        for (int a = g.ndim - 1; a >= 0; --a) {
            idx[a] = int(rest % g.dims[a]);
            rest /= g.dims[a];
        }
        double f = 1.0;
        for (int a = 0; a < g.ndim; ++a) {
            int d = std::min(idx[a], g.dims[a] - 1 - idx[a]);
            if (d < w) {
                double x = cfg.sponge_strength * (w - d);
                f *= std::exp(-x * x);
            }
        }
        damp[c] = f;
    }
    return damp;
}

std::size_t nearest_cell(const Grid& g, const Vec3& x) {
    int idx[3] = {0, 0, 0};
    for (int a = 0; a < g.ndim; ++a) {
        int i = int(std::floor((x[a] - g.origin[a]) / g.spacing[a]));
        idx[a] = std::clamp(i, 0, g.dims[a] - 1);
    }
    return g.ndim == 2 ? g.index(idx[0], idx[1]) : g.index(idx[0], idx[1], idx[2]);
}

// linear interpolation of a trace sampled at tau
double trace_at(const std::vector<double>& tr, double tau, double t) {
    double u = t / tau;
    if (u < 0.0 || tr.empty()) return 0.0;
    std::size_t i = std::size_t(u);
    if (i + 1 >= tr.size()) return i < tr.size() ? tr[i] : 0.0;
    double w = u - double(i);
    return (1.0 - w) * tr[i] + w * tr[i + 1];
}

using Stencil = std::vector<std::pair<std::size_t, double>>;

// Weights of interpolate() at x, found by probing unit fields near x.
Stencil multilinear_stencil(const Grid& g, const Vec3& x) {
    Stencil st;
    ScalarField probe(g, Units::dimensionless);
    const Vec3 xc = g.center(nearest_cell(g, x));
    std::array<int, 3> lo{0, 0, 0}, hi{0, 0, 0};
    for (int a = 0; a < g.ndim; ++a) {
        int i = int(std::floor((xc[a] - g.origin[a]) / g.spacing[a]));
        lo[a] = std::max(0, i - 2);
        hi[a] = std::min(g.dims[a] - 1, i + 2);
    }
    for (int i = lo[0]; i <= hi[0]; ++i)
        for (int j = lo[1]; j <= hi[1]; ++j)
            for (int k = lo[2]; k <= hi[2]; ++k) {
                std::size_t c = g.ndim == 1 ? std::size_t(i) : g.ndim == 2 ? g.index(i, j) : g.index(i, j, k);
                probe[c] = 1.0;
                double w = interpolate(probe, x);
                probe[c] = 0.0;
                if (w != 0.0) st.push_back({c, w});
            }
    return st;
}

}  // namespace

FdResult fd_solve(const ScalarField& c, const FdSource& src, const FDConfig& cfg,
                  const FdRequest& req) {
    const Grid& g = cfg.grid;
    if (c.grid != g) throw FdError("fd: velocity grid does not match FD grid");
    c.validate();
    double cmax = *std::max_element(c.values.begin(), c.values.end());
    cfg.validate(cmax);
    if (!(req.tau > 0.0) || req.n_steps < 0) throw FdError("fd: bad record request");
    for (const auto& r : req.receivers)
        if (!inside_extent(g, r)) throw FdError("fd: receiver outside grid");

    const std::size_t n = g.size();
    std::vector<double> c2dt2(n), rho(n);
    for (std::size_t i = 0; i < n; ++i) {
        c2dt2[i] = c[i] * c[i] * cfg.dt * cfg.dt;
        rho[i] = 1.0 / (c[i] * c[i]);
    }
    std::vector<double> damp = sponge_profile(cfg);
    std::vector<double> um(n, 0.0), u(n, 0.0), up(n, 0.0), lap(n, 0.0);

    if (src.kind == FdSource::Kind::impulse) {
        if (!inside_extent(g, src.x_s)) throw FdError("fd: source outside grid");
        std::vector<double> v0;
        impulse_initial_field(g, src.x_s, src.c_s, src.fga, u, v0);
        // u(-dt) from the Taylor expansion about t = 0
        laplacian(g, cfg.space_order, u, lap);
        for (std::size_t i = 0; i < n; ++i) um[i] = u[i] - cfg.dt * v0[i] + 0.5 * c2dt2[i] * lap[i];
    }
    if (src.kind == FdSource::Kind::record_driven) {
        if (src.locations.size() != src.traces.size() || !(src.tau > 0.0))
            throw FdError("fd: record-driven source needs one trace per location");
        for (const auto& x : src.locations)
            if (!inside_extent(g, x)) throw FdError("fd: source outside grid");
    }
    const double inv_vol = 1.0 / g.cell_volume();

    const double T = req.n_steps * req.tau;
    const int fd_steps = int(std::ceil(T / cfg.dt - 1e-9)) + 1;
    FdResult res;
    res.fd_steps = fd_steps;
    res.record.receivers = req.receivers;
    res.record.tau = req.tau;
    res.record.n_steps = req.n_steps;
    res.record.traces.assign(req.receivers.size(), std::vector<double>(req.n_steps + 1, 0.0));
    res.snapshots.resize(req.snapshot_steps.size());

    // receivers sample with multilinear stencils; point sources inject with the
    // transpose of the same stencils
    std::vector<Stencil> stencil, src_stencil;
    for (const auto& x : req.receivers) stencil.push_back(multilinear_stencil(g, x));
    if (src.kind == FdSource::Kind::record_driven)
        for (const auto& x : src.locations) src_stencil.push_back(multilinear_stencil(g, x));
    auto sample_receivers = [&](const std::vector<double>& field, std::vector<double>& vals) {
        vals.resize(req.receivers.size());
        for (std::size_t r = 0; r < req.receivers.size(); ++r) {
            double v = 0.0;
            for (const auto& [c, w] : stencil[r]) v += w * field[c];
            vals[r] = v;
        }
    };
    std::vector<double> prev_vals, cur_vals;
    sample_receivers(u, cur_vals);
    int next_rec = 0;
    auto emit = [&](int fd_step, const std::vector<double>& field_prev, const std::vector<double>& field_cur) {
        // record samples with t_rec in [t_{s-1}, t_s], linear in time
        double t1 = fd_step * cfg.dt;
        double t0 = t1 - cfg.dt;
        while (next_rec <= req.n_steps && next_rec * req.tau <= t1 + 1e-12 * cfg.dt) {
            double tr = next_rec * req.tau;
            double w = fd_step == 0 ? 1.0 : std::clamp((tr - t0) / cfg.dt, 0.0, 1.0);
            for (std::size_t r = 0; r < req.receivers.size(); ++r)
                res.record.traces[r][next_rec] = (1.0 - w) * prev_vals[r] + w * cur_vals[r];
            for (std::size_t s = 0; s < req.snapshot_steps.size(); ++s)
                if (req.snapshot_steps[s] == next_rec) {
                    auto& snap = res.snapshots[s];
                    snap.resize(n);
                    for (std::size_t i = 0; i < n; ++i) snap[i] = (1.0 - w) * field_prev[i] + w * field_cur[i];
                }
            ++next_rec;
        }
    };
    prev_vals = cur_vals;
    emit(0, u, u);

    for (int s = 1; s <= fd_steps && next_rec <= req.n_steps; ++s) {
        laplacian(g, cfg.space_order, u, lap);
        const double t = (s - 1) * cfg.dt;
        for (std::size_t q = 0; q < src_stencil.size(); ++q) {
            double a = trace_at(src.traces[q], src.tau, t) * inv_vol;
            for (const auto& [c, w] : src_stencil[q]) lap[c] += w * a;
        }
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(n); ++i)
            up[i] = damp[i] * (2.0 * u[i] - damp[i] * um[i] + c2dt2[i] * lap[i]);
        if (req.track_energy) {
            // E_{n+1/2} = 1/2 sum rho ((u+ - u)/dt)^2 - 1/2 <u+, L u>
            std::vector<double> lu;
            laplacian(g, cfg.space_order, u, lu);
            double e = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double v = (up[i] - u[i]) / cfg.dt;
                e += 0.5 * rho[i] * v * v - 0.5 * up[i] * lu[i];
            }
            res.energy.push_back(e * g.cell_volume());
        }
        if (!std::isfinite(up[n / 2]) || !std::isfinite(up[0]))
            throw FdError("fd: non-finite field at step " + std::to_string(s));
        std::swap(um, u);
        std::swap(u, up);
        prev_vals = cur_vals;
        sample_receivers(u, cur_vals);
        emit(s, um, u);
    }
    for (const auto& tr : res.record.traces)
        for (double v : tr)
            if (!std::isfinite(v)) throw FdError("fd: non-finite record");
    return res;
}

double compare_fields(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw FdError("compare_fields: shape mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

double compare_fields(const ScalarField& a, const ScalarField& b) {
    if (a.grid != b.grid) throw FdError("compare_fields: grid mismatch");
    return compare_fields(a.values, b.values);
}

double compare_fields(const SeismicRecord& a, const SeismicRecord& b) {
    if (a.traces.size() != b.traces.size() || a.n_steps != b.n_steps)
        throw FdError("compare_fields: record shape mismatch");
    std::vector<double> fa, fb;
    for (std::size_t r = 0; r < a.traces.size(); ++r) {
        if (a.traces[r].size() != b.traces[r].size()) throw FdError("compare_fields: trace length mismatch");
        fa.insert(fa.end(), a.traces[r].begin(), a.traces[r].end());
        fb.insert(fb.end(), b.traces[r].begin(), b.traces[r].end());
    }
    return compare_fields(fa, fb);
}

}  // namespace rbt
