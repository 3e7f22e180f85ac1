#include "rbt/adjoint_kernel.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace rbt {

namespace {

void check_records(const SeismicRecord& a, const SeismicRecord& b) {
    a.validate();
    b.validate();
    if (a.receivers.size() != b.receivers.size()) throw KernelError("records: receiver count differs");
    if (a.n_steps != b.n_steps) throw KernelError("records: length differs");
    if (std::abs(a.tau - b.tau) > 1e-12 * a.tau) throw KernelError("records: sample interval differs");
    for (std::size_t r = 0; r < a.receivers.size(); ++r)
        for (int d = 0; d < 3; ++d)
            if (std::abs(a.receivers[r][d] - b.receivers[r][d]) > 1e-9)
                throw KernelError("records: receiver locations differ");
}

std::vector<double> resolve_weights(std::span<const double> w, std::size_t n) {
    if (w.empty()) return std::vector<double>(n, 1.0);
    if (w.size() != n) throw KernelError("misfit: one weight per receiver required");
    for (double x : w)
        if (!(x >= 0.0) || !std::isfinite(x)) throw KernelError("misfit: weights must be non-negative");
    return {w.begin(), w.end()};
}

}  // namespace

MisfitKind misfit_from_name(const std::string& s) {
    if (s == "fwi") return MisfitKind::fwi;
    if (s == "tti") return MisfitKind::tti;
    throw KernelError("unknown misfit '" + s + "'");
}

std::string misfit_name(MisfitKind k) { return k == MisfitKind::fwi ? "fwi" : "tti"; }

MisfitReport misfit_fwi(const SeismicRecord& obs, const SeismicRecord& syn,
                        std::span<const double> weights) {
    check_records(obs, syn);
    auto w = resolve_weights(weights, obs.receivers.size());
    MisfitReport rep;
    rep.kind = MisfitKind::fwi;
    rep.per_receiver.assign(obs.receivers.size(), 0.0);
    for (std::size_t r = 0; r < obs.receivers.size(); ++r) {
        double s = 0.0;
        for (int k = 0; k < obs.samples(); ++k) {
            double d = obs.traces[r][k] - syn.traces[r][k];
            s += d * d;
        }
        rep.per_receiver[r] = 0.5 * w[r] * obs.tau * s;
        rep.J += rep.per_receiver[r];
    }
    return rep;
}

ShiftResult travel_time_shift(std::span<const double> obs, std::span<const double> syn,
                              std::span<const double> window, double tau, int max_lag) {
    const int n = int(syn.size());
    if (int(obs.size()) != n || int(window.size()) != n || n < 3)
        throw KernelError("travel_time_shift: traces and window must have equal length >= 3");
    if (!(tau > 0.0)) throw KernelError("travel_time_shift: tau must be positive");
    if (max_lag < 0) max_lag = n / 4;
    max_lag = std::min(max_lag, n - 2);
    double e_syn = 0.0, e_obs = 0.0;
    for (int k = 0; k < n; ++k) {
        e_syn += window[k] * syn[k] * syn[k];
        e_obs += obs[k] * obs[k];
    }
    if (!(e_syn > 0.0) || !(e_obs > 0.0)) throw KernelError("travel_time_shift: zero window or trace");
    std::vector<double> C(2 * max_lag + 1, 0.0);
    for (int L = -max_lag; L <= max_lag; ++L) {
        double s = 0.0;
        for (int k = std::max(0, -L); k < std::min(n, n - L); ++k) s += window[k] * syn[k] * obs[k + L];
        C[L + max_lag] = s;
    }
    int best = 0;
    for (int i = 1; i < int(C.size()); ++i)
        if (std::abs(C[i]) > std::abs(C[best])) best = i;
    ShiftResult res;
    res.peak = C[best];
    double lag = best - max_lag;
    if (best > 0 && best + 1 < int(C.size())) {
        double a = C[best - 1], b = C[best], c = C[best + 1];
        double den = a - 2.0 * b + c;
        if (den != 0.0) lag += 0.5 * (a - c) / den;
    }
    res.shift = lag * tau;
    // a negative peak or a peak on the lag boundary is not a usable pick
    res.low_quality = res.peak < 0.0 || best == 0 || best + 1 == int(C.size());
    return res;
}

std::vector<double> tukey_window(int n_samples, double tau, double center, double half_width,
                                 double taper) {
    if (n_samples < 1 || !(tau > 0.0) || !(half_width > 0.0) || taper < 0.0 || taper > 1.0)
        throw KernelError("tukey_window: bad parameters");
    std::vector<double> g(n_samples, 0.0);
    const double flat = half_width * (1.0 - taper);
    for (int k = 0; k < n_samples; ++k) {
        double d = std::abs(k * tau - center);
        if (d <= flat) g[k] = 1.0;
        else if (d < half_width) g[k] = 0.5 * (1.0 + std::cos(std::numbers::pi * (d - flat) / (half_width - flat)));
    }
    return g;
}

std::vector<double> arrival_window(std::span<const double> syn, double tau, double half_width) {
    double mx = 0.0;
    for (double v : syn) mx = std::max(mx, std::abs(v));
    if (!(mx > 0.0)) throw KernelError("arrival_window: zero trace");
    int k0 = 0;
    while (std::abs(syn[k0]) < 0.5 * mx) ++k0;
    return tukey_window(int(syn.size()), tau, k0 * tau, half_width);
}

MisfitReport misfit_tti(const SeismicRecord& obs, const SeismicRecord& syn,
                        std::span<const std::vector<double>> windows) {
    check_records(obs, syn);
    if (windows.size() != obs.receivers.size()) throw KernelError("misfit_tti: one window per receiver");
    MisfitReport rep;
    rep.kind = MisfitKind::tti;
    for (std::size_t r = 0; r < obs.receivers.size(); ++r) {
        auto s = travel_time_shift(obs.traces[r], syn.traces[r], windows[r], obs.tau);
        rep.shifts.push_back(s.shift);
        rep.low_quality.push_back(s.low_quality);
        rep.per_receiver.push_back(0.5 * s.shift * s.shift);
        rep.J += rep.per_receiver.back();
    }
    return rep;
}

void SourceSpec::validate() const {
    if (!(tau > 0.0) || n_steps < 1) throw KernelError("source: bad sampling");
    if (locations.size() != traces.size()) throw KernelError("source: one trace per location");
    for (const auto& t : traces)
        if (int(t.size()) != n_steps + 1) throw KernelError("source: trace length mismatch");
}

FdSource SourceSpec::to_fd() const {
    FdSource s;
    s.kind = FdSource::Kind::record_driven;
    s.locations = locations;
    s.traces = traces;
    s.tau = tau;
    return s;
}

SourceSpec adjoint_source_fwi(const SeismicRecord& obs, const SeismicRecord& syn,
                              std::span<const double> weights) {
    check_records(obs, syn);
    auto w = resolve_weights(weights, obs.receivers.size());
    SourceSpec s;
    s.locations = obs.receivers;
    s.tau = obs.tau;
    s.n_steps = obs.n_steps;
    const int n = obs.n_steps;
    for (std::size_t r = 0; r < obs.receivers.size(); ++r) {
        std::vector<double> tr(n + 1);
        for (int k = 0; k <= n; ++k) tr[k] = w[r] * (obs.traces[r][n - k] - syn.traces[r][n - k]);
        s.traces.push_back(std::move(tr));
    }
    return s;
}

TtiAdjoint adjoint_source_tti(const SeismicRecord& syn, std::span<const std::vector<double>> windows,
                              std::span<const double> shifts, bool normalize) {
    syn.validate();
    const std::size_t nr = syn.receivers.size();
    if (windows.size() != nr || shifts.size() != nr)
        throw KernelError("adjoint_source_tti: one window and shift per receiver");
    const int n = syn.n_steps;
    TtiAdjoint out;
    out.source.locations = syn.receivers;
    out.source.tau = syn.tau;
    out.source.n_steps = n;
    for (std::size_t r = 0; r < nr; ++r) {
        const auto& u = syn.traces[r];
        const auto& g = windows[r];
        if (int(g.size()) != n + 1) throw KernelError("adjoint_source_tti: window length mismatch");
        std::vector<double> ud(n + 1, 0.0);
        for (int k = 0; k <= n; ++k) {
            int a = std::max(0, k - 1), b = std::min(n, k + 1);
            ud[k] = (u[b] - u[a]) / ((b - a) * syn.tau);
        }
        double norm = 0.0;
        for (int k = 0; k <= n; ++k) norm += g[k] * ud[k] * ud[k] * syn.tau;
        std::vector<double> tr(n + 1, 0.0);
        if (normalize && !(norm > 1e-300)) {
            out.dropped.push_back(int(r));
        } else {
            double scale = -shifts[r] / (normalize ? norm : 1.0);
            for (int k = 0; k <= n; ++k) tr[k] = scale * g[n - k] * ud[n - k];
        }
        out.source.traces.push_back(std::move(tr));
    }
    return out;
}

// ---------------------------------------------------------------- adjoint beams

std::vector<AdjointBase> adjoint_bases(std::span<const Vec3> locations, const VelocityModel& c,
                                       const FgaParams& fp, double tau, int n_steps) {
    std::vector<AdjointBase> out;
    for (const auto& x : locations) {
        AdjointBase b;
        b.x = x;
        b.c = c.sample(x).c;
        auto beams = decompose_point_source(x, b.c, fp);
        PropagateOptions po;
        po.store_z = false;
        b.traj = std::make_shared<const BeamTrajectory>(propagate(beams, c, fp, tau, n_steps, po));
        out.push_back(std::move(b));
    }
    return out;
}

cplx AdjointEnsemble::coef(const AdjointLaunch& l, int j) const {
    const Beam& b = bases[l.location].traj->beams[j];
    return b.branch > 0 ? l.gamma[b.shell] : std::conj(l.gamma[b.shell]);
}

AdjointEnsemble build_adjoint(const SourceSpec& src, const std::vector<AdjointBase>& bases,
                              const AdjointOptions& opt) {
    src.validate();
    if (bases.size() != src.locations.size()) throw KernelError("build_adjoint: one base per location");
    if (bases.empty()) throw KernelError("build_adjoint: no adjoint locations");
    AdjointEnsemble adj;
    adj.params = bases[0].traj->params;
    adj.tau = src.tau;
    adj.n_steps = src.n_steps;
    adj.bases = bases;
    const int n = src.n_steps;
    const int S = adj.params.n_shell;
    for (std::size_t r = 0; r < bases.size(); ++r) {
        const auto& tr = *bases[r].traj;
        if (tr.n_steps < n || std::abs(tr.tau - src.tau) > 1e-12 * src.tau)
            throw KernelError("build_adjoint: base trajectory does not match the source sampling");
        const auto& trace = src.traces[r];
        double e = 0.0;
        for (double v : trace) e += v * v;
        if (e == 0.0) {
            adj.fit_error.push_back(0.0);
            continue;
        }
        auto wav = shell_wavelets(bases[r].c, adj.params);
        int spacing = std::max(1, int(std::lround(opt.launch_spacing * wav[0].window_sigma / src.tau)));
        std::vector<int> steps;
        for (int k = 0; k <= n; k += spacing) steps.push_back(k);
        const int L = int(steps.size());
        const int cols = 2 * L * S;
        // the source is zero before t = 0, so atom tails there are fitted to zero too
        const int pre = int(std::ceil(5.0 * wav[0].window_sigma / src.tau));
        const int mmax = n + pre;
        std::vector<std::vector<cplx>> table;
        for (int s = 0; s < S; ++s) table.push_back(shell_atom_table(bases[r].c, adj.params, s, src.tau, mmax));
        Eigen::MatrixXd A(n + 1 + pre, cols);
        for (int l = 0; l < L; ++l)
            for (int s = 0; s < S; ++s)
                for (int k = -pre; k <= n; ++k) {
                    cplx a = table[s][k - steps[l] + mmax];
                    // Re(gamma a) = Re(gamma) Re(a) - Im(gamma) Im(a)
                    A(k + pre, 2 * (l * S + s)) = a.real();
                    A(k + pre, 2 * (l * S + s) + 1) = -a.imag();
                }
        Eigen::VectorXd b = Eigen::VectorXd::Zero(n + 1 + pre);
        for (int k = 0; k <= n; ++k) b(k + pre) = trace[k];
        Eigen::MatrixXd M = A.transpose() * A;
        double lam = opt.tikhonov * M.diagonal().maxCoeff();
        M.diagonal().array() += lam;
        Eigen::VectorXd x = M.ldlt().solve(A.transpose() * b);
        adj.fit_error.push_back((A * x - b).norm() / b.norm());
        for (int l = 0; l < L; ++l) {
            AdjointLaunch al;
            al.location = int(r);
            al.step = steps[l];
            for (int s = 0; s < S; ++s) al.gamma.emplace_back(x(2 * (l * S + s)), x(2 * (l * S + s) + 1));
            adj.launches.push_back(std::move(al));
        }
    }
    return adj;
}

SeismicRecord adjoint_record(const AdjointEnsemble& adj, std::span<const Vec3> points) {
    SeismicRecord rec;
    rec.receivers.assign(points.begin(), points.end());
    rec.tau = adj.tau;
    rec.n_steps = adj.n_steps;
    rec.traces.assign(points.size(), std::vector<double>(adj.n_steps + 1, 0.0));
    const int N = adj.size();
    const double R2 = adj.params.cut_radius() * adj.params.cut_radius();
    const int d = adj.params.ndim;
#pragma omp parallel for schedule(dynamic)
    for (int k = 0; k <= adj.n_steps; ++k) {
        for (const auto& l : adj.launches) {
            int step = k - l.step;
            if (step < 0) continue;
            const auto& tr = *adj.bases[l.location].traj;
            for (int j = 0; j < N; ++j) {
                const BeamState& s = tr.at(step, j);
                cplx c = adj.coef(l, j);
                for (std::size_t i = 0; i < points.size(); ++i) {
                    double d2 = 0.0;
                    for (int a = 0; a < d; ++a) d2 += (points[i][a] - s.Q[a]) * (points[i][a] - s.Q[a]);
                    if (d2 > R2) continue;
                    rec.traces[i][k] += (c * beam_value(adj.params, s, points[i])).real() / N;
                }
            }
        }
    }
    return rec;
}

// ---------------------------------------------------------------- kernels

namespace {

void check_source(const KernelSource& s, const ScalarField& rho) {
    if (!s.fwd || !s.adj) throw KernelError("assemble_kernel: missing trajectory");
    if (s.fwd->n_steps != s.adj->n_steps) throw KernelError("assemble_kernel: step counts differ");
    if (std::abs(s.fwd->tau - s.adj->tau) > 1e-12 * s.fwd->tau)
        throw KernelError("assemble_kernel: time steps differ");
    if (s.fwd->size() != s.adj->size())
        throw KernelError("assemble_kernel: forward and adjoint ensembles differ in size");
    if (s.fwd->params.ndim != rho.grid.ndim) throw KernelError("assemble_kernel: dimension mismatch");
}

std::vector<int> iota_vec(int n) {
    std::vector<int> v(n);
    std::iota(v.begin(), v.end(), 0);
    return v;
}

}  // namespace

namespace {

// Adjoint field samples Re du+/dt at adjoint steps a = 0..n-1 on the grid,
// for a batch that is the same at every step: per location, shell and branch
// the partial field is built once and reused for every launch.
void adjoint_field_fixed(const AdjointEnsemble& adj, std::span<const int> batch, const Grid& g,
                         std::vector<std::vector<double>>& ua) {
    const int n = adj.n_steps;
    const int S = adj.params.n_shell;
    std::vector<char> in(adj.size(), 0);
    for (int j : batch) in[j] = 1;
    const double scale = 1.0 / double(batch.size());
    std::vector<std::vector<cplx>> F(n);
    std::vector<BeamTerm> terms;
    for (std::size_t r = 0; r < adj.bases.size(); ++r) {
        bool used = false;
        for (const auto& l : adj.launches) used = used || l.location == int(r);
        if (!used) continue;
        const BeamTrajectory& tr = *adj.bases[r].traj;
        for (int br : {1, -1})
            for (int s = 0; s < S; ++s) {
                std::vector<int> js;
                for (int j = 0; j < tr.size(); ++j)
                    if (in[j] && tr.beams[j].branch == br && tr.beams[j].shell == s) js.push_back(j);
                if (js.empty()) continue;
                for (int b = 0; b < n; ++b) {
                    terms.clear();
                    for (int j : js) terms.push_back({&tr, j, b, cplx(1.0, 0.0)});
                    F[b].assign(g.size(), cplx(0.0));
                    accumulate_grid_complex(terms, g, FieldKind::dt, scale, F[b]);
                }
                for (const auto& l : adj.launches) {
                    if (l.location != int(r)) continue;
                    const cplx c = br > 0 ? l.gamma[s] : std::conj(l.gamma[s]);
                    const double cr = c.real(), ci = c.imag();
                    for (int a = l.step; a < n; ++a) {
                        const auto& f = F[a - l.step];
                        auto& u = ua[a];
                        for (std::size_t i = 0; i < u.size(); ++i) u[i] += cr * f[i].real() - ci * f[i].imag();
                    }
                }
            }
    }
}

void adjoint_field_at(const AdjointEnsemble& adj, std::span<const int> batch, int a, const Grid& g,
                      std::vector<double>& out, FieldKind kind = FieldKind::dt) {
    std::vector<BeamTerm> terms;
    for (int j : batch)
        for (const auto& l : adj.launches) {
            if (a - l.step < 0) continue;
            terms.push_back({adj.bases[l.location].traj.get(), j, a - l.step, adj.coef(l, j)});
        }
    out.assign(g.size(), 0.0);
    accumulate_grid(terms, g, kind, 1.0 / double(batch.size()), out);
}

}  // namespace

SensitivityKernel assemble_kernel(std::span<const KernelSource> sources, const ScalarField& rho,
                                  const BatchPlan* plan, int m, const KernelOptions& opt) {
    if (sources.empty()) throw KernelError("assemble_kernel: no sources");
    SensitivityKernel out;
    out.K = ScalarField(rho.grid, Units::kernel, 0.0);
    out.full = plan == nullptr || plan->full();
    if (plan) out.plan = *plan;
    out.m = m;
    const Grid& g = rho.grid;
    std::vector<double> uf(g.size()), ua_step(g.size());
    std::vector<BeamTerm> terms;
    for (std::size_t si = 0; si < sources.size(); ++si) {
        const auto& src = sources[si];
        check_source(src, rho);
        const int N = src.fwd->size();
        const int n = src.fwd->n_steps;
        const double tau = src.fwd->tau;
        BatchPlan lane_plan;
        if (plan) {
            if (plan->N != N) throw KernelError("assemble_kernel: plan N differs from the ensemble size");
            lane_plan = plan->with_lane(std::uint32_t(si));
        }
        const auto all = iota_vec(N);
        // adjoint batches that do not change with k allow the reuse path
        const bool fixed = !plan || plan->full() || plan->strategy == Strategy::per_iteration;
        std::vector<std::vector<double>> ua;
        if (fixed && opt.reuse) {
            std::vector<int> ba = plan ? draw(lane_plan, m, 0, Role::adjoint).indices : all;
            ua.assign(n, std::vector<double>(g.size(), 0.0));
            adjoint_field_fixed(*src.adj, ba, g, ua);
        }
        for (int k = 1; k <= n; ++k) {
            std::vector<int> bf = plan ? draw(lane_plan, m, k, Role::forward).indices : all;
            terms.clear();
            for (int j : bf) terms.push_back({src.fwd, j, k, cplx(1.0, 0.0)});
            std::fill(uf.begin(), uf.end(), 0.0);
            accumulate_grid(terms, g, FieldKind::dt, 1.0 / double(bf.size()), uf);
            const int a = n - k;  // adjoint time T - t_k
            const std::vector<double>* uap = nullptr;
            if (!ua.empty()) {
                uap = &ua[a];
            } else {
                std::vector<int> ba = plan ? draw(lane_plan, m, k, Role::adjoint).indices : all;
                adjoint_field_at(*src.adj, ba, a, g, ua_step);
                uap = &ua_step;
            }
            for (std::size_t i = 0; i < g.size(); ++i) out.K[i] += tau * rho[i] * (*uap)[i] * uf[i];
        }
        if (opt.initial_term) {
            // -rho u+(T) du/dt(0), with the k = 0 batches
            std::vector<int> bf = plan ? draw(lane_plan, m, 0, Role::forward).indices : all;
            std::vector<int> ba = plan ? draw(lane_plan, m, 0, Role::adjoint).indices : all;
            terms.clear();
            for (int j : bf) terms.push_back({src.fwd, j, 0, cplx(1.0, 0.0)});
            std::fill(uf.begin(), uf.end(), 0.0);
            accumulate_grid(terms, g, FieldKind::dt, 1.0 / double(bf.size()), uf);
            adjoint_field_at(*src.adj, ba, n, g, ua_step, FieldKind::value);
            for (std::size_t i = 0; i < g.size(); ++i) out.K[i] -= rho[i] * ua_step[i] * uf[i];
        }
    }
    return out;
}

BeamSamples forward_samples(const BeamTrajectory& fwd, std::span<const Vec3> points) {
    const int N = fwd.size(), n = fwd.n_steps, P = int(points.size());
    BeamSamples out(n, N, P);
    const double R2 = fwd.params.cut_radius() * fwd.params.cut_radius();
    const int d = fwd.params.ndim;
#pragma omp parallel for schedule(static)
    for (int k = 1; k <= n; ++k)
        for (int j = 0; j < N; ++j) {
            const BeamState& s = fwd.at(k, j);
            for (int x = 0; x < P; ++x) {
                double d2 = 0.0;
                for (int a = 0; a < d; ++a) d2 += (points[x][a] - s.Q[a]) * (points[x][a] - s.Q[a]);
                if (d2 > R2) continue;
                out.at(k - 1, j, x) = beam_dt(fwd.params, s, points[x]).real();
            }
        }
    return out;
}

BeamSamples adjoint_samples(const AdjointEnsemble& adj, const ScalarField& rho,
                            std::span<const Vec3> points) {
    const int N = adj.size(), n = adj.n_steps, P = int(points.size());
    BeamSamples out(n, N, P);
    const double R2 = adj.params.cut_radius() * adj.params.cut_radius();
    const int d = adj.params.ndim;
    std::vector<double> rho_at(P);
    for (int x = 0; x < P; ++x) rho_at[x] = interpolate(rho, points[x]);
#pragma omp parallel for schedule(static)
    for (int k = 1; k <= n; ++k) {
        const int a = n - k;
        for (int j = 0; j < N; ++j)
            for (const auto& l : adj.launches) {
                if (a - l.step < 0) continue;
                const BeamState& s = adj.bases[l.location].traj->at(a - l.step, j);
                cplx c = adj.coef(l, j);
                for (int x = 0; x < P; ++x) {
                    double d2 = 0.0;
                    for (int q = 0; q < d; ++q) d2 += (points[x][q] - s.Q[q]) * (points[x][q] - s.Q[q]);
                    if (d2 > R2) continue;
                    out.at(k - 1, j, x) += rho_at[x] * (c * beam_dt(adj.params, s, points[x])).real();
                }
            }
    }
    return out;
}

std::vector<double> lambda_stat(const BeamTrajectory& fwd, const AdjointEnsemble& adj,
                                const ScalarField& rho, int p, std::span<const Vec3> points) {
    if (fwd.n_steps != adj.n_steps || std::abs(fwd.tau - adj.tau) > 1e-12 * fwd.tau)
        throw KernelError("lambda_stat: trajectories differ in sampling");
    for (const auto& x : points)
        if (!inside_extent(rho.grid, x)) throw KernelError("lambda_stat: point outside the grid");
    return lambda_stat(forward_samples(fwd, points), adjoint_samples(adj, rho, points), p, fwd.tau);
}

double highpass_fraction(const ScalarField& f) {
    const Grid& g = f.grid;
    std::vector<double> sm = f.values, tmp(f.size());
    for (int a = 0; a < g.ndim; ++a) {
        std::size_t stride = 1;
        for (int b = a + 1; b < g.ndim; ++b) stride *= g.dims[b];
        const int na = g.dims[a];
        for (std::size_t i = 0; i < f.size(); ++i) {
            int ia = int((i / stride) % na);
            double s = sm[i], w = 1.0;
            if (ia > 0) s += sm[i - stride], w += 1.0;
            if (ia + 1 < na) s += sm[i + stride], w += 1.0;
            tmp[i] = s / w;
        }
        sm.swap(tmp);
    }
    double hp = 0.0, tot = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        hp += (f[i] - sm[i]) * (f[i] - sm[i]);
        tot += f[i] * f[i];
    }
    return tot > 0.0 ? hp / tot : 0.0;
}

}  // namespace rbt
