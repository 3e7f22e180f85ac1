#include "rbt/inversion.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace rbt {

namespace {

void same_grid(const ScalarField& a, const ScalarField& b, const char* what) {
    if (a.grid != b.grid || a.size() != b.size()) throw InversionError(std::string(what) + ": grid mismatch");
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

std::uint64_t clip(ScalarField& X, const VelocityBounds& b) {
    const double lo = b.X_lo(), hi = b.X_hi();
    std::uint64_t n = 0;
    for (auto& v : X.values) {
        if (v < lo) {
            v = lo;
            ++n;
        } else if (v > hi) {
            v = hi;
            ++n;
        }
    }
    return n;
}

double f_peak(const FgaParams& fp, double c) {
    return fp.band_center * c / (2.0 * M_PI * fp.eps * fp.ell);
}

std::vector<std::vector<double>> tti_windows(const InversionConfig& cfg, const SeismicRecord& syn, double c) {
    double hw = cfg.window_half_width > 0.0 ? cfg.window_half_width : 2.0 / f_peak(cfg.fga, c);
    std::vector<std::vector<double>> w;
    for (const auto& tr : syn.traces) w.push_back(arrival_window(tr, syn.tau, hw));
    return w;
}

}  // namespace

void RegularizerSpec::validate(const Grid& g) const {
    if (!(r > 0.0) || !std::isfinite(r)) throw InversionError("regularizer: r must be > 0");
    if (X_ref.grid != g || X_ref.size() != g.size()) throw InversionError("regularizer: X_ref grid mismatch");
    if (smoothing < 0.0) throw InversionError("regularizer: negative smoothing radius");
}

double regularizer_value(const ScalarField& X, const RegularizerSpec& spec) {
    spec.validate(X.grid);
    double s = 0.0;
    for (std::size_t i = 0; i < X.size(); ++i) {
        double d = X[i] - spec.X_ref[i];
        s += d * d;
    }
    return 0.5 * spec.r * s;
}

ScalarField regularizer_grad(const ScalarField& X, const RegularizerSpec& spec) {
    spec.validate(X.grid);
    ScalarField g(X.grid, Units::dimensionless);
    for (std::size_t i = 0; i < X.size(); ++i) g[i] = spec.r * (X[i] - spec.X_ref[i]);
    return g;
}

void VelocityBounds::validate() const {
    if (!(c_lo > 0.0) || !(c_hi > c_lo)) throw InversionError("velocity bounds: need 0 < c_lo < c_hi");
}

VelocityBounds VelocityBounds::around(const ScalarField& c) {
    auto [lo, hi] = std::minmax_element(c.values.begin(), c.values.end());
    return {0.5 * *lo, 2.0 * *hi};
}

double VelocityBounds::X_lo() const { return -2.0 * std::log(c_hi); }
double VelocityBounds::X_hi() const { return -2.0 * std::log(c_lo); }

InversionState step_gd(const InversionState& st, const ScalarField& K, const RegularizerSpec& spec,
                       double alpha, const VelocityBounds& bounds) {
    if (!(alpha >= 0.0)) throw InversionError("step_gd: alpha must be >= 0");
    same_grid(st.X, K, "step_gd");
    for (double v : K.values)
        if (!std::isfinite(v)) throw InversionError("step_gd: non-finite kernel value");
    bounds.validate();
    // r = 0 switches the regularizer off here; regularizer_grad itself rejects it
    ScalarField gV = spec.r > 0.0 ? regularizer_grad(st.X, spec) : ScalarField(st.X.grid, Units::dimensionless);
    InversionState out = st;
    for (std::size_t i = 0; i < out.X.size(); ++i) out.X[i] = st.X[i] - alpha * (K[i] + gV[i]);
    out.last_clipped = clip(out.X, bounds);
    out.clip_events += out.last_clipped;
    out.m = st.m + 1;
    return out;
}

std::vector<double> lbfgs_direction(const std::deque<LbfgsPair>& pairs, const std::vector<double>& g) {
    std::vector<double> q = g;
    const int M = int(pairs.size());
    std::vector<double> a(M), rho(M);
    for (int i = M - 1; i >= 0; --i) {
        rho[i] = 1.0 / dot(pairs[i].y, pairs[i].s);
        a[i] = rho[i] * dot(pairs[i].s, q);
        for (std::size_t c = 0; c < q.size(); ++c) q[c] -= a[i] * pairs[i].y[c];
    }
    if (M > 0) {
        const auto& last = pairs.back();
        double gamma = dot(last.s, last.y) / dot(last.y, last.y);
        for (double& v : q) v *= gamma;
    }
    for (int i = 0; i < M; ++i) {
        double b = rho[i] * dot(pairs[i].y, q);
        for (std::size_t c = 0; c < q.size(); ++c) q[c] += pairs[i].s[c] * (a[i] - b);
    }
    for (double& v : q) v = -v;
    return q;
}

LbfgsResult step_lbfgs(const InversionState& st, const ScalarField& g, double J0,
                       const std::function<double(const ScalarField&)>& J, const LbfgsOptions& opt,
                       const VelocityBounds& bounds) {
    if (opt.memory < 0) throw InversionError("step_lbfgs: negative memory");
    if (!(st.alpha > 0.0)) throw InversionError("step_lbfgs: initial step must be > 0");
    same_grid(st.X, g, "step_lbfgs");
    bounds.validate();
    LbfgsResult res;
    res.state = st;
    res.J = J0;
    InversionState& s = res.state;
    // new curvature pair from the previous accepted step
    if (!s.prev_X.empty() && opt.memory > 0) {
        LbfgsPair p;
        p.s.resize(g.size());
        p.y.resize(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            p.s[i] = st.X[i] - s.prev_X[i];
            p.y[i] = g[i] - s.prev_grad[i];
        }
        if (dot(p.s, p.y) > 1e-12 * std::sqrt(dot(p.s, p.s) * dot(p.y, p.y))) {
            s.pairs.push_back(std::move(p));
            while (int(s.pairs.size()) > opt.memory) s.pairs.pop_front();
        } else {
            s.pairs.clear();  // curvature failed: restart from steepest descent
        }
    }
    if (opt.memory == 0) s.pairs.clear();
    double gg = dot(g.values, g.values);
    if (gg == 0.0) {
        s.m = st.m + 1;
        return res;
    }
    auto d = lbfgs_direction(s.pairs, g.values);
    double slope = dot(d, g.values);
    if (!(slope < 0.0)) {
        s.pairs.clear();
        d = g.values;
        for (double& v : d) v = -v;
        slope = -gg;
    }
    // the first step length is st.alpha for a steepest-descent direction and
    // 1 once the memory supplies a scaling
    double step = s.pairs.empty() ? st.alpha : 1.0;
    ScalarField best = st.X;
    double best_J = J0;
    bool accepted = false;
    ScalarField trial = st.X;
    std::uint64_t clipped = 0;
    for (int it = 0; it <= opt.max_backtracks; ++it) {
        for (std::size_t i = 0; i < trial.size(); ++i) trial[i] = st.X[i] + step * d[i];
        clipped = clip(trial, bounds);
        double Jt = J(trial);
        if (std::isfinite(Jt) && Jt < best_J) {
            best_J = Jt;
            best = trial;
        }
        if (std::isfinite(Jt) && Jt <= J0 + opt.armijo * step * slope) {
            accepted = true;
            best = trial;
            best_J = Jt;
            break;
        }
        step *= opt.shrink;
    }
    if (!accepted) {
        res.exhausted = true;
        res.warning = "line search exhausted; keeping the best trial point";
    }
    s.prev_X = st.X.values;
    s.prev_grad = g.values;
    s.X = best;
    s.last_clipped = clipped;
    s.clip_events += clipped;
    s.m = st.m + 1;
    res.J = best_J;
    return res;
}

Optimizer optimizer_from_name(const std::string& s) {
    if (s == "gd") return Optimizer::gd;
    if (s == "lbfgs") return Optimizer::lbfgs;
    throw InversionError("unknown optimizer '" + s + "'");
}

std::string optimizer_name(Optimizer o) { return o == Optimizer::gd ? "gd" : "lbfgs"; }

void Acquisition::validate(const Grid& g) const {
    if (sources.empty()) throw InversionError("acquisition: no sources");
    if (receivers.empty()) throw InversionError("acquisition: no receivers");
    if (!weights.empty() && weights.size() != receivers.size())
        throw InversionError("acquisition: one weight per receiver required");
    for (const auto& x : sources)
        if (!inside_extent(g, x)) throw InversionError("acquisition: source outside the model grid");
    for (const auto& x : receivers)
        if (!inside_extent(g, x)) throw InversionError("acquisition: receiver outside the model grid");
}

void InversionConfig::validate() const {
    grid.validate();
    target.validate();
    initial.validate();
    acq.validate(grid);
    fga.validate();
    if (!(tau > 0.0)) throw InversionError("config: tau must be > 0");
    if (n_steps < 1) throw InversionError("config: need at least one step");
    if (plan) {
        plan->validate();
        if (plan->N != fga.beam_count()) throw InversionError("config: plan N differs from the beam count");
    }
    if (alpha < 0.0) throw InversionError("config: alpha must be >= 0");
    if (!(max_update > 0.0)) throw InversionError("config: max_update must be > 0");
    if (!(reg_relative > 0.0)) throw InversionError("config: regularization must be > 0");
    if (max_iter < 0) throw InversionError("config: negative iteration count");
    if (mask_radius < 0.0 || smoothing < 0.0) throw InversionError("config: negative radius");
    if (bounds) bounds->validate();
}

namespace {

FDConfig padded_fd(const InversionConfig& cfg, double c_max) {
    FDConfig fc;
    const int pad = int(std::ceil(cfg.fd.pad / cfg.fd.h));
    fc.grid = padded_grid(cfg.grid, cfg.fd.h, pad);
    fc.boundary = Boundary::absorbing_sponge;
    fc.sponge_cells = pad;
    fc.sponge_strength = sponge_strength_for(pad);
    fc.dt = stable_dt(fc.grid, c_max, 0.9);
    return fc;
}

std::vector<SeismicRecord> fd_records(const InversionConfig& cfg, const ScalarField& c, const FDConfig& fc,
                                      const std::function<double(const Vec3&)>& c_at) {
    FdRequest rq;
    rq.receivers = cfg.acq.receivers;
    rq.tau = cfg.tau;
    rq.n_steps = cfg.n_steps;
    std::vector<SeismicRecord> out;
    for (const auto& xs : cfg.acq.sources) {
        FdSource src;
        src.kind = FdSource::Kind::impulse;
        src.x_s = xs;
        src.c_s = c_at(xs);
        src.fga = cfg.fga;
        out.push_back(fd_solve(c, src, fc, rq).record);
    }
    return out;
}

}  // namespace

double evaluate_misfit_fd(const InversionConfig& cfg, const ScalarField& X, const std::vector<SeismicRecord>& obs) {
    if (obs.size() != cfg.acq.sources.size()) throw InversionError("observations: one record per source required");
    ScalarField cm = velocity_from_log(X);
    const double cmax = *std::max_element(cm.values.begin(), cm.values.end());
    FDConfig fc = padded_fd(cfg, cmax);
    ScalarField c(fc.grid, Units::velocity);
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = interpolate(cm, fc.grid.center(i));
    auto syn = fd_records(cfg, c, fc, [&](const Vec3& x) { return interpolate(cm, x); });
    double J = 0.0;
    for (std::size_t s = 0; s < syn.size(); ++s) {
        if (cfg.misfit == MisfitKind::fwi) {
            J += misfit_fwi(obs[s], syn[s], cfg.acq.weights).J;
        } else {
            J += misfit_tti(obs[s], syn[s], tti_windows(cfg, syn[s], interpolate(cm, cfg.acq.sources[s]))).J;
        }
    }
    return J;
}

std::vector<SeismicRecord> make_observations(const InversionConfig& cfg) {
    cfg.validate();
    std::vector<SeismicRecord> out;
    if (cfg.obs == ObsSource::fga) {
        auto ct = eval_preset(cfg.target, cfg.grid);
        GridVelocity gv(ct);
        for (const auto& xs : cfg.acq.sources) {
            auto tr = propagate(decompose_point_source(xs, cfg.target.velocity_at(xs[0], xs[cfg.grid.ndim - 1]), cfg.fga),
                                gv, cfg.fga, cfg.tau, cfg.n_steps, {.store_z = false});
            out.push_back(record_at_receivers(tr, cfg.acq.receivers));
        }
        return out;
    }
    const Grid pg = padded_grid(cfg.grid, cfg.fd.h, int(std::ceil(cfg.fd.pad / cfg.fd.h)));
    ScalarField c = eval_preset(cfg.target, pg);
    FDConfig fc = padded_fd(cfg, *std::max_element(c.values.begin(), c.values.end()));
    const int nd = cfg.grid.ndim;
    return fd_records(cfg, c, fc, [&](const Vec3& x) { return cfg.target.velocity_at(x[0], x[nd - 1]); });
}

double default_mask_radius(const FgaParams& fp) { return 0.5 * std::sqrt(fp.eps) * fp.ell; }

ScalarField acquisition_taper(const Grid& g, const Acquisition& acq, double r) {
    ScalarField w(g, Units::dimensionless, 1.0);
    if (r <= 0.0) return w;
    for (std::size_t i = 0; i < g.size(); ++i) {
        Vec3 x = g.center(i);
        double d = 1e300;
        auto near = [&](const Vec3& p) {
            double s = 0.0;
            for (int a = 0; a < g.ndim; ++a) s += (x[a] - p[a]) * (x[a] - p[a]);
            d = std::min(d, std::sqrt(s));
        };
        for (const auto& p : acq.sources) near(p);
        for (const auto& p : acq.receivers) near(p);
        if (d <= r)
            w[i] = 0.0;
        else if (d < 2.0 * r)
            w[i] = 0.5 - 0.5 * std::cos(M_PI * (d - r) / r);
    }
    return w;
}

namespace {

struct Forward {
    std::vector<BeamTrajectory> fwd;
    Evaluation eval;
};

Forward forward_all(const InversionConfig& cfg, const ScalarField& X, const std::vector<SeismicRecord>& obs,
                    bool keep) {
    if (obs.size() != cfg.acq.sources.size()) throw InversionError("observations: one record per source required");
    ScalarField c = velocity_from_log(X);
    GridVelocity gv(c);
    Forward f;
    for (std::size_t s = 0; s < cfg.acq.sources.size(); ++s) {
        const Vec3& xs = cfg.acq.sources[s];
        auto tr = propagate(decompose_point_source(xs, interpolate(c, xs), cfg.fga), gv, cfg.fga, cfg.tau,
                            cfg.n_steps, {.store_z = false});
        auto syn = record_at_receivers(tr, cfg.acq.receivers);
        MisfitReport rep;
        if (cfg.misfit == MisfitKind::fwi) {
            rep = misfit_fwi(obs[s], syn, cfg.acq.weights);
        } else {
            auto w = tti_windows(cfg, syn, interpolate(c, xs));
            rep = misfit_tti(obs[s], syn, w);
        }
        f.eval.J += rep.J;
        f.eval.reports.push_back(std::move(rep));
        f.eval.syn.push_back(std::move(syn));
        if (keep) f.fwd.push_back(std::move(tr));
    }
    return f;
}

}  // namespace

Evaluation evaluate_misfit(const InversionConfig& cfg, const ScalarField& X, const std::vector<SeismicRecord>& obs) {
    return forward_all(cfg, X, obs, false).eval;
}

GradientResult evaluate_gradient(const InversionConfig& cfg, const ScalarField& X,
                                 const std::vector<SeismicRecord>& obs, int m) {
    auto f = forward_all(cfg, X, obs, true);
    ScalarField c = velocity_from_log(X);
    GridVelocity gv(c);
    auto bases = adjoint_bases(cfg.acq.receivers, gv, cfg.fga, cfg.tau, cfg.n_steps);
    std::vector<AdjointEnsemble> adj;
    adj.reserve(cfg.acq.sources.size());
    for (std::size_t s = 0; s < cfg.acq.sources.size(); ++s) {
        SourceSpec src;
        if (cfg.misfit == MisfitKind::fwi) {
            src = adjoint_source_fwi(obs[s], f.eval.syn[s], cfg.acq.weights);
        } else {
            auto w = tti_windows(cfg, f.eval.syn[s], interpolate(c, cfg.acq.sources[s]));
            src = adjoint_source_tti(f.eval.syn[s], w, f.eval.reports[s].shifts).source;
        }
        adj.push_back(build_adjoint(src, bases, cfg.adjoint));
    }
    std::vector<KernelSource> ks;
    for (std::size_t s = 0; s < adj.size(); ++s) ks.push_back({&f.fwd[s], &adj[s]});
    const int q = cfg.kernel_refine > 0 ? cfg.kernel_refine : auto_kernel_refine(X.grid, cfg.fga);
    const Grid fine = refine_grid(X.grid, q);
    ScalarField rho(fine, Units::density);
    for (std::size_t i = 0; i < fine.size(); ++i) {
        double v = interpolate(c, fine.center(i));
        rho[i] = 1.0 / (v * v);
    }
    GradientResult out;
    KernelOptions ko;
    ko.initial_term = true;
    out.kernel = assemble_kernel(ks, rho, cfg.plan ? &*cfg.plan : nullptr, m, ko);
    out.kernel.K = project_kernel(out.kernel.K, c);
    double r = cfg.mask_radius > 0.0 ? cfg.mask_radius : default_mask_radius(cfg.fga);
    auto taper = acquisition_taper(X.grid, cfg.acq, r);
    if (cfg.smoothing > 0.0) out.kernel.K = smooth_field(out.kernel.K, cfg.smoothing);
    for (std::size_t i = 0; i < X.size(); ++i) out.kernel.K[i] *= taper[i];
    out.eval = std::move(f.eval);
    return out;
}

InversionResult run_inversion(const InversionConfig& cfg, const std::vector<SeismicRecord>& obs) {
    cfg.validate();
    using clk = std::chrono::steady_clock;
    const auto t0 = clk::now();
    auto elapsed = [&] { return std::chrono::duration<double>(clk::now() - t0).count(); };
    InversionResult res;
    const ScalarField c0 = eval_preset(cfg.initial, cfg.grid);
    const VelocityBounds bounds = cfg.bounds ? *cfg.bounds : VelocityBounds::around(eval_preset(cfg.target, cfg.grid));
    InversionState& st = res.state;
    st.X = density_and_log(c0).X;
    RegularizerSpec reg;
    reg.X_ref = st.X;
    reg.smoothing = cfg.smoothing;
    auto J_of = [&](const ScalarField& X) {
        double J = evaluate_misfit(cfg, X, obs).J;
        return reg.r > 0.0 ? J + regularizer_value(X, reg) : J;
    };
    try {
        for (;;) {
            if (cfg.keep_models) res.models.push_back(st.X);
            const bool last = st.m >= cfg.max_iter;
            double J;
            std::optional<GradientResult> gr;
            if (last) {
                J = evaluate_misfit(cfg, st.X, obs).J;
            } else {
                gr = evaluate_gradient(cfg, st.X, obs, st.m);
                J = gr->eval.J;
            }
            if (!std::isfinite(J)) throw InversionError("non-finite misfit at iteration " + std::to_string(st.m));
            if (st.m == 0) {
                double kmax = 0.0;
                if (gr)
                    for (double v : gr->kernel.K.values) kmax = std::max(kmax, std::abs(v));
                // r in units of the first kernel so the default is scale free
                reg.r = kmax > 0.0 ? cfg.reg_relative * kmax / cfg.max_update : cfg.reg_relative;
                res.r = reg.r;
                st.alpha = cfg.alpha > 0.0 ? cfg.alpha : (kmax > 0.0 ? cfg.max_update / kmax : 1.0);
            }
            if (reg.r > 0.0) J += regularizer_value(st.X, reg);
            st.history.push_back(J);
            res.wallclock.push_back(elapsed());
            if (J <= cfg.J_star) {
                res.stopped_on_threshold = true;
                break;
            }
            if (last) break;
            if (cfg.keep_kernels) res.kernels.push_back(gr->kernel.K);
            if (cfg.optimizer == Optimizer::gd) {
                st = step_gd(st, gr->kernel.K, reg, st.alpha, bounds);
            } else {
                ScalarField g = gr->kernel.K;
                if (reg.r > 0.0) {
                    auto gV = regularizer_grad(st.X, reg);
                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gV[i];
                }
                auto lr = step_lbfgs(st, g, J, J_of, cfg.lbfgs, bounds);
                if (lr.exhausted) res.warnings.push_back("iteration " + std::to_string(st.m) + ": " + lr.warning);
                st = std::move(lr.state);
            }
            double frac = double(st.last_clipped) / double(st.X.size());
            res.max_clip_fraction = std::max(res.max_clip_fraction, frac);
            if (frac > 0.1) res.clip_failure = true;
        }
    } catch (const std::exception& e) {
        res.error = e.what();
    }
    return res;
}

std::vector<double> deviation_norm(const std::vector<std::vector<std::vector<double>>>& rb,
                                   const std::vector<std::vector<double>>& det, double cell_volume) {
    if (rb.empty()) throw InversionError("deviation_norm: no replicates");
    std::vector<double> out(det.size(), 0.0);
    for (const auto& run : rb) {
        if (run.size() != det.size()) throw InversionError("deviation_norm: iteration counts differ");
        for (std::size_t m = 0; m < det.size(); ++m) {
            if (run[m].size() != det[m].size()) throw InversionError("deviation_norm: grid mismatch");
            double s = 0.0;
            for (std::size_t i = 0; i < det[m].size(); ++i) {
                double d = run[m][i] - det[m][i];
                s += d * d;
            }
            out[m] += s * cell_volume;
        }
    }
    for (double& v : out) v = std::sqrt(v / double(rb.size()));
    return out;
}

std::vector<double> deviation_norm(const std::vector<InversionResult>& rb, const InversionResult& det) {
    if (det.models.empty()) throw InversionError("deviation_norm: models were not kept");
    const Grid& g = det.models[0].grid;
    auto unpack = [&](const InversionResult& r) {
        std::vector<std::vector<double>> v;
        for (const auto& X : r.models) {
            if (X.grid != g) throw InversionError("deviation_norm: grid mismatch");
            v.push_back(X.values);
        }
        return v;
    };
    std::vector<std::vector<std::vector<double>>> runs;
    for (const auto& r : rb) runs.push_back(unpack(r));
    return deviation_norm(runs, unpack(det), g.cell_volume());
}

std::vector<std::vector<double>> frozen_toy_run(const FrozenToy& toy, double h, int iterations,
                                                const BatchPlan* plan) {
    const int P = toy.fwd.n_points;
    if (int(toy.X0.size()) != P || int(toy.X_ref.size()) != P) throw InversionError("frozen toy: size mismatch");
    if (!(h > 0.0) || iterations < 0) throw InversionError("frozen toy: need h > 0");
    std::vector<std::vector<double>> out{toy.X0};
    std::vector<double> X = toy.X0;
    for (int m = 0; m < iterations; ++m) {
        std::vector<double> K;
        if (plan) {
            std::vector<std::vector<int>> fb, ab;
            for (int k = 0; k < toy.fwd.K; ++k) {
                fb.push_back(draw(*plan, m, k + 1, Role::forward).indices);
                ab.push_back(draw(*plan, m, k + 1, Role::adjoint).indices);
            }
            K = kernel_from_samples(toy.fwd, toy.adj, toy.tau, fb, ab);
        } else {
            K = kernel_from_samples(toy.fwd, toy.adj, toy.tau);
        }
        for (int x = 0; x < P; ++x) X[x] -= h * (K[x] + toy.r * (X[x] - toy.X_ref[x]));
        out.push_back(X);
    }
    return out;
}

int auto_kernel_refine(const Grid& g, const FgaParams& fp) {
    const double lam = 2.0 * M_PI * fp.eps * fp.ell / fp.p_hi();
    double h = 0.0;
    for (int a = 0; a < g.ndim; ++a) h = std::max(h, g.spacing[a]);
    return std::max(1, int(std::ceil(h / (0.25 * lam))));
}

Grid refine_grid(const Grid& g, int q) {
    if (q < 1) throw InversionError("refine_grid: factor must be >= 1");
    Grid f = g;
    for (int a = 0; a < g.ndim; ++a) {
        f.dims[a] = g.dims[a] * q;
        f.spacing[a] = g.spacing[a] / q;
    }
    return f;
}

ScalarField project_kernel(const ScalarField& K_fine, const ScalarField& c_model) {
    const Grid& g = c_model.grid;
    const Grid& f = K_fine.grid;
    for (int a = 0; a < 3; ++a)
        if (std::abs(f.extent(a) - g.extent(a)) > 1e-9 * g.extent(a) || f.origin[a] != g.origin[a])
            throw InversionError("project_kernel: grids do not cover the same box");
    ScalarField out(g, Units::kernel, 0.0);
    const double dv = f.cell_volume();
    for (std::size_t i = 0; i < f.size(); ++i) {
        const Vec3 x = f.center(i);
        // the weights of interpolate(): clamped multilinear
        int i0[3] = {0, 0, 0};
        double w[3] = {0.0, 0.0, 0.0};
        for (int a = 0; a < g.ndim; ++a) {
            double u = (x[a] - g.origin[a]) / g.spacing[a] - 0.5;
            u = std::clamp(u, 0.0, double(g.dims[a] - 1));
            int j = std::min(int(u), g.dims[a] - 2);
            i0[a] = j;
            w[a] = u - j;
        }
        const double cx = interpolate(c_model, x);
        const int corners = 1 << g.ndim;
        for (int cn = 0; cn < corners; ++cn) {
            double wt = 1.0;
            int id[3] = {0, 0, 0};
            for (int a = 0; a < g.ndim; ++a) {
                int bit = cn >> (g.ndim - 1 - a) & 1;
                wt *= bit ? w[a] : 1.0 - w[a];
                id[a] = i0[a] + bit;
            }
            if (wt == 0.0) continue;
            std::size_t node = g.ndim == 3 ? g.index(id[0], id[1], id[2]) : g.index(id[0], id[1]);
            out[node] += K_fine[i] * wt * c_model[node] / cx * dv;
        }
    }
    const double cv = g.cell_volume();
    for (auto& v : out.values) v /= cv;
    return out;
}

ScalarField smooth_field(const ScalarField& f, double radius) {
    if (radius <= 0.0) return f;
    const Grid& g = f.grid;
    ScalarField cur = f;
    for (int a = 0; a < g.ndim; ++a) {
        const double sg = radius / g.spacing[a];
        const int R = int(std::ceil(3.0 * sg));
        std::vector<double> w(2 * R + 1);
        for (int i = -R; i <= R; ++i) w[i + R] = std::exp(-0.5 * i * i / (sg * sg));
        std::size_t stride = 1;
        for (int b = g.ndim - 1; b > a; --b) stride *= g.dims[b];
        ScalarField next = cur;
        for (std::size_t c = 0; c < g.size(); ++c) {
            const int i = int(c / stride % g.dims[a]);
            double s = 0.0, n = 0.0;
            for (int d = -R; d <= R; ++d) {
                int j = i + d;
                if (j < 0 || j >= g.dims[a]) continue;
                s += w[d + R] * cur[c + (std::ptrdiff_t(d) * std::ptrdiff_t(stride))];
                n += w[d + R];
            }
            next[c] = s / n;
        }
        cur = std::move(next);
    }
    return cur;
}

}  // namespace rbt
