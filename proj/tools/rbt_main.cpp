// rbt: command-line entry point. Exit codes: 0 ok, 2 config error,
// 3 numerical failure, 4 validation failure.
#include <omp.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "rbt/cli_io.hpp"
#include "rbt/validation.hpp"

namespace fs = std::filesystem;
using namespace rbt;

namespace {

constexpr int kOk = 0, kConfig = 2, kNumerical = 3, kValidation = 4;

struct Run {
    RunConfig cfg;
    fs::path out;
    std::string command;
};

std::string file(const Run& r, const std::string& name) { return (r.out / name).string(); }

void write_manifest(const Run& r, bool seed_from_entropy) {
    std::ofstream m(file(r, "manifest.txt"));
    m << "# rbt run manifest\n# command: " << r.command << '\n';
    if (seed_from_entropy) m << "# seed drawn from entropy; rerun with --seed " << *r.cfg.seed << '\n';
    m << config_text(r.cfg);
    if (!m) throw FormatError("cannot write manifest");
}

int cmd_forward(const Run& r) {
    InversionConfig ic = to_inversion_config(r.cfg);
    ScalarField c = eval_preset(ic.target, ic.grid);
    write_grid(c, file(r, "model_target.rbtg"));
    render_heatmap(c, file(r, "model_target.ppm"), ColorScale::linear);
    GridVelocity gv(c);
    std::vector<Vec3> centers(ic.grid.size());
    for (std::size_t i = 0; i < centers.size(); ++i) centers[i] = ic.grid.center(i);
    for (std::size_t s = 0; s < ic.acq.sources.size(); ++s) {
        const Vec3& xs = ic.acq.sources[s];
        auto tr = propagate(decompose_point_source(xs, interpolate(c, xs), ic.fga), gv, ic.fga, ic.tau,
                            ic.n_steps, {.store_z = false});
        if (tr.singular_flags) std::cerr << "warning: " << tr.singular_flags << " near-singular beam steps\n";
        auto rec = record_at_receivers(tr, ic.acq.receivers);
        write_record(rec, file(r, "synthetic_s" + std::to_string(s) + ".tsv"));
        for (int q = 1; q <= 4; ++q) {
            int k = ic.n_steps * q / 4;
            auto u = reconstruct(tr, {}, centers, k);
            ScalarField f(ic.grid, Units::dimensionless);
            for (std::size_t i = 0; i < f.size(); ++i) f[i] = u[i].real();
            std::string base = "snapshot_s" + std::to_string(s) + "_k" + std::to_string(k);
            write_grid(f, file(r, base + ".rbtg"));
            auto info = render_heatmap(f, file(r, base + ".ppm"), ColorScale::diverging);
            if (!info.warning.empty()) std::cerr << "warning: " << base << ": " << info.warning << '\n';
        }
    }
    std::printf("forward: %zu source(s), N = %d beams, %d steps -> %s\n", ic.acq.sources.size(),
                ic.fga.beam_count(), ic.n_steps, r.out.c_str());
    return kOk;
}

int cmd_kernel(const Run& r) {
    InversionConfig ic = to_inversion_config(r.cfg);
    auto obs = make_observations(ic);
    ScalarField X0 = density_and_log(eval_preset(ic.initial, ic.grid)).X;
    auto gr = evaluate_gradient(ic, X0, obs, 0);
    gr.kernel.K.units = Units::kernel;
    write_grid(gr.kernel.K, file(r, "kernel.rbtg"));
    auto info = render_heatmap(gr.kernel.K, file(r, "kernel.ppm"), ColorScale::diverging);
    if (!info.warning.empty()) std::cerr << "warning: kernel: " << info.warning << '\n';
    for (std::size_t s = 0; s < obs.size(); ++s) write_record(obs[s], file(r, "observed_s" + std::to_string(s) + ".tsv"));
    std::printf("kernel: J = %.10g, p/N = %d/%d (%s), range [%.4g, %.4g]\n", gr.eval.J, ic.plan->p, ic.plan->N,
                ic.plan->full() ? "full" : strategy_name(ic.plan->strategy).c_str(), info.lo, info.hi);
    return kOk;
}

int cmd_invert(const Run& r) {
    InversionConfig ic = to_inversion_config(r.cfg);
    auto obs = make_observations(ic);
    auto res = run_inversion(ic, obs);
    if (!res.state.history.empty()) write_misfit_log(res.state.history, res.wallclock, file(r, "misfit.log"));
    for (std::size_t m = 0; m < res.models.size(); ++m)
        write_grid(velocity_from_log(res.models[m]), file(r, "model_m" + std::to_string(m) + ".rbtg"));
    if (!res.models.empty()) {
        auto c = velocity_from_log(res.models.back());
        render_heatmap(c, file(r, "model_final.ppm"), ColorScale::linear);
        auto c0 = velocity_from_log(res.models.front());
        ScalarField dc(c.grid, Units::velocity);
        for (std::size_t i = 0; i < dc.size(); ++i) dc[i] = c[i] - c0[i];
        render_heatmap(dc, file(r, "model_update.ppm"), ColorScale::diverging);
    }
    for (auto& w : res.warnings) std::cerr << "warning: " << w << '\n';
    for (std::size_t m = 0; m < res.state.history.size(); ++m)
        std::printf("%zu\t%.10g\t%.2f\n", m, res.state.history[m], res.wallclock[m]);
    if (!res.error.empty()) {
        std::cerr << "error: " << res.error << '\n';
        return kNumerical;
    }
    if (res.clip_failure) {
        std::cerr << "validation failure: one step clipped " << 100.0 * res.max_clip_fraction
                  << "% of cells to the velocity bounds\n";
        return kValidation;
    }
    return kOk;
}

int cmd_validate(const Run& r) {
    bool ok = true;
    std::ofstream rep(file(r, "validate.txt"));
    auto line = [&](const std::string& s) {
        std::puts(s.c_str());
        rep << s << '\n';
    };
    char buf[256];
    const double eps = r.cfg.eps;
    auto cmp = fga_vs_fd_homogeneous(eps, 8.0 * eps / 0.025);
    bool a = cmp.rel_l2 <= 0.15;
    ok &= a;
    std::snprintf(buf, sizeof buf, "%s fga-vs-fd eps=%g N=%d rel_l2=%.4f (<= 0.15)", a ? "PASS" : "FAIL", eps, cmp.N,
                  cmp.rel_l2);
    line(buf);
    auto vo = variance_oracle();
    bool b = vo.max_rel_error <= 1e-10;
    ok &= b;
    std::snprintf(buf, sizeof buf, "%s variance-identity exact N=%d p=%d steps=%d max_rel=%.3e (<= 1e-10)",
                  b ? "PASS" : "FAIL", vo.N, vo.p, vo.steps, vo.max_rel_error);
    line(buf);
    // sampled check on a larger ensemble at the configured rate
    BeamSamples adj;
    double tau = 0;
    BeamSamples fwd = oracle_forward(2, 16, 4, 6, 12, *r.cfg.seed, &adj, &tau);
    const double rate = r.cfg.sampling_rate < 1.0 ? r.cfg.sampling_rate : 0.2;
    const int p = std::max(1, int(std::lround(rate * fwd.N)));
    auto pred = predicted_chi_variance(fwd, adj, p, tau);
    auto full = kernel_from_samples(fwd, adj, tau);
    BatchPlan plan{Strategy::per_time_step, fwd.N, p, *r.cfg.seed, 0};
    const int draws = 4000;
    std::vector<double> m2(fwd.n_points, 0.0);
    std::vector<std::vector<int>> fb(fwd.K), ab(fwd.K);
    for (int m = 0; m < draws; ++m) {
        for (int k = 0; k < fwd.K; ++k) {
            fb[k] = draw(plan, m, k + 1, Role::forward).indices;
            ab[k] = draw(plan, m, k + 1, Role::adjoint).indices;
        }
        auto K = kernel_from_samples(fwd, adj, tau, fb, ab);
        for (int x = 0; x < fwd.n_points; ++x) m2[x] += (K[x] - full[x]) * (K[x] - full[x]) / draws;
    }
    double se = 0, sp = 0;
    for (int x = 0; x < fwd.n_points; ++x) {
        se += m2[x];
        sp += pred[x];
    }
    double ratio = se / sp;
    bool c = ratio >= 0.8 && ratio <= 1.25;
    ok &= c;
    std::snprintf(buf, sizeof buf, "%s variance-identity sampled N=%d p=%d draws=%d ratio=%.4f (in [0.8, 1.25])",
                  c ? "PASS" : "FAIL", fwd.N, p, draws, ratio);
    line(buf);
    return ok ? kOk : kValidation;
}

int cmd_enumerate(const Run& r) {
    auto vo = variance_oracle(1, 1, 3, 2, 3, 20, *r.cfg.seed);
    std::ofstream rep(file(r, "enumerate_oracle.tsv"));
    rep << "probe\texact_E_chi2\tpredicted\texact_E_chi\n";
    for (std::size_t x = 0; x < vo.predicted.size(); ++x) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%zu\t%.17g\t%.17g\t%.17g", x, vo.exact_second[x], vo.predicted[x],
                      vo.exact_mean[x]);
        rep << buf << '\n';
    }
    bool ok = vo.max_rel_error <= 1e-10;
    std::printf("%s enumerate-oracle N=%d p=%d steps=%d combinations=%.0f max_rel=%.3e max|E chi|/max|K|=%.3e\n",
                ok ? "PASS" : "FAIL", vo.N, vo.p, vo.steps, vo.combinations, vo.max_rel_error, vo.max_abs_mean);
    return ok ? kOk : kValidation;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Seismic tomography with FGA beams and random-batch kernels"};
    app.fallthrough();
    app.require_subcommand(1, 1);
    std::string config_path, out, strategy, misfit;
    std::uint64_t seed = 0;
    int threads = 0, iterations = 0;
    double rate = 0.0;
    auto* o_seed = app.add_option("--seed", seed, "master seed (default: drawn from entropy and recorded)");
    app.add_option("--config", config_path, "config file")->check(CLI::ExistingFile);
    app.add_option("--threads", threads, "worker threads (default: OpenMP default)")->check(CLI::PositiveNumber);
    app.add_option("--out", out, "output directory");
    app.add_option("--strategy", strategy, "batch strategy")->check(CLI::IsMember({"per-time-step", "per-iteration"}));
    app.add_option("--sampling-rate", rate, "p/N in (0, 1]");
    app.add_option("--iterations", iterations, "maximum iterations M*");
    app.add_option("--misfit", misfit, "fwi or tti")->check(CLI::IsMember({"fwi", "tti"}));
    const std::vector<std::pair<const char*, const char*>> subs = {
        {"forward", "synthetics and wavefield snapshots on the target model"},
        {"kernel", "one sensitivity kernel at the initial model"},
        {"invert", "the inversion loop"},
        {"validate", "FGA-vs-FD and variance-identity suites"},
        {"enumerate-oracle", "exact variance identity by enumeration"},
    };
    for (auto& [n, d] : subs) app.add_subcommand(n, d);
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfig;
    }

    Run run;
    run.command = app.get_subcommands().front()->get_name();
    bool entropy = false;
    try {
        run.cfg = config_path.empty() ? parse_config_text("") : parse_config(config_path);
        if (*o_seed) run.cfg.seed = seed;
        if (!out.empty()) run.cfg.out = out;
        if (!strategy.empty()) run.cfg.strategy = strategy_from_name(strategy);
        if (app.count("--sampling-rate")) run.cfg.sampling_rate = rate;
        if (app.count("--iterations")) run.cfg.iterations = iterations;
        if (!misfit.empty()) run.cfg.misfit = misfit_from_name(misfit);
        if (!run.cfg.seed) {
            std::random_device rd;
            run.cfg.seed = (std::uint64_t(rd()) << 32) ^ rd();
            entropy = true;
        }
        run.cfg.validate();
        run.out = run.cfg.out;
        fs::create_directories(run.out);
        write_manifest(run, entropy);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    }
    if (threads > 0) omp_set_num_threads(threads);
    if (entropy) std::cerr << "seed = " << *run.cfg.seed << " (from entropy)\n";

    try {
        if (run.command == "forward") return cmd_forward(run);
        if (run.command == "kernel") return cmd_kernel(run);
        if (run.command == "invert") return cmd_invert(run);
        if (run.command == "validate") return cmd_validate(run);
        return cmd_enumerate(run);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const std::exception& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kNumerical;
    }
}
