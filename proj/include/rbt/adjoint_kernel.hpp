#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rbt/fd_oracle.hpp"
#include "rbt/fga.hpp"
#include "rbt/grid_model.hpp"
#include "rbt/random_batch.hpp"

namespace rbt {

class KernelError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class MisfitKind { fwi, tti };
MisfitKind misfit_from_name(const std::string& s);
std::string misfit_name(MisfitKind k);

struct MisfitReport {
    MisfitKind kind = MisfitKind::fwi;
    double J = 0.0;
    std::vector<double> per_receiver;
    std::vector<double> shifts;             // tti only, seconds
    std::vector<std::uint8_t> low_quality;  // tti only
};

// J = 1/2 sum_r w_r tau sum_k (obs - syn)^2; empty weights = uniform 1.
MisfitReport misfit_fwi(const SeismicRecord& obs, const SeismicRecord& syn,
                        std::span<const double> weights = {});

struct ShiftResult {
    double shift = 0.0;  // > 0 when obs arrives later than syn
    double peak = 0.0;   // correlation value at the selected lag
    bool low_quality = false;
};

// Windowed cross-correlation sum_k g_k syn_k obs_{k+L}, peak of |C| refined by
// a parabola through the three samples around it. max_lag < 0 means n/4.
ShiftResult travel_time_shift(std::span<const double> obs, std::span<const double> syn,
                              std::span<const double> window, double tau, int max_lag = -1);

// Tapered cosine window of total half-width `half_width` centred at `center`;
// `taper` is the tapered fraction of each half.
std::vector<double> tukey_window(int n_samples, double tau, double center, double half_width,
                                 double taper = 0.5);
// Tukey window around the first sample reaching half the trace maximum.
std::vector<double> arrival_window(std::span<const double> syn, double tau, double half_width);

// One window per receiver; J = 1/2 sum dt^2.
MisfitReport misfit_tti(const SeismicRecord& obs, const SeismicRecord& syn,
                        std::span<const std::vector<double>> windows);

// Point sources with traces in adjoint time t' = T - t.
struct SourceSpec {
    std::vector<Vec3> locations;
    std::vector<std::vector<double>> traces;
    double tau = 0.0;
    int n_steps = 0;

    void validate() const;
    FdSource to_fd() const;
};

SourceSpec adjoint_source_fwi(const SeismicRecord& obs, const SeismicRecord& syn,
                              std::span<const double> weights = {});

struct TtiAdjoint {
    SourceSpec source;
    std::vector<int> dropped;  // receivers with a vanishing normalization
};
// Traces -dt g du/dt / int g (du/dt)^2 (normalization optional), time reversed.
TtiAdjoint adjoint_source_tti(const SeismicRecord& syn, std::span<const std::vector<double>> windows,
                              std::span<const double> shifts, bool normalize = true);

// Impulse beams launched from one point, propagated once and reused for
// every launch time by shifting in steps.
struct AdjointBase {
    Vec3 x{};
    double c = 0.0;
    std::shared_ptr<const BeamTrajectory> traj;
};

std::vector<AdjointBase> adjoint_bases(std::span<const Vec3> locations, const VelocityModel& c,
                                       const FgaParams& fp, double tau, int n_steps);

struct AdjointLaunch {
    int location = 0;
    int step = 0;
    std::vector<cplx> gamma;  // per shell, + branch; the - branch takes conj
};

struct AdjointOptions {
    double launch_spacing = 0.75;  // in units of the shell wavelet window
    double tikhonov = 1e-6;        // relative to the largest normal-matrix diagonal
};

// The adjoint ensemble has the same beam count N as one impulse ensemble:
// bundle j collects beam j of every location and launch.
struct AdjointEnsemble {
    FgaParams params;
    double tau = 0.0;
    int n_steps = 0;
    std::vector<AdjointBase> bases;
    std::vector<AdjointLaunch> launches;
    std::vector<double> fit_error;  // relative L2 of the launch fit per location

    int size() const { return params.beam_count(); }
    cplx coef(const AdjointLaunch& l, int j) const;
};

AdjointEnsemble build_adjoint(const SourceSpec& src, const std::vector<AdjointBase>& bases,
                              const AdjointOptions& opt = {});

// Re u+ (value) at points for every adjoint step.
SeismicRecord adjoint_record(const AdjointEnsemble& adj, std::span<const Vec3> points);

struct SensitivityKernel {
    ScalarField K;
    bool full = true;
    BatchPlan plan;
    int m = 0;
};

struct KernelSource {
    const BeamTrajectory* fwd = nullptr;
    const AdjointEnsemble* adj = nullptr;
};

// K = sum_sources sum_{k=1..n} tau rho Re du+/dt(T - t_k) Re du/dt(t_k) on rho's
// grid; plan == nullptr means full sums. Source s uses seed lane s.
struct KernelOptions {
    // build adjoint fields once per location and shell when the adjoint batch
    // is the same at every step (full sums and the per-iteration strategy)
    bool reuse = true;
    // add -rho u+(T) du/dt(0), the boundary term left when the time
    // derivative is moved onto the adjoint field; with it K is the exact
    // derivative for initial-value sources
    bool initial_term = false;
};
SensitivityKernel assemble_kernel(std::span<const KernelSource> sources, const ScalarField& rho,
                                  const BatchPlan* plan, int m, const KernelOptions& opt = {});

// Per-beam samples at points for the variance analysis (one source).
BeamSamples forward_samples(const BeamTrajectory& fwd, std::span<const Vec3> points);
BeamSamples adjoint_samples(const AdjointEnsemble& adj, const ScalarField& rho,
                            std::span<const Vec3> points);
std::vector<double> lambda_stat(const BeamTrajectory& fwd, const AdjointEnsemble& adj,
                                const ScalarField& rho, int p, std::span<const Vec3> points);

// Fraction of energy removed by a 3-point box smoothing along every axis.
double highpass_fraction(const ScalarField& f);

}  // namespace rbt
