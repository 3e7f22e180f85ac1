#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rbt/adjoint_kernel.hpp"
#include "rbt/fd_oracle.hpp"
#include "rbt/fga.hpp"
#include "rbt/grid_model.hpp"
#include "rbt/random_batch.hpp"

namespace rbt {

class InversionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// V = (r/2) |X - X_ref|^2, summed over cells.
struct RegularizerSpec {
    double r = 0.0;
    ScalarField X_ref;
    double smoothing = 0.0;  // Gaussian kernel smoothing radius in metres, 0 = off

    void validate(const Grid& g) const;
};

double regularizer_value(const ScalarField& X, const RegularizerSpec& spec);
ScalarField regularizer_grad(const ScalarField& X, const RegularizerSpec& spec);

struct VelocityBounds {
    double c_lo = 0.0;
    double c_hi = 0.0;
    void validate() const;
    // [0.5 min c, 2 max c]
    static VelocityBounds around(const ScalarField& c);
    double X_lo() const;  // from c_hi
    double X_hi() const;  // from c_lo
};

struct LbfgsPair {
    std::vector<double> s, y;
};

struct InversionState {
    ScalarField X;  // log rho
    int m = 0;
    std::vector<double> history;  // J at X_0 .. X_m
    double alpha = 0.0;
    // L-BFGS memory and the last accepted point
    std::deque<LbfgsPair> pairs;
    std::vector<double> prev_X, prev_grad;
    std::uint64_t clip_events = 0;
    std::uint64_t last_clipped = 0;  // cells clipped by the last step
};

// X' = X - alpha (K + grad V), clipped to the bounds; m incremented.
InversionState step_gd(const InversionState& st, const ScalarField& K, const RegularizerSpec& spec,
                       double alpha, const VelocityBounds& bounds);

struct LbfgsOptions {
    int memory = 5;
    double armijo = 1e-4;
    double shrink = 0.5;
    int max_backtracks = 20;
};

struct LbfgsResult {
    InversionState state;
    double J = 0.0;  // misfit of the returned state
    bool exhausted = false;
    std::string warning;
};

// One L-BFGS iteration from st with total gradient g at st.X and misfit J0.
// The step starts at st.alpha along the two-loop direction and backtracks
// until Armijo holds. Memory 0 gives the steepest-descent direction.
LbfgsResult step_lbfgs(const InversionState& st, const ScalarField& g, double J0,
                       const std::function<double(const ScalarField&)>& J,
                       const LbfgsOptions& opt, const VelocityBounds& bounds);

// Direction -H g from the two-loop recursion over the stored pairs.
std::vector<double> lbfgs_direction(const std::deque<LbfgsPair>& pairs, const std::vector<double>& g);

enum class Optimizer { gd, lbfgs };
Optimizer optimizer_from_name(const std::string& s);
std::string optimizer_name(Optimizer o);

enum class ObsSource { fd, fga };

struct Acquisition {
    std::vector<Vec3> sources;
    std::vector<Vec3> receivers;
    std::vector<double> weights;  // per receiver, empty = uniform

    void validate(const Grid& g) const;
};

struct FdObsOptions {
    double h = 12.0;        // FD spacing, metres
    double pad = 1500.0;    // absorbing padding, metres
};

struct InversionConfig {
    Grid grid;
    ModelPreset target;
    ModelPreset initial;
    Acquisition acq;
    FgaParams fga;
    double tau = 0.008;
    int n_steps = 175;
    std::optional<BatchPlan> plan;  // empty = full sums
    MisfitKind misfit = MisfitKind::fwi;
    double window_half_width = 0.0;  // TTI window, seconds; 0 = 2 / f_peak
    Optimizer optimizer = Optimizer::gd;
    double alpha = 0.0;        // 0 = calibrate
    double max_update = 0.01;  // first-step max |dX| used by the calibration
    LbfgsOptions lbfgs;
    double reg_relative = 0.05;  // r in units of max|K_0| / max_update
    double smoothing = 0.0;
    double mask_radius = 0.0;   // kernel taper radius around sources and receivers; 0 = auto
    int kernel_refine = 1;      // quadrature subcells per model cell and axis; 0 = auto
    int max_iter = 4;
    double J_star = 0.0;
    ObsSource obs = ObsSource::fd;
    FdObsOptions fd;
    AdjointOptions adjoint;
    std::optional<VelocityBounds> bounds;
    bool keep_models = true;
    bool keep_kernels = false;

    void validate() const;
};

// Observed records per source on the target model.
std::vector<SeismicRecord> make_observations(const InversionConfig& cfg);

// Weight 0 within r of any source or receiver, 1 beyond 2r, cosine ramp between.
ScalarField acquisition_taper(const Grid& g, const Acquisition& acq, double r);
double default_mask_radius(const FgaParams& fp);

struct Evaluation {
    double J = 0.0;
    std::vector<SeismicRecord> syn;
    std::vector<MisfitReport> reports;
};

// Misfit only (full forward sums).
Evaluation evaluate_misfit(const InversionConfig& cfg, const ScalarField& X,
                           const std::vector<SeismicRecord>& obs);

// The same misfit with synthetics from the FD oracle on the multilinear model
// (absorbing padding from cfg.fd); the functional the kernel differentiates.
double evaluate_misfit_fd(const InversionConfig& cfg, const ScalarField& X,
                          const std::vector<SeismicRecord>& obs);

struct GradientResult {
    Evaluation eval;
    SensitivityKernel kernel;  // summed over sources, tapered
};

// Misfit and the (batch) kernel dJ/dX density at X for iteration m.
GradientResult evaluate_gradient(const InversionConfig& cfg, const ScalarField& X,
                                 const std::vector<SeismicRecord>& obs, int m);

struct InversionResult {
    InversionState state;
    std::vector<double> wallclock;  // seconds since start, per history entry
    std::vector<ScalarField> models;   // X_0 .. X_m when kept
    std::vector<ScalarField> kernels;  // when kept
    double r = 0.0;
    double max_clip_fraction = 0.0;
    bool clip_failure = false;  // more than 10% of cells clipped in one step
    bool stopped_on_threshold = false;
    std::vector<std::string> warnings;
    std::string error;  // set when a stage failed; history is partial
};

InversionResult run_inversion(const InversionConfig& cfg, const std::vector<SeismicRecord>& obs);

// sqrt(mean over replicates of |X_rb(m) - X_det(m)|^2) per iteration, grid L2 norm.
std::vector<double> deviation_norm(const std::vector<InversionResult>& rb, const InversionResult& det);
std::vector<double> deviation_norm(const std::vector<std::vector<std::vector<double>>>& rb,
                                   const std::vector<std::vector<double>>& det, double cell_volume);

// Frozen-physics toy: beam samples fixed, the update
//   X_{m+1} = X_m - h (K~_m + r (X_m - X_ref))
// with K~_m assembled from fresh batches at every iteration.
struct FrozenToy {
    BeamSamples fwd, adj;
    double tau = 0.0;
    double r = 1.0;
    std::vector<double> X_ref, X0;
};
std::vector<std::vector<double>> frozen_toy_run(const FrozenToy& toy, double h, int iterations,
                                                const BatchPlan* plan);

// Quadrature refinement so that the shortest wavelength gets four samples.
int auto_kernel_refine(const Grid& g, const FgaParams& fp);
Grid refine_grid(const Grid& g, int q);
// dJ/dX_i density for a model whose velocity is multilinear in the node
// values c_i: the fine log-rho kernel is integrated against each node's
// interpolation weight times c_i / c(x), then divided by the cell volume.
ScalarField project_kernel(const ScalarField& K_fine, const ScalarField& c_model);

ScalarField smooth_field(const ScalarField& f, double radius);

}  // namespace rbt
