#pragma once

#include <complex>
#include <cstdint>
#include <span>
#include <vector>

#include "rbt/grid_model.hpp"

namespace rbt {

using cplx = std::complex<double>;
using CMat3 = std::array<std::array<cplx, 3>, 3>;

class FgaError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Beam width and source band. Lengths are scaled by `ell`, so a beam is
//   A exp(i P.(x-Q)/(eps ell) - |x-Q|^2/(2 eps ell^2))
// and |p| = 1 corresponds to the wavenumber 1/(eps ell).
struct FgaParams {
    int ndim = 2;
    double eps = 0.025;
    double ell = 3168.0;
    int n_dir = 64;
    int n_shell = 8;
    // source spectrum hhat(p) = p exp(-(p - band_center)^2 / (2 band_width^2))
    double band_center = 1.0;
    double band_width = 0.35;
    double band_span = 3.5;  // shells cover band_center +- band_span * band_width
    double cut_sigmas = 6.0;  // Gaussian truncation radius in units of sqrt(eps) ell

    void validate() const;
    double p_lo() const;
    double p_hi() const;
    double shell_p(int s) const;
    double shell_dp() const;
    double cut_radius() const;
    int beam_count() const { return 2 * n_dir * n_shell; }
    // eps for a given peak frequency, slowest velocity and length scale
    static double eps_for(double c_min, double f_peak, double ell);
};

double source_spectrum(const FgaParams& fp, double p);

// Direction and shell counts that keep angular and radial quadrature
// aliasing below exp(-14) out to distance r_max.
struct BeamCounts {
    int n_dir;
    int n_shell;
};
BeamCounts suggest_counts(const FgaParams& fp, double r_max);

std::vector<Vec3> direction_set(int ndim, int n_dir);

struct Beam {
    Vec3 q{};
    Vec3 p{};
    int branch = 1;
    cplx A0{};
    int shell = 0;
};

// Beams of a band-limited impulse at x_s, where the local velocity is c_s.
// The field sum (1/N) sum Re G_j at t = 0 is u = 0, u_t = c_s^2 h_eps.
std::vector<Beam> decompose_point_source(const Vec3& x_s, double c_s, const FgaParams& fp);

// Closed-form t = 0 data of the same impulse, used to start the FD oracle.
struct ImpulseData {
    double u0 = 0.0;
    double v0 = 0.0;
};
ImpulseData impulse_initial_data(const Vec3& x, const Vec3& x_s, double c_s, const FgaParams& fp);
// The same on every cell centre of a grid (separable evaluation).
void impulse_initial_field(const Grid& g, const Vec3& x_s, double c_s, const FgaParams& fp,
                           std::vector<double>& u0, std::vector<double>& v0);

// Far-field equivalent point-source wavelet of one shell launched at t = 0
// with complex multiplier gamma: amplitude * Re(gamma exp(-i w_s t)) * window(t).
struct ShellWavelet {
    double omega = 0.0;
    double amplitude = 0.0;
    double window_sigma = 0.0;  // seconds
    double eval(cplx gamma, double t) const;
    cplx atom(double t) const;  // amplitude * exp(-i w t) * window
};
std::vector<ShellWavelet> shell_wavelets(double c_s, const FgaParams& fp);
// Exact version of ShellWavelet::atom from the shell's radial spectrum
// (2D and 3D), tabulated at t = m dt for m = -m_max..m_max.
std::vector<cplx> shell_atom_table(double c_s, const FgaParams& fp, int s, double dt, int m_max);

struct BeamState {
    Vec3 Q{}, P{};
    cplx A{};
    Vec3 Qdot{}, Pdot{};
    cplx Adot{};
};

struct BeamTrajectory {
    FgaParams params;
    double tau = 0.0;
    int n_steps = 0;
    std::vector<Beam> beams;
    // states[k * N + j]
    std::vector<BeamState> states;
    std::vector<CMat3> Z;  // same layout; empty when not stored
    std::vector<std::uint8_t> dead;  // per beam, frozen after |P| collapsed
    std::uint64_t singular_flags = 0;

    int size() const { return int(beams.size()); }
    const BeamState& at(int k, int j) const { return states[std::size_t(k) * beams.size() + j]; }
    const CMat3& z_at(int k, int j) const { return Z[std::size_t(k) * beams.size() + j]; }
};

struct PropagateOptions {
    bool store_z = true;
    double dead_fraction = 1e-8;  // |P| below this fraction of |p| kills the beam
};

BeamTrajectory propagate(const std::vector<Beam>& beams, const VelocityModel& c,
                         const FgaParams& fp, double tau, int n_steps,
                         const PropagateOptions& opt = {});

// Hamiltonian sigma c(Q) |P| at one stored state.
double hamiltonian(const VelocityModel& c, const Beam& b, const BeamState& s);

// Single-beam evaluation at a point.
cplx beam_value(const FgaParams& fp, const BeamState& s, const Vec3& x);
cplx beam_dt(const FgaParams& fp, const BeamState& s, const Vec3& x);

enum class FieldKind { value, dt };

// Sum over `subset` (all beams when empty) scaled by 1/|subset|.
std::vector<cplx> reconstruct(const BeamTrajectory& tr, std::span<const int> subset,
                              std::span<const Vec3> points, int k,
                              FieldKind kind = FieldKind::value);
std::vector<cplx> reconstruct_dt(const BeamTrajectory& tr, std::span<const int> subset,
                                 std::span<const Vec3> points, int k);

// One Gaussian term entering a grid accumulation: coef * G_beam(step).
struct BeamTerm {
    const BeamTrajectory* traj;
    int beam;
    int step;
    cplx coef;
};

// out[cell] += scale * sum_terms Re(coef * G) over grid cell centres, Gaussians
// cut at the truncation radius. Parallel over grid rows; each cell sums the
// terms in the given order, so the result does not depend on thread count.
void accumulate_grid(std::span<const BeamTerm> terms, const Grid& grid, FieldKind kind,
                     double scale, std::vector<double>& out);
// Same sum without taking the real part.
void accumulate_grid_complex(std::span<const BeamTerm> terms, const Grid& grid, FieldKind kind,
                             double scale, std::vector<cplx>& out);
// Serial direct evaluation with the same truncation; reference for tests and
// the benchmark.
void accumulate_grid_reference(std::span<const BeamTerm> terms, const Grid& grid,
                               FieldKind kind, double scale, std::vector<double>& out);

struct SeismicRecord {
    std::vector<Vec3> receivers;
    double tau = 0.0;
    int n_steps = 0;  // samples per trace = n_steps + 1 (t = 0 .. T)
    std::vector<std::vector<double>> traces;

    void validate() const;
    int samples() const { return n_steps + 1; }
};

// Re u at every stored step at each receiver, optionally convolved with a
// source time function sampled at tau (discrete convolution, causal index).
SeismicRecord record_at_receivers(const BeamTrajectory& tr, std::span<const Vec3> receivers,
                                  const Grid* domain = nullptr,
                                  std::span<const double> time_function = {});

}  // namespace rbt
