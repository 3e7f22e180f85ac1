#include "rbt/fga.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace rbt {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr cplx kI{0.0, 1.0};

double norm(const Vec3& v, int d) {
    double s = 0.0;
    for (int a = 0; a < d; ++a) s += v[a] * v[a];
    return std::sqrt(s);
}

}  // namespace

// ---------------------------------------------------------------- params

void FgaParams::validate() const {
    if (ndim < 1 || ndim > 3) throw FgaError("fga: ndim must be 1, 2 or 3");
    if (!(eps > 0.0) || !std::isfinite(eps)) throw FgaError("fga: eps must be positive");
    if (!(ell > 0.0)) throw FgaError("fga: length scale must be positive");
    int min_dir = ndim == 1 ? 1 : (ndim == 2 ? 8 : 32);
    if (n_dir < min_dir) throw FgaError("fga: direction set too small");
    if (ndim == 1 && n_dir != 1) throw FgaError("fga: 1D uses a single direction per branch");
    if (ndim == 3 && n_dir % 2) throw FgaError("fga: 3D direction count must be even");
    if (n_shell < 1) throw FgaError("fga: need at least one shell");
    if (!(band_width > 0.0) || !(band_center > 0.0) || !(band_span > 0.0))
        throw FgaError("fga: invalid source band");
    if (!(cut_sigmas > 0.0)) throw FgaError("fga: invalid truncation radius");
}

double FgaParams::p_lo() const {
    return std::max(0.05 * band_center, band_center - band_span * band_width);
}
double FgaParams::p_hi() const { return band_center + band_span * band_width; }
double FgaParams::shell_dp() const { return (p_hi() - p_lo()) / n_shell; }
double FgaParams::shell_p(int s) const { return p_lo() + (s + 0.5) * shell_dp(); }
double FgaParams::cut_radius() const { return cut_sigmas * std::sqrt(eps) * ell; }

double FgaParams::eps_for(double c_min, double f_peak, double ell) {
    return c_min / (2.0 * kPi * f_peak * ell);
}

double source_spectrum(const FgaParams& fp, double p) {
    double d = p - fp.band_center;
    return p * std::exp(-d * d / (2.0 * fp.band_width * fp.band_width));
}

BeamCounts suggest_counts(const FgaParams& fp, double r_max) {
    // Poisson aliasing: a Gaussian quadrature image at distance D is damped
    // by exp(-D^2 / (2 eps)); with D = 2 pi eps / dp we need dp <= pi sqrt(eps / 7).
    BeamCounts bc{1, 1};
    double dp = kPi * std::sqrt(fp.eps / 7.0);
    bc.n_shell = std::max(1, int(std::ceil((fp.p_hi() - fp.p_lo()) / dp)));
    if (fp.ndim == 1) return bc;
    double rh = r_max / fp.ell;
    double ph = fp.p_hi();
    double re_inv = fp.eps / (rh * rh + ph * ph);
    double dth = kPi * std::sqrt(re_inv / 7.0);
    if (fp.ndim == 2) {
        bc.n_dir = std::max(8, int(std::ceil(2.0 * kPi / dth)));
        bc.n_dir += bc.n_dir % 2;
    } else {
        // equal-area cells of angular size dth
        bc.n_dir = std::max(32, int(std::ceil(4.0 * kPi / (dth * dth))));
        bc.n_dir += bc.n_dir % 2;
    }
    return bc;
}

std::vector<Vec3> direction_set(int ndim, int n_dir) {
    std::vector<Vec3> dirs;
    if (ndim == 1) {
        dirs.push_back({1.0, 0.0, 0.0});
        return dirs;
    }
    if (ndim == 2) {
        for (int d = 0; d < n_dir; ++d) {
            double th = 2.0 * kPi * (d + 0.5) / n_dir;
            dirs.push_back({std::cos(th), std::sin(th), 0.0});
        }
        return dirs;
    }
    // Fibonacci points on the upper hemisphere plus their antipodes.
    int m = n_dir / 2;
    const double golden = kPi * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < m; ++i) {
        double z = 1.0 - (i + 0.5) / m;
        double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        double ph = golden * i;
        dirs.push_back({r * std::cos(ph), r * std::sin(ph), z});
    }
    for (int i = 0; i < m; ++i) dirs.push_back({-dirs[i][0], -dirs[i][1], -dirs[i][2]});
    return dirs;
}

namespace {

double solid_angle_weight(int ndim, int n_dir) {
    if (ndim == 1) return 1.0;
    if (ndim == 2) return 2.0 * kPi / n_dir;
    return 4.0 * kPi / n_dir;
}

// Plane-wave quadrature weight of one beam of the + branch (before the N factor).
cplx plus_weight(const FgaParams& fp, double c_s, int s) {
    const int d = fp.ndim;
    double p = fp.shell_p(s);
    double k = p / (fp.eps * fp.ell);
    double dk = fp.shell_dp() / (fp.eps * fp.ell);
    double B = c_s * source_spectrum(fp, p) / (2.0 * k);
    double w = std::pow(2.0 * kPi, -d) * solid_angle_weight(d, fp.n_dir) * dk * std::pow(k, d - 1) * B;
    return kI * w;
}

}  // namespace

std::vector<Beam> decompose_point_source(const Vec3& x_s, double c_s, const FgaParams& fp) {
    fp.validate();
    if (!(c_s > 0.0)) throw FgaError("decompose_point_source: source velocity must be positive");
    auto dirs = direction_set(fp.ndim, fp.n_dir);
    if (dirs.empty()) throw FgaError("decompose_point_source: empty direction set");
    const int N = fp.beam_count();
    std::vector<Beam> beams;
    beams.reserve(N);
    for (int br : {1, -1}) {
        for (int s = 0; s < fp.n_shell; ++s) {
            cplx w = plus_weight(fp, c_s, s) * double(N);
            if (br < 0) w = std::conj(w);
            double p = fp.shell_p(s);
            for (const auto& dir : dirs) {
                Beam b;
                b.q = x_s;
                for (int a = 0; a < fp.ndim; ++a) b.p[a] = p * dir[a];
                b.branch = br;
                b.A0 = w;
                b.shell = s;
                beams.push_back(b);
            }
        }
    }
    return beams;
}

ImpulseData impulse_initial_data(const Vec3& x, const Vec3& x_s, double c_s, const FgaParams& fp) {
    fp.validate();
    const int d = fp.ndim;
    const double el = fp.eps * fp.ell;
    const double el2 = fp.eps * fp.ell * fp.ell;
    auto dirs = direction_set(d, fp.n_dir);
    Vec3 y{};
    double r2 = 0.0;
    for (int a = 0; a < d; ++a) {
        y[a] = x[a] - x_s[a];
        r2 += y[a] * y[a];
    }
    ImpulseData out;
    if (r2 > fp.cut_radius() * fp.cut_radius()) return out;
    const double env = std::exp(-r2 / (2.0 * el2));
    // At t = 0 in a locally uniform medium: Z = 2I, dZ/dt = -2i/ell dQ/dp,
    // so dA/dt = -i sigma c (d-1) / (2 ell |p|) A.
    for (int br : {1, -1}) {
        for (int s = 0; s < fp.n_shell; ++s) {
            cplx w = plus_weight(fp, c_s, s);
            if (br < 0) w = std::conj(w);
            double p = fp.shell_p(s);
            cplx adot_over_a = -kI * double(br) * c_s * double(d - 1) / (2.0 * fp.ell * p);
            for (const auto& dir : dirs) {
                double py = 0.0, qdy = 0.0;
                for (int a = 0; a < d; ++a) {
                    py += p * dir[a] * y[a];
                    qdy += br * c_s * dir[a] * y[a];
                }
                cplx g = w * env * std::exp(kI * (py / el));
                out.u0 += g.real();
                cplx rate = adot_over_a - kI * (br * c_s * p / el) + qdy / el2;
                out.v0 += (g * rate).real();
            }
        }
    }
    return out;
}

void impulse_initial_field(const Grid& g, const Vec3& x_s, double c_s, const FgaParams& fp,
                           std::vector<double>& u0, std::vector<double>& v0) {
    fp.validate();
    if (fp.ndim != g.ndim) throw FgaError("impulse_initial_field: dimension mismatch");
    const int d = fp.ndim;
    const double el = fp.eps * fp.ell;
    const double el2 = el * fp.ell;
    const double R = fp.cut_radius();
    u0.assign(g.size(), 0.0);
    v0.assign(g.size(), 0.0);
    auto dirs = direction_set(d, fp.n_dir);
    // per-axis offsets and Gaussian factors
    std::vector<std::vector<double>> y(d), env(d);
    for (int a = 0; a < d; ++a) {
        for (int i = 0; i < g.dims[a]; ++i) {
            double v = g.origin[a] + (i + 0.5) * g.spacing[a] - x_s[a];
            y[a].push_back(v);
            env[a].push_back(std::exp(-v * v / (2.0 * el2)));
        }
    }
    std::vector<std::vector<cplx>> ph(d);
    for (int br : {1, -1}) {
        for (int s = 0; s < fp.n_shell; ++s) {
            cplx w = plus_weight(fp, c_s, s);
            if (br < 0) w = std::conj(w);
            const double p = fp.shell_p(s);
            const cplx alpha = -kI * double(br) * c_s * double(d - 1) / (2.0 * fp.ell * p) -
                               kI * (br * c_s * p / el);
            for (const auto& dir : dirs) {
                for (int a = 0; a < d; ++a) {
                    ph[a].resize(g.dims[a]);
                    for (int i = 0; i < g.dims[a]; ++i)
                        ph[a][i] = env[a][i] * std::exp(kI * (p * dir[a] * y[a][i] / el));
                }
                Vec3 beta{};
                for (int a = 0; a < d; ++a) beta[a] = br * c_s * dir[a] / el2;
                const int nl = g.dims[d - 1];
                const auto& yl = y[d - 1];
                const auto& pl = ph[d - 1];
                for (int i = 0; i < g.dims[0]; ++i)
                    for (int j = 0; j < (d == 3 ? g.dims[1] : 1); ++j) {
                        double r2 = y[0][i] * y[0][i] + (d == 3 ? y[1][j] * y[1][j] : 0.0);
                        if (r2 > R * R) continue;
                        // row factor and the part of the rate that is constant on the row
                        cplx a = w * ph[0][i] * (d == 3 ? ph[1][j] : 1.0);
                        double lin0 = beta[0] * y[0][i] + (d == 3 ? beta[1] * y[1][j] : 0.0);
                        cplx b = a * (alpha + lin0);
                        double bl = beta[d - 1];
                        double half = std::sqrt(R * R - r2);
                        double* uo = u0.data() + (d == 2 ? g.index(i, 0) : g.index(i, j, 0));
                        double* vo = v0.data() + (d == 2 ? g.index(i, 0) : g.index(i, j, 0));
                        for (int k = 0; k < nl; ++k) {
                            if (std::abs(yl[k]) > half) continue;
                            double gr = a.real() * pl[k].real() - a.imag() * pl[k].imag();
                            double br2 = b.real() * pl[k].real() - b.imag() * pl[k].imag();
                            uo[k] += gr;
                            vo[k] += br2 + bl * yl[k] * gr;
                        }
                    }
            }
        }
    }
}

double ShellWavelet::eval(cplx gamma, double t) const {
    return (gamma * atom(t)).real();
}

cplx ShellWavelet::atom(double t) const {
    double win = std::exp(-t * t / (2.0 * window_sigma * window_sigma));
    return amplitude * win * std::exp(-kI * (omega * t));
}

std::vector<ShellWavelet> shell_wavelets(double c_s, const FgaParams& fp) {
    fp.validate();
    std::vector<ShellWavelet> out;
    for (int s = 0; s < fp.n_shell; ++s) {
        double p = fp.shell_p(s);
        double dk = fp.shell_dp() / (fp.eps * fp.ell);
        ShellWavelet w;
        w.omega = c_s * p / (fp.eps * fp.ell);
        w.amplitude = c_s * source_spectrum(fp, p) * dk / kPi;
        w.window_sigma = std::sqrt(fp.eps) * fp.ell / c_s;
        out.push_back(w);
    }
    return out;
}

namespace {

// exp(-a) I_nu(a), nu = 0 or 1
double bessel_i_scaled(int nu, double a) {
    if (a < 500.0) return std::cyl_bessel_i(double(nu), a) * std::exp(-a);
    double mu = 4.0 * nu * nu;
    return (1.0 - (mu - 1.0) / (8.0 * a) + (mu - 1.0) * (mu - 9.0) / (128.0 * a * a)) /
           std::sqrt(2.0 * kPi * a);
}

}  // namespace

std::vector<cplx> shell_atom_table(double c_s, const FgaParams& fp, int s, double dt, int m_max) {
    fp.validate();
    if (fp.ndim < 2) throw FgaError("shell_atom_table: needs 2 or 3 dimensions");
    if (s < 0 || s >= fp.n_shell || !(dt > 0.0) || m_max < 0 || !(c_s > 0.0))
        throw FgaError("shell_atom_table: bad arguments");
    const double s2 = fp.eps * fp.ell * fp.ell;
    const double k = fp.shell_p(s) / (fp.eps * fp.ell);
    const double w = plus_weight(fp, c_s, s).imag();
    const double width = 9.0 / std::sqrt(s2);
    const double K0 = std::max(0.0, k - width), K1 = k + width;
    const int nK = 800;
    const double hK = (K1 - K0) / nK;
    // radial spectrum of the shell's part of the impulse (times Simpson weights)
    std::vector<double> H(nK + 1);
    for (int i = 0; i <= nK; ++i) {
        double K = K0 + i * hK;
        double a = K * k * s2;
        double g = std::exp(-(K - k) * (K - k) * s2 / 2.0);
        double v = 0.0;
        if (a > 0.0) {
            if (fp.ndim == 2) {
                v = (2.0 * w * fp.n_dir / c_s) * (2.0 * kPi * s2) * g *
                    (K * bessel_i_scaled(1, a) + bessel_i_scaled(0, a) / (2.0 * k * s2));
            } else {
                double e2 = std::exp(-2.0 * a);
                double ch = 0.5 * (1.0 + e2), sh = 0.5 * (1.0 - e2);
                v = (2.0 * w * fp.n_dir / c_s) * std::pow(2.0 * kPi * s2, 1.5) / (4.0 * kPi) * g * 4.0 * kPi *
                    (K * (ch / a - sh / (a * a)) + sh / (a * k * s2));
            }
        }
        double sw = (i == 0 || i == nK) ? 1.0 : (i % 2 ? 4.0 : 2.0);
        H[i] = v * sw * hK / 3.0;
    }
    std::vector<cplx> out(2 * m_max + 1);
    for (int m = -m_max; m <= m_max; ++m) {
        double t = m * dt;
        cplx acc = 0.0;
        // exp(-i c K t) by recurrence over the uniform K grid
        cplx ph = std::exp(-kI * (c_s * K0 * t)), step = std::exp(-kI * (c_s * hK * t));
        for (int i = 0; i <= nK; ++i) {
            acc += H[i] * ph;
            ph *= step;
        }
        out[m + m_max] = acc * (c_s / kPi);
    }
    return out;
}

// ---------------------------------------------------------------- ODEs

namespace {

struct OdeState {
    Vec3 Q{}, P{};
    // Jacobian blocks dQ/dq, dQ/dp, dP/dq, dP/dp
    Mat3 Qq{}, Qp{}, Pq{}, Pp{};
    cplx A{};
};

struct OdeDeriv {
    OdeState d;
    CMat3 Z{};
    bool dead = false;
};

CMat3 z_of(const Mat3& Qq, const Mat3& Qp, const Mat3& Pq, const Mat3& Pp, double ell, int n) {
    CMat3 Z{};
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            Z[i][j] = cplx(Qq[i][j] + Pp[i][j], -2.0 * Qp[i][j] / ell + 0.5 * ell * Pq[i][j]);
    return Z;
}

cplx det(const CMat3& M, int n) {
    if (n == 1) return M[0][0];
    if (n == 2) return M[0][0] * M[1][1] - M[0][1] * M[1][0];
    return M[0][0] * (M[1][1] * M[2][2] - M[1][2] * M[2][1]) -
           M[0][1] * (M[1][0] * M[2][2] - M[1][2] * M[2][0]) +
           M[0][2] * (M[1][0] * M[2][1] - M[1][1] * M[2][0]);
}

// Tr(Z^{-1} W) via the adjugate.
cplx trace_inv_mul(const CMat3& Z, const CMat3& W, int n, cplx dz) {
    if (n == 1) return W[0][0] / Z[0][0];
    CMat3 adj{};
    if (n == 2) {
        adj[0][0] = Z[1][1];
        adj[0][1] = -Z[0][1];
        adj[1][0] = -Z[1][0];
        adj[1][1] = Z[0][0];
    } else {
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                int r0 = (j + 1) % 3, r1 = (j + 2) % 3, c0 = (i + 1) % 3, c1 = (i + 2) % 3;
                adj[i][j] = Z[r0][c0] * Z[r1][c1] - Z[r0][c1] * Z[r1][c0];
            }
    }
    cplx tr = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) tr += adj[i][j] * W[j][i];
    return tr / dz;
}

OdeDeriv rhs(const OdeState& y, int sigma, const VelocityModel& vm, double ell, int n,
             double dead_norm, std::uint64_t& singular) {
    OdeDeriv out;
    double pn = norm(y.P, n);
    if (pn < dead_norm) {
        out.dead = true;
        return out;
    }
    VelocitySample v = vm.sample(y.Q);
    Vec3 ph{};
    for (int a = 0; a < n; ++a) ph[a] = y.P[a] / pn;
    double sg = sigma;
    Mat3 Hpq{}, Hpp{}, Hqq{}, Hqp{};
    for (int i = 0; i < n; ++i) {
        out.d.Q[i] = sg * v.c * ph[i];
        out.d.P[i] = -sg * pn * v.grad[i];
        for (int j = 0; j < n; ++j) {
            Hpq[i][j] = sg * ph[i] * v.grad[j];
            Hqp[i][j] = sg * v.grad[i] * ph[j];
            Hpp[i][j] = sg * v.c * ((i == j ? 1.0 : 0.0) - ph[i] * ph[j]) / pn;
            Hqq[i][j] = sg * pn * v.hess[i][j];
        }
    }
    // dJ/dt = [[Hpq, Hpp], [-Hqq, -Hqp]] J
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double qq = 0, qp = 0, pq = 0, pp = 0;
            for (int m = 0; m < n; ++m) {
                qq += Hpq[i][m] * y.Qq[m][j] + Hpp[i][m] * y.Pq[m][j];
                qp += Hpq[i][m] * y.Qp[m][j] + Hpp[i][m] * y.Pp[m][j];
                pq -= Hqq[i][m] * y.Qq[m][j] + Hqp[i][m] * y.Pq[m][j];
                pp -= Hqq[i][m] * y.Qp[m][j] + Hqp[i][m] * y.Pp[m][j];
            }
            out.d.Qq[i][j] = qq;
            out.d.Qp[i][j] = qp;
            out.d.Pq[i][j] = pq;
            out.d.Pp[i][j] = pp;
        }
    out.Z = z_of(y.Qq, y.Qp, y.Pq, y.Pp, ell, n);
    CMat3 Zd = z_of(out.d.Qq, out.d.Qp, out.d.Pq, out.d.Pp, ell, n);
    cplx dz = det(out.Z, n);
    if (std::abs(dz) < 1e-12) ++singular;
    double transport = 0.0;
    for (int a = 0; a < n; ++a) transport += ph[a] * v.grad[a];
    out.d.A = y.A * (sg * transport + 0.5 * trace_inv_mul(out.Z, Zd, n, dz));
    return out;
}

void axpy(OdeState& out, const OdeState& y, double h, const OdeState& k, int n) {
    for (int i = 0; i < n; ++i) {
        out.Q[i] = y.Q[i] + h * k.Q[i];
        out.P[i] = y.P[i] + h * k.P[i];
        for (int j = 0; j < n; ++j) {
            out.Qq[i][j] = y.Qq[i][j] + h * k.Qq[i][j];
            out.Qp[i][j] = y.Qp[i][j] + h * k.Qp[i][j];
            out.Pq[i][j] = y.Pq[i][j] + h * k.Pq[i][j];
            out.Pp[i][j] = y.Pp[i][j] + h * k.Pp[i][j];
        }
    }
    out.A = y.A + h * k.A;
}

void rk4_combine(OdeState& y, double h, const OdeState& k1, const OdeState& k2,
                 const OdeState& k3, const OdeState& k4, int n) {
    const double w = h / 6.0;
    for (int i = 0; i < n; ++i) {
        y.Q[i] += w * (k1.Q[i] + 2 * k2.Q[i] + 2 * k3.Q[i] + k4.Q[i]);
        y.P[i] += w * (k1.P[i] + 2 * k2.P[i] + 2 * k3.P[i] + k4.P[i]);
        for (int j = 0; j < n; ++j) {
            y.Qq[i][j] += w * (k1.Qq[i][j] + 2 * k2.Qq[i][j] + 2 * k3.Qq[i][j] + k4.Qq[i][j]);
            y.Qp[i][j] += w * (k1.Qp[i][j] + 2 * k2.Qp[i][j] + 2 * k3.Qp[i][j] + k4.Qp[i][j]);
            y.Pq[i][j] += w * (k1.Pq[i][j] + 2 * k2.Pq[i][j] + 2 * k3.Pq[i][j] + k4.Pq[i][j]);
            y.Pp[i][j] += w * (k1.Pp[i][j] + 2 * k2.Pp[i][j] + 2 * k3.Pp[i][j] + k4.Pp[i][j]);
        }
    }
    y.A += w * (k1.A + 2.0 * k2.A + 2.0 * k3.A + k4.A);
}

}  // namespace

BeamTrajectory propagate(const std::vector<Beam>& beams, const VelocityModel& c,
                         const FgaParams& fp, double tau, int n_steps,
                         const PropagateOptions& opt) {
    fp.validate();
    if (!(tau > 0.0)) throw FgaError("propagate: tau must be positive");
    if (n_steps < 0) throw FgaError("propagate: negative step count");
    if (c.ndim() != fp.ndim) throw FgaError("propagate: model dimension mismatch");
    const int n = fp.ndim;
    const std::size_t N = beams.size();
    for (const auto& b : beams) {
        if (b.branch != 1 && b.branch != -1) throw FgaError("propagate: branch must be +1 or -1");
        if (!(norm(b.p, n) > 0.0)) throw FgaError("propagate: beam momentum must be nonzero");
    }
    BeamTrajectory tr;
    tr.params = fp;
    tr.tau = tau;
    tr.n_steps = n_steps;
    tr.beams = beams;
    tr.states.resize((n_steps + 1) * N);
    if (opt.store_z) tr.Z.resize((n_steps + 1) * N);
    tr.dead.assign(N, 0);
    std::uint64_t singular_total = 0;

#pragma omp parallel for schedule(dynamic, 4) reduction(+ : singular_total)
    for (std::ptrdiff_t jj = 0; jj < std::ptrdiff_t(N); ++jj) {
        const std::size_t j = std::size_t(jj);
        const Beam& b = beams[j];
        std::uint64_t singular = 0;
        const double dead_norm = opt.dead_fraction * norm(b.p, n);
        OdeState y;
        y.Q = b.q;
        y.P = b.p;
        for (int a = 0; a < n; ++a) y.Qq[a][a] = y.Pp[a][a] = 1.0;
        y.A = b.A0;
        bool dead = false;
        auto store = [&](int k, const OdeDeriv& d) {
            BeamState& s = tr.states[std::size_t(k) * N + j];
            s.Q = y.Q;
            s.P = y.P;
            if (dead) return;  // amplitude and rates stay zero
            s.A = y.A;
            s.Qdot = d.d.Q;
            s.Pdot = d.d.P;
            s.Adot = d.d.A;
            if (opt.store_z) tr.Z[std::size_t(k) * N + j] = d.Z;
        };
        OdeDeriv k1 = rhs(y, b.branch, c, fp.ell, n, dead_norm, singular);
        dead = k1.dead;
        store(0, k1);
        for (int k = 0; k < n_steps; ++k) {
            if (!dead) {
                OdeState tmp;
                axpy(tmp, y, 0.5 * tau, k1.d, n);
                OdeDeriv k2 = rhs(tmp, b.branch, c, fp.ell, n, dead_norm, singular);
                axpy(tmp, y, 0.5 * tau, k2.d, n);
                OdeDeriv k3 = rhs(tmp, b.branch, c, fp.ell, n, dead_norm, singular);
                axpy(tmp, y, tau, k3.d, n);
                OdeDeriv k4 = rhs(tmp, b.branch, c, fp.ell, n, dead_norm, singular);
                if (k2.dead || k3.dead || k4.dead) {
                    dead = true;
                } else {
                    rk4_combine(y, tau, k1.d, k2.d, k3.d, k4.d, n);
                    k1 = rhs(y, b.branch, c, fp.ell, n, dead_norm, singular);
                    dead = k1.dead;
                }
            }
            store(k + 1, k1);
        }
        if (dead) tr.dead[j] = 1;
        singular_total += singular;
    }
    tr.singular_flags = singular_total;
    return tr;
}

double hamiltonian(const VelocityModel& c, const Beam& b, const BeamState& s) {
    return b.branch * c.sample(s.Q).c * norm(s.P, c.ndim());
}

// ---------------------------------------------------------------- evaluation

namespace {

struct Phase {
    cplx e;       // exp(i P.d/(eps ell) - |d|^2/(2 eps ell^2))
    double dq;    // d . Qdot
    double dpd;   // d . Pdot
};

Phase phase_at(const FgaParams& fp, const BeamState& s, const Vec3& x) {
    const int n = fp.ndim;
    const double el = fp.eps * fp.ell;
    const double el2 = el * fp.ell;
    double pd = 0.0, d2 = 0.0, dq = 0.0, dpd = 0.0;
    for (int a = 0; a < n; ++a) {
        double d = x[a] - s.Q[a];
        pd += s.P[a] * d;
        d2 += d * d;
        dq += d * s.Qdot[a];
        dpd += d * s.Pdot[a];
    }
    Phase ph;
    ph.e = std::exp(cplx(-d2 / (2.0 * el2), pd / el));
    ph.dq = dq;
    ph.dpd = dpd;
    return ph;
}

}  // namespace

cplx beam_value(const FgaParams& fp, const BeamState& s, const Vec3& x) {
    return s.A * phase_at(fp, s, x).e;
}

cplx beam_dt(const FgaParams& fp, const BeamState& s, const Vec3& x) {
    const int n = fp.ndim;
    const double el = fp.eps * fp.ell;
    const double el2 = el * fp.ell;
    Phase ph = phase_at(fp, s, x);
    double pq = 0.0;
    for (int a = 0; a < n; ++a) pq += s.P[a] * s.Qdot[a];
    // d/dt of the exponent: i (Pdot.d - P.Qdot)/(eps ell) + d.Qdot/(eps ell^2)
    cplx rate = kI * ((ph.dpd - pq) / el) + ph.dq / el2;
    return (s.Adot + s.A * rate) * ph.e;
}

std::vector<cplx> reconstruct(const BeamTrajectory& tr, std::span<const int> subset,
                              std::span<const Vec3> points, int k, FieldKind kind) {
    if (k < 0 || k > tr.n_steps) throw FgaError("reconstruct: step out of range");
    if (tr.beams.empty()) throw FgaError("reconstruct: empty ensemble");
    const int N = tr.size();
    std::vector<int> all;
    if (subset.empty()) {
        all.resize(N);
        for (int j = 0; j < N; ++j) all[j] = j;
        subset = all;
    }
    for (int j : subset)
        if (j < 0 || j >= N) throw FgaError("reconstruct: beam index out of range");
    const double R2 = tr.params.cut_radius() * tr.params.cut_radius();
    const int n = tr.params.ndim;
    std::vector<cplx> out(points.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(points.size()); ++i) {
        cplx acc = 0.0;
        for (int j : subset) {
            const BeamState& s = tr.at(k, j);
            double d2 = 0.0;
            for (int a = 0; a < n; ++a) d2 += (points[i][a] - s.Q[a]) * (points[i][a] - s.Q[a]);
            if (d2 > R2) continue;
            acc += kind == FieldKind::value ? beam_value(tr.params, s, points[i])
                                            : beam_dt(tr.params, s, points[i]);
        }
        out[i] = acc / double(subset.size());
    }
    return out;
}

std::vector<cplx> reconstruct_dt(const BeamTrajectory& tr, std::span<const int> subset,
                                 std::span<const Vec3> points, int k) {
    return reconstruct(tr, subset, points, k, FieldKind::dt);
}

// ---------------------------------------------------------------- grid sums

namespace {

// Coefficients of coef * G (or coef * dG/dt) in separable form:
//   alpha * prod f_a + sum_a beta_a d_a prod f_a,  f_a = exp(i P_a d_a/el - d_a^2/(2 el2))
struct SepCoef {
    cplx alpha;
    cplx beta[3];
};

SepCoef sep_coef(const FgaParams& fp, const BeamState& s, cplx coef, FieldKind kind) {
    SepCoef c{};
    const int n = fp.ndim;
    if (kind == FieldKind::value) {
        c.alpha = coef * s.A;
        return c;
    }
    const double el = fp.eps * fp.ell;
    const double el2 = el * fp.ell;
    double pq = 0.0;
    for (int a = 0; a < n; ++a) pq += s.P[a] * s.Qdot[a];
    c.alpha = coef * (s.Adot - s.A * kI * (pq / el));
    for (int a = 0; a < n; ++a) c.beta[a] = coef * s.A * cplx(s.Qdot[a] / el2, s.Pdot[a] / el);
    return c;
}

// Inclusive index range of cell centres within `half` of `q` along an axis.
inline bool axis_range(const Grid& g, int a, double q, double half, int& lo, int& hi) {
    double u0 = (q - half - g.origin[a]) / g.spacing[a] - 0.5;
    double u1 = (q + half - g.origin[a]) / g.spacing[a] - 0.5;
    lo = std::max(0, int(std::ceil(u0)));
    hi = std::min(g.dims[a] - 1, int(std::floor(u1)));
    return lo <= hi;
}

inline double axis_coord(const Grid& g, int a, int i) {
    return g.origin[a] + (i + 0.5) * g.spacing[a];
}

void check_terms(std::span<const BeamTerm> terms, const Grid& grid) {
    for (const auto& t : terms) {
        if (!t.traj || t.beam < 0 || t.beam >= t.traj->size() || t.step < 0 ||
            t.step > t.traj->n_steps)
            throw FgaError("accumulate_grid: bad beam term");
        if (t.traj->params.ndim != grid.ndim)
            throw FgaError("accumulate_grid: trajectory and grid dimensionality differ");
    }
}

}  // namespace

namespace {

// f_i = exp(-d_i^2/(2 el2) + i P d_i/el) on a uniform axis by the recurrence
// f_{i+1} = f_i rho_i, rho_{i+1} = rho_i kappa.
inline void gauss_axis(const Grid& g, int a, double q, double P, double el, double el2, int lo, int hi,
                       cplx* f, cplx* gd) {
    const double h = g.spacing[a];
    double d = g.origin[a] + (lo + 0.5) * h - q;
    cplx fi = std::exp(cplx(-d * d / (2.0 * el2), P * d / el));
    cplx rho = std::exp(cplx(-(2.0 * d * h + h * h) / (2.0 * el2), P * h / el));
    const double kappa = std::exp(-h * h / el2);
    for (int i = lo; i <= hi; ++i) {
        f[i] = fi;
        gd[i] = d * fi;
        fi *= rho;
        rho *= kappa;
        d += h;
    }
}

// split real/imaginary copies of the z-axis factors so the row loops vectorize
struct AxisSoA {
    std::vector<double> fr, fi, gr, gi;
    explicit AxisSoA(int n) : fr(n), fi(n), gr(n), gi(n) {}
    void load(const cplx* f, const cplx* g, int lo, int hi) {
        for (int k = lo; k <= hi; ++k) {
            fr[k] = f[k].real();
            fi[k] = f[k].imag();
            gr[k] = g[k].real();
            gi[k] = g[k].imag();
        }
    }
};

inline void add_row(double* __restrict row, cplx a, cplx b, const AxisSoA& z, int lo, int hi) {
    const double ar = a.real(), ai = a.imag(), br = b.real(), bi = b.imag();
    const double* __restrict fr = z.fr.data();
    const double* __restrict fi = z.fi.data();
    const double* __restrict gr = z.gr.data();
    const double* __restrict gi = z.gi.data();
    for (int k = lo; k <= hi; ++k) row[k] += ar * fr[k] - ai * fi[k] + br * gr[k] - bi * gi[k];
}

inline void add_row(cplx* row, cplx a, cplx b, const AxisSoA& z, int lo, int hi) {
    const double ar = a.real(), ai = a.imag(), br = b.real(), bi = b.imag();
    const double* __restrict fr = z.fr.data();
    const double* __restrict fi = z.fi.data();
    const double* __restrict gr = z.gr.data();
    const double* __restrict gi = z.gi.data();
    double* __restrict r = reinterpret_cast<double*>(row);
    // written out: std::complex products go through the NaN-checking libcall
    for (int k = lo; k <= hi; ++k) {
        r[2 * k] += ar * fr[k] - ai * fi[k] + br * gr[k] - bi * gi[k];
        r[2 * k + 1] += ar * fi[k] + ai * fr[k] + br * gi[k] + bi * gr[k];
    }
}

template <class T>
void accumulate_impl(std::span<const BeamTerm> terms, const Grid& grid, FieldKind kind, double scale,
                     std::vector<T>& out) {
    check_terms(terms, grid);
    if (out.size() != grid.size()) out.assign(grid.size(), T(0.0));
    if (terms.empty()) return;
    const int n = grid.ndim;
    const int nx = grid.dims[0];
    const int nz = grid.dims[n - 1];
    const int ny = n == 3 ? grid.dims[1] : 1;

#pragma omp parallel
    {
        int nth = 1, tid = 0;
#ifdef _OPENMP
        nth = omp_get_num_threads();
        tid = omp_get_thread_num();
#endif
        // contiguous block of x rows per thread
        const int x0 = int(std::int64_t(nx) * tid / nth);
        const int x1 = int(std::int64_t(nx) * (tid + 1) / nth);
        std::vector<cplx> fx(nx), gx(nx), fz(nz), gz(nz), fy(ny), gy(ny);
        AxisSoA zs(nz);
        for (const auto& t : terms) {
            if (x0 >= x1) break;
            const FgaParams& fp = t.traj->params;
            const BeamState& s = t.traj->at(t.step, t.beam);
            if (s.A == 0.0 && s.Adot == 0.0) continue;
            const double el = fp.eps * fp.ell;
            const double el2 = el * fp.ell;
            const double R = fp.cut_radius();
            SepCoef sc = sep_coef(fp, s, t.coef * scale, kind);
            int ilo, ihi, klo, khi;
            if (!axis_range(grid, 0, s.Q[0], R, ilo, ihi)) continue;
            if (!axis_range(grid, n - 1, s.Q[n - 1], R, klo, khi)) continue;
            // the x recurrence always starts at the beam's first cell so the
            // factors do not depend on where the thread blocks split
            const int ifirst = ilo;
            ilo = std::max(ilo, x0);
            ihi = std::min(ihi, x1 - 1);
            if (ilo > ihi) continue;
            const int az = n - 1;
            gauss_axis(grid, az, s.Q[az], s.P[az], el, el2, klo, khi, fz.data(), gz.data());
            zs.load(fz.data(), gz.data(), klo, khi);
            gauss_axis(grid, 0, s.Q[0], s.P[0], el, el2, ifirst, ihi, fx.data(), gx.data());
            int jlo = 0, jhi = 0;
            if (n == 3) {
                if (!axis_range(grid, 1, s.Q[1], R, jlo, jhi)) continue;
                gauss_axis(grid, 1, s.Q[1], s.P[1], el, el2, jlo, jhi, fy.data(), gy.data());
            }
            for (int i = ilo; i <= ihi; ++i) {
                const double dx = axis_coord(grid, 0, i) - s.Q[0];
                for (int j = jlo; j <= jhi; ++j) {
                    double dy = 0.0;
                    cplx a, b;
                    if (n == 3) {
                        dy = axis_coord(grid, 1, j) - s.Q[1];
                        cplx fxy = fx[i] * fy[j];
                        a = sc.alpha * fxy + sc.beta[0] * gx[i] * fy[j] + sc.beta[1] * fx[i] * gy[j];
                        b = sc.beta[2] * fxy;
                    } else {
                        a = sc.alpha * fx[i] + sc.beta[0] * gx[i];
                        b = sc.beta[1] * fx[i];
                    }
                    double rem = R * R - dx * dx - dy * dy;
                    if (rem < 0.0) continue;
                    int lo, hi;
                    if (!axis_range(grid, az, s.Q[az], std::sqrt(rem), lo, hi)) continue;
                    lo = std::max(lo, klo);
                    hi = std::min(hi, khi);
                    T* row = out.data() + (n == 3 ? grid.index(i, j, 0) : grid.index(i, 0));
                    add_row(row, a, b, zs, lo, hi);
                }
            }
        }
    }
}

}  // namespace

void accumulate_grid(std::span<const BeamTerm> terms, const Grid& grid, FieldKind kind,
                     double scale, std::vector<double>& out) {
    accumulate_impl(terms, grid, kind, scale, out);
}

void accumulate_grid_complex(std::span<const BeamTerm> terms, const Grid& grid, FieldKind kind,
                             double scale, std::vector<cplx>& out) {
    accumulate_impl(terms, grid, kind, scale, out);
}

void accumulate_grid_reference(std::span<const BeamTerm> terms, const Grid& grid,
                               FieldKind kind, double scale, std::vector<double>& out) {
    check_terms(terms, grid);
    if (out.size() != grid.size()) out.assign(grid.size(), 0.0);
    const int n = grid.ndim;
    const int az = n - 1;
    const int ny = n == 3 ? grid.dims[1] : 1;
    for (const auto& t : terms) {
        const FgaParams& fp = t.traj->params;
        const BeamState& s = t.traj->at(t.step, t.beam);
        const double R = fp.cut_radius();
        int ilo, ihi, jlo = 0, jhi = 0, klo, khi;
        if (!axis_range(grid, 0, s.Q[0], R, ilo, ihi)) continue;
        if (!axis_range(grid, az, s.Q[az], R, klo, khi)) continue;
        if (n == 3 && !axis_range(grid, 1, s.Q[1], R, jlo, jhi)) continue;
        for (int i = 0; i < grid.dims[0]; ++i)
            for (int j = 0; j < ny; ++j)
                for (int k = 0; k < grid.dims[az]; ++k) {
                    if (i < ilo || i > ihi || j < jlo || j > jhi || k < klo || k > khi) continue;
                    double dx = axis_coord(grid, 0, i) - s.Q[0];
                    double dy = n == 3 ? axis_coord(grid, 1, j) - s.Q[1] : 0.0;
                    double rem = R * R - dx * dx - dy * dy;
                    int lo, hi;
                    if (rem < 0.0 || !axis_range(grid, az, s.Q[az], std::sqrt(rem), lo, hi)) continue;
                    if (k < lo || k > hi) continue;
                    Vec3 x = n == 3 ? grid.center(i, j, k) : grid.center(i, k);
                    cplx g = kind == FieldKind::value ? beam_value(fp, s, x) : beam_dt(fp, s, x);
                    out[n == 3 ? grid.index(i, j, k) : grid.index(i, k)] += (t.coef * scale * g).real();
                }
    }
}

// ---------------------------------------------------------------- records

void SeismicRecord::validate() const {
    if (!(tau > 0.0)) throw FgaError("record: tau must be positive");
    if (traces.size() != receivers.size()) throw FgaError("record: one trace per receiver");
    for (const auto& tr : traces)
        if (int(tr.size()) != samples()) throw FgaError("record: trace length mismatch");
}

SeismicRecord record_at_receivers(const BeamTrajectory& tr, std::span<const Vec3> receivers,
                                  const Grid* domain, std::span<const double> time_function) {
    if (domain)
        for (const auto& r : receivers)
            if (!inside_extent(*domain, r)) throw FgaError("record_at_receivers: receiver outside domain");
    SeismicRecord rec;
    rec.receivers.assign(receivers.begin(), receivers.end());
    rec.tau = tr.tau;
    rec.n_steps = tr.n_steps;
    rec.traces.assign(receivers.size(), std::vector<double>(tr.n_steps + 1, 0.0));
    for (int k = 0; k <= tr.n_steps; ++k) {
        auto v = reconstruct(tr, {}, receivers, k);
        for (std::size_t r = 0; r < receivers.size(); ++r) rec.traces[r][k] = v[r].real();
    }
    if (!time_function.empty()) {
        for (auto& trace : rec.traces) {
            std::vector<double> conv(trace.size(), 0.0);
            for (std::size_t k = 0; k < trace.size(); ++k) {
                double s = 0.0;
                for (std::size_t m = 0; m <= k && m < time_function.size(); ++m)
                    s += time_function[m] * trace[k - m];
                conv[k] = tr.tau * s;
            }
            trace = std::move(conv);
        }
    }
    return rec;
}

}  // namespace rbt
