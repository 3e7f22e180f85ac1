#include "rbt/grid_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace rbt {

const char* units_name(Units u) {
    switch (u) {
    case Units::velocity: return "m/s";
    case Units::dimensionless: return "dimensionless";
    case Units::kernel: return "kernel";
    case Units::density: return "s^2/m^2";
    }
    return "?";
}

Grid Grid::make2d(int nx, int nz, double dx, double dz, double ox, double oz) {
    Grid g;
    g.ndim = 2;
    g.dims = {nx, nz, 1};
    g.spacing = {dx, dz, 1.0};
    g.origin = {ox, oz, 0.0};
    g.validate();
    return g;
}

Grid Grid::make3d(int nx, int ny, int nz, double dx, double dy, double dz,
                  double ox, double oy, double oz) {
    Grid g;
    g.ndim = 3;
    g.dims = {nx, ny, nz};
    g.spacing = {dx, dy, dz};
    g.origin = {ox, oy, oz};
    g.validate();
    return g;
}

void Grid::validate() const {
    if (ndim != 2 && ndim != 3) throw ModelError("grid: ndim must be 2 or 3");
    std::size_t total = 1;
    for (int a = 0; a < ndim; ++a) {
        if (dims[a] < 2) throw ModelError("grid: every axis needs at least 2 cells");
        if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
            throw ModelError("grid: spacing must be positive");
        if (!std::isfinite(origin[a])) throw ModelError("grid: origin must be finite");
        if (total > std::numeric_limits<std::size_t>::max() / std::size_t(dims[a]))
            throw ModelError("grid: cell count overflow");
        total *= std::size_t(dims[a]);
    }
}

std::size_t Grid::size() const {
    std::size_t n = 1;
    for (int a = 0; a < ndim; ++a) n *= std::size_t(dims[a]);
    return n;
}

std::size_t Grid::index(int i0, int i1, int i2) const {
    if (ndim == 2) return std::size_t(i0) * dims[1] + i1;
    return (std::size_t(i0) * dims[1] + i1) * dims[2] + i2;
}

Vec3 Grid::center(int i0, int i1, int i2) const {
    Vec3 x{0.0, 0.0, 0.0};
    int idx[3] = {i0, i1, i2};
    for (int a = 0; a < ndim; ++a) x[a] = origin[a] + (idx[a] + 0.5) * spacing[a];
    return x;
}

Vec3 Grid::center(std::size_t flat) const {
    if (ndim == 2) return center(int(flat / dims[1]), int(flat % dims[1]));
    int i2 = int(flat % dims[2]);
    flat /= dims[2];
    return center(int(flat / dims[1]), int(flat % dims[1]), i2);
}

double Grid::cell_volume() const {
    double v = 1.0;
    for (int a = 0; a < ndim; ++a) v *= spacing[a];
    return v;
}

bool Grid::operator==(const Grid& o) const {
    if (ndim != o.ndim) return false;
    for (int a = 0; a < ndim; ++a)
        if (dims[a] != o.dims[a] || spacing[a] != o.spacing[a] || origin[a] != o.origin[a])
            return false;
    return true;
}

ScalarField::ScalarField(const Grid& g, Units u, double fill)
    : grid(g), values(g.size(), fill), units(u) {
    grid.validate();
}

ScalarField::ScalarField(const Grid& g, Units u, std::vector<double> v)
    : grid(g), values(std::move(v)), units(u) {
    validate();
}

void ScalarField::validate() const {
    grid.validate();
    if (values.size() != grid.size()) throw ModelError("field: value count does not match grid");
    if (units == Units::velocity)
        for (double c : values)
            if (!(c > 0.0) || !std::isfinite(c)) throw ModelError("field: velocity must be positive");
}

// ---------------------------------------------------------------- presets

PresetId preset_from_name(const std::string& name) {
    if (name == "gaussian-two-bump-2d") return PresetId::gaussian_two_bump_2d;
    if (name == "gradual-background-2d") return PresetId::gradual_background_2d;
    if (name == "three-layer-2d") return PresetId::three_layer_2d;
    if (name == "gaussian-3d") return PresetId::gaussian_3d;
    if (name == "homogeneous") return PresetId::homogeneous;
    throw ModelError("unknown model preset '" + name + "'");
}

std::string preset_name(PresetId id) {
    switch (id) {
    case PresetId::gaussian_two_bump_2d: return "gaussian-two-bump-2d";
    case PresetId::gradual_background_2d: return "gradual-background-2d";
    case PresetId::three_layer_2d: return "three-layer-2d";
    case PresetId::gaussian_3d: return "gaussian-3d";
    case PresetId::homogeneous: return "homogeneous";
    }
    return "?";
}

ModelPreset ModelPreset::defaults(PresetId id) {
    ModelPreset p;
    p.id = id;
    switch (id) {
    case PresetId::gaussian_two_bump_2d:
        p.params = {{"C0", 2500}, {"alpha", 0.03}, {"beta", 24.2}, {"L", 1584},
                    {"x_c1", 1344}, {"x_c2", 1824}, {"z_c", 1584}};
        break;
    case PresetId::gradual_background_2d:
        p.params = {{"C1", 2500}, {"C2", 3000}, {"alpha", 0.1}, {"beta", 24.2}, {"L", 1584},
                    {"x_c", 3168}, {"z_c", 1584}};
        break;
    case PresetId::three_layer_2d:
        p.params = {{"C1", 1800}, {"C2", 2000}, {"C3", 2200}, {"alpha", 0.1}, {"beta", 24.2},
                    {"L", 1584}, {"x_c", 1584}, {"z_c", 3168}, {"z0", 0}, {"z1", 2112},
                    {"z2", 4224}};
        break;
    case PresetId::gaussian_3d:
        p.params = {{"C0", 2500}, {"alpha", 0.1}, {"beta", 24.2}, {"L", 1584}, {"x_c", 1584},
                    {"z_c", 1584}};
        break;
    case PresetId::homogeneous:
        p.params = {{"C0", 2500}};
        break;
    }
    return p;
}

double ModelPreset::get(const std::string& key) const {
    auto it = params.find(key);
    if (it == params.end())
        throw ModelError("preset " + preset_name(id) + ": missing parameter " + key);
    return it->second;
}

void ModelPreset::validate() const {
    auto positive = [&](const char* k) {
        if (!(get(k) > 0.0)) throw ModelError(std::string("preset: ") + k + " must be > 0");
    };
    if (id == PresetId::homogeneous) {
        positive("C0");
        return;
    }
    double a = get("alpha");
    if (!(a >= 0.0 && a < 1.0)) throw ModelError("preset: alpha must lie in [0, 1)");
    positive("beta");
    positive("L");
    switch (id) {
    case PresetId::gaussian_two_bump_2d:
        positive("C0");
        // the second bump raises c by alpha, the first lowers it
        break;
    case PresetId::gradual_background_2d:
        positive("C1");
        positive("C2");
        break;
    case PresetId::three_layer_2d:
        positive("C1");
        positive("C2");
        positive("C3");
        if (!(get("z0") < get("z1") && get("z1") < get("z2")))
            throw ModelError("preset: layer interfaces must be strictly increasing");
        break;
    case PresetId::gaussian_3d:
        positive("C0");
        break;
    default: break;
    }
}

ModelPreset ModelPreset::background() const {
    ModelPreset b = *this;
    if (b.params.count("alpha")) b.params["alpha"] = 0.0;
    return b;
}

double ModelPreset::velocity_at(double x, double z) const {
    auto bump = [&](double xc, double zc) {
        double r2 = (x - xc) * (x - xc) + (z - zc) * (z - zc);
        double L = get("L");
        return std::exp(-get("beta") / (L * L) * r2);
    };
    switch (id) {
    case PresetId::homogeneous: return get("C0");
    case PresetId::gaussian_two_bump_2d: {
        double a = get("alpha");
        return get("C0") * (1.0 - a * bump(get("x_c1"), get("z_c")) +
                            a * bump(get("x_c2"), get("z_c")));
    }
    case PresetId::gradual_background_2d: {
        double s = z / (2.0 * get("L"));
        double bg = get("C1") * (1.0 - s) + get("C2") * s;
        return bg * (1.0 - get("alpha") * bump(get("x_c"), get("z_c")));
    }
    case PresetId::three_layer_2d: {
        if (z < get("z1")) return get("C1");
        if (z < get("z2")) return get("C2") * (1.0 - get("alpha") * bump(get("x_c"), get("z_c")));
        return get("C3");
    }
    case PresetId::gaussian_3d:
        return get("C0") * (1.0 - get("alpha") * bump(get("x_c"), get("z_c")));
    }
    return 0.0;
}

ScalarField eval_preset(const ModelPreset& preset, const Grid& grid) {
    preset.validate();
    grid.validate();
    ScalarField out(grid, Units::velocity, 0.0);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        Vec3 x = grid.center(i);
        double c = preset.velocity_at(x[0], x[grid.ndim - 1]);
        if (!(c > 0.0)) throw ModelError("preset produced a non-positive velocity");
        out[i] = c;
    }
    return out;
}

DensityLog density_and_log(const ScalarField& c) {
    if (c.values.size() != c.grid.size()) throw ModelError("density_and_log: bad field");
    DensityLog out{ScalarField(c.grid, Units::density), ScalarField(c.grid, Units::dimensionless)};
    for (std::size_t i = 0; i < c.size(); ++i) {
        double v = c[i];
        if (!(v > 0.0) || !std::isfinite(v))
            throw ModelError("density_and_log: velocity must be positive");
        out.rho[i] = 1.0 / (v * v);
        out.X[i] = -2.0 * std::log(v);
    }
    return out;
}

ScalarField velocity_from_log(const ScalarField& X) {
    ScalarField c(X.grid, Units::velocity);
    for (std::size_t i = 0; i < X.size(); ++i) c[i] = std::exp(-0.5 * X[i]);
    return c;
}

// ---------------------------------------------------------------- sampling

VelocitySample ConstantVelocity::sample(const Vec3&) const {
    VelocitySample s;
    s.c = c_;
    return s;
}

VelocitySample LinearVelocity::sample(const Vec3& x) const {
    VelocitySample s;
    s.c = a_;
    for (int a = 0; a < ndim_; ++a) {
        s.c += b_[a] * x[a];
        s.grad[a] = b_[a];
    }
    return s;
}

bool inside_extent(const Grid& g, const Vec3& x) {
    for (int a = 0; a < g.ndim; ++a)
        if (x[a] < g.origin[a] || x[a] > g.origin[a] + g.extent(a)) return false;
    return true;
}

namespace {

// Continuous cell coordinate clamped to the hull of cell centres.
double cell_coord(const Grid& g, int a, double x, bool& clamped) {
    double u = (x - g.origin[a]) / g.spacing[a] - 0.5;
    double hi = g.dims[a] - 1;
    if (u < 0.0) {
        u = 0.0;
    } else if (u > hi) {
        u = hi;
    }
    if (x < g.origin[a] || x > g.origin[a] + g.extent(a)) clamped = true;
    return u;
}

}  // namespace

double interpolate(const ScalarField& f, const Vec3& x, bool* clamped) {
    const Grid& g = f.grid;
    bool cl = false;
    int i0[3] = {0, 0, 0};
    double w[3] = {0.0, 0.0, 0.0};
    for (int a = 0; a < g.ndim; ++a) {
        double u = cell_coord(g, a, x[a], cl);
        int i = std::min(int(u), g.dims[a] - 2);
        i0[a] = i;
        w[a] = u - i;
    }
    if (clamped) *clamped = cl;
    if (g.ndim == 2) {
        const double* v = f.values.data();
        std::size_t n1 = g.dims[1];
        std::size_t b = std::size_t(i0[0]) * n1 + i0[1];
        return (1 - w[0]) * ((1 - w[1]) * v[b] + w[1] * v[b + 1]) +
               w[0] * ((1 - w[1]) * v[b + n1] + w[1] * v[b + n1 + 1]);
    }
    double s = 0.0;
    for (int c = 0; c < 8; ++c) {
        int d0 = c >> 2 & 1, d1 = c >> 1 & 1, d2 = c & 1;
        double wt = (d0 ? w[0] : 1 - w[0]) * (d1 ? w[1] : 1 - w[1]) * (d2 ? w[2] : 1 - w[2]);
        s += wt * f.values[g.index(i0[0] + d0, i0[1] + d1, i0[2] + d2)];
    }
    return s;
}

namespace {

// Centred difference of the interpolant along one axis, step one cell,
// clamped to the hull and divided by the span actually covered.
template <class F>
double centred(const Grid& g, const Vec3& x, int a, F&& fn) {
    double lo = g.origin[a] + 0.5 * g.spacing[a];
    double hi = g.origin[a] + g.extent(a) - 0.5 * g.spacing[a];
    double xm = std::clamp(x[a] - g.spacing[a], lo, hi);
    double xp = std::clamp(x[a] + g.spacing[a], lo, hi);
    if (xp <= xm) return 0.0;
    Vec3 pm = x, pp = x;
    pm[a] = xm;
    pp[a] = xp;
    return (fn(pp) - fn(pm)) / (xp - xm);
}

}  // namespace

Vec3 gradient(const ScalarField& f, const Vec3& x, bool* clamped) {
    Vec3 gr{0.0, 0.0, 0.0};
    if (clamped) *clamped = !inside_extent(f.grid, x);
    for (int a = 0; a < f.grid.ndim; ++a)
        gr[a] = centred(f.grid, x, a, [&](const Vec3& p) { return interpolate(f, p); });
    return gr;
}

Mat3 hessian(const ScalarField& f, const Vec3& x) {
    Mat3 h{};
    for (int a = 0; a < f.grid.ndim; ++a)
        for (int b = 0; b < f.grid.ndim; ++b)
            h[a][b] = centred(f.grid, x, b, [&](const Vec3& p) { return gradient(f, p)[a]; });
    // symmetrise; the two mixed differences agree only up to interpolation error
    for (int a = 0; a < f.grid.ndim; ++a)
        for (int b = a + 1; b < f.grid.ndim; ++b) h[a][b] = h[b][a] = 0.5 * (h[a][b] + h[b][a]);
    return h;
}

GridVelocity::GridVelocity(ScalarField c) : field_(std::move(c)) {
    field_.validate();
    if (field_.units != Units::velocity) throw ModelError("GridVelocity needs a velocity field");
}

VelocitySample GridVelocity::sample(const Vec3& x) const {
    VelocitySample s;
    bool cl = false;
    s.c = interpolate(field_, x, &cl);
    if (cl) clamps_.fetch_add(1, std::memory_order_relaxed);
    s.grad = gradient(field_, x);
    s.hess = hessian(field_, x);
    return s;
}

}  // namespace rbt
