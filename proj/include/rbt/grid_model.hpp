#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace rbt {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;

class ModelError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Unit tags are part of the on-disk format; values are fixed.
enum class Units : std::uint32_t {
    velocity = 0,
    dimensionless = 1,
    kernel = 2,
    density = 3,
};

const char* units_name(Units u);

// Regular cell-centred grid. Axis order is (x, z) in 2D and (x, y, z) in 3D,
// values are row-major with the last axis fastest.
struct Grid {
    int ndim = 2;
    std::array<int, 3> dims{1, 1, 1};
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};

    static Grid make2d(int nx, int nz, double dx, double dz, double ox = 0.0, double oz = 0.0);
    static Grid make3d(int nx, int ny, int nz, double dx, double dy, double dz,
                       double ox = 0.0, double oy = 0.0, double oz = 0.0);

    void validate() const;
    std::size_t size() const;
    std::size_t index(int i0, int i1, int i2 = 0) const;
    Vec3 center(std::size_t flat) const;
    Vec3 center(int i0, int i1, int i2 = 0) const;
    double extent(int axis) const { return dims[axis] * spacing[axis]; }
    double cell_volume() const;

    bool operator==(const Grid& o) const;
    bool operator!=(const Grid& o) const { return !(*this == o); }
};

struct ScalarField {
    Grid grid;
    std::vector<double> values;
    Units units = Units::dimensionless;

    ScalarField() = default;
    ScalarField(const Grid& g, Units u, double fill = 0.0);
    ScalarField(const Grid& g, Units u, std::vector<double> v);

    double& operator[](std::size_t i) { return values[i]; }
    double operator[](std::size_t i) const { return values[i]; }
    std::size_t size() const { return values.size(); }
    void validate() const;
};

enum class PresetId {
    gaussian_two_bump_2d,
    gradual_background_2d,
    three_layer_2d,
    gaussian_3d,
    homogeneous,
};

PresetId preset_from_name(const std::string& name);
std::string preset_name(PresetId id);

struct ModelPreset {
    PresetId id = PresetId::homogeneous;
    std::map<std::string, double> params;

    // Default parameters of each preset.
    static ModelPreset defaults(PresetId id);
    void validate() const;
    double get(const std::string& key) const;
    // Closed form; every preset is independent of y.
    double velocity_at(double x, double z) const;
    // Same model with the anomaly switched off (alpha = 0).
    ModelPreset background() const;
};

ScalarField eval_preset(const ModelPreset& preset, const Grid& grid);

struct DensityLog {
    ScalarField rho;
    ScalarField X;
};

DensityLog density_and_log(const ScalarField& c);
ScalarField velocity_from_log(const ScalarField& X);

// Velocity with first and second spatial derivatives, as needed by the ray ODEs.
struct VelocitySample {
    double c = 0.0;
    Vec3 grad{0.0, 0.0, 0.0};
    Mat3 hess{};
};

class VelocityModel {
public:
    virtual ~VelocityModel() = default;
    virtual int ndim() const = 0;
    virtual VelocitySample sample(const Vec3& x) const = 0;
};

class ConstantVelocity final : public VelocityModel {
public:
    ConstantVelocity(int ndim, double c) : ndim_(ndim), c_(c) {}
    int ndim() const override { return ndim_; }
    VelocitySample sample(const Vec3& x) const override;

private:
    int ndim_;
    double c_;
};

// c(x) = a + b . x
class LinearVelocity final : public VelocityModel {
public:
    LinearVelocity(int ndim, double a, Vec3 b) : ndim_(ndim), a_(a), b_(b) {}
    int ndim() const override { return ndim_; }
    VelocitySample sample(const Vec3& x) const override;

private:
    int ndim_;
    double a_;
    Vec3 b_;
};

// Multilinear interpolation of a gridded field; points outside the hull of
// cell centres are clamped and counted.
class GridVelocity final : public VelocityModel {
public:
    explicit GridVelocity(ScalarField c);
    int ndim() const override { return field_.grid.ndim; }
    VelocitySample sample(const Vec3& x) const override;
    const ScalarField& field() const { return field_; }
    std::uint64_t clamp_count() const { return clamps_.load(); }

private:
    ScalarField field_;
    mutable std::atomic<std::uint64_t> clamps_{0};
};

double interpolate(const ScalarField& f, const Vec3& x, bool* clamped = nullptr);
Vec3 gradient(const ScalarField& f, const Vec3& x, bool* clamped = nullptr);
Mat3 hessian(const ScalarField& f, const Vec3& x);

bool inside_extent(const Grid& g, const Vec3& x);

}  // namespace rbt
