#pragma once

#include <optional>
#include <vector>

#include "rbt/fga.hpp"
#include "rbt/grid_model.hpp"

namespace rbt {

class FdError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Boundary { absorbing_sponge, reflecting };

struct FDConfig {
    Grid grid;
    double dt = 0.0;
    int space_order = 4;  // 2 or 4
    Boundary boundary = Boundary::absorbing_sponge;
    int sponge_cells = 20;
    double sponge_strength = 0.0045;  // Cerjan damping exponent factor

    void validate(double c_max) const;
    static double cfl_limit(int ndim);
};

// Grid covering `domain` with `pad` extra cells on every side at spacing h.
Grid padded_grid(const Grid& domain, double h, int pad);
// Damping factor for a sponge of `cells` cells; the product with the width is
// kept near 0.09, which balances absorption against reflection off the ramp.
double sponge_strength_for(int cells);
// Largest stable step with a margin, for the given grid and velocity bound.
double stable_dt(const Grid& g, double c_max, double fraction = 0.9);

// Either the band-limited impulse (as t = 0 data) or point sources with
// traces sampled at `tau` injected at the nearest cell.
struct FdSource {
    enum class Kind { none, impulse, record_driven } kind = Kind::none;
    // impulse
    Vec3 x_s{};
    double c_s = 0.0;
    FgaParams fga;
    // record driven
    std::vector<Vec3> locations;
    std::vector<std::vector<double>> traces;
    double tau = 0.0;
};

struct FdResult {
    SeismicRecord record;
    std::vector<std::vector<double>> snapshots;  // at requested record steps
    std::vector<double> energy;                  // per FD step, reflecting runs
    int fd_steps = 0;
};

struct FdRequest {
    std::vector<Vec3> receivers;
    double tau = 0.0;   // record sample interval
    int n_steps = 0;    // record has n_steps + 1 samples
    std::vector<int> snapshot_steps;
    bool track_energy = false;
};

// Leapfrog solution of rho u_tt - lap u = s with rho = 1/c^2.
FdResult fd_solve(const ScalarField& c, const FdSource& src, const FDConfig& cfg,
                  const FdRequest& req);

// Discrete Laplacian with zero ghost cells, OpenMP over rows and a serial reference.
void laplacian(const Grid& g, int order, const std::vector<double>& u, std::vector<double>& out);
void laplacian_reference(const Grid& g, int order, const std::vector<double>& u,
                         std::vector<double>& out);

double compare_fields(const std::vector<double>& a, const std::vector<double>& b);
double compare_fields(const ScalarField& a, const ScalarField& b);
double compare_fields(const SeismicRecord& a, const SeismicRecord& b);

}  // namespace rbt
