#pragma once

#include <cstdint>
#include <vector>

#include "rbt/adjoint_kernel.hpp"
#include "rbt/fd_oracle.hpp"
#include "rbt/fga.hpp"
#include "rbt/random_batch.hpp"

namespace rbt {

// Exact enumeration of chi over all per-step batch pairs against the
// closed-form variance, on a small beam ensemble (N = 2 n_dir n_shell).
struct VarianceOracle {
    int N = 0, p = 0, steps = 0;
    double combinations = 0.0;
    std::vector<double> exact_second, predicted, exact_mean;
    double max_rel_error = 0.0;   // |exact - predicted| / |predicted|
    double max_abs_mean = 0.0;    // relative to max |K|
};

// Forward beams from a point source and a second point-source ensemble taken
// in reverse time as the adjoint factor, sampled at n_probe points. The
// default oracle is 1D, where one direction pair and three shells give N = 6.
BeamSamples oracle_forward(int ndim, int n_dir, int n_shell, int steps, int n_probe, std::uint64_t seed,
                           BeamSamples* adj, double* tau);
VarianceOracle variance_oracle(int ndim = 1, int n_dir = 1, int n_shell = 3, int p = 2, int steps = 3,
                               int n_probe = 20, std::uint64_t seed = 1);

// FGA seismogram against the FD oracle in a homogeneous 2D medium: centred
// source, four receivers 1 km away, reflecting FD box with the first
// reflection arriving after the record ends. The FD record is
// Richardson-extrapolated from spacings h and h/2.
struct FgaFdComparison {
    double eps = 0.0, h = 0.0;
    int N = 0;
    double rel_l2 = 0.0;
    SeismicRecord fga, fd;
};
FgaFdComparison fga_vs_fd_homogeneous(double eps, double h);

}  // namespace rbt
