#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rbt/grid_model.hpp"

namespace rbt {

class BatchError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Philox4x32-10 counter-based generator.
struct Philox4x32 {
    using Counter = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;
    static Counter block(Counter ctr, Key key);
};

// Stream of uniform 32-bit words for one (key, counter prefix); word i comes
// from block i/4 with counter (i/4, c1, c2, c3).
class PhiloxStream {
public:
    PhiloxStream(std::uint64_t seed, std::uint32_t c1, std::uint32_t c2, std::uint32_t c3);
    std::uint32_t next();
    // unbiased integer in [0, n)
    std::uint32_t below(std::uint32_t n);
    double uniform();  // [0, 1)

private:
    Philox4x32::Key key_;
    Philox4x32::Counter ctr_;
    Philox4x32::Counter buf_{};
    int used_ = 4;
};

enum class Strategy { per_time_step, per_iteration };
enum class Role : std::uint32_t { forward = 0, adjoint = 1 };

Strategy strategy_from_name(const std::string& s);
std::string strategy_name(Strategy s);

struct BatchPlan {
    Strategy strategy = Strategy::per_time_step;
    int N = 0;
    int p = 0;
    std::uint64_t seed = 0;
    std::uint32_t lane = 0;  // one lane per source

    void validate() const;
    bool full() const { return p == N; }
    BatchPlan with_lane(std::uint32_t l) const {
        BatchPlan b = *this;
        b.lane = l;
        return b;
    }
};

struct Batch {
    std::vector<int> indices;  // sorted, 0-based
    int m = 0;
    int k = 0;
    Role role = Role::forward;
    std::uint64_t seed = 0;
};

// Uniform size-p subset of {0..N-1} without replacement, a pure function of
// (seed, lane, strategy, m, k, role). The per-iteration strategy ignores k.
Batch draw(const BatchPlan& plan, int m, int k, Role role);

ScalarField chi(const ScalarField& K_rb, const ScalarField& K_full);

// All size-p subsets in lexicographic order; refuses more than 1e6 subsets.
std::vector<std::vector<int>> enumerate_batches(int N, int p);
double binomial(int n, int k);

// Per-beam real contributions on a set of points:
//   fwd: dG_j/dt (t_k, x)          adj: rho(x) dG+_j/dt (T - t_k, x)
// for k = 1..K, stored [k][j][x]; the ensemble mean is the full-sum field.
struct BeamSamples {
    int K = 0;
    int N = 0;
    int n_points = 0;
    std::vector<double> v;

    BeamSamples() = default;
    BeamSamples(int K_, int N_, int P_) : K(K_), N(N_), n_points(P_), v(std::size_t(K_) * N_ * P_, 0.0) {}
    double& at(int k, int j, int x) { return v[(std::size_t(k) * N + j) * n_points + x]; }
    double at(int k, int j, int x) const { return v[(std::size_t(k) * N + j) * n_points + x]; }
};

// Lambda of the variance lemma at each point; E[chi^2] = (1/p - 1/N) tau Lambda.
std::vector<double> lambda_stat(const BeamSamples& fwd, const BeamSamples& adj, int p, double tau);
std::vector<double> predicted_chi_variance(const BeamSamples& fwd, const BeamSamples& adj, int p,
                                           double tau);

// Kernel sum_k tau mean_B(adj) mean_B(fwd) for the given per-step batches
// (empty batch list = full sums).
std::vector<double> kernel_from_samples(const BeamSamples& fwd, const BeamSamples& adj, double tau,
                                        std::span<const std::vector<int>> fwd_batches = {},
                                        std::span<const std::vector<int>> adj_batches = {});

// Exact first and second moments of chi over the joint space of independent
// per-step forward and adjoint batches, by full enumeration.
struct ChiMoments {
    std::vector<double> mean;
    std::vector<double> second;
    double combinations = 0.0;
};
ChiMoments exact_chi_moments(const BeamSamples& fwd, const BeamSamples& adj, int p, double tau);

}  // namespace rbt
