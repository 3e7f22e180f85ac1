// OpenMP kernels against their serial references.
#include <benchmark/benchmark.h>
#include <omp.h>

#include <cmath>

#include "rbt/fd_oracle.hpp"
#include "rbt/fga.hpp"

using namespace rbt;

namespace {

struct BeamSetup {
    Grid grid = Grid::make2d(64, 64, 49.5, 49.5);
    BeamTrajectory tr;
    std::vector<BeamTerm> terms;
    BeamSetup() {
        FgaParams fp;
        fp.n_dir = 48;
        fp.n_shell = 6;
        ConstantVelocity cv(2, 2500.0);
        tr = propagate(decompose_point_source({1584, 1584, 0}, 2500.0, fp), cv, fp, 0.02, 20, {.store_z = false});
        for (int j = 0; j < tr.size(); ++j) terms.push_back({&tr, j, 20, cplx(1.0, 0.0)});
    }
};

const BeamSetup& beams() {
    static BeamSetup s;
    return s;
}

void BM_accumulate_grid(benchmark::State& st) {
    const auto& s = beams();
    omp_set_num_threads(int(st.range(0)));
    std::vector<double> out;
    for (auto _ : st) {
        out.assign(s.grid.size(), 0.0);
        accumulate_grid(s.terms, s.grid, FieldKind::dt, 1.0, out);
        benchmark::DoNotOptimize(out.data());
    }
}

void BM_accumulate_grid_reference(benchmark::State& st) {
    const auto& s = beams();
    std::vector<double> out;
    for (auto _ : st) {
        out.assign(s.grid.size(), 0.0);
        accumulate_grid_reference(s.terms, s.grid, FieldKind::dt, 1.0, out);
        benchmark::DoNotOptimize(out.data());
    }
}

std::vector<double> smooth_field(const Grid& g) {
    std::vector<double> u(g.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
        Vec3 x = g.center(i);
        u[i] = std::sin(x[0] * 1e-2) * std::cos(x[1] * 7e-3);
    }
    return u;
}

void BM_laplacian(benchmark::State& st) {
    Grid g = Grid::make2d(512, 512, 6.0, 6.0);
    auto u = smooth_field(g);
    std::vector<double> out;
    omp_set_num_threads(int(st.range(0)));
    for (auto _ : st) {
        laplacian(g, 4, u, out);
        benchmark::DoNotOptimize(out.data());
    }
}

void BM_laplacian_reference(benchmark::State& st) {
    Grid g = Grid::make2d(512, 512, 6.0, 6.0);
    auto u = smooth_field(g);
    std::vector<double> out;
    for (auto _ : st) {
        laplacian_reference(g, 4, u, out);
        benchmark::DoNotOptimize(out.data());
    }
}

int max_threads() { return omp_get_max_threads(); }

}  // namespace

BENCHMARK(BM_accumulate_grid)->DenseRange(1, max_threads())->Unit(benchmark::kMillisecond);
BENCHMARK(BM_accumulate_grid_reference)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_laplacian)->DenseRange(1, max_threads())->Unit(benchmark::kMillisecond);
BENCHMARK(BM_laplacian_reference)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
