#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "rbt/cli_io.hpp"

using namespace rbt;
namespace fs = std::filesystem;

namespace {

fs::path scratch() {
    static const fs::path d = [] {
        auto p = fs::temp_directory_path() / ("rbt_cli_io_" + std::to_string(::getpid()));
        fs::create_directories(p);
        return p;
    }();
    return d;
}

int error_line(const std::string& text) {
    try {
        parse_config_text(text);
    } catch (const ConfigError& e) {
        return e.line();
    }
    return -1;
}

std::vector<unsigned char> slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST_CASE("config: defaults, strategies and batch size") {
    auto d = parse_config_text("");
    // only the acquisition is filled in, from the grid extent
    RunConfig e;
    e.sources = d.sources;
    e.receivers = d.receivers;
    CHECK(d == e);
    CHECK(d.sources[0] == Vec3{1584, 316.8, 0});
    CHECK(d.target == PresetId::homogeneous);
    CHECK(d.receivers.size() == 8);
    CHECK(d.sources.size() == 1);
    CHECK(d.n_steps() == 87);

    CHECK(parse_config_text("strategy = per-time-step").strategy == Strategy::per_time_step);
    CHECK(parse_config_text("strategy = per-iteration").strategy == Strategy::per_iteration);

    auto c = parse_config_text("n_dir = 40\nn_shell = 8\nsampling_rate = 0.2\nseed = 3\n");
    CHECK(c.beam_count() == 640);
    CHECK(c.batch_size() == 128);
    auto ic = to_inversion_config(c);
    REQUIRE(ic.plan);
    CHECK(ic.plan->p == 128);
    CHECK(ic.plan->N == 640);
    CHECK(ic.plan->seed == 3);
    CHECK_THROWS_AS(to_inversion_config(d), ConfigError);
}

TEST_CASE("config: errors carry line numbers") {
    CHECK(error_line("# comment\n\nbogus = 1\n") == 3);
    CHECK(error_line("tau = 0.01\neps = fast\n") == 2);
    CHECK(error_line("n_dir = 2.5\n") == 1);
    CHECK(error_line("strategy = sometimes\n") == 1);
    CHECK(error_line("tau = 0.01\ntau = 0.02\n") == 2);
    CHECK(error_line("dims = 4\n") == 1);
    CHECK(error_line("source = 1 2 3 4\n") == 1);
    CHECK(error_line("seed = -4\n") == 1);
    CHECK(error_line("target.nope = 3\n") == 1);
    // constraint violations point at the offending key
    CHECK(error_line("eps = 0.02\n\nsampling_rate = 1.5\n") == 3);
    CHECK(error_line("tau = 0.03\n") == 1);
    CHECK(error_line("just words\n") == 1);
}

TEST_CASE("config: text round trip") {
    auto c = parse_config_text(R"(
preset = gaussian-two-bump-2d
initial = homogeneous
target.alpha = 0.12
dims = 20, 18
spacing = 99.5 101
origin = -10 5
source = 100 200
source = 300.25 200
receiver = 50 1500
receiver = 1000 1500
receiver_weight = 1
receiver_weight = 0.5
eps = 0.03
n_dir = 16
n_shell = 3
tau = 0.01
T = 0.5
strategy = per-iteration
sampling_rate = 0.1
seed = 18446744073709551615
misfit = tti
optimizer = lbfgs
kernel_refine = 2
observations = fga
out = somewhere/else
)");
    CHECK(c.seed == std::uint64_t(18446744073709551615ull));
    CHECK(c.origin == std::vector<double>{-10, 5});
    auto txt = config_text(c);
    CHECK(parse_config_text(txt) == c);
    CHECK(config_text(parse_config_text(txt)) == txt);
    auto d = parse_config_text("");
    CHECK(parse_config_text(config_text(d)) == d);

    auto p = scratch() / "c.cfg";
    std::ofstream(p) << txt;
    CHECK(parse_config(p.string()) == c);
    CHECK_THROWS_AS(parse_config((scratch() / "missing.cfg").string()), ConfigError);
}

TEST_CASE("grid format") {
    const Grid g = Grid::make2d(7, 5, 12.5, 3.0);
    ScalarField f(g, Units::kernel, 0.0);
    std::mt19937_64 rng(8);
    std::normal_distribution<double> nd;
    for (double& v : f.values) v = nd(rng) * 1e-7;
    f[3] = -0.0;
    f[4] = std::numeric_limits<double>::denorm_min();
    auto p = scratch() / "f.rbtg";
    write_grid(f, p.string());
    auto r = read_grid(p.string());
    CHECK(r.grid == f.grid);
    CHECK(r.units == f.units);
    CHECK(std::memcmp(r.values.data(), f.values.data(), f.size() * sizeof(double)) == 0);

    Grid g3;
    g3.ndim = 3;
    g3.dims = {3, 4, 2};
    g3.spacing = {1, 2, 3};
    g3.origin = {-1, 0, 7};
    ScalarField f3(g3, Units::velocity, 2500.0);
    CHECK(decode_grid(encode_grid(f3)).values == f3.values);

    ScalarField small(Grid::make2d(2, 2, 1, 1), Units::velocity, 1.0);
    auto bytes = encode_grid(small);
    CHECK(bytes.size() == 88);
    write_grid(small, (scratch() / "s.rbtg").string());
    CHECK(fs::file_size(scratch() / "s.rbtg") == 88);
    CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "RBTGRID1");
    // little endian ndim = 2 right after the magic
    CHECK(bytes[8] == 2);
    CHECK(bytes[9] == 0);

    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_grid(bad), FormatError);
    auto cut = bytes;
    cut.pop_back();
    CHECK_THROWS_AS(decode_grid(cut), FormatError);
    auto longer = bytes;
    longer.push_back(0);
    CHECK_THROWS_AS(decode_grid(longer), FormatError);
    auto huge = bytes;
    for (int i = 12; i < 20; ++i) huge[i] = 0xff;  // both dims 2^32 - 1
    CHECK_THROWS_AS(decode_grid(huge), FormatError);
    auto dim9 = bytes;
    dim9[8] = 9;
    CHECK_THROWS_AS(decode_grid(dim9), FormatError);
    CHECK_THROWS_AS(read_grid((scratch() / "none.rbtg").string()), FormatError);
}

TEST_CASE("misfit log and records") {
    auto p = scratch() / "misfit.log";
    write_misfit_log({4, 3, 2.5, 2}, {0, 1.5, 3, 4.5}, p.string());
    std::ifstream f(p);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(f, line)) lines.push_back(line);
    REQUIRE(lines.size() == 5);
    CHECK(lines[0] == "iteration\tmisfit\twallclock_s");
    CHECK(lines[3].rfind("2\t2.5\t3", 0) == 0);
    CHECK_THROWS_AS(write_misfit_log({}, {}, p.string()), FormatError);

    SeismicRecord rec;
    rec.receivers = {{0, 0, 0}, {1, 1, 0}};
    rec.tau = 0.5;
    rec.n_steps = 2;
    rec.traces = {{1, 2, 3}, {0, -1, 0.25}};
    auto q = scratch() / "r.tsv";
    write_record(rec, q.string());
    std::ifstream g(q);
    std::getline(g, line);
    CHECK(line == "t\tr0\tr1");
    std::getline(g, line);
    std::getline(g, line);
    CHECK(line == "0.5\t2\t-1");
}

TEST_CASE("heatmaps") {
    const Grid g = Grid::make2d(6, 4, 1, 1);
    ScalarField cst(g, Units::velocity, 2500.0);
    for (auto sc : {ColorScale::linear, ColorScale::diverging}) {
        auto im = heatmap_image(cst, sc);
        CHECK(im.width == 6);
        CHECK(im.height == 4);
        for (auto& px : im.px) CHECK(px == im.px[0]);
    }

    // antisymmetric in x: f(x) = -f(mirror x)
    ScalarField anti(g, Units::kernel, 0.0);
    for (int i = 0; i < 6; ++i)
        for (int k = 0; k < 4; ++k) anti[g.index(i, k)] = (i - 2.5) * (1 + k * k);
    HeatmapInfo info;
    auto im = heatmap_image(anti, ColorScale::diverging, &info);
    CHECK(info.lo == -2.5 * 10);
    CHECK(info.hi == 2.5 * 10);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 6; ++x) {
            Rgb a = im.at(x, y), b = im.at(5 - x, y);
            CHECK(a == Rgb{b.b, b.g, b.r});  // red and blue swap
        }
    CHECK(im.at(5, 3) == Rgb{255, 0, 0});
    CHECK(im.at(0, 3) == Rgb{0, 0, 255});

    ScalarField bad = anti;
    bad[g.index(1, 1)] = std::nan("");
    bad[g.index(2, 2)] = INFINITY;
    auto p = scratch() / "h.ppm";
    auto hi = render_heatmap(bad, p.string(), ColorScale::linear);
    CHECK(hi.non_finite == 2);
    CHECK_FALSE(hi.warning.empty());
    auto back = read_ppm(p.string());
    CHECK(back.width == 6);
    CHECK(back.at(1, 1) == kSentinel);
    CHECK(back.at(2, 2) == kSentinel);
    CHECK(back.px == heatmap_image(bad, ColorScale::linear).px);
    CHECK(fs::exists(p.string() + ".txt"));
    // P6 header followed by raw bytes
    auto raw = slurp(p);
    CHECK(std::string(raw.begin(), raw.begin() + 2) == "P6");
}
