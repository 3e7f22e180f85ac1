#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rbt/fga.hpp"
#include "rbt/grid_model.hpp"
#include "rbt/inversion.hpp"

namespace rbt {

class ConfigError : public std::runtime_error {
public:
    ConfigError(int line, const std::string& msg);
    int line() const { return line_; }

private:
    int line_;
};

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Everything a run needs. Keys of the text format in parentheses; see
// README for the full table with defaults.
struct RunConfig {
    PresetId target = PresetId::homogeneous;       // preset
    PresetId initial = PresetId::homogeneous;      // initial
    std::map<std::string, double> target_params;   // target.<name>
    std::map<std::string, double> initial_params;  // initial.<name>
    std::vector<int> dims{32, 32};                 // dims
    std::vector<double> spacing{99.0, 99.0};       // spacing
    std::vector<double> origin{0.0, 0.0};          // origin
    std::vector<Vec3> sources;                     // source (repeated)
    std::vector<Vec3> receivers;                   // receiver (repeated)
    std::vector<double> receiver_weights;          // receiver_weight (repeated)
    double eps = 0.025;
    double ell = 0.0;  // 0 = largest grid extent
    double band_center = 1.0;
    double band_width = 0.35;
    int n_dir = 0;    // 0 = suggested from the grid diagonal
    int n_shell = 0;
    double tau = 0.016;
    double T = 1.392;  // 87 steps
    Strategy strategy = Strategy::per_time_step;
    double sampling_rate = 1.0;
    std::optional<std::uint64_t> seed;
    MisfitKind misfit = MisfitKind::fwi;
    double window_half_width = 0.0;
    Optimizer optimizer = Optimizer::gd;
    double alpha = 0.0;
    double max_update = 0.01;
    int lbfgs_memory = 5;
    double reg_strength = 0.05;  // relative, see InversionConfig::reg_relative
    double smoothing = 0.0;
    double mask_radius = 0.0;
    int kernel_refine = 1;
    int iterations = 4;  // M*
    double J_star = 0.0;
    ObsSource observations = ObsSource::fd;
    double fd_spacing = 12.0;
    double fd_padding = 1500.0;
    std::string out = "out";

    Grid grid() const;
    FgaParams fga() const;  // with counts resolved
    int n_steps() const;
    int beam_count() const { return fga().beam_count(); }
    int batch_size() const;  // p = round(rate N)
    // Throws ConfigError (line 0) on constraint violations.
    void validate() const;

    bool operator==(const RunConfig& o) const = default;
};

RunConfig parse_config_text(const std::string& text);
RunConfig parse_config(const std::string& path);
// Canonical text; parse_config_text(config_text(c)) == c.
std::string config_text(const RunConfig& c);

// Seed must be set.
InversionConfig to_inversion_config(const RunConfig& c);

void write_grid(const ScalarField& f, const std::string& path);
ScalarField read_grid(const std::string& path);
std::vector<unsigned char> encode_grid(const ScalarField& f);
ScalarField decode_grid(const std::vector<unsigned char>& bytes);

void write_misfit_log(const std::vector<double>& history, const std::vector<double>& wallclock,
                      const std::string& path);

// Tab separated, one column per receiver, first column time.
void write_record(const SeismicRecord& rec, const std::string& path);

enum class ColorScale {
    linear,     // grey ramp from min (black) to max (white)
    diverging,  // blue - white - red, symmetric about 0 with limit max|v|
};

struct Rgb {
    unsigned char r, g, b;
    bool operator==(const Rgb&) const = default;
};

// Magenta marks NaN and infinities.
inline constexpr Rgb kSentinel{255, 0, 255};

struct Image {
    int width = 0, height = 0;
    std::vector<Rgb> px;  // row-major
    Rgb at(int x, int y) const { return px[std::size_t(y) * width + x]; }
};

struct HeatmapInfo {
    double lo = 0.0, hi = 0.0;  // finite range of the plotted values
    std::size_t non_finite = 0;
    std::string warning;
};

// 2D fields map x to columns and z to rows (z grows downwards). 3D fields
// are sliced at index `slice` of axis `slice_axis` (-1 = middle).
Image heatmap_image(const ScalarField& f, ColorScale scale, HeatmapInfo* info = nullptr,
                    int slice_axis = 1, int slice = -1);
// P6 image at path and min/max in path + ".txt".
HeatmapInfo render_heatmap(const ScalarField& f, const std::string& path, ColorScale scale,
                           int slice_axis = 1, int slice = -1);
Image read_ppm(const std::string& path);

}  // namespace rbt
