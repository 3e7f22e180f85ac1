#include "rbt/cli_io.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

namespace rbt {

ConfigError::ConfigError(int line, const std::string& msg)
    : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + msg : msg), line_(line) {}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> tokens(std::string s) {
    std::replace(s.begin(), s.end(), ',', ' ');
    std::istringstream in(s);
    std::vector<std::string> out;
    std::string t;
    while (in >> t) out.push_back(t);
    return out;
}

double to_double(const std::string& s, int line) {
    const char* b = s.c_str();
    char* e = nullptr;
    errno = 0;
    double v = std::strtod(b, &e);
    if (e == b || *e != '\0' || errno == ERANGE || !std::isfinite(v))
        throw ConfigError(line, "expected a finite number, got '" + s + "'");
    return v;
}

long long to_int(const std::string& s, int line) {
    const char* b = s.c_str();
    char* e = nullptr;
    errno = 0;
    long long v = std::strtoll(b, &e, 10);
    if (e == b || *e != '\0' || errno == ERANGE || v < std::numeric_limits<int>::min() ||
        v > std::numeric_limits<int>::max())
        throw ConfigError(line, "expected an integer, got '" + s + "'");
    return v;
}

std::uint64_t to_u64(const std::string& s, int line) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
        throw ConfigError(line, "expected an unsigned 64-bit integer, got '" + s + "'");
    errno = 0;
    unsigned long long v = std::strtoull(s.c_str(), nullptr, 10);
    if (errno == ERANGE) throw ConfigError(line, "seed out of range: " + s);
    return v;
}

using Handler = std::function<void(RunConfig&, const std::vector<std::string>&, int)>;

struct KeySpec {
    bool list;  // may repeat
    Handler set;
};

void want(const std::vector<std::string>& v, std::size_t n, int line) {
    if (v.size() != n)
        throw ConfigError(line, "expected " + std::to_string(n) + " value(s), got " +
                                    std::to_string(v.size()));
}

template <class F>
Handler one(F f) {
    return [f](RunConfig& c, const std::vector<std::string>& v, int line) {
        want(v, 1, line);
        f(c, v[0], line);
    };
}

Handler dbl(double RunConfig::*m) {
    return one([m](RunConfig& c, const std::string& s, int line) { c.*m = to_double(s, line); });
}

Handler integer(int RunConfig::*m) {
    return one([m](RunConfig& c, const std::string& s, int line) { c.*m = int(to_int(s, line)); });
}

template <class Parse>
Handler enum_key(Parse parse) {
    return one([parse](RunConfig& c, const std::string& s, int line) {
        try {
            parse(c, s);
        } catch (const std::runtime_error& e) {
            throw ConfigError(line, e.what());
        }
    });
}

Vec3 point(const std::vector<std::string>& v, int line) {
    if (v.size() != 2 && v.size() != 3) throw ConfigError(line, "a point needs 2 or 3 coordinates");
    Vec3 p{0, 0, 0};
    for (std::size_t i = 0; i < v.size(); ++i) p[i] = to_double(v[i], line);
    return p;
}

const std::map<std::string, KeySpec>& key_table() {
    static const std::map<std::string, KeySpec> t = {
        {"preset", {false, enum_key([](RunConfig& c, const std::string& s) { c.target = preset_from_name(s); })}},
        {"initial", {false, enum_key([](RunConfig& c, const std::string& s) { c.initial = preset_from_name(s); })}},
        {"dims", {false, [](RunConfig& c, const std::vector<std::string>& v, int line) {
             if (v.size() != 2 && v.size() != 3) throw ConfigError(line, "dims needs 2 or 3 values");
             c.dims.clear();
             for (auto& s : v) c.dims.push_back(int(to_int(s, line)));
         }}},
        {"spacing", {false, [](RunConfig& c, const std::vector<std::string>& v, int line) {
             if (v.size() != 2 && v.size() != 3) throw ConfigError(line, "spacing needs 2 or 3 values");
             c.spacing.clear();
             for (auto& s : v) c.spacing.push_back(to_double(s, line));
         }}},
        {"origin", {false, [](RunConfig& c, const std::vector<std::string>& v, int line) {
             if (v.size() != 2 && v.size() != 3) throw ConfigError(line, "origin needs 2 or 3 values");
             c.origin.clear();
             for (auto& s : v) c.origin.push_back(to_double(s, line));
         }}},
        {"source", {true, [](RunConfig& c, const std::vector<std::string>& v, int line) {
             c.sources.push_back(point(v, line));
         }}},
        {"receiver", {true, [](RunConfig& c, const std::vector<std::string>& v, int line) {
             c.receivers.push_back(point(v, line));
         }}},
        {"receiver_weight", {true, one([](RunConfig& c, const std::string& s, int line) {
             c.receiver_weights.push_back(to_double(s, line));
         })}},
        {"eps", {false, dbl(&RunConfig::eps)}},
        {"ell", {false, dbl(&RunConfig::ell)}},
        {"band_center", {false, dbl(&RunConfig::band_center)}},
        {"band_width", {false, dbl(&RunConfig::band_width)}},
        {"n_dir", {false, integer(&RunConfig::n_dir)}},
        {"n_shell", {false, integer(&RunConfig::n_shell)}},
        {"tau", {false, dbl(&RunConfig::tau)}},
        {"T", {false, dbl(&RunConfig::T)}},
        {"strategy", {false, enum_key([](RunConfig& c, const std::string& s) { c.strategy = strategy_from_name(s); })}},
        {"sampling_rate", {false, dbl(&RunConfig::sampling_rate)}},
        {"seed", {false, one([](RunConfig& c, const std::string& s, int line) { c.seed = to_u64(s, line); })}},
        {"misfit", {false, enum_key([](RunConfig& c, const std::string& s) { c.misfit = misfit_from_name(s); })}},
        {"window_half_width", {false, dbl(&RunConfig::window_half_width)}},
        {"optimizer", {false, enum_key([](RunConfig& c, const std::string& s) { c.optimizer = optimizer_from_name(s); })}},
        {"alpha", {false, dbl(&RunConfig::alpha)}},
        {"max_update", {false, dbl(&RunConfig::max_update)}},
        {"lbfgs_memory", {false, integer(&RunConfig::lbfgs_memory)}},
        {"reg_strength", {false, dbl(&RunConfig::reg_strength)}},
        {"smoothing", {false, dbl(&RunConfig::smoothing)}},
        {"mask_radius", {false, dbl(&RunConfig::mask_radius)}},
        {"kernel_refine", {false, integer(&RunConfig::kernel_refine)}},
        {"iterations", {false, integer(&RunConfig::iterations)}},
        {"J_star", {false, dbl(&RunConfig::J_star)}},
        {"observations", {false, enum_key([](RunConfig& c, const std::string& s) {
             if (s == "fd") c.observations = ObsSource::fd;
             else if (s == "fga") c.observations = ObsSource::fga;
             else throw std::runtime_error("observations must be fd or fga");
         })}},
        {"fd_spacing", {false, dbl(&RunConfig::fd_spacing)}},
        {"fd_padding", {false, dbl(&RunConfig::fd_padding)}},
        {"out", {false, one([](RunConfig& c, const std::string& s, int) { c.out = s; })}},
    };
    return t;
}

// Sources and receivers when the file names none: one source near the top
// centre, eight receivers across the bottom.
void default_acquisition(RunConfig& c) {
    Grid g = c.grid();
    int zi = g.ndim - 1;
    auto at = [&](double fx, double fz) {
        Vec3 p{0, 0, 0};
        p[0] = g.origin[0] + fx * g.extent(0);
        if (g.ndim == 3) p[1] = g.origin[1] + 0.5 * g.extent(1);
        p[zi] = g.origin[zi] + fz * g.extent(zi);
        return p;
    };
    if (c.sources.empty()) c.sources.push_back(at(0.5, 0.1));
    if (c.receivers.empty())
        for (int i = 0; i < 8; ++i) c.receivers.push_back(at(0.15 + 0.7 * i / 7.0, 0.9));
}

}  // namespace

Grid RunConfig::grid() const {
    Grid g;
    g.ndim = int(dims.size());
    for (int a = 0; a < g.ndim; ++a) {
        g.dims[a] = dims[a];
        g.spacing[a] = a < int(spacing.size()) ? spacing[a] : 1.0;
        g.origin[a] = a < int(origin.size()) ? origin[a] : 0.0;
    }
    return g;
}

FgaParams RunConfig::fga() const {
    Grid g = grid();
    FgaParams fp;
    fp.ndim = g.ndim;
    fp.eps = eps;
    double ext = 0.0, diag = 0.0;
    for (int a = 0; a < g.ndim; ++a) {
        ext = std::max(ext, g.extent(a));
        diag += g.extent(a) * g.extent(a);
    }
    fp.ell = ell > 0.0 ? ell : ext;
    fp.band_center = band_center;
    fp.band_width = band_width;
    if (n_dir <= 0 || n_shell <= 0) {
        auto bc = suggest_counts(fp, std::sqrt(diag));
        fp.n_dir = n_dir > 0 ? n_dir : bc.n_dir;
        fp.n_shell = n_shell > 0 ? n_shell : bc.n_shell;
    } else {
        fp.n_dir = n_dir;
        fp.n_shell = n_shell;
    }
    return fp;
}

int RunConfig::n_steps() const { return int(std::lround(T / tau)); }

int RunConfig::batch_size() const { return int(std::lround(sampling_rate * beam_count())); }

void RunConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(0, m); };
    if (dims.size() != spacing.size() || dims.size() != origin.size())
        fail("dims, spacing and origin need the same number of axes");
    for (std::size_t a = 0; a < dims.size(); ++a) {
        if (dims[a] < 2) fail("every grid axis needs at least 2 cells");
        if (!(spacing[a] > 0.0)) fail("grid spacing must be > 0");
    }
    try {
        grid().validate();
    } catch (const std::exception& e) {
        fail(e.what());
    }
    if (!(tau > 0.0)) fail("tau must be > 0");
    if (!(T > 0.0)) fail("T must be > 0");
    double q = T / tau;
    if (std::abs(q - std::round(q)) > 1e-9 * std::max(1.0, q)) fail("T must be a multiple of tau");
    if (!(sampling_rate > 0.0 && sampling_rate <= 1.0)) fail("sampling_rate must lie in (0, 1]");
    if (!(eps > 0.0)) fail("eps must be > 0");
    if (ell < 0.0) fail("ell must be >= 0");
    if (n_dir < 0 || n_shell < 0) fail("n_dir and n_shell must be >= 0");
    try {
        fga().validate();
    } catch (const std::exception& e) {
        fail(e.what());
    }
    int N = beam_count(), p = batch_size();
    if (p < 1 || p > N) fail("sampling_rate gives p = " + std::to_string(p) + " outside [1, N]");
    if (!receiver_weights.empty() && receiver_weights.size() != receivers.size())
        fail("receiver_weight must be given once per receiver or not at all");
    for (double w : receiver_weights)
        if (!(w >= 0.0)) fail("receiver weights must be >= 0");
    if (iterations < 1) fail("iterations must be >= 1");
    if (lbfgs_memory < 0) fail("lbfgs_memory must be >= 0");
    if (alpha < 0.0 || !(max_update > 0.0)) fail("alpha must be >= 0 and max_update > 0");
    if (reg_strength < 0.0 || smoothing < 0.0 || mask_radius < 0.0)
        fail("reg_strength, smoothing and mask_radius must be >= 0");
    if (kernel_refine < 0) fail("kernel_refine must be >= 0");
    if (!(fd_spacing > 0.0) || fd_padding < 0.0) fail("fd_spacing must be > 0, fd_padding >= 0");
    if (out.empty()) fail("out must not be empty");
    for (auto [id, params] : {std::pair{target, &target_params}, std::pair{initial, &initial_params}}) {
        ModelPreset mp = ModelPreset::defaults(id);
        for (auto& [k, v] : *params) mp.params[k] = v;
        try {
            mp.validate();
        } catch (const std::exception& e) {
            fail(e.what());
        }
    }
    try {
        Acquisition acq{sources, receivers, receiver_weights};
        acq.validate(grid());
    } catch (const std::exception& e) {
        fail(e.what());
    }
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig c;
    std::map<std::string, int> seen;
    std::vector<std::pair<std::string, std::pair<std::string, int>>> preset_overrides;
    std::istringstream in(text);
    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        auto hash = raw.find('#');
        std::string s = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (s.empty()) continue;
        auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError(line, "expected 'key = value'");
        std::string key = trim(s.substr(0, eq));
        std::string val = trim(s.substr(eq + 1));
        if (key.empty()) throw ConfigError(line, "missing key");
        if (val.empty()) throw ConfigError(line, "missing value for '" + key + "'");
        if (key.rfind("target.", 0) == 0 || key.rfind("initial.", 0) == 0) {
            if (seen.count(key)) throw ConfigError(line, "duplicate key '" + key + "'");
            seen[key] = line;
            preset_overrides.push_back({key, {val, line}});
            continue;
        }
        auto it = key_table().find(key);
        if (it == key_table().end()) throw ConfigError(line, "unknown key '" + key + "'");
        if (!it->second.list && seen.count(key))
            throw ConfigError(line, "duplicate key '" + key + "' (first on line " +
                                        std::to_string(seen[key]) + ")");
        seen[key] = line;
        it->second.set(c, tokens(val), line);
    }
    // overrides are checked against the final preset choice
    for (auto& [key, vl] : preset_overrides) {
        bool tgt = key.rfind("target.", 0) == 0;
        std::string name = key.substr(tgt ? 7 : 8);
        PresetId id = tgt ? c.target : c.initial;
        auto defs = ModelPreset::defaults(id).params;
        if (!defs.count(name))
            throw ConfigError(vl.second, "preset " + preset_name(id) + " has no parameter '" + name + "'");
        auto tk = tokens(vl.first);
        want(tk, 1, vl.second);
        (tgt ? c.target_params : c.initial_params)[name] = to_double(tk[0], vl.second);
    }
    default_acquisition(c);
    try {
        c.validate();
    } catch (const ConfigError& e) {
        // point at the line that set the most likely culprit when there is one
        int at = 0;
        std::string msg = e.what();
        for (auto& [k, l] : seen)
            if (msg.find(k) != std::string::npos) at = std::max(at, l);
        throw ConfigError(at, msg);
    }
    return c;
}

RunConfig parse_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError(0, "cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

std::string config_text(const RunConfig& c) {
    std::ostringstream o;
    auto list = [&](const char* k, const auto& v) {
        o << k << " =";
        for (auto x : v) {
            if constexpr (std::is_same_v<std::decay_t<decltype(x)>, double>) o << ' ' << fmt_double(x);
            else o << ' ' << x;
        }
        o << '\n';
    };
    auto pt = [&](const char* k, const Vec3& p) {
        o << k << " = " << fmt_double(p[0]) << ' ' << fmt_double(p[1]);
        if (c.dims.size() == 3) o << ' ' << fmt_double(p[2]);
        o << '\n';
    };
    auto kv = [&](const char* k, double v) { o << k << " = " << fmt_double(v) << '\n'; };
    o << "preset = " << preset_name(c.target) << '\n';
    for (auto& [k, v] : c.target_params) o << "target." << k << " = " << fmt_double(v) << '\n';
    o << "initial = " << preset_name(c.initial) << '\n';
    for (auto& [k, v] : c.initial_params) o << "initial." << k << " = " << fmt_double(v) << '\n';
    list("dims", c.dims);
    list("spacing", c.spacing);
    list("origin", c.origin);
    for (auto& s : c.sources) pt("source", s);
    for (auto& r : c.receivers) pt("receiver", r);
    for (double w : c.receiver_weights) kv("receiver_weight", w);
    kv("eps", c.eps);
    kv("ell", c.ell);
    kv("band_center", c.band_center);
    kv("band_width", c.band_width);
    o << "n_dir = " << c.n_dir << "\nn_shell = " << c.n_shell << '\n';
    kv("tau", c.tau);
    kv("T", c.T);
    o << "strategy = " << strategy_name(c.strategy) << '\n';
    kv("sampling_rate", c.sampling_rate);
    if (c.seed) o << "seed = " << *c.seed << '\n';
    o << "misfit = " << misfit_name(c.misfit) << '\n';
    kv("window_half_width", c.window_half_width);
    o << "optimizer = " << optimizer_name(c.optimizer) << '\n';
    kv("alpha", c.alpha);
    kv("max_update", c.max_update);
    o << "lbfgs_memory = " << c.lbfgs_memory << '\n';
    kv("reg_strength", c.reg_strength);
    kv("smoothing", c.smoothing);
    kv("mask_radius", c.mask_radius);
    o << "kernel_refine = " << c.kernel_refine << '\n';
    o << "iterations = " << c.iterations << '\n';
    kv("J_star", c.J_star);
    o << "observations = " << (c.observations == ObsSource::fd ? "fd" : "fga") << '\n';
    kv("fd_spacing", c.fd_spacing);
    kv("fd_padding", c.fd_padding);
    o << "out = " << c.out << '\n';
    return o.str();
}

InversionConfig to_inversion_config(const RunConfig& c) {
    c.validate();
    if (!c.seed) throw ConfigError(0, "seed is not set");
    InversionConfig ic;
    ic.grid = c.grid();
    ic.target = ModelPreset::defaults(c.target);
    for (auto& [k, v] : c.target_params) ic.target.params[k] = v;
    ic.initial = ModelPreset::defaults(c.initial);
    for (auto& [k, v] : c.initial_params) ic.initial.params[k] = v;
    ic.acq = {c.sources, c.receivers, c.receiver_weights};
    ic.fga = c.fga();
    ic.tau = c.tau;
    ic.n_steps = c.n_steps();
    ic.plan = BatchPlan{c.strategy, c.beam_count(), c.batch_size(), *c.seed, 0};
    ic.misfit = c.misfit;
    ic.window_half_width = c.window_half_width;
    ic.optimizer = c.optimizer;
    ic.alpha = c.alpha;
    ic.max_update = c.max_update;
    ic.lbfgs.memory = c.lbfgs_memory;
    ic.reg_relative = c.reg_strength;
    ic.smoothing = c.smoothing;
    ic.mask_radius = c.mask_radius;
    ic.kernel_refine = c.kernel_refine;
    ic.max_iter = c.iterations;
    ic.J_star = c.J_star;
    ic.obs = c.observations;
    ic.fd.h = c.fd_spacing;
    ic.fd.pad = c.fd_padding;
    return ic;
}

// ---- binary grids ----

namespace {

constexpr char kMagic[8] = {'R', 'B', 'T', 'G', 'R', 'I', 'D', '1'};

void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back((v >> (8 * i)) & 0xff);
}

void put_f64(std::vector<unsigned char>& b, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    for (int i = 0; i < 8; ++i) b.push_back((v >> (8 * i)) & 0xff);
}

struct Reader {
    const std::vector<unsigned char>& b;
    std::size_t pos = 0;
    void need(std::size_t n) const {
        if (b.size() - pos < n) throw FormatError("grid file truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    double f64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[pos + i]) << (8 * i);
        pos += 8;
        double d;
        std::memcpy(&d, &v, 8);
        return d;
    }
};

}  // namespace

std::vector<unsigned char> encode_grid(const ScalarField& f) {
    f.grid.validate();
    if (f.values.size() != f.grid.size()) throw FormatError("field size does not match its grid");
    std::vector<unsigned char> b(kMagic, kMagic + 8);
    int nd = f.grid.ndim;
    b.reserve(8 + 4 + nd * 20 + 4 + 8 * f.values.size());
    put_u32(b, std::uint32_t(nd));
    for (int a = 0; a < nd; ++a) put_u32(b, std::uint32_t(f.grid.dims[a]));
    for (int a = 0; a < nd; ++a) put_f64(b, f.grid.spacing[a]);
    for (int a = 0; a < nd; ++a) put_f64(b, f.grid.origin[a]);
    put_u32(b, std::uint32_t(f.units));
    for (double v : f.values) put_f64(b, v);
    return b;
}

ScalarField decode_grid(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw FormatError("not a grid file (bad magic)");
    Reader r{bytes, 8};
    std::uint32_t nd = r.u32();
    if (nd < 2 || nd > 3) throw FormatError("unsupported dimensionality " + std::to_string(nd));
    Grid g;
    g.ndim = int(nd);
    std::uint64_t total = 1;
    for (std::uint32_t a = 0; a < nd; ++a) {
        std::uint32_t d = r.u32();
        if (d == 0 || d > std::uint32_t(std::numeric_limits<int>::max()))
            throw FormatError("dimension overflow on axis " + std::to_string(a));
        if (total > (std::uint64_t(1) << 40) / d) throw FormatError("dimension overflow: too many cells");
        total *= d;
        g.dims[a] = int(d);
    }
    for (std::uint32_t a = 0; a < nd; ++a) g.spacing[a] = r.f64();
    for (std::uint32_t a = 0; a < nd; ++a) g.origin[a] = r.f64();
    std::uint32_t u = r.u32();
    if (u > 3) throw FormatError("unknown units tag " + std::to_string(u));
    if ((bytes.size() - r.pos) / 8 < total || (bytes.size() - r.pos) < total * 8)
        throw FormatError("grid file truncated");
    if (bytes.size() - r.pos != total * 8) throw FormatError("trailing bytes after grid payload");
    try {
        g.validate();
    } catch (const std::exception& e) {
        throw FormatError(std::string("bad grid header: ") + e.what());
    }
    std::vector<double> v(total);
    for (auto& x : v) x = r.f64();
    return ScalarField(g, Units(u), std::move(v));
}

void write_grid(const ScalarField& f, const std::string& path) {
    auto b = encode_grid(f);
    std::ofstream o(path, std::ios::binary);
    if (!o) throw FormatError("cannot write " + path);
    o.write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
    if (!o) throw FormatError("write failed: " + path);
}

ScalarField read_grid(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    std::vector<unsigned char> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_grid(b);
}

// ---- text outputs ----

void write_misfit_log(const std::vector<double>& history, const std::vector<double>& wallclock,
                      const std::string& path) {
    if (history.empty()) throw FormatError("empty misfit history");
    std::ofstream o(path);
    if (!o) throw FormatError("cannot write " + path);
    o << "iteration\tmisfit\twallclock_s\n";
    for (std::size_t m = 0; m < history.size(); ++m)
        o << m << '\t' << fmt_double(history[m]) << '\t'
          << fmt_double(m < wallclock.size() ? wallclock[m] : std::nan("")) << '\n';
}

void write_record(const SeismicRecord& rec, const std::string& path) {
    std::ofstream o(path);
    if (!o) throw FormatError("cannot write " + path);
    o << "t";
    for (std::size_t r = 0; r < rec.traces.size(); ++r) o << "\tr" << r;
    o << '\n';
    for (int k = 0; k < rec.samples(); ++k) {
        o << fmt_double(k * rec.tau);
        for (auto& tr : rec.traces) o << '\t' << fmt_double(tr[k]);
        o << '\n';
    }
}

// ---- heatmaps ----

namespace {

unsigned char level(double t) { return (unsigned char)std::lround(255.0 * std::clamp(t, 0.0, 1.0)); }

}  // namespace

Image heatmap_image(const ScalarField& f, ColorScale scale, HeatmapInfo* info, int slice_axis,
                    int slice) {
    const Grid& g = f.grid;
    if (f.values.size() != g.size()) throw FormatError("field size does not match its grid");
    // pick the two displayed axes: x across, z down
    int ax = 0, az = g.ndim - 1, fixed_axis = -1, fixed_index = 0;
    if (g.ndim == 3) {
        if (slice_axis < 0 || slice_axis > 2) throw FormatError("slice axis must be 0, 1 or 2");
        fixed_axis = slice_axis;
        fixed_index = slice < 0 ? g.dims[slice_axis] / 2 : slice;
        if (fixed_index >= g.dims[slice_axis]) throw FormatError("slice index out of range");
        std::vector<int> rest;
        for (int a = 0; a < 3; ++a)
            if (a != slice_axis) rest.push_back(a);
        ax = rest[0];
        az = rest[1];
    }
    Image img;
    img.width = g.dims[ax];
    img.height = g.dims[az];
    img.px.resize(std::size_t(img.width) * img.height);
    auto value = [&](int col, int row) {
        std::array<int, 3> i{0, 0, 0};
        i[ax] = col;
        i[az] = row;
        if (fixed_axis >= 0) i[fixed_axis] = fixed_index;
        return f.values[g.index(i[0], i[1], i[2])];
    };
    HeatmapInfo hi;
    double lo = std::numeric_limits<double>::infinity(), up = -lo;
    for (int row = 0; row < img.height; ++row)
        for (int col = 0; col < img.width; ++col) {
            double v = value(col, row);
            if (!std::isfinite(v)) {
                ++hi.non_finite;
                continue;
            }
            lo = std::min(lo, v);
            up = std::max(up, v);
        }
    if (hi.non_finite == img.px.size()) lo = up = 0.0;
    hi.lo = lo;
    hi.hi = up;
    if (hi.non_finite)
        hi.warning = std::to_string(hi.non_finite) + " non-finite value(s) drawn in the sentinel colour";
    double lim = std::max(std::abs(lo), std::abs(up));
    for (int row = 0; row < img.height; ++row)
        for (int col = 0; col < img.width; ++col) {
            double v = value(col, row);
            Rgb c;
            if (!std::isfinite(v)) {
                c = kSentinel;
            } else if (scale == ColorScale::linear) {
                unsigned char l = up > lo ? level((v - lo) / (up - lo)) : 128;
                c = {l, l, l};
            } else {
                double t = lim > 0.0 ? v / lim : 0.0;
                // the same rounding for +-t keeps red and blue mirror images
                unsigned char fade = level(1.0 - std::abs(t));
                c = t >= 0.0 ? Rgb{255, fade, fade} : Rgb{fade, fade, 255};
            }
            img.px[std::size_t(row) * img.width + col] = c;
        }
    if (info) *info = hi;
    return img;
}

HeatmapInfo render_heatmap(const ScalarField& f, const std::string& path, ColorScale scale,
                           int slice_axis, int slice) {
    HeatmapInfo info;
    Image img = heatmap_image(f, scale, &info, slice_axis, slice);
    std::ofstream o(path, std::ios::binary);
    if (!o) throw FormatError("cannot write " + path);
    o << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    o.write(reinterpret_cast<const char*>(img.px.data()), std::streamsize(img.px.size() * 3));
    std::ofstream s(path + ".txt");
    if (!s) throw FormatError("cannot write " + path + ".txt");
    s << "scale\t" << (scale == ColorScale::linear ? "linear" : "diverging") << '\n'
      << "min\t" << fmt_double(info.lo) << '\n'
      << "max\t" << fmt_double(info.hi) << '\n'
      << "units\t" << units_name(f.units) << '\n'
      << "non_finite\t" << info.non_finite << '\n';
    return info;
}

Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    std::string magic;
    int w = 0, h = 0, mx = 0;
    in >> magic >> w >> h >> mx;
    if (magic != "P6" || w <= 0 || h <= 0 || mx != 255) throw FormatError("not an 8-bit P6 image");
    in.get();
    Image img;
    img.width = w;
    img.height = h;
    img.px.resize(std::size_t(w) * h);
    in.read(reinterpret_cast<char*>(img.px.data()), std::streamsize(img.px.size() * 3));
    if (!in) throw FormatError("truncated image " + path);
    return img;
}

}  // namespace rbt
