#pragma once

// Experiment configuration and the four batch runs behind the command-line tool.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <string>

#include "json.hpp"

#include "mixedray/gauge.hpp"
#include "mixedray/normal_op.hpp"
#include "mixedray/symbols.hpp"

namespace mixedray {

inline constexpr const char* kVersion = "0.3.0";

// Config error carrying a machine-readable payload (e.g. a metadata diff).
struct ConfigDiffError : ConfigError {
    nlohmann::json detail;
    ConfigDiffError(const std::string& what, nlohmann::json d) : ConfigError(what), detail(std::move(d)) {}
};

// Certificate-level failure of verify-symbols; carries the certificate so it can still be written.
struct CertificateFailure : Error {
    nlohmann::json certificate;
    CertificateFailure(const std::string& what, nlohmann::json c) : Error(what), certificate(std::move(c)) {}
};

struct ExperimentConfig {
    std::string metric = "euclidean";
    std::array<double, 3> lo{0.5, -0.25, -0.25}, hi{1.0, 0.25, 0.25};
    double c = 1.1;
    std::array<int, 3> grid{16, 16, 16};
    int valence = 0;  // 0: (2,0), 2: (2,2)

    std::string phantom = "bump";  // bump | zero
    double phantom_radius = 0.24;
    double phantom_gauge = 0.0;  // (2,2): add d^B v scaled to this fraction of the phantom's grid norm

    double F = 8.0;
    double chi_alpha = 1.0;
    double chi_truncation = 4.0;
    FanSpec fan{6, 2};
    double model_h_step = 0.02;
    double data_h_step = 0.01;

    int max_iters = 300;
    double tol_rel = 1e-6;
    double beta = -1;  // < 0: automatic for (2,2), 0 for (2,0)
    double beta_rel = 1e-2;
    int restart = 300;
    bool compare_truth = true;

    int gauge_potentials = 20;
    RayCounts gauge_rays{20, 5, 2};
    double gauge_h_step = 0.01;
    bool gauge_zero = false;

    int symbol_samples = 64;
    int symbol_quad = 64;
    double symbol_F = 8.0;
    int decomposition_samples = 100;

    std::uint64_t seed = 1;
};

namespace detail {

inline void flatten(const nlohmann::json& j, const std::string& prefix, std::map<std::string, nlohmann::json>& out) {
    if (j.is_object()) {
        for (auto it = j.begin(); it != j.end(); ++it)
            flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
        return;
    }
    out[prefix] = j;
}

template <class T>
T get_as(const nlohmann::json& v, const std::string& key) {
    try {
        if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
            if (!v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError("");
            if constexpr (std::is_unsigned_v<T>) {
                if (v.is_number_integer() && v.get<long long>() < 0) throw ConfigError("");
            }
        }
        if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigError("");
        }
        return v.get<T>();
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' has the wrong type: " + v.dump());
    }
}

using Setter = std::function<void(ExperimentConfig&, const nlohmann::json&, const std::string&)>;

inline const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> s = [] {
        std::map<std::string, Setter> m;
        auto num = [](double ExperimentConfig::*p) {
            return [p](ExperimentConfig& c, const nlohmann::json& v, const std::string& k) { c.*p = get_as<double>(v, k); };
        };
        auto integer = [](int ExperimentConfig::*p) {
            return [p](ExperimentConfig& c, const nlohmann::json& v, const std::string& k) { c.*p = get_as<int>(v, k); };
        };
        auto arr3 = [](std::array<double, 3> ExperimentConfig::*p) {
            return [p](ExperimentConfig& c, const nlohmann::json& v, const std::string& k) {
                if (!v.is_array() || v.size() != 3) throw ConfigError("config key '" + k + "' needs three numbers");
                for (int a = 0; a < 3; ++a) (c.*p)[a] = get_as<double>(v[a], k);
            };
        };
        m["metric"] = [](ExperimentConfig& c, const nlohmann::json& v, const std::string& k) {
            c.metric = get_as<std::string>(v, k);
        };
        m["patch.lo"] = arr3(&ExperimentConfig::lo);
        m["patch.hi"] = arr3(&ExperimentConfig::hi);
        m["patch.c"] = num(&ExperimentConfig::c);
        m["grid"] = [](ExperimentConfig& c, const nlohmann::json& v, const std::string& k) {
            if (v.is_number_integer()) {
                c.grid.fill(get_as<int>(v, k));
                return;
            }
            if (!v.is_array() || v.size() != 3) throw ConfigError("config key 'grid' needs one or three integers");
            for (int a = 0; a < 3; ++a) c.grid[a] = get_as<int>(v[a], k);
        };
        m["valence"] = [](ExperimentConfig& c, const nlohmann::json& v, const std::string& k) {
            const auto s = get_as<std::string>(v, k);
            if (s == "2,0")
                c.valence = 0;
            else if (s == "2,2")
                c.valence = 2;
            else
                throw ConfigError("valence must be \"2,0\" or \"2,2\", got \"" + s + "\"");
        };
        m["phantom.kind"] = [](ExperimentConfig& c, const nlohmann::json& v, const std::string& k) {
            c.phantom = get_as<std::string>(v, k);
        };
        m["phantom.radius"] = num(&ExperimentConfig::phantom_radius);
        m["phantom.gauge"] = num(&ExperimentConfig::phantom_gauge);
        m["F"] = num(&ExperimentConfig::F);
        m["chi.alpha"] = num(&ExperimentConfig::chi_alpha);
        m["chi.truncation"] = num(&ExperimentConfig::chi_truncation);
        m["fan.omega"] = [](ExperimentConfig& c, const nlohmann::json& v, const std::string& k) {
            c.fan.omega = get_as<std::size_t>(v, k);
        };
        m["fan.lambda"] = [](ExperimentConfig& c, const nlohmann::json& v, const std::string& k) {
            c.fan.lambda = get_as<std::size_t>(v, k);
        };
        m["model.h_step"] = num(&ExperimentConfig::model_h_step);
        m["data.h_step"] = num(&ExperimentConfig::data_h_step);
        m["solver.max_iters"] = integer(&ExperimentConfig::max_iters);
        m["solver.tol_rel"] = num(&ExperimentConfig::tol_rel);
        m["solver.beta"] = [](ExperimentConfig& c, const nlohmann::json& v, const std::string& k) {
            if (v.is_string() && v.get<std::string>() == "auto")
                c.beta = -1;
            else
                c.beta = get_as<double>(v, k);
        };
        m["solver.beta_rel"] = num(&ExperimentConfig::beta_rel);
        m["solver.restart"] = integer(&ExperimentConfig::restart);
        m["solver.compare_truth"] = [](ExperimentConfig& c, const nlohmann::json& v, const std::string& k) {
            c.compare_truth = get_as<bool>(v, k);
        };
        m["gauge.potentials"] = integer(&ExperimentConfig::gauge_potentials);
        m["gauge.rays.base"] = [](ExperimentConfig& c, const nlohmann::json& v, const std::string& k) {
            c.gauge_rays.base = get_as<std::size_t>(v, k);
        };
        m["gauge.rays.omega"] = [](ExperimentConfig& c, const nlohmann::json& v, const std::string& k) {
            c.gauge_rays.omega = get_as<std::size_t>(v, k);
        };
        m["gauge.rays.lambda"] = [](ExperimentConfig& c, const nlohmann::json& v, const std::string& k) {
            c.gauge_rays.lambda = get_as<std::size_t>(v, k);
        };
        m["gauge.h_step"] = num(&ExperimentConfig::gauge_h_step);
        m["gauge.zero"] = [](ExperimentConfig& c, const nlohmann::json& v, const std::string& k) {
            c.gauge_zero = get_as<bool>(v, k);
        };
        m["symbols.samples"] = integer(&ExperimentConfig::symbol_samples);
        m["symbols.n_quad"] = integer(&ExperimentConfig::symbol_quad);
        m["symbols.F"] = num(&ExperimentConfig::symbol_F);
        m["symbols.decomposition_samples"] = integer(&ExperimentConfig::decomposition_samples);
        m["seed"] = [](ExperimentConfig& c, const nlohmann::json& v, const std::string& k) {
            c.seed = get_as<std::uint64_t>(v, k);
        };
        return m;
    }();
    return s;
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
    auto need = [](bool ok, const std::string& msg) {
        if (!ok) throw ConfigError(msg);
    };
    for (int a = 0; a < 3; ++a) {
        need(c.lo[a] < c.hi[a], "patch.lo must be below patch.hi in every coordinate");
        need(c.grid[a] >= 2, "grid needs at least two nodes per axis");
    }
    need(c.lo[0] > 0, "patch must lie in x > 0");
    need(c.c > 0, "patch.c must be positive");
    need(c.phantom == "bump" || c.phantom == "zero", "phantom.kind must be bump or zero");
    need(c.phantom_radius > 0, "phantom.radius must be positive");
    need(c.phantom_gauge >= 0, "phantom.gauge must be non-negative");
    need(c.phantom_gauge == 0 || c.valence == 2, "phantom.gauge needs valence 2,2");
    need(c.F >= 0, "F must be non-negative");
    need(c.chi_alpha > 0 && c.chi_truncation > 0, "chi parameters must be positive");
    need(c.fan.omega > 0 && c.fan.lambda > 0, "fan counts must be positive");
    need(c.model_h_step > 0 && c.data_h_step > 0 && c.gauge_h_step > 0, "step sizes must be positive");
    need(c.max_iters > 0 && c.restart > 0, "solver iteration counts must be positive");
    need(c.tol_rel > 0 && c.tol_rel < 1, "solver.tol_rel must lie in (0,1)");
    need(c.beta < 0 || c.valence == 2 || c.beta == 0, "solver.beta must be 0 for valence 2,0");
    need(c.beta_rel > 0, "solver.beta_rel must be positive");
    need(c.gauge_potentials > 0, "gauge.potentials must be positive");
    need(c.gauge_rays.base > 0 && c.gauge_rays.omega > 0 && c.gauge_rays.lambda > 0, "gauge.rays must be positive");
    need(c.symbol_samples > 0, "symbols.samples must be positive: empty sample grid");
    need(c.symbol_quad >= 4, "symbols.n_quad must be at least 4");
    need(c.symbol_F > 0, "symbols.F must be positive");
    need(c.decomposition_samples > 0, "symbols.decomposition_samples must be positive");
    const Vec lo = Eigen::Map<const Vec>(c.lo.data(), 3), hi = Eigen::Map<const Vec>(c.hi.data(), 3);
    make_metric(c.metric, lo, hi, c.c);  // throws ConfigError on unknown names
}

inline ExperimentConfig parse_config(const nlohmann::json& j, ExperimentConfig c = {}) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    std::map<std::string, nlohmann::json> flat;
    detail::flatten(j, "", flat);
    const auto& S = detail::setters();
    for (const auto& [k, v] : flat) {
        auto it = S.find(k);
        if (it == S.end()) throw ConfigError("unknown config key '" + k + "'");
        it->second(c, v, k);
    }
    validate(c);
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is, nullptr, true, true);  // comments allowed
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return parse_config(j);
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["metric"] = c.metric;
    j["patch"] = {{"lo", c.lo}, {"hi", c.hi}, {"c", c.c}};
    j["grid"] = c.grid;
    j["valence"] = c.valence == 0 ? "2,0" : "2,2";
    j["phantom"] = {{"kind", c.phantom}, {"radius", c.phantom_radius}, {"gauge", c.phantom_gauge}};
    j["F"] = c.F;
    j["chi"] = {{"alpha", c.chi_alpha}, {"truncation", c.chi_truncation}};
    j["fan"] = {{"omega", c.fan.omega}, {"lambda", c.fan.lambda}};
    j["model"] = {{"h_step", c.model_h_step}};
    j["data"] = {{"h_step", c.data_h_step}};
    j["solver"] = {{"max_iters", c.max_iters},
                   {"tol_rel", c.tol_rel},
                   {"beta", c.beta < 0 ? nlohmann::json("auto") : nlohmann::json(c.beta)},
                   {"beta_rel", c.beta_rel},
                   {"restart", c.restart},
                   {"compare_truth", c.compare_truth}};
    j["gauge"] = {{"potentials", c.gauge_potentials},
                  {"rays", {{"base", c.gauge_rays.base}, {"omega", c.gauge_rays.omega}, {"lambda", c.gauge_rays.lambda}}},
                  {"h_step", c.gauge_h_step},
                  {"zero", c.gauge_zero}};
    j["symbols"] = {{"samples", c.symbol_samples},
                    {"n_quad", c.symbol_quad},
                    {"F", c.symbol_F},
                    {"decomposition_samples", c.decomposition_samples}};
    j["seed"] = c.seed;
    return j;
}

// ---------------------------------------------------------------------------------------------
// Building blocks.

inline GridSpec experiment_grid(const ExperimentConfig& c) {
    return make_grid(Eigen::Map<const Vec>(c.lo.data(), 3), Eigen::Map<const Vec>(c.hi.data(), 3), c.grid);
}

inline ChartMetric experiment_metric(const ExperimentConfig& c) {
    return make_metric(c.metric, Eigen::Map<const Vec>(c.lo.data(), 3), Eigen::Map<const Vec>(c.hi.data(), 3), c.c);
}

inline ChiProfile experiment_chi(const ExperimentConfig& c) {
    ChiProfile chi = gaussian_chi(c.chi_alpha, c.F);
    chi.truncation = c.chi_truncation;
    return chi;
}

inline NormalConfig normal_config(const ExperimentConfig& c) {
    NormalConfig n;
    n.F = c.F;
    n.chi = experiment_chi(c);
    n.fan = c.fan;
    n.h_step = c.model_h_step;
    n.l = c.valence;
    return n;
}

inline SolverOptions solver_options(const ExperimentConfig& c) {
    SolverOptions o;
    o.max_iters = c.max_iters;
    o.tol_rel = c.tol_rel;
    o.restart = c.restart;
    o.beta = c.beta < 0 ? 0.0 : c.beta;
    return o;
}

inline double bump3(double s) { return std::abs(s) >= 1 ? 0.0 : std::pow(1 - s * s, 3); }

// Smooth phantoms centred in the patch with support radius r (patch units).
// (2,0): b(z)·M(z) with a fixed symmetric polynomial M. (2,2): B(b(z)·(A₀ + 4 y₁ A₁)) with seeded A₀, A₁.
// phantom.gauge adds d^B v for a seeded interior potential v, scaled against the phantom's grid norm.
inline AnalyticField make_phantom(const ExperimentConfig& c, const ChartMetric& m, const GridSpec& g) {
    const int l = c.valence;
    if (c.phantom == "zero") return AnalyticField{3, 2, l, [l](const Vec&) { return SymTensor(3, 2, l); }};
    Vec ctr(3);
    for (int a = 0; a < 3; ++a) ctr[a] = 0.5 * (c.lo[a] + c.hi[a]);
    const double R = c.phantom_radius;
    auto b = [ctr, R](const Vec& z) {
        return bump3((z[0] - ctr[0]) / R) * bump3((z[1] - ctr[1]) / R) * bump3((z[2] - ctr[2]) / R);
    };
    if (l == 0) {
        return AnalyticField{3, 2, 0, [b, ctr](const Vec& z) {
                                 const double w = b(z);
                                 const Vec d = z - ctr;
                                 Mat3 M;
                                 M << 1 + d[1], 0.3, 0.2 * d[2], 0.3, 0.8 - 0.5 * z[0], 0.1, 0.2 * d[2], 0.1, 0.6 + d[2];
                                 SymTensor f(3, 2, 0);
                                 for (int i = 0; i < 3; ++i)
                                     for (int j = i; j < 3; ++j) f.set({i, j}, w * M(i, j));
                                 return f;
                             }};
    }
    std::mt19937_64 rng(c.seed);
    std::normal_distribution<double> nd;
    RawTensor<double> r0(3, 2, 2), r1(3, 2, 2);
    for (auto& x : r0.c) x = nd(rng);
    for (auto& x : r1.c) x = nd(rng);
    const SymTensor A0 = projector_B(SymTensor::from_raw(r0)), A1 = projector_B(SymTensor::from_raw(r1));
    AnalyticField base{3, 2, 2, [b, ctr, A0, A1](const Vec& z) { return b(z) * (A0 + (4 * (z[1] - ctr[1])) * A1); }};
    if (c.phantom_gauge == 0) return base;
    auto pot = std::make_shared<Potential>(make_potential_closed_form(c.seed + 1000003, g));
    auto met = std::make_shared<ChartMetric>(m);
    GaugeField gf{met.get(), pot.get()};
    AnalyticField gonly{3, 2, 2, [gf, pot, met](const Vec& z) { return gf.sample(z); }};
    const double gn = sample_on_grid(gonly, g).norm(), fn = sample_on_grid(base, g).norm();
    const double s = gn > 0 ? c.phantom_gauge * fn / gn : 0.0;
    return AnalyticField{3, 2, 2, [base, gonly, s](const Vec& z) { return base.sample(z) + s * gonly.sample(z); }};
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline nlohmann::json report_header(const std::string& command, const ExperimentConfig& c) {
    nlohmann::json r;
    r["command"] = command;
    r["version"] = kVersion;
    r["config"] = to_json(c);
    return r;
}

// The config entries that fix the ray system and the model; a dataset must agree on all of them.
inline nlohmann::json model_signature(const ExperimentConfig& c) {
    auto j = to_json(c);
    nlohmann::json s;
    for (const char* k : {"metric", "patch", "grid", "valence", "F", "chi", "fan", "model"}) s[k] = j[k];
    return s;
}

// ---------------------------------------------------------------------------------------------
// Runs. Each writes its files under `out` and returns the report (also written as report.json).

namespace detail {

inline std::filesystem::path ensure_dir(const std::string& out) {
    std::filesystem::path p(out);
    std::error_code ec;
    std::filesystem::create_directories(p, ec);
    if (ec) throw ConfigError("cannot create output directory " + out + ": " + ec.message());
    return p;
}

inline void write_report(const std::filesystem::path& dir, const std::string& name, const nlohmann::json& r) {
    std::ofstream os(dir / name);
    if (!os) throw FormatError("cannot write " + (dir / name).string());
    os << r.dump(2) << "\n";
}

inline void require_finite(const std::vector<double>& v, const std::string& what) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericalError("non-finite value in " + what);
}

}  // namespace detail

// Data of the configured phantom on the fan rays of the ray system, plus the grid-sampled phantom.
inline nlohmann::json run_forward(const ExperimentConfig& c, const std::string& out) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto dir = detail::ensure_dir(out);
    const GridSpec g = experiment_grid(c);
    const ChartMetric m = experiment_metric(c);
    const RaySystem rs(m, g, normal_config(c));
    const AnalyticField ph = make_phantom(c, m, g);
    const auto data = ray_data(m, rs, ph, c.data_h_step);
    detail::require_finite(data, "ray data");

    RayDataSet ds;
    ds.valence_l = c.valence;
    ds.records.reserve(rs.rays());
    for (std::size_t r = 0; r < rs.rays(); ++r)
        ds.records.push_back({rs.entries()[r].ray, std::vector<double>(data.begin() + 6 * r, data.begin() + 6 * r + 6)});
    ds.meta["metric"] = m.name;
    ds.meta["h_step"] = c.data_h_step;
    ds.meta["valence"] = c.valence == 0 ? "2,0" : "2,2";
    ds.meta["model"] = model_signature(c);
    ds.meta["version"] = kVersion;
    write_dataset(ds, (dir / "data.csv").string());
    write_field(sample_on_grid(ph, g), (dir / "truth.bin").string());

    auto r = report_header("forward", c);
    r["rays"] = rs.rays();
    r["dropped"] = rs.dropped();
    r["files"] = {"data.csv", "data.csv.json", "truth.bin", "truth.bin.json"};
    r["timings"] = {{"total_s", seconds_since(t0)}};
    detail::write_report(dir, "forward_report.json", r);
    return r;
}

// Key-by-key difference of two signatures: [{key, dataset, config}, ...].
inline nlohmann::json diff_json(const nlohmann::json& have, const nlohmann::json& want) {
    std::map<std::string, nlohmann::json> a, b;
    detail::flatten(have, "", a);
    detail::flatten(want, "", b);
    nlohmann::json d = nlohmann::json::array();
    for (const auto& [k, v] : b) {
        auto it = a.find(k);
        if (it == a.end())
            d.push_back({{"key", k}, {"dataset", nullptr}, {"config", v}});
        else if (it->second != v)
            d.push_back({{"key", k}, {"dataset", it->second}, {"config", v}});
    }
    for (const auto& [k, v] : a)
        if (!b.count(k)) d.push_back({{"key", k}, {"dataset", v}, {"config", nullptr}});
    return d;
}

inline nlohmann::json run_invert(const ExperimentConfig& c, const std::string& dataset, const std::string& out,
                                 const std::function<void(int, double)>& progress = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto dir = detail::ensure_dir(out);
    RayDataSet ds = read_dataset(dataset);
    const nlohmann::json want = model_signature(c);
    const nlohmann::json have = ds.meta.contains("model") ? ds.meta["model"] : nlohmann::json::object();
    if (have != want) {
        throw ConfigDiffError("dataset metadata does not match the config",
                              {{"dataset", dataset}, {"diff", diff_json(have, want)}});
    }
    const GridSpec g = experiment_grid(c);
    const ChartMetric m = experiment_metric(c);
    const RaySystem rs(m, g, normal_config(c));
    if (ds.records.size() != rs.rays())
        throw ConfigDiffError("dataset ray count does not match the ray system",
                              {{"dataset_rays", ds.records.size()}, {"model_rays", rs.rays()}});
    std::vector<double> data(6 * rs.rays());
    for (std::size_t r = 0; r < rs.rays(); ++r) {
        const Ray& a = ds.records[r].ray;
        const Ray& b = rs.entries()[r].ray;
        const double dev = std::max({(a.base - b.base).lpNorm<Eigen::Infinity>(), std::abs(a.lambda - b.lambda),
                                     (a.omega - b.omega).lpNorm<Eigen::Infinity>()});
        if (dev > 1e-12)
            throw ConfigDiffError("dataset rays do not match the ray system",
                                  {{"first_mismatch", r}, {"deviation", dev}});
        std::copy(ds.records[r].value.begin(), ds.records[r].value.end(), data.begin() + 6 * r);
    }
    detail::require_finite(data, "dataset values");
    const auto t1 = std::chrono::steady_clock::now();
    const NormalOperator N(m, rs, c.F);
    SolverOptions opt = solver_options(c);
    if (c.valence == 2 && c.beta < 0) opt.beta = default_beta(N, c.beta_rel);
    const auto R = invert(N, data, opt, progress);
    detail::require_finite(R.solve.u, "solver iterate");
    write_field(R.field, (dir / "field.bin").string());

    auto r = report_header("invert", c);
    r["dataset"] = dataset;
    r["rays"] = R.rays;
    r["clamped"] = R.clamped;
    r["beta"] = opt.beta;
    r["solve"] = to_json(R.solve);
    r["relative_residual"] = R.solve.residual.front() > 0 ? R.solve.residual.back() / R.solve.residual.front() : 0.0;
    if (c.compare_truth) r["error_vs_phantom"] = relative_l2(R.field, sample_on_grid(make_phantom(c, m, g), g));
    r["files"] = {"field.bin", "field.bin.json"};
    r["timings"] = {{"setup_s", std::chrono::duration<double>(t1 - t0).count()}, {"total_s", seconds_since(t0)}};
    detail::write_report(dir, "invert_report.json", r);
    return r;
}

struct GaugeTestResult {
    std::vector<double> residual_h, residual_half;  // per potential, max over rays
    double max_h = 0, max_half = 0, ratio = 0;
    std::size_t rays = 0;
};

// max over rays of |L₂,₂(d^B v)| / (max_grid |d^B v| · ray length), at gauge.h_step and at half of it.
inline GaugeTestResult gauge_residuals(const ExperimentConfig& c) {
    if (c.valence != 2) throw ValenceError("gauge-test needs valence 2,2");
    const GridSpec g = experiment_grid(c);
    const ChartMetric m = experiment_metric(c);
    const auto rays = sample_rays(m, experiment_chi(c), c.gauge_rays);
    GaugeTestResult out;
    out.rays = rays.size();
    for (int s = 0; s < c.gauge_potentials; ++s) {
        Potential pot = make_potential_closed_form(c.seed + static_cast<std::uint64_t>(s), g);
        if (c.gauge_zero)
            for (auto& C : pot.C) C = SymTensor(3, 2, 1);
        const GaugeField dbv{&m, &pot};
        double norm = 0;
        for (std::size_t i = 0; i < g.nodes(); ++i) norm = std::max(norm, dbv.sample(g.point(i)).max_abs());
        double res[2] = {0, 0};
        int q = 0;
        for (double h : {c.gauge_h_step, 0.5 * c.gauge_h_step}) {
            std::vector<double> worst(rays.size(), 0.0);
            parallel_for(rays.size(), [&](std::size_t i) {
                const Vec z = rays[i].zeta();
                const Geodesic geo = shoot_ray(m, rays[i].base, z, h);
                const SymTensor val = forward_mixed_on(m, dbv, geo, conormal_covector(m, rays[i].base, z), 2);
                worst[i] = norm > 0 ? val.max_abs() / (norm * geo.length()) : val.max_abs();
            });
            for (double w : worst) res[q] = std::max(res[q], w);
            ++q;
        }
        out.residual_h.push_back(res[0]);
        out.residual_half.push_back(res[1]);
        out.max_h = std::max(out.max_h, res[0]);
        out.max_half = std::max(out.max_half, res[1]);
    }
    out.ratio = out.max_half > 0 ? out.max_h / out.max_half : 0.0;
    return out;
}

inline nlohmann::json run_gauge_test(const ExperimentConfig& c, const std::string& out) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto dir = detail::ensure_dir(out);
    const auto G = gauge_residuals(c);
    auto r = report_header("gauge-test", c);
    r["rays"] = G.rays;
    r["residual"] = {{"h_step", c.gauge_h_step}, {"max", G.max_h}, {"per_potential", G.residual_h}};
    r["residual_half_step"] = {{"h_step", 0.5 * c.gauge_h_step}, {"max", G.max_half}, {"per_potential", G.residual_half}};
    r["halving_ratio"] = G.ratio;
    r["timings"] = {{"total_s", seconds_since(t0)}};
    detail::write_report(dir, "gauge_report.json", r);
    return r;
}

struct SymbolRun {
    std::vector<Certificate> certificates;
    std::vector<DecompositionCheck> decomposition;
    double max_decomposition = 0;
    std::vector<std::pair<double, double>> det_printed, det_corrected;  // (r, det)
    double det_fit_printed = 0, det_fit_corrected = 0;              // max relative |LU - polynomial|
    double min_abs_det_printed = 0, min_abs_det_corrected = 0;
    double det_printed_at_root2 = 0;
    bool pass = false;
};

inline CertificateOptions certificate_options(const ExperimentConfig& c) {
    CertificateOptions o;
    o.samples = c.symbol_samples;
    o.n_quad = c.symbol_quad;
    o.F = c.symbol_F;
    return o;
}

inline SymbolRun symbol_run(const ExperimentConfig& c, const SymbolBuilders& builders = {}) {
    SymbolRun s;
    const auto opt = certificate_options(c);
    for (auto f : {SymbolFlavor::fiber20, SymbolFlavor::base20, SymbolFlavor::fiber22, SymbolFlavor::base22})
        s.certificates.push_back(ellipticity_certificate(f, opt, builders));

    std::mt19937_64 rng(c.seed);
    std::uniform_real_distribution<double> U(-2, 2);
    for (int t = 0; t < c.decomposition_samples; ++t) {
        const double xi = U(rng), F = 0.5 + 4 * std::abs(U(rng));
        const Vec2 eta(U(rng), U(rng));
        s.decomposition.push_back(delta_decomposition_check(xi, eta, F));
        s.max_decomposition = std::max(s.max_decomposition, s.decomposition.back().deviation);
    }

    const Poly pp = det_5x5_poly(true), pc = det_5x5_poly(false);
    s.min_abs_det_printed = s.min_abs_det_corrected = std::numeric_limits<double>::infinity();
    for (int i = 1; i <= 100; ++i) {
        const double r = 0.1 * i;
        const double dp = det_5x5(r, true), dc = det_5x5(r, false);
        s.det_printed.emplace_back(r, dp);
        s.det_corrected.emplace_back(r, dc);
        s.det_fit_printed = std::max(s.det_fit_printed, std::abs(dp - poly_eval(pp, r)) / std::abs(poly_eval(pp, r)));
        s.det_fit_corrected = std::max(s.det_fit_corrected, std::abs(dc - poly_eval(pc, r)) / std::abs(poly_eval(pc, r)));
        s.min_abs_det_printed = std::min(s.min_abs_det_printed, std::abs(dp));
        s.min_abs_det_corrected = std::min(s.min_abs_det_corrected, std::abs(dc));
    }
    s.det_printed_at_root2 = poly_eval(pp, std::sqrt(2.0));

    s.pass = s.max_decomposition <= 1e-10 && s.min_abs_det_printed > 0 && s.det_fit_printed <= 1e-9;
    for (const auto& cert : s.certificates) s.pass = s.pass && cert.pass;
    return s;
}

inline nlohmann::json to_json(const SymbolRun& s) {
    nlohmann::json j;
    j["pass"] = s.pass;
    j["certificates"] = nlohmann::json::array();
    for (const auto& c : s.certificates) j["certificates"].push_back(to_json(c));
    nlohmann::json d;
    d["samples"] = s.decomposition.size();
    d["max_deviation"] = s.max_decomposition;
    double ex = 0, ab = 0, dd = std::numeric_limits<double>::infinity();
    for (const auto& q : s.decomposition) {
        ex = std::max(ex, q.deviation_exact_B);
        ab = std::max(ab, q.a_block_deviation);
        dd = std::min(dd, q.d3_minus_d4_min_eig);
    }
    d["max_deviation_exact_B"] = ex;
    d["max_a_block_deviation"] = ab;
    d["min_eig_d3_minus_d4"] = dd;
    j["decomposition"] = d;
    nlohmann::json t = nlohmann::json::array();
    for (std::size_t i = 0; i < s.det_printed.size(); ++i)
        t.push_back({{"r", s.det_printed[i].first}, {"det", s.det_printed[i].second}, {"det_corrected", s.det_corrected[i].second}});
    j["det5x5"] = {{"table", t},
                   {"poly_printed", det_5x5_poly(true)},
                   {"poly_corrected", det_5x5_poly(false)},
                   {"fit_deviation", s.det_fit_printed},
                   {"fit_deviation_corrected", s.det_fit_corrected},
                   {"min_abs_det", s.min_abs_det_printed},
                   {"min_abs_det_corrected", s.min_abs_det_corrected},
                   {"printed_det_at_sqrt2", s.det_printed_at_root2}};
    return j;
}

inline nlohmann::json run_verify_symbols(const ExperimentConfig& c, const std::string& out,
                                         const SymbolBuilders& builders = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto dir = detail::ensure_dir(out);
    const SymbolRun s = symbol_run(c, builders);

    std::ofstream csv(dir / "eigenvalues.csv");
    if (!csv) throw FormatError("cannot write eigenvalues.csv");
    csv << "flavor,sample,alpha,xi,eta1,eta2,min_eig,min_eig_full,max_eig\n";
    for (const auto& cert : s.certificates)
        for (std::size_t i = 0; i < cert.samples.size(); ++i) {
            const auto& q = cert.samples[i];
            csv << flavor_name(cert.flavor) << ',' << i << ',' << fmt_double(q.alpha) << ',' << fmt_double(q.zeta[0]) << ','
                << fmt_double(q.zeta[1]) << ',' << fmt_double(q.zeta[2]) << ',' << fmt_double(q.min_eig) << ','
                << fmt_double(q.min_eig_full) << ',' << fmt_double(q.max_eig) << "\n";
        }

    auto r = report_header("verify-symbols", c);
    r["certificate"] = to_json(s);
    r["files"] = {"certificate.json", "eigenvalues.csv"};
    r["timings"] = {{"total_s", seconds_since(t0)}};
    detail::write_report(dir, "certificate.json", r);
    if (!s.pass) throw CertificateFailure("symbol certificate failed", r["certificate"]);
    return r;
}

}  // namespace mixedray
