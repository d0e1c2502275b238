#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>
#include <openssl/evp.h>

#include "linkgp/design.hpp"
#include "linkgp/dynamics.hpp"
#include "linkgp/errors.hpp"
#include "linkgp/gp.hpp"
#include "linkgp/gp_io.hpp"
#include "linkgp/metrics.hpp"
#include "linkgp/propagation.hpp"
#include "linkgp/version.hpp"

namespace linkgp {

using nlohmann::json;

inline std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("sha256: digest failed");
    }
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return os.str();
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw InvalidArgument("cannot open " + p.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------- config --

enum class MethodSelection { exact, mc, both };

inline std::string to_string(MethodSelection m) {
    switch (m) {
        case MethodSelection::exact: return "exact";
        case MethodSelection::mc: return "mc";
        case MethodSelection::both: return "both";
    }
    return "?";
}

inline MethodSelection parse_method_selection(const std::string& s) {
    if (s == "exact") return MethodSelection::exact;
    if (s == "mc") return MethodSelection::mc;
    if (s == "both") return MethodSelection::both;
    throw ConfigError("method must be exact, mc or both, got '" + s + "'");
}

inline std::vector<Method> methods_of(MethodSelection m) {
    switch (m) {
        case MethodSelection::exact: return {Method::exact};
        case MethodSelection::mc: return {Method::mc};
        case MethodSelection::both: return {Method::exact, Method::mc};
    }
    return {};
}

struct ExperimentConfig {
    std::string system = "lotka_volterra";  // lotka_volterra | lorenz | user-file
    std::string system_file;
    std::map<std::string, double> params;
    std::optional<std::vector<double>> x0;
    std::optional<double> t_end;
    double dt = 0.01;
    std::optional<long> n;
    MethodSelection method = MethodSelection::exact;
    int n_mc = 1000;
    int repetitions = 10;
    std::uint64_t base_seed = 0;
    bool forcing = false;
    std::string output_dir;
    int workers = 1;
    int restarts = 5;
    double divergence_factor = 1e6;

    void validate() const {
        if (system != "lotka_volterra" && system != "lorenz" && system != "user-file") {
            throw ConfigError("system must be lotka_volterra, lorenz or user-file, got '" + system + "'");
        }
        if (system == "user-file" && system_file.empty()) throw ConfigError("user-file system needs system_file");
        if (system != "user-file" && !system_file.empty()) throw ConfigError("system_file is only used with user-file");
        if (forcing && system != "lotka_volterra") throw ConfigError("forcing mode is only defined for lotka_volterra");
        if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigError("dt must be positive");
        if (t_end && (!(*t_end > 0.0) || !std::isfinite(*t_end))) throw ConfigError("t_end must be positive");
        if (t_end) {
            const double ratio = *t_end / dt;
            if (std::abs(ratio - std::round(ratio)) > 1e-9 * std::max(1.0, std::round(ratio))) {
                throw ConfigError("t_end must be an integer multiple of dt");
            }
        }
        if (n && *n < 2) throw ConfigError("n must be at least 2");
        if (n_mc < 2) throw ConfigError("n_mc must be at least 2");
        if (repetitions < 1) throw ConfigError("repetitions must be at least 1");
        if (workers < 1) throw ConfigError("workers must be at least 1");
        if (restarts < 1) throw ConfigError("restarts must be at least 1");
        if (!(divergence_factor > 0.0)) throw ConfigError("divergence_factor must be positive");
    }
};

inline json config_to_json(const ExperimentConfig& c) {
    json j;
    j["system"] = c.system;
    if (!c.system_file.empty()) j["system_file"] = c.system_file;
    j["params"] = c.params;
    if (c.x0) j["x0"] = *c.x0;
    if (c.t_end) j["t_end"] = *c.t_end;
    j["dt"] = c.dt;
    if (c.n) j["n"] = *c.n;
    j["method"] = to_string(c.method);
    j["n_mc"] = c.n_mc;
    j["repetitions"] = c.repetitions;
    j["base_seed"] = c.base_seed;
    j["forcing"] = c.forcing;
    if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
    j["workers"] = c.workers;
    j["restarts"] = c.restarts;
    j["divergence_factor"] = c.divergence_factor;
    return j;
}

/// Unknown keys and wrongly typed values are both config errors.
inline ExperimentConfig config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    static const std::set<std::string> known{"system",  "system_file", "params",      "x0",        "t_end",
                                             "dt",      "n",           "method",      "n_mc",      "repetitions",
                                             "base_seed", "forcing",   "output_dir",  "workers",   "restarts",
                                             "divergence_factor"};
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
    }
    ExperimentConfig c;
    try {
        if (j.contains("system")) c.system = j["system"].get<std::string>();
        if (j.contains("system_file")) c.system_file = j["system_file"].get<std::string>();
        if (j.contains("params")) c.params = j["params"].get<std::map<std::string, double>>();
        if (j.contains("x0")) c.x0 = j["x0"].get<std::vector<double>>();
        if (j.contains("t_end")) c.t_end = j["t_end"].get<double>();
        if (j.contains("dt")) c.dt = j["dt"].get<double>();
        if (j.contains("n")) c.n = j["n"].get<long>();
        if (j.contains("method")) c.method = parse_method_selection(j["method"].get<std::string>());
        if (j.contains("n_mc")) c.n_mc = j["n_mc"].get<int>();
        if (j.contains("repetitions")) c.repetitions = j["repetitions"].get<int>();
        if (j.contains("base_seed")) c.base_seed = j["base_seed"].get<std::uint64_t>();
        if (j.contains("forcing")) c.forcing = j["forcing"].get<bool>();
        if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
        if (j.contains("workers")) c.workers = j["workers"].get<int>();
        if (j.contains("restarts")) c.restarts = j["restarts"].get<int>();
        if (j.contains("divergence_factor")) c.divergence_factor = j["divergence_factor"].get<double>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    return config_from_json(j);
}

// ----------------------------------------------------------------- setup --

/// A user system file: polynomial right-hand side plus domain and defaults.
///   {"name": ..., "state_dim": d, "domain": [[lo,hi],...],
///    "equations": [[{"coef": c, "powers": [..]}, ...], ...],
///    "x0": [...], "t_end": T}
inline OdeSystem system_from_json(const json& j) {
    try {
        const int d = j.at("state_dim").get<int>();
        const int dw = j.value("forcing_dim", 0);
        auto intervals = [](const json& arr) {
            std::vector<Interval> out;
            for (const auto& iv : arr) {
                if (iv.size() != 2) throw ConfigError("system file: intervals are [lo, hi] pairs");
                out.push_back({iv[0].get<double>(), iv[1].get<double>()});
            }
            return out;
        };
        std::vector<std::vector<PolynomialTerm>> eqs;
        for (const auto& eq : j.at("equations")) {
            std::vector<PolynomialTerm> terms;
            for (const auto& t : eq) terms.push_back({t.at("coef").get<double>(), t.at("powers").get<std::vector<int>>()});
            eqs.push_back(std::move(terms));
        }
        return polynomial_system(j.value("name", std::string("user")), d, dw, std::move(eqs), intervals(j.at("domain")),
                                 j.contains("forcing_domain") ? intervals(j["forcing_domain"]) : std::vector<Interval>{});
    } catch (const json::exception& e) {
        throw ConfigError(std::string("system file: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw ConfigError(std::string("system file: ") + e.what());
    }
}

/// Everything a repetition needs that does not depend on its seed.
struct ExperimentSetup {
    OdeSystem emulated;   // the flow map the GPs learn
    OdeSystem reference;  // produces the ground truth
    Eigen::VectorXd reference_x0;
    Eigen::VectorXd x0;
    std::vector<Eigen::Index> state_columns;    // reference columns forming the emulated state
    std::vector<Eigen::Index> forcing_columns;  // reference columns fed in as forcing
    double t_end = 0.0;
    double dt = 0.01;
    long horizon = 0;
    Eigen::Index n = 0;
};

namespace detail {

inline void take_param(std::map<std::string, double>& rest, const std::string& key, double& slot) {
    auto it = rest.find(key);
    if (it == rest.end()) return;
    slot = it->second;
    rest.erase(it);
}

inline void reject_leftover(const std::map<std::string, double>& rest, const std::string& system) {
    if (!rest.empty()) throw ConfigError("unknown parameter '" + rest.begin()->first + "' for " + system);
}

}  // namespace detail

inline ExperimentSetup resolve_setup(const ExperimentConfig& cfg) {
    cfg.validate();
    ExperimentSetup s;
    s.dt = cfg.dt;
    std::vector<double> x0;
    auto params = cfg.params;
    try {
        if (cfg.system == "lotka_volterra") {
            LotkaVolterraParams p;
            detail::take_param(params, "r_G", p.growth);
            detail::take_param(params, "K", p.capacity);
            detail::take_param(params, "r_I", p.predation);
            detail::take_param(params, "k_AE", p.assimilation);
            detail::take_param(params, "r_M", p.mortality);
            detail::reject_leftover(params, cfg.system);
            s.reference = lotka_volterra(p);
            s.emulated = cfg.forcing ? lotka_volterra_prey_forced(p) : s.reference;
            x0 = {1.0, 2.0};
            s.t_end = 30.0;
        } else if (cfg.system == "lorenz") {
            LorenzParams p;
            detail::take_param(params, "a", p.a);
            detail::take_param(params, "b", p.b);
            detail::take_param(params, "c", p.c);
            detail::reject_leftover(params, cfg.system);
            s.reference = s.emulated = lorenz(p);
            x0 = {-1.0, -1.0, -1.0};
            s.t_end = 25.0;
        } else {
            if (!params.empty()) throw ConfigError("user-file systems take their coefficients from the file");
            json j;
            try {
                j = json::parse(read_file(cfg.system_file));
            } catch (const json::parse_error& e) {
                throw ConfigError("system file " + cfg.system_file + ": " + e.what());
            } catch (const InvalidArgument& e) {
                throw ConfigError(e.what());
            }
            s.reference = s.emulated = system_from_json(j);
            if (s.reference.forcing_dim > 0) {
                throw ConfigError("run needs a forcing trajectory for systems with forcing inputs; use emulate");
            }
            if (j.contains("x0")) x0 = j["x0"].get<std::vector<double>>();
            if (j.contains("t_end")) s.t_end = j["t_end"].get<double>();
        }
    } catch (const InvalidArgument& e) {
        throw ConfigError(e.what());
    }
    if (cfg.x0) x0 = *cfg.x0;
    if (cfg.t_end) s.t_end = *cfg.t_end;
    if (x0.empty()) throw ConfigError("no initial state: set x0");
    if (!(s.t_end > 0.0)) throw ConfigError("no horizon: set t_end");
    if (static_cast<int>(x0.size()) != s.reference.state_dim) {
        throw ConfigError("x0 has " + std::to_string(x0.size()) + " entries, system has " +
                          std::to_string(s.reference.state_dim) + " states");
    }
    s.reference_x0 = Eigen::Map<const Eigen::VectorXd>(x0.data(), static_cast<Eigen::Index>(x0.size()));

    const double ratio = s.t_end / s.dt;
    s.horizon = std::lround(ratio);
    if (std::abs(ratio - static_cast<double>(s.horizon)) > 1e-9 * std::max(1.0, std::round(ratio)) || s.horizon < 1) {
        throw ConfigError("t_end must be a positive integer multiple of dt");
    }

    const int d = s.emulated.state_dim, dw = s.emulated.forcing_dim;
    for (int k = 0; k < d; ++k) s.state_columns.push_back(k);
    for (int k = 0; k < dw; ++k) s.forcing_columns.push_back(d + k);
    s.x0.resize(d);
    for (int k = 0; k < d; ++k) s.x0[k] = s.reference_x0[s.state_columns[k]];
    s.n = cfg.n ? static_cast<Eigen::Index>(*cfg.n) : default_n(d, dw);
    return s;
}

// ---------------------------------------------------------- emulators --

struct TrainedEmulators {
    Eigen::MatrixXd design;
    FlowMapDataset data;
    EmulatorBundle bundle;
    double fit_seconds = 0.0;
};

/// Design, flow-map data and one fitted emulator per state coordinate.
/// Coordinate m is fitted with seed derive_seed(seed, 1000 + m).
inline TrainedEmulators train_emulators(const OdeSystem& sys, Eigen::Index n, double dt, std::uint64_t seed,
                                        int restarts = 5) {
    TrainedEmulators t;
    DesignSpec spec{n, sys.design_box(), seed};
    t.design = maximin_lhs(spec);
    t.data = generate_flowmap_data(sys, t.design, dt);
    t.bundle.system = sys.name;
    t.bundle.state_dim = sys.state_dim;
    t.bundle.forcing_dim = sys.forcing_dim;
    t.bundle.dt = dt;
    const auto t0 = std::chrono::steady_clock::now();
    for (int m = 0; m < sys.state_dim; ++m) {
        FitOptions fo;
        fo.restarts = restarts;
        fo.seed = derive_seed(seed, 1000 + static_cast<std::uint64_t>(m));
        t.bundle.emulators.push_back(fit(t.design, t.data.outputs.col(m), fo));
    }
    t.fit_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return t;
}

// ---------------------------------------------------------------- record --

struct MethodResult {
    Method method = Method::exact;
    bool ok = false;
    std::string error;
    double wall_time = 0.0;
    Eigen::VectorXd rmse;
    Eigen::VectorXd crps;
    std::string emulator_hash;
};

struct RepetitionRecord {
    int index = 0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string failed_stage;
    std::string error;
    double fit_seconds = 0.0;
    std::vector<double> jitters;
    std::vector<double> log_likelihoods;
    std::vector<MethodResult> methods;
    std::optional<double> max_mean_discrepancy;

    const MethodResult* find(Method m) const {
        for (const auto& r : methods) {
            if (r.method == m) return &r;
        }
        return nullptr;
    }
};

struct RunRecord {
    json config;
    std::string version = kVersion;
    long horizon = 0;
    Eigen::Index n = 0;
    int state_dim = 0;
    int forcing_dim = 0;
    json fit_defaults;
    std::vector<RepetitionRecord> repetitions;
};

inline json to_json(const MethodResult& r) {
    json j;
    j["method"] = to_string(r.method);
    j["ok"] = r.ok;
    if (!r.error.empty()) j["error"] = r.error;
    j["wall_time"] = r.wall_time;
    if (r.ok) {
        j["rmse"] = detail::vector_array(r.rmse);
        j["crps"] = detail::vector_array(r.crps);
    }
    j["emulator_hash"] = r.emulator_hash;
    return j;
}

inline json record_to_json(const RunRecord& rec) {
    json j;
    j["config"] = rec.config;
    j["version"] = rec.version;
    j["horizon"] = rec.horizon;
    j["n"] = rec.n;
    j["state_dim"] = rec.state_dim;
    j["forcing_dim"] = rec.forcing_dim;
    j["fit_defaults"] = rec.fit_defaults;
    j["repetitions"] = json::array();
    for (const auto& r : rec.repetitions) {
        json rj;
        rj["index"] = r.index;
        rj["seed"] = r.seed;
        rj["ok"] = r.ok;
        if (!r.ok) {
            rj["failed_stage"] = r.failed_stage;
            rj["error"] = r.error;
        }
        rj["fit_seconds"] = r.fit_seconds;
        rj["jitters"] = r.jitters;
        rj["log_likelihoods"] = r.log_likelihoods;
        rj["methods"] = json::array();
        for (const auto& m : r.methods) rj["methods"].push_back(to_json(m));
        if (r.max_mean_discrepancy) rj["max_mean_discrepancy"] = *r.max_mean_discrepancy;
        j["repetitions"].push_back(std::move(rj));
    }
    return j;
}

inline RunRecord record_from_json(const json& j) {
    try {
        RunRecord rec;
        rec.config = j.at("config");
        rec.version = j.value("version", std::string{});
        rec.horizon = j.at("horizon").get<long>();
        rec.n = j.at("n").get<Eigen::Index>();
        rec.state_dim = j.at("state_dim").get<int>();
        rec.forcing_dim = j.value("forcing_dim", 0);
        rec.fit_defaults = j.value("fit_defaults", json::object());
        for (const auto& rj : j.at("repetitions")) {
            RepetitionRecord r;
            r.index = rj.at("index").get<int>();
            r.seed = rj.at("seed").get<std::uint64_t>();
            r.ok = rj.at("ok").get<bool>();
            r.failed_stage = rj.value("failed_stage", std::string{});
            r.error = rj.value("error", std::string{});
            r.fit_seconds = rj.value("fit_seconds", 0.0);
            r.jitters = rj.value("jitters", std::vector<double>{});
            r.log_likelihoods = rj.value("log_likelihoods", std::vector<double>{});
            for (const auto& mj : rj.at("methods")) {
                MethodResult m;
                m.method = parse_method(mj.at("method").get<std::string>());
                m.ok = mj.at("ok").get<bool>();
                m.error = mj.value("error", std::string{});
                m.wall_time = mj.at("wall_time").get<double>();
                if (m.ok) {
                    m.rmse = detail::array_vector(mj.at("rmse"), "rmse");
                    m.crps = detail::array_vector(mj.at("crps"), "crps");
                }
                m.emulator_hash = mj.value("emulator_hash", std::string{});
                r.methods.push_back(std::move(m));
            }
            if (rj.contains("max_mean_discrepancy")) r.max_mean_discrepancy = rj["max_mean_discrepancy"].get<double>();
            rec.repetitions.push_back(std::move(r));
        }
        return rec;
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("run record: ") + e.what());
    }
}

// ------------------------------------------------------------ experiment --

inline double max_mean_discrepancy(const TrajectoryForecast& a, const TrajectoryForecast& b) {
    if (a.states.size() != b.states.size()) throw InvalidArgument("forecasts differ in length");
    double worst = 0.0;
    for (std::size_t s = 0; s < a.states.size(); ++s) {
        worst = std::max(worst, (a.states[s].mean - b.states[s].mean).cwiseAbs().maxCoeff());
    }
    return worst;
}

/// Ground truth restricted to the emulated coordinates.
inline Trajectory emulated_truth(const ExperimentSetup& s, const Trajectory& full) {
    Trajectory t;
    t.times = full.times;
    t.states.resize(full.states.rows(), static_cast<Eigen::Index>(s.state_columns.size()));
    for (std::size_t k = 0; k < s.state_columns.size(); ++k) t.states.col(k) = full.states.col(s.state_columns[k]);
    return t;
}

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw InvalidArgument("cannot write " + p.string());
    os << text;
}

template <class Fn>
std::string render(Fn&& fn) {
    std::ostringstream os;
    fn(os);
    return os.str();
}

inline std::string rep_dir_name(int r) {
    std::ostringstream os;
    os << "rep_" << std::setw(3) << std::setfill('0') << r;
    return os.str();
}

}  // namespace detail

struct RepetitionArtifacts {
    std::vector<TrajectoryForecast> forecasts;  // parallel to RepetitionRecord::methods
};

/// One seeded repetition: design, data, fit, forecast with every requested
/// method on the same emulators, score. Failures are recorded, not thrown.
inline RepetitionRecord run_repetition(const ExperimentConfig& cfg, const ExperimentSetup& setup,
                                       const Trajectory& truth, int r, RepetitionArtifacts* artifacts = nullptr) {
    namespace fs = std::filesystem;
    RepetitionRecord rec;
    rec.index = r;
    rec.seed = cfg.base_seed + static_cast<std::uint64_t>(r);
    const bool persist = !cfg.output_dir.empty();
    const fs::path dir = persist ? fs::path(cfg.output_dir) / detail::rep_dir_name(r) : fs::path();
    std::string stage = "fit";
    try {
        if (persist) fs::create_directories(dir);
        TrainedEmulators trained = train_emulators(setup.emulated, setup.n, setup.dt, rec.seed, cfg.restarts);
        rec.fit_seconds = trained.fit_seconds;
        for (const auto& gp : trained.bundle.emulators) {
            rec.jitters.push_back(gp.jitter());
            rec.log_likelihoods.push_back(gp.fit_summary().log_likelihood);
        }
        const std::string bundle_text = bundle_to_json(trained.bundle).dump(1) + "\n";
        if (persist) {
            detail::write_text(dir / "design.csv", detail::render([&](std::ostream& os) { write_design_csv(os, trained.design); }));
            detail::write_text(dir / "dataset.csv", detail::render([&](std::ostream& os) {
                                   write_dataset_csv(os, trained.data, setup.emulated.forcing_dim);
                               }));
            detail::write_text(dir / "emulators.json", bundle_text);
        }

        ForecastOptions fo;
        fo.n_mc = cfg.n_mc;
        fo.seed = derive_seed(rec.seed, 1);
        fo.divergence_factor = cfg.divergence_factor;
        if (!setup.forcing_columns.empty()) {
            ForcingTrajectory ft;
            ft.values.resize(truth.states.rows(), static_cast<Eigen::Index>(setup.forcing_columns.size()));
            for (std::size_t k = 0; k < setup.forcing_columns.size(); ++k) {
                ft.values.col(k) = truth.states.col(setup.forcing_columns[k]);
            }
            fo.forcing = std::move(ft);
        }
        const Trajectory scored_truth = emulated_truth(setup, truth);

        std::vector<std::optional<TrajectoryForecast>> done;
        bool all_ok = true;
        for (Method m : methods_of(cfg.method)) {
            stage = std::string("propagate ") + to_string(m);
            MethodResult mr;
            mr.method = m;
            // Each method hashes the emulators it is handed, so shared fits are checkable.
            mr.emulator_hash = sha256_hex(bundle_to_json(trained.bundle).dump(1) + "\n");
            fo.method = m;
            try {
                TrajectoryForecast fc = forecast(trained.bundle.emulators, setup.x0, setup.horizon, fo);
                mr.wall_time = fc.wall_time;
                const ScoreReport score = score_forecast(fc, scored_truth);
                mr.rmse = score.rmse;
                mr.crps = score.crps;
                mr.ok = true;
                if (persist) {
                    const std::string tag = to_string(m);
                    detail::write_text(dir / ("forecast_" + tag + ".csv"),
                                       detail::render([&](std::ostream& os) { write_forecast_csv(os, fc, setup.dt); }));
                    detail::write_text(dir / ("score_" + tag + ".csv"),
                                       detail::render([&](std::ostream& os) { write_score_csv(os, score); }));
                    detail::write_text(dir / ("score_" + tag + ".json"), score_summary_json(score).dump(1) + "\n");
                }
                done.emplace_back(std::move(fc));
            } catch (const NumericalFailure& e) {
                mr.error = e.what();
                all_ok = false;
                if (rec.error.empty()) {
                    rec.failed_stage = stage;
                    rec.error = e.what();
                }
                done.emplace_back(std::nullopt);
            }
            rec.methods.push_back(std::move(mr));
        }
        if (done.size() == 2 && done[0] && done[1]) rec.max_mean_discrepancy = max_mean_discrepancy(*done[0], *done[1]);
        if (artifacts) {
            for (auto& f : done) artifacts->forecasts.push_back(f ? std::move(*f) : TrajectoryForecast{});
        }
        rec.ok = all_ok;
    } catch (const std::exception& e) {
        rec.ok = false;
        rec.failed_stage = stage;
        rec.error = e.what();
    }
    return rec;
}

inline json fit_defaults_json(const ExperimentConfig& cfg) {
    json j;
    j["lengthscale_bounds"] = "[1e-3 * range^2, 1e3 * range^2] per input dimension, log-space";
    j["restarts"] = cfg.restarts;
    j["jitter_ladder"] = {JitterLadder{}.start, JitterLadder{}.max, JitterLadder{}.factor};
    j["tau2_floor"] = kTau2Floor;
    j["fd_step"] = FitOptions{}.fd_step;
    j["integrator"] = {{"rel_tol", IntegratorConfig{}.rel_tol}, {"abs_tol", IntegratorConfig{}.abs_tol}};
    j["maximin_iters"] = DesignSpec{}.maximin_iters;
    return j;
}

/// Writes manifest.json listing every file under `root` with its SHA-256.
inline void write_manifest(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    json j;
    j["files"] = json::array();
    for (const auto& f : files) {
        const std::string bytes = read_file(f);
        j["files"].push_back({{"path", fs::relative(f, root).generic_string()},
                              {"sha256", sha256_hex(bytes)},
                              {"bytes", bytes.size()}});
    }
    detail::write_text(root / "manifest.json", j.dump(1) + "\n");
}

/// Runs every repetition (concurrently up to cfg.workers), persists the
/// record, per-repetition CSVs and a manifest when output_dir is set.
inline RunRecord run_experiment(const ExperimentConfig& cfg) {
    namespace fs = std::filesystem;
    const ExperimentSetup setup = resolve_setup(cfg);
    const Trajectory truth = integrate(setup.reference, setup.reference_x0, 0.0, setup.t_end, setup.dt);

    RunRecord rec;
    rec.config = config_to_json(cfg);
    rec.horizon = setup.horizon;
    rec.n = setup.n;
    rec.state_dim = setup.emulated.state_dim;
    rec.forcing_dim = setup.emulated.forcing_dim;
    rec.fit_defaults = fit_defaults_json(cfg);
    rec.repetitions.resize(static_cast<std::size_t>(cfg.repetitions));

    if (!cfg.output_dir.empty()) {
        fs::create_directories(cfg.output_dir);
        detail::write_text(fs::path(cfg.output_dir) / "truth.csv",
                           detail::render([&](std::ostream& os) { write_trajectory_csv(os, truth); }));
    }

    std::atomic<int> next{0};
    auto worker = [&] {
        for (int r = next++; r < cfg.repetitions; r = next++) {
            rec.repetitions[static_cast<std::size_t>(r)] = run_repetition(cfg, setup, truth, r);
        }
    };
    const int nthreads = std::min(cfg.workers, cfg.repetitions);
    if (nthreads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    if (!cfg.output_dir.empty()) {
        detail::write_text(fs::path(cfg.output_dir) / "run_record.json", record_to_json(rec).dump(1) + "\n");
        write_manifest(cfg.output_dir);
    }
    return rec;
}

// ------------------------------------------------------------- compare --

struct Quantiles {
    double min = 0, q25 = 0, median = 0, q75 = 0, max = 0;
};

inline double quantile(std::vector<double> v, double q) {
    if (v.empty()) throw InvalidArgument("quantile of an empty sample");
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline Quantiles summarize(const std::vector<double>& v) {
    return {quantile(v, 0.0), quantile(v, 0.25), quantile(v, 0.5), quantile(v, 0.75), quantile(v, 1.0)};
}

struct MethodSummary {
    Method method = Method::exact;
    int count = 0;
    double mean_time = 0.0;
    double median_time = 0.0;
    std::vector<Quantiles> rmse;  // per coordinate
    std::vector<Quantiles> crps;
};

struct Comparison {
    MethodSummary exact;
    MethodSummary mc;
    double speedup = 0.0;  // mean MC time / mean exact time
    double max_discrepancy = 0.0;
    double median_discrepancy = 0.0;
    std::vector<double> discrepancies;
};

namespace detail {

inline MethodSummary summarize_method(const RunRecord& rec, Method m) {
    MethodSummary s;
    s.method = m;
    std::vector<double> times;
    std::vector<std::vector<double>> rmse(rec.state_dim), crps(rec.state_dim);
    for (const auto& r : rec.repetitions) {
        const MethodResult* res = r.find(m);
        if (!res || !res->ok) continue;
        times.push_back(res->wall_time);
        for (int k = 0; k < rec.state_dim; ++k) {
            rmse[k].push_back(res->rmse[k]);
            crps[k].push_back(res->crps[k]);
        }
    }
    s.count = static_cast<int>(times.size());
    if (times.empty()) throw InvalidArgument(std::string("compare: no successful ") + to_string(m) + " repetitions");
    double sum = 0.0;
    for (double t : times) sum += t;
    s.mean_time = sum / static_cast<double>(times.size());
    s.median_time = quantile(times, 0.5);
    for (int k = 0; k < rec.state_dim; ++k) {
        s.rmse.push_back(summarize(rmse[k]));
        s.crps.push_back(summarize(crps[k]));
    }
    return s;
}

}  // namespace detail

inline Comparison compare_methods(const RunRecord& rec) {
    bool has_exact = false, has_mc = false;
    for (const auto& r : rec.repetitions) {
        has_exact = has_exact || r.find(Method::exact);
        has_mc = has_mc || r.find(Method::mc);
    }
    if (!has_exact || !has_mc) throw InvalidArgument("compare: record must contain both exact and mc results");
    Comparison c;
    c.exact = detail::summarize_method(rec, Method::exact);
    c.mc = detail::summarize_method(rec, Method::mc);
    c.speedup = c.mc.mean_time / c.exact.mean_time;
    for (const auto& r : rec.repetitions) {
        if (r.max_mean_discrepancy) c.discrepancies.push_back(*r.max_mean_discrepancy);
    }
    if (!c.discrepancies.empty()) {
        c.max_discrepancy = *std::max_element(c.discrepancies.begin(), c.discrepancies.end());
        c.median_discrepancy = quantile(c.discrepancies, 0.5);
    }
    return c;
}

inline json comparison_to_json(const Comparison& c) {
    auto q = [](const std::vector<Quantiles>& v) {
        json a = json::array();
        for (const auto& x : v) a.push_back({{"min", x.min}, {"q25", x.q25}, {"median", x.median}, {"q75", x.q75}, {"max", x.max}});
        return a;
    };
    auto m = [&](const MethodSummary& s) {
        return json{{"repetitions", s.count},
                    {"mean_time", s.mean_time},
                    {"median_time", s.median_time},
                    {"rmse", q(s.rmse)},
                    {"crps", q(s.crps)}};
    };
    return json{{"exact", m(c.exact)},
                {"mc", m(c.mc)},
                {"speedup", c.speedup},
                {"max_mean_discrepancy", c.max_discrepancy},
                {"median_mean_discrepancy", c.median_discrepancy},
                {"discrepancies", c.discrepancies}};
}

// --------------------------------------------------------------- sweep --

struct SweepOptions {
    std::vector<long> n_values{10, 20, 40};
    std::vector<int> n_mc_values;  // MC sample-count study at n = n_values.front()
    long exact_steps = 2000;
    long mc_steps = 50;
    int repeats = 3;
};

struct SweepRow {
    std::string study;  // "n" or "n_mc"
    Method method = Method::exact;
    long n = 0;
    int n_mc = 0;
    double per_step_seconds = 0.0;
};

struct SweepTable {
    std::vector<SweepRow> rows;

    std::optional<double> per_step(const std::string& study, Method m, long n, int n_mc = 0) const {
        for (const auto& r : rows) {
            if (r.study == study && r.method == m && r.n == n && (m == Method::exact || r.n_mc == n_mc)) {
                return r.per_step_seconds;
            }
        }
        return std::nullopt;
    }
};

namespace detail {

inline double min_step_time(std::span<const GpEmulator> gps, const Eigen::VectorXd& x0, long steps,
                            const ForecastOptions& fo, int repeats) {
    double best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < repeats; ++k) best = std::min(best, forecast(gps, x0, steps, fo).wall_time);
    return best / static_cast<double>(steps);
}

}  // namespace detail

/// Propagation cost per step as a function of design size (both methods)
/// and, optionally, of the MC sample count. Times are minima over repeats.
inline SweepTable scaling_sweep(const ExperimentConfig& cfg, const SweepOptions& opts) {
    if (opts.n_values.empty()) throw InvalidArgument("sweep: n_values is empty");
    if (!std::is_sorted(opts.n_values.begin(), opts.n_values.end())) {
        throw InvalidArgument("sweep: n_values must be ascending");
    }
    if (opts.repeats < 1 || opts.exact_steps < 1 || opts.mc_steps < 1) {
        throw InvalidArgument("sweep: repeats and step counts must be positive");
    }
    if (cfg.forcing) throw ConfigError("sweep: forcing mode is not supported");
    const ExperimentSetup setup = resolve_setup(cfg);
    const auto methods = methods_of(cfg.method);
    SweepTable table;
    std::optional<TrainedEmulators> first;
    for (long n : opts.n_values) {
        TrainedEmulators t = train_emulators(setup.emulated, n, setup.dt, cfg.base_seed, cfg.restarts);
        for (Method m : methods) {
            ForecastOptions fo;
            fo.method = m;
            fo.n_mc = cfg.n_mc;
            fo.seed = derive_seed(cfg.base_seed, 1);
            fo.divergence_factor = std::numeric_limits<double>::infinity();
            const long steps = m == Method::exact ? opts.exact_steps : opts.mc_steps;
            table.rows.push_back({"n", m, n, m == Method::mc ? cfg.n_mc : 0,
                                  detail::min_step_time(t.bundle.emulators, setup.x0, steps, fo, opts.repeats)});
        }
        if (!first) first = std::move(t);
    }
    for (int nmc : opts.n_mc_values) {
        ForecastOptions fo;
        fo.method = Method::mc;
        fo.n_mc = nmc;
        fo.seed = derive_seed(cfg.base_seed, 1);
        fo.divergence_factor = std::numeric_limits<double>::infinity();
        table.rows.push_back({"n_mc", Method::mc, opts.n_values.front(), nmc,
                              detail::min_step_time(first->bundle.emulators, setup.x0, opts.mc_steps, fo, opts.repeats)});
    }
    return table;
}

inline void write_sweep_csv(std::ostream& os, const SweepTable& t) {
    os << "study,method,n,n_mc,per_step_seconds\n" << std::setprecision(17);
    for (const auto& r : t.rows) os << r.study << ',' << to_string(r.method) << ',' << r.n << ',' << r.n_mc << ',' << r.per_step_seconds << '\n';
}

}  // namespace linkgp
