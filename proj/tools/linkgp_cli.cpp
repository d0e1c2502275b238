// linkgp: design, simulate, fit, emulate, run, sweep, compare.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <linkgp.hpp>

namespace fs = std::filesystem;
using namespace linkgp;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct CommonFlags {
    std::string config;
    std::string method;
    std::optional<std::uint64_t> seed;
    std::optional<int> reps;
    std::string out;
    std::optional<int> n_mc;
    bool forcing = false;
    std::optional<long> n;
    std::optional<int> workers;
};

ExperimentConfig resolve_config(const CommonFlags& f) {
    ExperimentConfig cfg = f.config.empty() ? ExperimentConfig{} : load_config(f.config);
    if (!f.method.empty()) cfg.method = parse_method_selection(f.method);
    if (f.seed) cfg.base_seed = *f.seed;
    if (f.reps) cfg.repetitions = *f.reps;
    if (f.n_mc) cfg.n_mc = *f.n_mc;
    if (f.forcing) cfg.forcing = true;
    if (f.n) cfg.n = *f.n;
    if (f.workers) cfg.workers = *f.workers;
    cfg.validate();
    return cfg;
}

// Writes to `path`, or to stdout when the path is empty or "-".
template <class Fn>
void emit(const std::string& path, Fn&& fn) {
    if (path.empty() || path == "-") {
        fn(std::cout);
        return;
    }
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InvalidArgument("cannot write " + path);
    fn(os);
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        try {
            out.push_back(std::stod(cell));
        } catch (const std::exception&) {
            throw ConfigError("not a number: '" + cell + "'");
        }
    }
    return out;
}

void add_common(CLI::App* sub, CommonFlags& f, bool with_run_flags) {
    sub->add_option("--config", f.config, "JSON experiment config");
    sub->add_option("--seed", f.seed, "base seed");
    sub->add_option("--n-design", f.n, "design size (default 12 per input dimension)");
    sub->add_flag("--forcing", f.forcing, "Lotka-Volterra with the predator as known forcing");
    if (with_run_flags) {
        sub->add_option("--method", f.method, "exact | mc | both");
        sub->add_option("--reps", f.reps, "repetitions");
        sub->add_option("--n-mc", f.n_mc, "Monte Carlo samples per step");
        sub->add_option("--workers", f.workers, "concurrent repetitions");
    }
}

void print_run_summary(const RunRecord& rec) {
    for (const auto& r : rec.repetitions) {
        std::cout << "rep " << r.index << " seed " << r.seed << (r.ok ? " ok" : " FAILED");
        if (!r.ok) std::cout << " [" << r.failed_stage << "] " << r.error;
        std::cout << " fit " << r.fit_seconds << "s";
        for (const auto& m : r.methods) {
            std::cout << " | " << to_string(m.method);
            if (!m.ok) {
                std::cout << " failed";
                continue;
            }
            std::cout << " " << m.wall_time << "s rmse";
            for (Eigen::Index k = 0; k < m.rmse.size(); ++k) std::cout << ' ' << m.rmse[k];
        }
        if (r.max_mean_discrepancy) std::cout << " | max|exact-mc| " << *r.max_mean_discrepancy;
        std::cout << '\n';
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gaussian-process emulation of ODE flow maps with exact uncertainty propagation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersion));

    CommonFlags f;

    auto* design = app.add_subcommand("design", "write a maximin Latin hypercube design as CSV");
    add_common(design, f, false);
    design->add_option("--out", f.out, "output CSV (stdout if omitted)");

    auto* simulate = app.add_subcommand("simulate", "integrate the reference system and write its trajectory");
    add_common(simulate, f, false);
    simulate->add_option("--out", f.out, "output CSV (stdout if omitted)");

    auto* fitcmd = app.add_subcommand("fit", "train one emulator per state coordinate and serialize them");
    add_common(fitcmd, f, false);
    fitcmd->add_option("--out", f.out, "emulator bundle JSON")->required();

    std::string bundle_path, x0_text, forcing_csv;
    long steps = 0;
    auto* emulate = app.add_subcommand("emulate", "forecast from serialized emulators");
    emulate->add_option("--emulators", bundle_path, "emulator bundle JSON")->required();
    emulate->add_option("--x0", x0_text, "initial state, comma separated")->required();
    emulate->add_option("--steps", steps, "number of steps")->required();
    emulate->add_option("--method", f.method, "exact | mc");
    emulate->add_option("--n-mc", f.n_mc, "Monte Carlo samples per step");
    emulate->add_option("--seed", f.seed, "Monte Carlo seed");
    emulate->add_option("--forcing-csv", forcing_csv, "forcing values, row s holds w(t_s)");
    emulate->add_option("--out", f.out, "forecast CSV (stdout if omitted)");

    auto* run = app.add_subcommand("run", "full experiment: design, fit, forecast, score");
    add_common(run, f, true);
    run->add_option("--out", f.out, "output directory");

    std::string n_values = "10,20,40", n_mc_values;
    SweepOptions sweep_opts;
    auto* sweep = app.add_subcommand("sweep", "propagation cost against design size and sample count");
    add_common(sweep, f, true);
    sweep->add_option("--n-values", n_values, "design sizes, ascending, comma separated");
    sweep->add_option("--n-mc-values", n_mc_values, "MC sample counts, comma separated");
    sweep->add_option("--exact-steps", sweep_opts.exact_steps, "steps timed for the exact method");
    sweep->add_option("--mc-steps", sweep_opts.mc_steps, "steps timed for the MC method");
    sweep->add_option("--repeats", sweep_opts.repeats, "timing repeats (minimum is kept)");
    sweep->add_option("--out", f.out, "output CSV (stdout if omitted)");

    std::string record_path;
    auto* compare = app.add_subcommand("compare", "summarize a run record with both methods");
    compare->add_option("--record", record_path, "run_record.json, or the run's output directory")->required();
    compare->add_option("--out", f.out, "summary JSON (stdout if omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        if (*design) {
            const ExperimentConfig cfg = resolve_config(f);
            const ExperimentSetup setup = resolve_setup(cfg);
            DesignSpec spec{setup.n, setup.emulated.design_box(), cfg.base_seed};
            const Eigen::MatrixXd pts = maximin_lhs(spec);
            emit(f.out, [&](std::ostream& os) { write_design_csv(os, pts); });
        } else if (*simulate) {
            const ExperimentConfig cfg = resolve_config(f);
            const ExperimentSetup setup = resolve_setup(cfg);
            const Trajectory tr = integrate(setup.reference, setup.reference_x0, 0.0, setup.t_end, setup.dt);
            emit(f.out, [&](std::ostream& os) { write_trajectory_csv(os, tr); });
        } else if (*fitcmd) {
            const ExperimentConfig cfg = resolve_config(f);
            const ExperimentSetup setup = resolve_setup(cfg);
            const TrainedEmulators t = train_emulators(setup.emulated, setup.n, setup.dt, cfg.base_seed, cfg.restarts);
            save_bundle(t.bundle, f.out);
            std::cerr << "fitted " << t.bundle.emulators.size() << " emulators in " << t.fit_seconds << "s\n";
        } else if (*emulate) {
            const EmulatorBundle b = load_bundle(bundle_path);
            const std::vector<double> x0 = parse_list(x0_text);
            ForecastOptions fo;
            if (!f.method.empty()) fo.method = parse_method(f.method);
            if (f.n_mc) fo.n_mc = *f.n_mc;
            if (f.seed) fo.seed = *f.seed;
            if (!forcing_csv.empty()) {
                std::ifstream is(forcing_csv);
                if (!is) throw ConfigError("cannot open " + forcing_csv);
                fo.forcing = ForcingTrajectory{read_numeric_csv(is)};
            } else if (b.forcing_dim > 0) {
                throw ConfigError("these emulators take forcing inputs; pass --forcing-csv");
            }
            const TrajectoryForecast fc = forecast(
                b.emulators, Eigen::Map<const Eigen::VectorXd>(x0.data(), static_cast<Eigen::Index>(x0.size())), steps, fo);
            emit(f.out, [&](std::ostream& os) { write_forecast_csv(os, fc, b.dt); });
        } else if (*run) {
            ExperimentConfig cfg = resolve_config(f);
            if (!f.out.empty()) cfg.output_dir = f.out;
            const RunRecord rec = run_experiment(cfg);
            print_run_summary(rec);
            if (cfg.method == MethodSelection::both) {
                std::cout << comparison_to_json(compare_methods(rec)).dump(1) << '\n';
            }
        } else if (*sweep) {
            const ExperimentConfig cfg = resolve_config(f);
            sweep_opts.n_values.clear();
            for (double v : parse_list(n_values)) sweep_opts.n_values.push_back(static_cast<long>(v));
            if (!n_mc_values.empty()) {
                for (double v : parse_list(n_mc_values)) sweep_opts.n_mc_values.push_back(static_cast<int>(v));
            }
            const SweepTable t = scaling_sweep(cfg, sweep_opts);
            emit(f.out, [&](std::ostream& os) { write_sweep_csv(os, t); });
        } else if (*compare) {
            fs::path p = record_path;
            if (fs::is_directory(p)) p /= "run_record.json";
            const RunRecord rec = record_from_json(json::parse(read_file(p)));
            const Comparison c = compare_methods(rec);
            emit(f.out, [&](std::ostream& os) { os << comparison_to_json(c).dump(1) << '\n'; });
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const InvalidArgument& e) {
        std::cerr << "invalid input: " << e.what() << '\n';
        return kExitConfig;
    } catch (const json::exception& e) {
        std::cerr << "invalid JSON: " << e.what() << '\n';
        return kExitConfig;
    } catch (const NumericalFailure& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
