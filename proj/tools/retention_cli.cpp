// Command-line runner for the retention experiments: seeded training runs,
// multi-algorithm comparisons, the toy-MDP value check, and simulator
// calibration from session logs.

#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "retention/harness.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitCheckFailed = 4;

std::string output_root() {
    if (const char* env = std::getenv("RETENTION_OUTPUT_ROOT")) return env;
    return "runs";
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(item);
    return out;
}

void apply_overrides(retention::ExperimentConfig& cfg,
                     const std::string& config_file,
                     const std::vector<std::string>& sets) {
    if (!config_file.empty()) retention::load_config_file(cfg, config_file);
    for (const auto& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("--set expects key=value, got: " + kv);
        retention::apply_config_kv(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
}

int classify_exception(const std::exception& e) {
    const std::string what = e.what();
    if (what.find("numerical abort") != std::string::npos ||
        what.find("gradient blow-up") != std::string::npos)
        return kExitNumerical;
    return kExitError;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"user-retention RL experiment runner"};
    app.require_subcommand(1);

    // --- train ---
    auto* train = app.add_subcommand("train", "train one algorithm, one seed");
    std::string tr_algorithm, tr_config, tr_out;
    std::vector<std::string> tr_sets;
    uint64_t tr_seed = 0;
    int tr_episodes = 0, tr_window = 0;
    train->add_option("--algorithm", tr_algorithm,
                      "CEM | TD3 | RLUR_NAIVE_G0 | RLUR_NAIVE_G09 | RLUR");
    train->add_option("--seed", tr_seed, "run seed");
    train->add_option("--episodes", tr_episodes, "training episodes");
    train->add_option("--window", tr_window, "final-window size W");
    train->add_option("--out", tr_out, "output directory");
    train->add_option("--config", tr_config, "key=value config file");
    train->add_option("--set", tr_sets, "config override key=value")
        ->take_all();

    // --- compare ---
    auto* compare = app.add_subcommand(
        "compare", "run several algorithms x seeds, emit a ranked table");
    std::string cp_algorithms = "CEM,TD3,RLUR_NAIVE_G0,RLUR_NAIVE_G09,RLUR";
    std::string cp_seeds = "1,2,3,4,5";
    std::string cp_config, cp_out;
    std::vector<std::string> cp_sets;
    int cp_episodes = 0, cp_window = 0, cp_jobs = 1;
    compare->add_option("--algorithms", cp_algorithms, "comma-separated list");
    compare->add_option("--seeds", cp_seeds, "comma-separated seeds");
    compare->add_option("--episodes", cp_episodes, "episodes per run");
    compare->add_option("--window", cp_window, "final-window size W");
    compare->add_option("--jobs", cp_jobs, "parallel runs");
    compare->add_option("--out", cp_out, "comparison output directory");
    compare->add_option("--config", cp_config, "key=value config file");
    compare->add_option("--set", cp_sets, "config override key=value")
        ->take_all();

    // --- toy-check ---
    auto* toy = app.add_subcommand(
        "toy-check", "numerical check of the retention TD recursion");

    // --- calibrate ---
    auto* calibrate = app.add_subcommand(
        "calibrate", "fit leave/return curves from a session-log CSV");
    std::string cal_logs, cal_out;
    int cal_k = 10;
    calibrate->add_option("--logs", cal_logs, "session log CSV path")
        ->required();
    calibrate->add_option("--max-return-day", cal_k, "K, return-day cap");
    calibrate->add_option("--out", cal_out, "write overrides to this file");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) {
            retention::ExperimentConfig cfg;
            cfg.out_dir.clear();
            apply_overrides(cfg, tr_config, tr_sets);
            if (train->count("--algorithm"))
                cfg.algorithm = retention::parse_algorithm(tr_algorithm);
            if (train->count("--seed")) cfg.seed = tr_seed;
            if (train->count("--episodes")) cfg.episodes = tr_episodes;
            if (train->count("--window")) cfg.eval_window = tr_window;
            if (train->count("--out")) cfg.out_dir = tr_out;
            if (cfg.out_dir.empty())
                cfg.out_dir = output_root() + "/" +
                              retention::to_string(cfg.algorithm) + "_seed" +
                              std::to_string(cfg.seed);
            const auto row = retention::run(cfg);
            std::cout << row.algorithm << " seed " << row.seed
                      << ": avg_returning_day=" << row.avg_returning_day
                      << " day1_retention=" << row.day1_retention << " ("
                      << row.wall_clock_seconds << " s)\n"
                      << "artifacts in " << cfg.out_dir << "\n";
            return kExitOk;
        }

        if (compare->parsed()) {
            retention::ExperimentConfig base;
            base.out_dir.clear();
            apply_overrides(base, cp_config, cp_sets);
            if (compare->count("--episodes")) base.episodes = cp_episodes;
            if (compare->count("--window")) base.eval_window = cp_window;
            const std::string out =
                cp_out.empty() ? output_root() + "/compare" : cp_out;

            std::vector<retention::ExperimentConfig> configs;
            for (const auto& name : split_list(cp_algorithms)) {
                for (const auto& seed_str : split_list(cp_seeds)) {
                    retention::ExperimentConfig cfg = base;
                    cfg.algorithm = retention::parse_algorithm(name);
                    cfg.seed = std::stoull(seed_str);
                    cfg.out_dir = out + "/" + name + "_seed" + seed_str;
                    configs.push_back(std::move(cfg));
                }
            }
            const auto summary = retention::compare(configs, cp_jobs, out);
            std::cout << "algorithm          runs  return_day (rank)   "
                         "day1_retention (rank)\n";
            for (const auto& s : summary.summaries) {
                std::printf("%-18s %4d  %.4f +- %.4f (%d)   %.4f +- %.4f (%d)\n",
                            s.algorithm.c_str(), s.runs, s.mean_return_day,
                            s.std_return_day, s.rank_return_day, s.mean_day1,
                            s.std_day1, s.rank_day1);
            }
            if (!summary.complete) {
                std::cerr << "incomplete comparison:\n";
                for (const auto& e : summary.errors) std::cerr << "  " << e << "\n";
                return kExitError;
            }
            std::cout << "table in " << out << "\n";
            return kExitOk;
        }

        if (toy->parsed()) {
            const auto report = retention::toy_mdp_check();
            std::cout << report.text;
            return report.pass ? kExitOk : kExitCheckFailed;
        }

        if (calibrate->parsed()) {
            const auto fit = retention::calibrate_from_logs(cal_logs, cal_k);
            std::ostringstream snippet;
            snippet << "sim.leave_base=" << fit.leave_base << "\n"
                    << "sim.leave_depth_slope=" << fit.leave_depth_slope << "\n";
            auto join = [](const std::vector<double>& v) {
                std::ostringstream ss;
                for (size_t i = 0; i < v.size(); ++i)
                    ss << (i ? "," : "") << v[i];
                return ss.str();
            };
            snippet << "sim.return_logits_high=" << join(fit.return_logits_high)
                    << "\n"
                    << "sim.return_logits_low=" << join(fit.return_logits_low)
                    << "\n";
            std::cout << snippet.str();
            std::cerr << "# leave log-likelihood: " << fit.leave_log_likelihood
                      << "\n# return log-likelihood (high/low): "
                      << fit.return_log_likelihood_high << " / "
                      << fit.return_log_likelihood_low << "\n# sessions "
                      << fit.sessions_high << " high, " << fit.sessions_low
                      << " low\n";
            if (!cal_out.empty()) {
                std::ofstream f(cal_out);
                if (!f) throw std::runtime_error("cannot write " + cal_out);
                f << snippet.str();
            }
            return kExitOk;
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return classify_exception(e);
    }
    return kExitError;
}
