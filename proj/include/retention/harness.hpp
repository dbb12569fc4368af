#ifndef RETENTION_HARNESS_HPP
#define RETENTION_HARNESS_HPP

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "retention/baselines.hpp"
#include "retention/rlur.hpp"
#include "retention/simenv.hpp"

namespace retention {

enum class Algorithm { Cem, Td3, RlurNaiveG0, RlurNaiveG09, Rlur };

std::string to_string(Algorithm a);
Algorithm parse_algorithm(const std::string& name);  // throws on unknown

struct ExperimentConfig {
    Algorithm algorithm = Algorithm::Rlur;
    uint64_t seed = 1;
    int episodes = 300;
    int eval_window = 50;  // W: the final-window average reported
    SimConfig sim = default_sim_config();
    RlurOptions rlur;
    Td3Options td3;
    CemOptions cem;
    size_t buffer_capacity = 200000;
    std::string out_dir = "runs/run";

    void validate() const;  // throws std::invalid_argument
};

// key=value round trip used for config files, CLI --set overrides, and the
// archived snapshot every run writes (snapshots reload bit-identically)
std::map<std::string, std::string> config_to_kv(const ExperimentConfig& cfg);
void apply_config_kv(ExperimentConfig& cfg, const std::string& key,
                     const std::string& value);
void write_config_snapshot(const ExperimentConfig& cfg, const std::string& path);
void load_config_file(ExperimentConfig& cfg, const std::string& path);

struct ResultRow {
    std::string algorithm;
    uint64_t seed = 0;
    double avg_returning_day = 0.0;
    double day1_retention = 0.0;
    int episodes = 0;
    double wall_clock_seconds = 0.0;
};

std::unique_ptr<Trainer> make_trainer(const ExperimentConfig& cfg);

// Trains the configured algorithm, evaluating every episode with
// exploration off; writes config snapshot, per-episode metrics CSV,
// per-step loss CSV, checkpoint, and result JSON into cfg.out_dir.
ResultRow run(const ExperimentConfig& cfg);

struct AlgorithmSummary {
    std::string algorithm;
    int runs = 0;
    double mean_return_day = 0.0, std_return_day = 0.0;
    double mean_day1 = 0.0, std_day1 = 0.0;
    int rank_return_day = 0;  // 1 = best (lowest mean returning day)
    int rank_day1 = 0;        // 1 = best (highest day-1 retention)
};

struct CompareSummary {
    std::vector<ResultRow> rows;
    std::vector<AlgorithmSummary> summaries;
    bool complete = true;
    std::vector<std::string> errors;
};

// Runs every config (optionally in parallel across runs), groups rows by
// algorithm, ranks per metric, and writes comparison.csv + summary.json
// under out_dir. Failed runs are flagged, not fatal to the table.
CompareSummary compare(const std::vector<ExperimentConfig>& configs, int jobs,
                       const std::string& out_dir);

struct ToyMdpReport {
    bool pass = false;
    std::string text;
};

// Numerical check of the retention TD recursion: a deterministic 2-session,
// 3-request chain with known returning times, trained under a fixed
// policy; first-request Q must match T1 + gamma*T2 for gamma in
// {0, 0.9, 0.95}, and gamma = 1 must be rejected by config validation.
ToyMdpReport toy_mdp_check();

}  // namespace retention

#endif
