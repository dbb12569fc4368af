#ifndef RETENTION_SIMENV_HPP
#define RETENTION_SIMENV_HPP

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "retention/core.hpp"
#include "retention/ranking.hpp"
#include "retention/rng.hpp"

namespace retention {

// Synthetic population + three-part user model: immediate feedback, leave,
// return. All functional forms are parametric so the log-calibration path
// can refit them.
struct SimConfig {
    int population = 500;
    double high_active_fraction = 0.5;
    int candidates_per_request = 30;  // m
    int n_feedback = 8;               // n, number of scoring dimensions
    int slate_size = 6;               // k
    int max_return_day = 10;          // K
    double episode_days = 10.0;
    double action_max = 4.0;          // C, actions live in [0,C]^n
    int max_session_requests = 50;    // failsafe bound on session length
    double request_gap_days = 45.0 / 86400.0;

    // interest prior: a few strong dimensions per user, the rest weak
    int interest_active_dims = 3;
    double interest_active_lo = 0.50, interest_active_hi = 0.90;
    double interest_inactive_lo = 0.00, interest_inactive_hi = 0.10;
    double score_noise = 0.35;  // candidate score = clip(interest + noise, 0, 1)

    // watch-time model: log-normal whose location rises with the slate's
    // hedonic alignment. Dimension 0 is watch-bait: it inflates watch time
    // but produces no interactions, so chasing it saturates satisfaction.
    double watch_bait_weight = 3.0;
    double watch_base_s = 0.55;
    double watch_align_gain = 6.0;
    double watch_align_ref = 0.19;
    double watch_sigma = 0.35;
    double watch_cap_s = 8.0;

    // interaction model: Bernoulli per slate video per social channel,
    // driven by alignment over dimensions 1..n-1
    int interact_channels = 2;
    double interact_base = 0.005;
    double interact_gain = 2.2;
    double interact_ref = 0.19;

    // satisfaction: bounded increment per positive feedback
    double sat_watch_gain = 0.10;
    double sat_watch_half_s = 3.0;
    double sat_interact_gain = 0.50;
    double sat_increment_cap = 1.0;
    double sat_max = 4.0;

    // leave module: P(leave) = logistic(base + depth*depth_slope
    //                                   - satisfaction*sat_slope
    //                                   - engagement*engagement_slope)
    double leave_base = -1.7;
    double leave_depth_slope = 0.30;
    double leave_sat_slope = 0.22;
    double leave_engagement_slope = 0.06;

    // return module: day d in {1..K} ~ softmax over per-user base logits
    // tilted by -(weight_g * drive - offset_g) * (d-1), where drive is the
    // closing session's satisfaction plus carried engagement
    std::vector<double> return_logits_high;  // length K
    std::vector<double> return_logits_low;
    double return_logit_noise = 0.08;
    double return_sat_weight_high = 0.16;
    double return_sat_weight_low = 0.18;
    double return_offset_high = 0.46;
    double return_offset_low = 0.46;

    // cross-session persistence: engagement accumulates satisfaction at
    // session close, eroded by watch-bait consumption (binge fatigue), and
    // feeds later sessions' return drive and session length
    double engagement_decay = 0.6;
    double engagement_gain = 0.4;
    double engagement_bait_fatigue = 0.5;
    double engagement_max = 4.0;
    double engagement_carry = 0.8;

    void validate() const;  // throws std::invalid_argument
    int state_dim() const;
    int profile_dim() const { return 7; }  // group flag + age(4) + gender(2)
    int history_dim() const { return 6; }

    // fills the per-group return templates for the configured K
    void reset_return_templates();
};

SimConfig default_sim_config();

struct SimUser {
    int64_t user_id = 0;
    UserGroup group = UserGroup::HighActive;
    std::vector<double> interest;
    std::vector<double> base_return_logits;
    double satisfaction = 0.0;  // session-scoped
    double engagement = 0.0;    // persists across sessions
};

struct EnvStep {
    ImmediateFeedback feedback;
    UserState next_state;       // valid iff !session_ended
    bool session_ended = false;
    double returning_time = 0;  // days, valid iff session_ended
    bool returns_within_horizon = false;
};

struct EpisodeMetrics {
    double avg_return_day = 0.0;
    double day1_retention = 0.0;
    double mean_immediate_reward = 0.0;
    int64_t sessions = 0;
    int64_t requests = 0;
};

// One request served by the simulator: who, the observation, and whether a
// previously-left session's returning time is being reported now (the user
// just came back), in which case the caller finalizes that session against
// this request's state.
struct RequestView {
    int64_t user_id = 0;
    UserGroup group = UserGroup::HighActive;
    UserState state;
    bool first_of_session = false;
    bool closed_previous = false;
    double previous_gap_days = 0.0;
};

// Event-driven population simulator. Deterministic for a fixed seed: each
// user owns a named substream and events are ordered by (time, user).
class Simulator {
  public:
    Simulator(const SimConfig& cfg, uint64_t seed);

    // Serves the next request before the horizon. False = episode over.
    bool next_request(RequestView& view);

    // Applies the policy's action to the request served by next_request.
    // Out-of-range actions are clipped to [0, C] and counted.
    EnvStep apply_action(const ActionVector& action);

    // Sessions that ended without an observed return before the horizon:
    // their gaps are reported here so pending samples can be finalized.
    struct UnreportedClose {
        int64_t user_id;
        double gap_days;
    };
    std::vector<UnreportedClose> drain_unreported_closures();

    EpisodeMetrics metrics() const;
    int64_t action_clip_warnings() const { return clip_warnings_; }
    const SimConfig& config() const { return cfg_; }
    const std::vector<SimUser>& users() const { return users_; }

  private:
    struct Event {
        double time;
        int64_t user;
        bool operator>(const Event& o) const {
            if (time != o.time) return time > o.time;
            return user > o.user;
        }
    };

    struct UserRuntime {
        Rng rng{0};
        std::vector<double> profile;
        std::array<double, 6> history{};
        int session_depth = 0;
        bool in_session = false;
        double unreported_gap = -1.0;
        double session_watch_total = 0.0;
        int session_interactions = 0;
        double session_bait_sum = 0.0;  // slate-mean watch-bait scores
        std::vector<CandidateVideo> candidates;
        UserState prepared_state;  // state for the user's next request
        double current_time = 0.0;
    };

    void generate_candidates(size_t idx);
    UserState build_state(size_t idx) const;
    double sample_return_day(size_t idx);
    void record_session_close(size_t idx, double gap);

    SimConfig cfg_;
    std::vector<SimUser> users_;
    std::vector<UserRuntime> runtime_;
    std::priority_queue<Event, std::vector<Event>, std::greater<Event>> queue_;
    int64_t next_video_id_ = 1;
    int64_t clip_warnings_ = 0;
    bool request_pending_ = false;
    size_t pending_idx_ = 0;

    // episode accumulators
    double sum_return_day_ = 0.0;
    int64_t day1_returns_ = 0;
    int64_t sessions_closed_ = 0;
    double sum_immediate_ = 0.0;
    int64_t requests_ = 0;
};

using PolicyFn = std::function<ActionVector(const UserState&, UserGroup)>;

struct EpisodeResult {
    EpisodeMetrics metrics;
    std::vector<SessionRecord> sessions;  // filled when collect_sessions
    int64_t clip_warnings = 0;
};

// Simulates the full population for the configured horizon under `policy`.
EpisodeResult run_episode(const SimConfig& cfg, uint64_t seed,
                          const PolicyFn& policy, bool collect_sessions = false);

// ---- calibration from ingested logs ------------------------------------

struct CalibrationResult {
    double leave_base = 0.0;
    double leave_depth_slope = 0.0;
    double leave_log_likelihood = 0.0;
    std::vector<double> return_logits_high;
    std::vector<double> return_logits_low;
    double return_log_likelihood_high = 0.0;
    double return_log_likelihood_low = 0.0;
    int64_t sessions_high = 0;
    int64_t sessions_low = 0;

    SimConfig applied_to(SimConfig base) const;
};

// Fits the leave curve (logistic regression of leave-now on session depth,
// Newton-Raphson MLE) and the per-group return-day histograms from a
// session log. Users are split into activity groups at the median of their
// mean return gap. Throws on malformed input or an empty group.
CalibrationResult calibrate_from_logs(const std::string& csv_path,
                                      int max_return_day = 10);

// Exports closed sessions in the ingestion CSV schema (timestamps are
// synthesized per user). Useful for calibration round trips and demos.
void write_session_log_csv(const std::string& path,
                           const std::vector<SessionRecord>& sessions);

}  // namespace retention

#endif
