#ifndef RETENTION_CORE_HPP
#define RETENTION_CORE_HPP

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "retention/rng.hpp"

namespace retention {

enum class UserGroup { HighActive, LowActive };

inline const char* to_string(UserGroup g) {
    return g == UserGroup::HighActive ? "high" : "low";
}

// Observation at one request. The four blocks are kept separate because
// different consumers read different slices (RND embeds only the history);
// nets consume the flat concatenation.
struct UserState {
    std::vector<double> profile;            // group flag, age one-hot, gender one-hot
    std::vector<double> history;            // last-3-request feedback counts / watch sums
    std::vector<double> context;            // session depth, time-of-day fraction
    std::vector<double> candidate_summary;  // per-dimension mean and max of candidate scores

    int dim() const {
        return static_cast<int>(profile.size() + history.size() +
                                context.size() + candidate_summary.size());
    }
    std::vector<double> flat() const;
    void flatten_into(double* dst) const;
};

// Ranking-weight action plus the Gaussian the behavior policy sampled it
// from, logged at decision time for off-policy density ratios.
struct ActionVector {
    std::vector<double> values;
    std::vector<double> behavior_mu;
    std::vector<double> behavior_sigma;
};

struct CandidateVideo {
    int64_t video_id = 0;
    std::vector<double> scores;  // predicted feedback propensities, each in [0,1]
};

struct ImmediateFeedback {
    double watch_time_s = 0.0;
    int interactions = 0;  // like/follow/comment/share summed over the slate
};

// I(s,a): the sum of watch time (seconds) and interaction count.
double immediate_reward(const ImmediateFeedback& fb);

struct RequestRecord {
    UserState state;
    ActionVector action;
    ImmediateFeedback feedback;
};

struct SessionRecord {
    int64_t user_id = 0;
    int64_t session_index = 0;
    std::vector<RequestRecord> requests;
    double returning_time = -1.0;  // days; set when the session closes
};

struct TransitionSample {
    UserState state;
    ActionVector action;
    double immediate_reward = 0.0;
    double intrinsic_reward = 0.0;  // filled at training time
    double retention_reward = 0.0;  // nonzero only on terminal samples
    UserState next_state;
    bool terminal = false;
    // Terminal sample whose next session was never observed (horizon cut):
    // the TD target takes no bootstrap from next_state.
    bool episode_end = false;
    double gamma_it = 1.0;  // 1 for non-terminal, gamma for terminal
    UserGroup user_group = UserGroup::HighActive;
};

// Session-level summary handed to the retention-reward hook and used as the
// returning-time classifier input.
struct SessionFeatures {
    std::vector<double> profile;
    UserGroup group = UserGroup::HighActive;
    int length = 0;
    double total_watch_time = 0.0;
    int total_interactions = 0;

    std::vector<double> flat() const;
    static int flat_dim(int profile_dim) { return profile_dim + 3; }
};

// Computes the terminal reward once a session's returning time is known.
// The RLUR trainer installs its normalized variant; naive trainers use the
// raw returning time.
using RetentionRewardFn =
    std::function<double(const SessionFeatures&, double returning_time)>;

struct ReplayBufferConfig {
    size_t capacity = 200000;
    double gamma = 0.95;
};

// FIFO replay store plus per-user pending sessions. A session's transitions
// enter the FIFO only after the session closed and its returning time is
// known, so every buffered terminal sample already carries its reward.
class ReplayBuffer {
  public:
    ReplayBuffer(ReplayBufferConfig cfg, RetentionRewardFn reward_fn);

    // Stages one request of the user's open session (opens one if absent).
    // Fills the previous staged transition's next_state with `state`.
    void add_request(int64_t user_id, const UserState& state,
                     const ActionVector& action, const ImmediateFeedback& fb,
                     UserGroup group);

    // Finalizes the user's open session: marks the last request terminal
    // (gamma_it = gamma), computes its retention reward through the hook,
    // and appends all transitions in request order. `next_session_state` is
    // the first state of the following session; pass nullptr when the
    // horizon cut the episode (the terminal sample then takes no bootstrap).
    // Returns the number of samples appended.
    size_t close_session(int64_t user_id, double returning_time,
                         const UserState* next_session_state);

    // Uniform sampling without replacement, deterministic given the seed.
    std::vector<TransitionSample> sample_batch(size_t batch_size,
                                               uint64_t seed) const;

    size_t size() const { return samples_.size(); }
    size_t pending_sessions() const { return pending_.size(); }
    std::vector<int64_t> pending_user_ids() const;
    bool has_pending(int64_t user_id) const;
    double gamma() const { return cfg_.gamma; }

    const TransitionSample& sample_at(size_t i) const { return samples_[i]; }

  private:
    struct PendingSession {
        std::vector<TransitionSample> staged;
        SessionFeatures features;
        bool awaiting_next_state = false;  // last staged lacks next_state
    };

    ReplayBufferConfig cfg_;
    RetentionRewardFn reward_fn_;
    std::deque<TransitionSample> samples_;
    std::map<int64_t, PendingSession> pending_;
};

// One row of the optional session-log ingestion CSV.
struct SessionLogRow {
    int64_t user_id = 0;
    int64_t session_id = 0;
    int request_idx = 0;
    double timestamp_s = 0.0;
    double watch_time_s = 0.0;
    int interactions = 0;
    double return_gap_days = 0.0;
};

// Parses the ingestion CSV (header `user_id,session_id,request_idx,
// timestamp_s,watch_time_s,interactions,return_gap_days`). Sessions must be
// contiguous per user and time-ordered; violations throw.
std::vector<SessionLogRow> read_session_log_csv(const std::string& path);

}  // namespace retention

#endif
