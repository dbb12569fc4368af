#include "retention/simenv.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

namespace retention {

namespace {

double logistic(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace

void SimConfig::validate() const {
    if (population < 1) throw std::invalid_argument("population must be >= 1");
    if (high_active_fraction < 0.0 || high_active_fraction > 1.0)
        throw std::invalid_argument("high_active_fraction must be in [0,1]");
    if (slate_size < 1) throw std::invalid_argument("slate_size must be >= 1");
    if (candidates_per_request < slate_size)
        throw std::invalid_argument("candidates_per_request must be >= slate_size");
    if (n_feedback < 1) throw std::invalid_argument("n_feedback must be >= 1");
    if (max_return_day < 1) throw std::invalid_argument("max_return_day must be >= 1");
    if (episode_days <= 0.0) throw std::invalid_argument("episode_days must be > 0");
    if (action_max <= 0.0) throw std::invalid_argument("action_max must be > 0");
    if (max_session_requests < 1)
        throw std::invalid_argument("max_session_requests must be >= 1");
    if (interest_active_dims < 0 || interest_active_dims > n_feedback)
        throw std::invalid_argument("interest_active_dims out of range");
    if (score_noise < 0.0) throw std::invalid_argument("score_noise must be >= 0");
    if (return_logits_high.size() != static_cast<size_t>(max_return_day) ||
        return_logits_low.size() != static_cast<size_t>(max_return_day))
        throw std::invalid_argument(
            "return logit templates must have max_return_day entries");
    if (interact_channels < 0)
        throw std::invalid_argument("interact_channels must be >= 0");
}

int SimConfig::state_dim() const {
    return profile_dim() + history_dim() + 2 /*context*/ + 2 * n_feedback;
}

void SimConfig::reset_return_templates() {
    return_logits_high.resize(max_return_day);
    return_logits_low.resize(max_return_day);
    for (int k = 0; k < max_return_day; ++k) {
        return_logits_high[k] = -0.55 * k;
        return_logits_low[k] = -0.32 * std::abs(k - 2.0);
    }
}

SimConfig default_sim_config() {
    SimConfig cfg;
    cfg.reset_return_templates();
    return cfg;
}

Simulator::Simulator(const SimConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    const int n_high =
        static_cast<int>(std::llround(cfg_.high_active_fraction * cfg_.population));

    users_.resize(cfg_.population);
    runtime_.resize(cfg_.population);
    for (int i = 0; i < cfg_.population; ++i) {
        SimUser& u = users_[i];
        UserRuntime& rt = runtime_[i];
        u.user_id = i;
        u.group = i < n_high ? UserGroup::HighActive : UserGroup::LowActive;
        rt.rng = Rng(substream_seed(seed, "sim-user", static_cast<uint64_t>(i)));

        u.interest.assign(cfg_.n_feedback, 0.0);
        std::vector<int> dims(cfg_.n_feedback);
        std::iota(dims.begin(), dims.end(), 0);
        rt.rng.shuffle(dims);
        for (int d = 0; d < cfg_.n_feedback; ++d) {
            const bool active = d < cfg_.interest_active_dims;
            const double lo = active ? cfg_.interest_active_lo : cfg_.interest_inactive_lo;
            const double hi = active ? cfg_.interest_active_hi : cfg_.interest_inactive_hi;
            u.interest[dims[d]] = rt.rng.uniform(lo, hi);
        }

        const auto& tmpl = u.group == UserGroup::HighActive
                               ? cfg_.return_logits_high
                               : cfg_.return_logits_low;
        u.base_return_logits.resize(cfg_.max_return_day);
        for (int k = 0; k < cfg_.max_return_day; ++k)
            u.base_return_logits[k] =
                tmpl[k] + cfg_.return_logit_noise * rt.rng.normal();

        rt.profile.assign(cfg_.profile_dim(), 0.0);
        rt.profile[0] = u.group == UserGroup::HighActive ? 1.0 : 0.0;
        rt.profile[1 + rt.rng.uniform_index(4)] = 1.0;        // age bucket
        rt.profile[5 + rt.rng.uniform_index(2)] = 1.0;        // gender code
        rt.history.fill(0.0);

        rt.current_time = rt.rng.uniform();  // first open, jittered within day 0
        queue_.push(Event{rt.current_time, u.user_id});
    }
}

void Simulator::generate_candidates(size_t idx) {
    UserRuntime& rt = runtime_[idx];
    const SimUser& u = users_[idx];
    rt.candidates.assign(cfg_.candidates_per_request, CandidateVideo{});
    for (auto& cand : rt.candidates) {
        cand.video_id = next_video_id_++;
        cand.scores.resize(cfg_.n_feedback);
        for (int d = 0; d < cfg_.n_feedback; ++d)
            cand.scores[d] = std::clamp(
                u.interest[d] + cfg_.score_noise * rt.rng.normal(), 0.0, 1.0);
    }
}

UserState Simulator::build_state(size_t idx) const {
    const UserRuntime& rt = runtime_[idx];
    UserState s;
    s.profile = rt.profile;
    s.history.assign(rt.history.begin(), rt.history.end());
    s.context = {rt.session_depth / 10.0,
                 rt.current_time - std::floor(rt.current_time)};
    s.candidate_summary.assign(2 * cfg_.n_feedback, 0.0);
    for (int d = 0; d < cfg_.n_feedback; ++d) {
        double sum = 0.0, mx = 0.0;
        for (const auto& cand : rt.candidates) {
            sum += cand.scores[d];
            mx = std::max(mx, cand.scores[d]);
        }
        s.candidate_summary[d] = sum / rt.candidates.size();
        s.candidate_summary[cfg_.n_feedback + d] = mx;
    }
    return s;
}

bool Simulator::next_request(RequestView& view) {
    if (request_pending_)
        throw std::logic_error("next_request called with an action pending");
    if (queue_.empty()) return false;

    const Event ev = queue_.top();
    queue_.pop();
    const size_t idx = static_cast<size_t>(ev.user);
    SimUser& u = users_[idx];
    UserRuntime& rt = runtime_[idx];
    rt.current_time = ev.time;

    view = RequestView{};
    view.user_id = u.user_id;
    view.group = u.group;

    if (!rt.in_session) {
        rt.in_session = true;
        rt.session_depth = 1;
        u.satisfaction = 0.0;
        rt.session_watch_total = 0.0;
        rt.session_interactions = 0;
        rt.session_bait_sum = 0.0;
        generate_candidates(idx);
        rt.prepared_state = build_state(idx);
        view.first_of_session = true;
        if (rt.unreported_gap >= 0.0) {
            view.closed_previous = true;
            view.previous_gap_days = rt.unreported_gap;
            rt.unreported_gap = -1.0;
        }
    }
    view.state = rt.prepared_state;
    request_pending_ = true;
    pending_idx_ = idx;
    return true;
}

double Simulator::sample_return_day(size_t idx) {
    SimUser& u = users_[idx];
    UserRuntime& rt = runtime_[idx];
    const bool high = u.group == UserGroup::HighActive;
    const double weight =
        high ? cfg_.return_sat_weight_high : cfg_.return_sat_weight_low;
    const double offset = high ? cfg_.return_offset_high : cfg_.return_offset_low;
    const double drive = u.satisfaction + cfg_.engagement_carry * u.engagement;
    const double tilt = offset - weight * drive;

    std::vector<double> w(cfg_.max_return_day);
    double max_logit = -1e300;
    for (int k = 0; k < cfg_.max_return_day; ++k) {
        const double logit = u.base_return_logits[k] + tilt * k;
        w[k] = logit;
        max_logit = std::max(max_logit, logit);
    }
    for (auto& x : w) x = std::exp(x - max_logit);
    return 1.0 + rt.rng.categorical(w);
}

void Simulator::record_session_close(size_t idx, double gap) {
    SimUser& u = users_[idx];
    UserRuntime& rt = runtime_[idx];
    ++sessions_closed_;
    sum_return_day_ += gap;
    if (gap <= 1.0) ++day1_returns_;
    const double mean_bait = rt.session_bait_sum / std::max(1, rt.session_depth);
    u.engagement = std::clamp(
        cfg_.engagement_decay * u.engagement +
            cfg_.engagement_gain * u.satisfaction -
            cfg_.engagement_bait_fatigue * mean_bait,
        0.0, cfg_.engagement_max);
}

EnvStep Simulator::apply_action(const ActionVector& action) {
    if (!request_pending_)
        throw std::logic_error("apply_action without a pending request");
    request_pending_ = false;
    const size_t idx = pending_idx_;
    SimUser& u = users_[idx];
    UserRuntime& rt = runtime_[idx];

    ActionVector clipped = action;
    if (clipped.values.size() != static_cast<size_t>(cfg_.n_feedback))
        throw std::invalid_argument("action dimension mismatch");
    bool clipped_any = false;
    for (auto& v : clipped.values) {
        const double c = std::clamp(v, 0.0, cfg_.action_max);
        if (c != v) clipped_any = true;
        v = c;
    }
    if (clipped_any) ++clip_warnings_;

    const Slate slate = select_slate(clipped, rt.candidates, cfg_.slate_size);
    const int64_t first_id = rt.candidates.front().video_id;

    // hedonic alignment (all dims, watch-bait dim up-weighted) drives watch
    // time; social alignment (dims 1..n-1) drives interactions. Both act at
    // slate level, the granularity the selection controls.
    double hedonic_norm = cfg_.watch_bait_weight + (cfg_.n_feedback - 1);
    double q_watch = 0.0, q_soc = 0.0;
    for (size_t j = 0; j < slate.video_ids.size(); ++j) {
        const auto& cand = rt.candidates[slate.video_ids[j] - first_id];
        double hed = 0.0, soc = 0.0;
        for (int d = 0; d < cfg_.n_feedback; ++d) {
            const double term = cand.scores[d] * u.interest[d];
            hed += (d == 0 ? cfg_.watch_bait_weight : 1.0) * term;
            if (d > 0) soc += term;
        }
        q_watch += hed / hedonic_norm;
        q_soc += soc / std::max(1, cfg_.n_feedback - 1);
    }
    q_watch /= slate.video_ids.size();
    q_soc /= slate.video_ids.size();

    double q_bait = 0.0;  // raw bait-dimension exposure of the slate
    for (size_t j = 0; j < slate.video_ids.size(); ++j)
        q_bait += rt.candidates[slate.video_ids[j] - first_id].scores[0];
    q_bait /= slate.video_ids.size();
    rt.session_bait_sum += q_bait;

    const double p_interact = std::clamp(
        cfg_.interact_base + cfg_.interact_gain * (q_soc - cfg_.interact_ref),
        0.002, 0.6);
    int interactions = 0;
    for (size_t j = 0; j < slate.video_ids.size(); ++j)
        for (int c = 0; c < cfg_.interact_channels; ++c)
            if (rt.rng.bernoulli(p_interact)) ++interactions;

    const double watch_loc =
        std::log(cfg_.watch_base_s) +
        cfg_.watch_align_gain * (q_watch - cfg_.watch_align_ref);
    double watch = rt.rng.lognormal(watch_loc, cfg_.watch_sigma);
    watch = std::clamp(watch, 0.0, cfg_.watch_cap_s);

    ImmediateFeedback fb;
    fb.watch_time_s = watch;
    fb.interactions = interactions;

    const double increment =
        std::min(cfg_.sat_increment_cap,
                 cfg_.sat_watch_gain * watch / (watch + cfg_.sat_watch_half_s) +
                     cfg_.sat_interact_gain * interactions);
    u.satisfaction = std::min(cfg_.sat_max, u.satisfaction + increment);

    rt.history[4] = rt.history[2];
    rt.history[5] = rt.history[3];
    rt.history[2] = rt.history[0];
    rt.history[3] = rt.history[1];
    rt.history[0] = interactions / 4.0;
    rt.history[1] = watch / 10.0;

    rt.session_watch_total += watch;
    rt.session_interactions += interactions;
    ++requests_;
    sum_immediate_ += immediate_reward(fb);

    EnvStep step;
    step.feedback = fb;

    const double p_leave =
        logistic(cfg_.leave_base + cfg_.leave_depth_slope * rt.session_depth -
                 cfg_.leave_sat_slope * u.satisfaction -
                 cfg_.leave_engagement_slope * u.engagement);
    const bool leave = rt.session_depth >= cfg_.max_session_requests ||
                       rt.rng.bernoulli(p_leave);

    if (!leave) {
        rt.session_depth += 1;
        rt.current_time += cfg_.request_gap_days;
        generate_candidates(idx);
        rt.prepared_state = build_state(idx);
        step.session_ended = false;
        step.next_state = rt.prepared_state;
        queue_.push(Event{rt.current_time, u.user_id});
        return step;
    }

    const double gap = sample_return_day(idx);
    record_session_close(idx, gap);
    rt.in_session = false;
    rt.unreported_gap = gap;
    step.session_ended = true;
    step.returning_time = gap;
    const double return_time = rt.current_time + gap;
    if (return_time <= cfg_.episode_days) {
        step.returns_within_horizon = true;
        queue_.push(Event{return_time, u.user_id});
    }
    return step;
}

std::vector<Simulator::UnreportedClose> Simulator::drain_unreported_closures() {
    std::vector<UnreportedClose> out;
    for (size_t i = 0; i < runtime_.size(); ++i) {
        if (runtime_[i].unreported_gap >= 0.0) {
            out.push_back({users_[i].user_id, runtime_[i].unreported_gap});
            runtime_[i].unreported_gap = -1.0;
        }
    }
    return out;
}

EpisodeMetrics Simulator::metrics() const {
    EpisodeMetrics m;
    m.sessions = sessions_closed_;
    m.requests = requests_;
    m.avg_return_day =
        sessions_closed_ ? sum_return_day_ / sessions_closed_ : 0.0;
    m.day1_retention =
        sessions_closed_ ? static_cast<double>(day1_returns_) / sessions_closed_
                         : 0.0;
    m.mean_immediate_reward = requests_ ? sum_immediate_ / requests_ : 0.0;
    return m;
}

EpisodeResult run_episode(const SimConfig& cfg, uint64_t seed,
                          const PolicyFn& policy, bool collect_sessions) {
    Simulator sim(cfg, seed);
    std::map<int64_t, SessionRecord> open;
    std::map<int64_t, int64_t> session_counter;
    EpisodeResult result;

    RequestView view;
    while (sim.next_request(view)) {
        if (collect_sessions && view.closed_previous) {
            auto it = open.find(view.user_id);
            if (it != open.end()) {
                it->second.returning_time = view.previous_gap_days;
                result.sessions.push_back(std::move(it->second));
                open.erase(it);
            }
        }
        ActionVector action = policy(view.state, view.group);
        EnvStep step = sim.apply_action(action);
        if (collect_sessions) {
            auto& rec = open[view.user_id];
            if (view.first_of_session) {
                rec.user_id = view.user_id;
                rec.session_index = session_counter[view.user_id]++;
            }
            rec.requests.push_back({view.state, action, step.feedback});
        }
    }
    if (collect_sessions) {
        for (auto close : sim.drain_unreported_closures()) {
            auto it = open.find(close.user_id);
            if (it != open.end()) {
                it->second.returning_time = close.gap_days;
                result.sessions.push_back(std::move(it->second));
                open.erase(it);
            }
        }
    }
    result.metrics = sim.metrics();
    result.clip_warnings = sim.action_clip_warnings();
    return result;
}

// ---- calibration --------------------------------------------------------

namespace {

struct LoggedSession {
    int64_t user_id;
    int length;
    double gap_days;
};

}  // namespace

CalibrationResult calibrate_from_logs(const std::string& csv_path,
                                      int max_return_day) {
    const auto rows = read_session_log_csv(csv_path);

    std::vector<LoggedSession> sessions;
    std::map<int64_t, std::vector<double>> gaps_by_user;
    for (size_t i = 0; i < rows.size(); ++i) {
        const bool last_of_session =
            i + 1 == rows.size() || rows[i + 1].session_id != rows[i].session_id ||
            rows[i + 1].user_id != rows[i].user_id;
        if (last_of_session) {
            sessions.push_back({rows[i].user_id, rows[i].request_idx + 1,
                                rows[i].return_gap_days});
            gaps_by_user[rows[i].user_id].push_back(rows[i].return_gap_days);
        }
    }
    if (gaps_by_user.size() < 2)
        throw std::runtime_error(
            "calibrate_from_logs: need at least two users to split activity groups");

    // activity split: users ranked by mean return gap, faster half = high
    std::vector<std::pair<double, int64_t>> user_means;
    for (const auto& [uid, gaps] : gaps_by_user) {
        double mean = std::accumulate(gaps.begin(), gaps.end(), 0.0) / gaps.size();
        user_means.push_back({mean, uid});
    }
    std::sort(user_means.begin(), user_means.end());
    std::map<int64_t, UserGroup> group_of;
    for (size_t i = 0; i < user_means.size(); ++i)
        group_of[user_means[i].second] = i < (user_means.size() + 1) / 2
                                             ? UserGroup::HighActive
                                             : UserGroup::LowActive;

    // leave curve: logistic regression of leave-now on session depth by
    // Newton-Raphson MLE
    std::vector<std::pair<double, double>> obs;  // (depth, leave label)
    obs.reserve(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        const bool last = i + 1 == rows.size() ||
                          rows[i + 1].session_id != rows[i].session_id ||
                          rows[i + 1].user_id != rows[i].user_id;
        obs.push_back(
            {static_cast<double>(rows[i].request_idx + 1), last ? 1.0 : 0.0});
    }
    double b0 = 0.0, b1 = 0.0;
    for (int iter = 0; iter < 50; ++iter) {
        double g0 = 0.0, g1 = 0.0;
        double h00 = 1e-9, h01 = 0.0, h11 = 1e-9;
        for (const auto& [depth, y] : obs) {
            const double p = logistic(b0 + b1 * depth);
            const double r = y - p;
            g0 += r;
            g1 += r * depth;
            const double w = p * (1.0 - p);
            h00 += w;
            h01 += w * depth;
            h11 += w * depth * depth;
        }
        const double det = h00 * h11 - h01 * h01;
        if (std::abs(det) < 1e-12) break;
        const double d0 = (h11 * g0 - h01 * g1) / det;
        const double d1 = (h00 * g1 - h01 * g0) / det;
        b0 += d0;
        b1 += d1;
        if (std::abs(d0) + std::abs(d1) < 1e-10) break;
    }

    CalibrationResult out;
    out.leave_base = b0;
    out.leave_depth_slope = b1;
    double ll = 0.0;
    for (const auto& [depth, y] : obs) {
        const double p = std::clamp(logistic(b0 + b1 * depth), 1e-12, 1.0 - 1e-12);
        ll += y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    }
    out.leave_log_likelihood = ll;

    // return-day histograms per group
    const int K = max_return_day;
    std::vector<double> count_high(K, 0.0), count_low(K, 0.0);
    for (const auto& s : sessions) {
        const int day = std::clamp(static_cast<int>(std::ceil(s.gap_days)), 1, K);
        if (group_of[s.user_id] == UserGroup::HighActive) {
            count_high[day - 1] += 1.0;
            ++out.sessions_high;
        } else {
            count_low[day - 1] += 1.0;
            ++out.sessions_low;
        }
    }
    if (out.sessions_high == 0 || out.sessions_low == 0)
        throw std::runtime_error("calibrate_from_logs: empty activity group");

    auto to_logits = [K](const std::vector<double>& counts, double total,
                         double& ll_out) {
        std::vector<double> logits(K);
        double ll_acc = 0.0;
        for (int k = 0; k < K; ++k) {
            const double p = (counts[k] + 0.1) / (total + 0.1 * K);
            logits[k] = std::log(p);
            if (counts[k] > 0) ll_acc += counts[k] * std::log(p);
        }
        ll_out = ll_acc;
        return logits;
    };
    out.return_logits_high =
        to_logits(count_high, out.sessions_high, out.return_log_likelihood_high);
    out.return_logits_low =
        to_logits(count_low, out.sessions_low, out.return_log_likelihood_low);
    return out;
}

void write_session_log_csv(const std::string& path,
                           const std::vector<SessionRecord>& sessions) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write session log: " + path);
    out << "user_id,session_id,request_idx,timestamp_s,watch_time_s,"
           "interactions,return_gap_days\n";
    out.precision(17);
    std::map<int64_t, double> clock;  // per-user synthesized time
    for (const auto& s : sessions) {
        double& t = clock[s.user_id];
        for (size_t i = 0; i < s.requests.size(); ++i) {
            out << s.user_id << "," << s.session_index << "," << i << "," << t
                << "," << s.requests[i].feedback.watch_time_s << ","
                << s.requests[i].feedback.interactions << ","
                << s.returning_time << "\n";
            t += 30.0;
        }
        t += s.returning_time * 86400.0;
    }
}

SimConfig CalibrationResult::applied_to(SimConfig base) const {
    base.leave_base = leave_base;
    base.leave_depth_slope = leave_depth_slope;
    if (return_logits_high.size() == static_cast<size_t>(base.max_return_day)) {
        base.return_logits_high = return_logits_high;
        base.return_logits_low = return_logits_low;
    }
    return base;
}

}  // namespace retention
