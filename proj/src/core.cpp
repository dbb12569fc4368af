#include "retention/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace retention {

std::vector<double> UserState::flat() const {
    std::vector<double> out(dim());
    flatten_into(out.data());
    return out;
}

void UserState::flatten_into(double* dst) const {
    dst = std::copy(profile.begin(), profile.end(), dst);
    dst = std::copy(history.begin(), history.end(), dst);
    dst = std::copy(context.begin(), context.end(), dst);
    std::copy(candidate_summary.begin(), candidate_summary.end(), dst);
}

double immediate_reward(const ImmediateFeedback& fb) {
    return fb.watch_time_s + static_cast<double>(fb.interactions);
}

std::vector<double> SessionFeatures::flat() const {
    std::vector<double> out(profile);
    // mild scaling keeps the classifier inputs in a comparable range
    out.push_back(static_cast<double>(length) / 10.0);
    out.push_back(total_watch_time / 30.0);
    out.push_back(static_cast<double>(total_interactions) / 10.0);
    return out;
}

ReplayBuffer::ReplayBuffer(ReplayBufferConfig cfg, RetentionRewardFn reward_fn)
    : cfg_(cfg), reward_fn_(std::move(reward_fn)) {
    // gamma = 0 is legal (myopic naive variant); gamma = 1 would make the
    // terminal flag and gamma_it indistinguishable and the value diverge
    if (!(cfg_.gamma >= 0.0 && cfg_.gamma < 1.0))
        throw std::invalid_argument("replay buffer gamma must be in [0,1)");
    if (cfg_.capacity == 0)
        throw std::invalid_argument("replay buffer capacity must be positive");
    if (!reward_fn_)
        throw std::invalid_argument("retention reward hook must be set");
}

void ReplayBuffer::add_request(int64_t user_id, const UserState& state,
                               const ActionVector& action,
                               const ImmediateFeedback& fb, UserGroup group) {
    auto& pending = pending_[user_id];
    if (pending.staged.empty()) {
        pending.features = SessionFeatures{};
        pending.features.profile = state.profile;
        pending.features.group = group;
    }
    if (pending.awaiting_next_state) {
        pending.staged.back().next_state = state;
        pending.awaiting_next_state = false;
    }

    TransitionSample t;
    t.state = state;
    t.action = action;
    t.immediate_reward = immediate_reward(fb);
    t.terminal = false;
    t.gamma_it = 1.0;
    t.retention_reward = 0.0;
    t.user_group = group;
    pending.staged.push_back(std::move(t));
    pending.awaiting_next_state = true;

    pending.features.length += 1;
    pending.features.total_watch_time += fb.watch_time_s;
    pending.features.total_interactions += fb.interactions;
}

size_t ReplayBuffer::close_session(int64_t user_id, double returning_time,
                                   const UserState* next_session_state) {
    auto it = pending_.find(user_id);
    if (it == pending_.end() || it->second.staged.empty())
        throw std::runtime_error("no pending session for user " +
                                 std::to_string(user_id));
    if (returning_time < 0.0)
        throw std::invalid_argument("returning_time must be nonnegative");

    PendingSession& pending = it->second;
    TransitionSample& last = pending.staged.back();
    last.terminal = true;
    last.gamma_it = cfg_.gamma;
    last.retention_reward = reward_fn_(pending.features, returning_time);
    if (next_session_state != nullptr) {
        last.next_state = *next_session_state;
        last.episode_end = false;
    } else {
        last.next_state = last.state;
        last.episode_end = true;
    }

    const size_t count = pending.staged.size();
    for (auto& sample : pending.staged) {
        if (samples_.size() >= cfg_.capacity) samples_.pop_front();
        samples_.push_back(std::move(sample));
    }
    pending_.erase(it);
    return count;
}

std::vector<TransitionSample> ReplayBuffer::sample_batch(size_t batch_size,
                                                         uint64_t seed) const {
    if (batch_size > samples_.size())
        throw std::runtime_error("sample_batch: buffer holds " +
                                 std::to_string(samples_.size()) +
                                 " samples, requested " +
                                 std::to_string(batch_size));
    std::vector<size_t> idx(samples_.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    Rng rng(seed);
    // partial Fisher-Yates: first batch_size slots are the draw
    for (size_t i = 0; i < batch_size; ++i) {
        size_t j = i + rng.uniform_index(idx.size() - i);
        std::swap(idx[i], idx[j]);
    }
    std::vector<TransitionSample> out;
    out.reserve(batch_size);
    for (size_t i = 0; i < batch_size; ++i) out.push_back(samples_[idx[i]]);
    return out;
}

std::vector<int64_t> ReplayBuffer::pending_user_ids() const {
    std::vector<int64_t> ids;
    ids.reserve(pending_.size());
    for (const auto& [id, _] : pending_) ids.push_back(id);
    return ids;
}

bool ReplayBuffer::has_pending(int64_t user_id) const {
    auto it = pending_.find(user_id);
    return it != pending_.end() && !it->second.staged.empty();
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

}  // namespace

std::vector<SessionLogRow> read_session_log_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open session log: " + path);

    std::string line;
    if (!std::getline(in, line))
        throw std::runtime_error("session log is empty: " + path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string expected =
        "user_id,session_id,request_idx,timestamp_s,watch_time_s,"
        "interactions,return_gap_days";
    if (line != expected)
        throw std::runtime_error("session log header mismatch, expected `" +
                                 expected + "`");

    std::vector<SessionLogRow> rows;
    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = split_csv_line(line);
        if (fields.size() != 7)
            throw std::runtime_error("session log line " +
                                     std::to_string(line_no) +
                                     ": expected 7 fields");
        SessionLogRow row;
        try {
            row.user_id = std::stoll(fields[0]);
            row.session_id = std::stoll(fields[1]);
            row.request_idx = std::stoi(fields[2]);
            row.timestamp_s = std::stod(fields[3]);
            row.watch_time_s = std::stod(fields[4]);
            row.interactions = std::stoi(fields[5]);
            row.return_gap_days = std::stod(fields[6]);
        } catch (const std::exception&) {
            throw std::runtime_error("session log line " +
                                     std::to_string(line_no) +
                                     ": malformed value");
        }
        if (row.watch_time_s < 0 || row.interactions < 0 ||
            row.return_gap_days < 0)
            throw std::runtime_error("session log line " +
                                     std::to_string(line_no) +
                                     ": negative value");
        rows.push_back(row);
    }
    if (rows.empty())
        throw std::runtime_error("session log has no data rows: " + path);

    // sessions must be contiguous per user and time-ordered within a user
    std::map<int64_t, int64_t> last_session_of_user;
    std::map<int64_t, double> last_time_of_user;
    std::map<std::pair<int64_t, int64_t>, bool> seen_session;
    for (size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        auto key = std::make_pair(r.user_id, r.session_id);
        auto lu = last_session_of_user.find(r.user_id);
        if (lu != last_session_of_user.end() && lu->second != r.session_id) {
            if (seen_session.count(key))
                throw std::runtime_error(
                    "session log: session " + std::to_string(r.session_id) +
                    " of user " + std::to_string(r.user_id) +
                    " is not contiguous");
        }
        if (lu != last_session_of_user.end() &&
            r.timestamp_s < last_time_of_user[r.user_id])
            throw std::runtime_error("session log: timestamps of user " +
                                     std::to_string(r.user_id) +
                                     " are not ordered");
        seen_session[key] = true;
        last_session_of_user[r.user_id] = r.session_id;
        last_time_of_user[r.user_id] = r.timestamp_s;
    }
    return rows;
}

}  // namespace retention
