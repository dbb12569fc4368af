#include "retention/ranking.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace retention {

double ranking_score(const ActionVector& a, const CandidateVideo& x) {
    if (a.values.size() != x.scores.size())
        throw std::invalid_argument("ranking_score: dimension mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.values.size(); ++i) s += a.values[i] * x.scores[i];
    return s;
}

Slate select_slate(const ActionVector& a,
                   const std::vector<CandidateVideo>& candidates, int k) {
    if (k <= 0) throw std::invalid_argument("select_slate: k must be positive");
    if (candidates.size() < static_cast<size_t>(k))
        throw std::invalid_argument("select_slate: fewer candidates than k");

    std::vector<std::pair<double, size_t>> scored(candidates.size());
    for (size_t i = 0; i < candidates.size(); ++i)
        scored[i] = {ranking_score(a, candidates[i]), i};

    auto better = [&](const std::pair<double, size_t>& l,
                      const std::pair<double, size_t>& r) {
        if (l.first != r.first) return l.first > r.first;
        return candidates[l.second].video_id < candidates[r.second].video_id;
    };
    std::partial_sort(scored.begin(), scored.begin() + k, scored.end(), better);

    Slate slate;
    slate.video_ids.reserve(k);
    slate.ranking_scores.reserve(k);
    for (int i = 0; i < k; ++i) {
        slate.video_ids.push_back(candidates[scored[i].second].video_id);
        slate.ranking_scores.push_back(scored[i].first);
    }
    return slate;
}

}  // namespace retention
