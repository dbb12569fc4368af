#ifndef RETENTION_RANKING_HPP
#define RETENTION_RANKING_HPP

#include <vector>

#include "retention/core.hpp"

namespace retention {

struct Slate {
    std::vector<int64_t> video_ids;       // length k, scores non-increasing
    std::vector<double> ranking_scores;
};

// Linear ensemble score: dot product of the ranking weights with the
// candidate's predicted feedback scores.
double ranking_score(const ActionVector& a, const CandidateVideo& x);

// Top-k slate by ranking score, ties broken by ascending video id.
Slate select_slate(const ActionVector& a,
                   const std::vector<CandidateVideo>& candidates, int k);

}  // namespace retention

#endif
