#include <algorithm>

#include "doctest.h"
#include "retention/ranking.hpp"
#include "retention/rng.hpp"

using namespace retention;

namespace {

ActionVector weights(std::vector<double> v) {
    ActionVector a;
    a.values = std::move(v);
    a.behavior_mu = a.values;
    a.behavior_sigma.assign(a.values.size(), 1.0);
    return a;
}

CandidateVideo video(int64_t id, std::vector<double> scores) {
    return CandidateVideo{id, std::move(scores)};
}

// independent oracle: stable full sort by (score desc, id asc)
std::vector<int64_t> sort_oracle(const ActionVector& a,
                                 std::vector<CandidateVideo> cands, int k) {
    std::sort(cands.begin(), cands.end(),
              [&](const CandidateVideo& l, const CandidateVideo& r) {
                  double sl = 0, sr = 0;
                  for (size_t i = 0; i < a.values.size(); ++i) {
                      sl += a.values[i] * l.scores[i];
                      sr += a.values[i] * r.scores[i];
                  }
                  if (sl != sr) return sl > sr;
                  return l.video_id < r.video_id;
              });
    std::vector<int64_t> ids;
    for (int i = 0; i < k; ++i) ids.push_back(cands[i].video_id);
    return ids;
}

}  // namespace

TEST_CASE("ranking_score is the dot product") {
    CHECK(ranking_score(weights({1, 0, 0}), video(1, {0.7, 0.9, 0.2})) ==
          doctest::Approx(0.7));
    CHECK(ranking_score(weights({0, 0, 0}), video(1, {0.5, 0.5, 0.5})) == 0.0);
    CHECK(ranking_score(weights({1, 1}), video(1, {0.2, 0.3})) ==
          doctest::Approx(0.5));
    CHECK_THROWS_AS(ranking_score(weights({1, 1}), video(1, {0.2, 0.3, 0.4})),
                    std::invalid_argument);
}

TEST_CASE("select_slate picks the top-k with deterministic ties") {
    const std::vector<CandidateVideo> cands{
        video(10, {0.1}), video(11, {0.5}), video(12, {0.3})};
    const auto slate = select_slate(weights({1.0}), cands, 2);
    CHECK(slate.video_ids == std::vector<int64_t>{11, 12});
    CHECK(slate.ranking_scores[0] == doctest::Approx(0.5));
    CHECK(slate.ranking_scores[1] == doctest::Approx(0.3));

    SUBCASE("all-equal scores fall back to ascending video id") {
        const std::vector<CandidateVideo> equal{
            video(42, {0.5}), video(7, {0.5}), video(19, {0.5})};
        const auto tied = select_slate(weights({1.0}), equal, 2);
        CHECK(tied.video_ids == std::vector<int64_t>{7, 19});
    }
    SUBCASE("too few candidates throws") {
        CHECK_THROWS_AS(select_slate(weights({1.0}), cands, 4),
                        std::invalid_argument);
    }
}

TEST_CASE("select_slate matches a full-sort oracle on random instances") {
    Rng rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 1 + static_cast<int>(rng.uniform_index(8));
        const int m = 2 + static_cast<int>(rng.uniform_index(30));
        const int k = 1 + static_cast<int>(rng.uniform_index(m));
        std::vector<double> w(n);
        for (auto& v : w) v = rng.uniform(0.0, 4.0);
        std::vector<CandidateVideo> cands;
        for (int j = 0; j < m; ++j) {
            std::vector<double> scores(n);
            for (auto& s : scores) s = rng.uniform();
            // duplicate ids never occur; duplicated scores do
            cands.push_back(video(1000 + j, std::move(scores)));
        }
        if (rng.bernoulli(0.3) && m >= 2) cands[1].scores = cands[0].scores;
        const auto slate = select_slate(weights(w), cands, k);
        CHECK(slate.video_ids == sort_oracle(weights(w), cands, k));
    }
}

TEST_CASE("positive scaling leaves the slate unchanged") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> w(4);
        for (auto& v : w) v = rng.uniform(0.0, 4.0);
        std::vector<CandidateVideo> cands;
        for (int j = 0; j < 12; ++j) {
            std::vector<double> scores(4);
            for (auto& s : scores) s = rng.uniform();
            cands.push_back(video(j, std::move(scores)));
        }
        const auto base = select_slate(weights(w), cands, 5);
        for (double c : {0.5, 2.0, 7.0}) {
            auto scaled = w;
            for (auto& v : scaled) v *= c;
            CHECK(select_slate(weights(scaled), cands, 5).video_ids ==
                  base.video_ids);
        }
    }
}

TEST_CASE("candidate order never changes the selected slate") {
    Rng rng(6);
    std::vector<double> w{1.0, 0.3, 2.0};
    std::vector<CandidateVideo> cands;
    for (int j = 0; j < 15; ++j) {
        std::vector<double> scores(3);
        for (auto& s : scores) s = rng.uniform();
        cands.push_back(video(j, std::move(scores)));
    }
    const auto base = select_slate(weights(w), cands, 6);
    for (int trial = 0; trial < 50; ++trial) {
        rng.shuffle(cands);
        CHECK(select_slate(weights(w), cands, 6).video_ids == base.video_ids);
    }
}
