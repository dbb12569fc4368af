#include <cmath>

#include "doctest.h"
#include "retention/baselines.hpp"
#include "testutil.hpp"

using namespace retention;

namespace {

const StateLayout kLayout;

UserState random_state(Rng& rng) {
    UserState s;
    auto fill = [&](std::vector<double>& v, int n) {
        v.resize(n);
        for (auto& x : v) x = rng.uniform(0.0, 1.0);
    };
    fill(s.profile, kLayout.profile);
    fill(s.history, kLayout.history);
    fill(s.context, kLayout.context);
    fill(s.candidate_summary, kLayout.candidate_summary);
    return s;
}

}  // namespace

TEST_CASE("CEM converges on a known quadratic") {
    CemOptions opt;
    CemTrainer cem(opt, 8, 4.0, 123);
    const std::vector<double> best{0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 3.8};
    const auto fitness = [&](const std::vector<double>& a) {
        double cost = 0.0;
        for (size_t i = 0; i < a.size(); ++i)
            cost += (a[i] - best[i]) * (a[i] - best[i]);
        return -cost;
    };
    for (int it = 0; it < 50; ++it) cem.iterate(fitness);
    CHECK(cem.state().iteration == 50);
    for (int d = 0; d < 8; ++d)
        CHECK(std::abs(cem.state().mean[d] - best[d]) < 0.1);
}

TEST_CASE("CEM iterate sequence is seed-deterministic") {
    CemOptions opt;
    CemTrainer a(opt, 4, 4.0, 9), b(opt, 4, 4.0, 9);
    const auto fitness = [](const std::vector<double>& x) {
        double s = 0.0;
        for (double v : x) s -= (v - 1.0) * (v - 1.0);
        return s;
    };
    for (int it = 0; it < 10; ++it) {
        a.iterate(fitness);
        b.iterate(fitness);
        CHECK(a.state().mean == b.state().mean);
        CHECK(a.state().stddev == b.state().stddev);
    }
    CemTrainer c(opt, 4, 4.0, 10);
    c.iterate(fitness);
    CHECK(a.state().mean != c.state().mean);
}

TEST_CASE("CEM degenerate configurations") {
    SUBCASE("zero stddev with zero smoothing is a fixed point") {
        CemOptions opt;
        opt.smoothing = 0.0;
        opt.init_stddev_fraction = 0.0;
        CemTrainer cem(opt, 4, 4.0, 5);
        const auto mean_before = cem.state().mean;
        cem.iterate([](const std::vector<double>&) { return 0.0; });
        CHECK(cem.state().mean == mean_before);
    }
    SUBCASE("elite fraction one moves the mean toward the sample mean") {
        CemOptions opt;
        opt.elite_fraction = 1.0;
        opt.smoothing = 1.0;
        CemTrainer cem(opt, 2, 4.0, 6);
        std::vector<std::vector<double>> seen;
        cem.iterate([&](const std::vector<double>& a) {
            seen.push_back(a);
            return 0.0;
        });
        std::vector<double> sample_mean(2, 0.0);
        for (const auto& m : seen)
            for (int d = 0; d < 2; ++d) sample_mean[d] += m[d] / seen.size();
        for (int d = 0; d < 2; ++d)
            CHECK(cem.state().mean[d] == doctest::Approx(sample_mean[d]));
    }
    SUBCASE("invalid options are rejected") {
        CemOptions opt;
        opt.population = 1;
        CHECK_THROWS_AS(CemTrainer(opt, 4, 4.0, 1), std::invalid_argument);
        opt.population = 8;
        opt.elite_fraction = 0.0;
        CHECK_THROWS_AS(CemTrainer(opt, 4, 4.0, 1), std::invalid_argument);
    }
    SUBCASE("stddev collapse is floored") {
        CemOptions opt;
        opt.smoothing = 1.0;
        opt.init_stddev_fraction = 0.0;
        CemTrainer cem(opt, 4, 4.0, 7);
        cem.iterate([](const std::vector<double>&) { return 0.0; });
        for (double s : cem.state().stddev) CHECK(s == opt.stddev_floor);
    }
}

TEST_CASE("CEM acts with its constant mean") {
    CemOptions opt;
    CemTrainer cem(opt, 8, 4.0, 11);
    Rng r1(1), r2(2), state_rng(3);
    const auto a = cem.act(random_state(state_rng), UserGroup::HighActive, true, r1);
    const auto b = cem.act(random_state(state_rng), UserGroup::LowActive, false, r2);
    CHECK(a.values == cem.state().mean);
    CHECK(a.values == b.values);
    CHECK_FALSE(cem.uses_replay());
}

TEST_CASE("TD3 twin-minimum target never exceeds either critic's target") {
    Rng rng(42);
    const int n = 8;
    std::vector<TransitionSample> batch(16);
    for (auto& t : batch) {
        t.state = random_state(rng);
        t.next_state = random_state(rng);
        t.action.values.resize(n);
        t.action.behavior_mu.resize(n);
        t.action.behavior_sigma.assign(n, 0.4);
        for (int j = 0; j < n; ++j) {
            t.action.values[j] = rng.uniform(0, 4);
            t.action.behavior_mu[j] = t.action.values[j];
        }
        t.immediate_reward = rng.uniform(0, 10);
        if (rng.bernoulli(0.3)) {
            t.terminal = true;
            t.retention_reward = 1.0 + rng.uniform_index(8);
            t.gamma_it = 0.95;
        }
    }
    const auto b = assemble_batch(batch, kLayout);

    MlpConfig critic_cfg;
    critic_cfg.layer_dims = {kLayout.total() + n, 16, 1};
    MlpConfig actor_cfg;
    actor_cfg.layer_dims = {kLayout.total(), 16, n};
    actor_cfg.output = Activation::ScaledSigmoid;
    actor_cfg.output_scale = 4.0;
    Rng i1(1), i2(2), i3(3);
    const Mlp q1(critic_cfg, i1), q2(critic_cfg, i2), actor(actor_cfg, i3);

    Td3Options opt;
    Rng noise_a(7), noise_b(7), noise_c(7);
    const Vec twin = td3_targets(q1, &q2, actor, b, opt, 4.0, noise_a);
    const Vec only1 = td3_targets(q1, nullptr, actor, b, opt, 4.0, noise_b);
    const Vec only2 = td3_targets(q2, nullptr, actor, b, opt, 4.0, noise_c);
    for (int i = 0; i < b.size(); ++i) {
        CHECK(twin(i) <= only1(i) + 1e-12);
        CHECK(twin(i) <= only2(i) + 1e-12);
    }

    SUBCASE("identical twins agree and the minimum is either") {
        Rng noise_d(7), noise_e(7);
        const Vec same = td3_targets(q1, &q1, actor, b, opt, 4.0, noise_d);
        const Vec single = td3_targets(q1, nullptr, actor, b, opt, 4.0, noise_e);
        for (int i = 0; i < b.size(); ++i) CHECK(same(i) == single(i));
    }
}

TEST_CASE("TD3 without smoothing or twin reduces to DDPG targets") {
    Rng rng(43);
    const int n = 8;
    std::vector<TransitionSample> batch(3);
    for (auto& t : batch) {
        t.state = random_state(rng);
        t.next_state = random_state(rng);
        t.action.values.assign(n, 1.0);
        t.action.behavior_mu.assign(n, 1.0);
        t.action.behavior_sigma.assign(n, 0.4);
        t.immediate_reward = rng.uniform(0, 5);
    }
    batch[1].terminal = true;
    batch[1].retention_reward = 3.0;
    batch[1].gamma_it = 0.95;
    batch[2].terminal = true;
    batch[2].retention_reward = 2.0;
    batch[2].gamma_it = 0.95;
    batch[2].episode_end = true;
    const auto b = assemble_batch(batch, kLayout);

    MlpConfig critic_cfg;
    critic_cfg.layer_dims = {kLayout.total() + n, 16, 1};
    MlpConfig actor_cfg;
    actor_cfg.layer_dims = {kLayout.total(), 16, n};
    actor_cfg.output = Activation::ScaledSigmoid;
    actor_cfg.output_scale = 4.0;
    Rng i1(4), i3(5);
    const Mlp q1(critic_cfg, i1), actor(actor_cfg, i3);

    Td3Options opt;
    opt.policy_noise_frac = 0.0;
    Rng noise(1);
    const Vec targets = td3_targets(q1, nullptr, actor, b, opt, 4.0, noise);

    // hand-computed: same Q values, scalar composition, reward I - cost
    const Mat a_next = actor.forward(b.next_states);
    Mat x(3, kLayout.total() + n);
    x << b.next_states, a_next;
    const Vec qn = q1.forward(x).col(0);
    CHECK(targets(0) == batch[0].immediate_reward + opt.gamma * qn(0));
    CHECK(targets(1) ==
          batch[1].immediate_reward - 3.0 + opt.gamma * qn(1));
    CHECK(targets(2) == batch[2].immediate_reward - 2.0);
}

TEST_CASE("TD3 critic converges to the discounted return on the toy chain") {
    // two sessions (s1 s2 | s3), returning times 2 and 4, zero immediate
    // reward. uniform discount: Q(s1) = -gamma*2 - gamma^2*4
    const double gamma = 0.9;
    Td3Options opt;
    opt.gamma = gamma;
    opt.actor_lr = 0.0;        // frozen policy: data actions are its output
    opt.policy_noise_frac = 0.0;
    opt.twin = false;
    opt.critic_lr = 2e-3;
    opt.tau = 0.1;
    opt.batch_size = 3;
    opt.min_fill = 3;
    Td3Trainer trainer(opt, kLayout, 8, 4.0, 77);

    Rng rng(44), act_rng(45);
    const UserState s1 = random_state(rng);
    const UserState s2 = random_state(rng);
    const UserState s3 = random_state(rng);
    const auto a1 = trainer.act(s1, UserGroup::HighActive, false, act_rng);
    const auto a2 = trainer.act(s2, UserGroup::HighActive, false, act_rng);
    const auto a3 = trainer.act(s3, UserGroup::HighActive, false, act_rng);

    ReplayBuffer buffer({16, gamma}, trainer.retention_reward_fn());
    buffer.add_request(1, s1, a1, {0.0, 0}, UserGroup::HighActive);
    buffer.add_request(1, s2, a2, {0.0, 0}, UserGroup::HighActive);
    buffer.close_session(1, 2.0, &s3);
    buffer.add_request(1, s3, a3, {0.0, 0}, UserGroup::HighActive);
    buffer.close_session(1, 4.0, nullptr);

    for (int step = 0; step < 6000; ++step) trainer.train_step(buffer);

    Vec x(kLayout.total() + 8);
    const auto flat = s1.flat();
    for (int j = 0; j < kLayout.total(); ++j) x(j) = flat[j];
    for (int j = 0; j < 8; ++j) x(kLayout.total() + j) = a1.values[j];
    const double q = trainer.critic1().forward1(x)(0);
    const double expected = -(gamma * 2.0 + gamma * gamma * 4.0);
    CHECK(std::abs(q - expected) <= 1e-2);
}

TEST_CASE("TD3 checkpoint carries actor, twins, and targets") {
    Td3Options opt;
    opt.hidden = 8;
    Td3Trainer trainer(opt, kLayout, 8, 4.0, 3);
    const auto names = trainer.checkpoint().names();
    CHECK(names == std::vector<std::string>{"actor", "actor_target", "q1",
                                            "q1_target", "q2", "q2_target"});
}

TEST_CASE("TD3 exploration noise stays within the action box") {
    Td3Options opt;
    opt.hidden = 8;
    Td3Trainer trainer(opt, kLayout, 8, 4.0, 4);
    Rng rng(5), act_rng(6);
    const UserState s = random_state(rng);
    for (int i = 0; i < 100; ++i) {
        const auto a = trainer.act(s, UserGroup::LowActive, true, act_rng);
        for (double v : a.values) {
            CHECK(v >= 0.0);
            CHECK(v <= 4.0);
        }
        for (double sg : a.behavior_sigma) CHECK(sg > 0.0);
    }
}
