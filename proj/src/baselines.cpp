#include "retention/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <stdexcept>

namespace retention {

CemTrainer::CemTrainer(const CemOptions& opt, int action_dim, double action_max,
                       uint64_t seed)
    : opt_(opt),
      action_dim_(action_dim),
      action_max_(action_max),
      rng_(substream_seed(seed, "cem")) {
    if (opt_.population < 2)
        throw std::invalid_argument("CEM population must be >= 2");
    if (!(opt_.elite_fraction > 0.0 && opt_.elite_fraction <= 1.0))
        throw std::invalid_argument("CEM elite fraction must be in (0,1]");
    if (opt_.smoothing < 0.0 || opt_.smoothing > 1.0)
        throw std::invalid_argument("CEM smoothing must be in [0,1]");
    if (opt_.init_stddev_fraction < 0.0)
        throw std::invalid_argument("CEM init stddev must be >= 0");
    state_.mean.assign(action_dim_, action_max_ / 2.0);
    state_.stddev.assign(action_dim_, opt_.init_stddev_fraction * action_max_);
}

void CemTrainer::iterate(const EvaluateFn& evaluate) {
    const int P = opt_.population;
    std::vector<std::vector<double>> members(P);
    std::vector<double> fitness(P);
    for (int j = 0; j < P; ++j) {
        members[j].resize(action_dim_);
        for (int d = 0; d < action_dim_; ++d)
            members[j][d] = std::clamp(
                rng_.normal(state_.mean[d], state_.stddev[d]), 0.0, action_max_);
        fitness[j] = evaluate(members[j]);
    }

    const int n_elite = static_cast<int>(
        std::ceil(opt_.elite_fraction * static_cast<double>(P)));
    std::vector<int> order(P);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (fitness[a] != fitness[b]) return fitness[a] > fitness[b];
        return a < b;
    });

    std::vector<double> elite_mean(action_dim_, 0.0);
    std::vector<double> elite_var(action_dim_, 0.0);
    for (int e = 0; e < n_elite; ++e)
        for (int d = 0; d < action_dim_; ++d)
            elite_mean[d] += members[order[e]][d];
    for (int d = 0; d < action_dim_; ++d) elite_mean[d] /= n_elite;
    for (int e = 0; e < n_elite; ++e)
        for (int d = 0; d < action_dim_; ++d) {
            const double diff = members[order[e]][d] - elite_mean[d];
            elite_var[d] += diff * diff;
        }

    const double eta = opt_.smoothing;
    for (int d = 0; d < action_dim_; ++d) {
        const double elite_std = std::sqrt(elite_var[d] / n_elite);
        state_.mean[d] = eta * elite_mean[d] + (1.0 - eta) * state_.mean[d];
        state_.stddev[d] =
            std::max(opt_.stddev_floor,
                     eta * elite_std + (1.0 - eta) * state_.stddev[d]);
    }
    ++state_.iteration;
}

ActionVector CemTrainer::act(const UserState&, UserGroup, bool, Rng&) {
    ActionVector a;
    a.values = state_.mean;
    a.behavior_mu = state_.mean;
    a.behavior_sigma = state_.stddev;
    return a;
}

RetentionRewardFn CemTrainer::retention_reward_fn() {
    return [](const SessionFeatures&, double gap) { return gap; };
}

LossRow CemTrainer::train_step(ReplayBuffer&) {
    throw std::logic_error("CEM does not take gradient steps");
}

void CemTrainer::save_state(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write CEM state: " + path);
    out << std::setprecision(17);
    out << "iteration " << state_.iteration << "\n";
    out << "mean";
    for (double v : state_.mean) out << " " << v;
    out << "\nstddev";
    for (double v : state_.stddev) out << " " << v;
    out << "\n";
}

// ---- TD3 ------------------------------------------------------------------

Vec td3_targets(const Mlp& q1_target, const Mlp* q2_target,
                const Mlp& actor_target, const AssembledBatch& b,
                const Td3Options& opt, double action_max, Rng& noise_rng) {
    const int B = b.size();
    const int n = static_cast<int>(b.actions.cols());
    Mat a_next = actor_target.forward(b.next_states);
    const double noise_std = opt.policy_noise_frac * action_max;
    const double noise_clip = opt.noise_clip_frac * action_max;
    if (noise_std > 0.0) {
        for (int i = 0; i < B; ++i)
            for (int j = 0; j < n; ++j) {
                const double eps = std::clamp(noise_rng.normal(0.0, noise_std),
                                              -noise_clip, noise_clip);
                a_next(i, j) = std::clamp(a_next(i, j) + eps, 0.0, action_max);
            }
    }
    Mat x_next(B, b.next_states.cols() + n);
    x_next << b.next_states, a_next;
    Vec q_next = q1_target.forward(x_next).col(0);
    if (q2_target != nullptr)
        q_next = q_next.cwiseMin(q2_target->forward(x_next).col(0));

    // reward: immediate feedback minus the terminal returning-time cost
    const Vec reward = b.immediate - b.retention;
    return reward.array() +
           opt.gamma * b.bootstrap_mask.array() * q_next.array();
}

Td3Trainer::Td3Trainer(const Td3Options& opt, const StateLayout& layout,
                       int action_dim, double action_max, uint64_t seed)
    : opt_(opt),
      layout_(layout),
      action_dim_(action_dim),
      action_max_(action_max),
      seed_(seed),
      actor_opt_(opt.actor_lr),
      q1_opt_(opt.critic_lr),
      q2_opt_(opt.critic_lr),
      noise_rng_(substream_seed(seed, "td3-noise")) {
    const int sdim = layout_.total();
    const int h = opt_.hidden;

    MlpConfig actor_cfg;
    actor_cfg.layer_dims = {sdim, h, h, action_dim_};
    actor_cfg.output = Activation::ScaledSigmoid;
    actor_cfg.output_scale = action_max_;
    {
        Rng rng(substream_seed(seed, "init-td3-actor"));
        actor_ = Mlp(actor_cfg, rng);
        actor_target_ = TargetCopy(actor_, opt_.tau);
    }
    MlpConfig critic_cfg;
    critic_cfg.layer_dims = {sdim + action_dim_, h, h, 1};
    {
        Rng rng(substream_seed(seed, "init-td3-q1"));
        q1_ = Mlp(critic_cfg, rng);
        q1_target_ = TargetCopy(q1_, opt_.tau);
    }
    {
        Rng rng(substream_seed(seed, "init-td3-q2"));
        q2_ = Mlp(critic_cfg, rng);
        q2_target_ = TargetCopy(q2_, opt_.tau);
    }
}

ActionVector Td3Trainer::act(const UserState& state, UserGroup, bool explore,
                             Rng& rng) {
    Vec x(state.dim());
    state.flatten_into(x.data());
    const Vec mu = actor_.forward1(x);
    const double noise_std = opt_.explore_noise_frac * action_max_;

    ActionVector a;
    a.values.resize(action_dim_);
    a.behavior_mu.resize(action_dim_);
    a.behavior_sigma.resize(action_dim_);
    for (int i = 0; i < action_dim_; ++i) {
        a.behavior_mu[i] = mu(i);
        a.behavior_sigma[i] = std::max(noise_std, 1e-3);
        double v = mu(i);
        if (explore) v = std::clamp(v + rng.normal(0.0, noise_std), 0.0, action_max_);
        a.values[i] = v;
    }
    return a;
}

RetentionRewardFn Td3Trainer::retention_reward_fn() {
    return [](const SessionFeatures&, double gap) { return gap; };
}

LossRow Td3Trainer::train_step(ReplayBuffer& buffer) {
    const size_t need =
        std::max<size_t>(opt_.min_fill, static_cast<size_t>(opt_.batch_size));
    if (buffer.size() < need)
        throw std::logic_error("train_step called before the buffer is warm");

    const auto raw = buffer.sample_batch(
        opt_.batch_size,
        substream_seed(seed_, "batch", static_cast<uint64_t>(step_)));
    try {
        return train_step_on(raw);
    } catch (const std::runtime_error& err) {
        throw GradientBlowupError(err.what(), raw);
    }
}

LossRow Td3Trainer::train_step_on(const std::vector<TransitionSample>& raw) {
    const AssembledBatch b = assemble_batch(raw, layout_);
    const int B = b.size();

    LossRow row;
    row.step = step_;

    const Vec target =
        td3_targets(q1_target_.net(), opt_.twin ? &q2_target_.net() : nullptr,
                    actor_target_.net(), b, opt_, action_max_, noise_rng_);

    const Mat x = [&] {
        Mat m(B, b.states.cols() + b.actions.cols());
        m << b.states, b.actions;
        return m;
    }();
    {
        MlpCache cache;
        const Vec pred = q1_.forward(x, cache).col(0);
        const Vec diff = pred - target;
        row.loss_t = diff.squaredNorm() / B;
        Mat dY = (2.0 / B) * diff;
        MlpGrads grads;
        q1_.backward(cache, dY, grads);
        q1_opt_.step(q1_, grads);
    }
    if (opt_.twin) {
        MlpCache cache;
        const Vec pred = q2_.forward(x, cache).col(0);
        const Vec diff = pred - target;
        row.loss_i = diff.squaredNorm() / B;
        Mat dY = (2.0 / B) * diff;
        MlpGrads grads;
        q2_.backward(cache, dY, grads);
        q2_opt_.step(q2_, grads);
    }

    if (step_ % opt_.policy_delay == 0) {
        MlpCache actor_cache;
        const Mat mu = actor_.forward(b.states, actor_cache);
        MlpCache q_cache;
        Mat xa(B, b.states.cols() + mu.cols());
        xa << b.states, mu;
        const Vec q = q1_.forward(xa, q_cache).col(0);
        row.actor_loss_high = -q.mean();
        Mat dQ = Mat::Constant(B, 1, -1.0 / B);
        const Mat dIn = q1_.input_gradient(q_cache, dQ);
        const Mat dMu = dIn.rightCols(action_dim_);
        MlpGrads grads;
        actor_.backward(actor_cache, dMu, grads);
        actor_opt_.step(actor_, grads);

        actor_target_.soft_update(actor_);
        q1_target_.soft_update(q1_);
        q2_target_.soft_update(q2_);
    }

    ++step_;
    return row;
}

Checkpoint Td3Trainer::checkpoint() const {
    Checkpoint ck;
    ck.add("actor", actor_);
    ck.add("actor_target", actor_target_.net());
    ck.add("q1", q1_);
    ck.add("q1_target", q1_target_.net());
    ck.add("q2", q2_);
    ck.add("q2_target", q2_target_.net());
    return ck;
}

}  // namespace retention
