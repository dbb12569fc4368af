#ifndef RETENTION_BASELINES_HPP
#define RETENTION_BASELINES_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "retention/rlur.hpp"

namespace retention {

// ---- Cross-Entropy Method over a constant ranking weight ----------------

struct CemOptions {
    int population = 32;           // P
    double elite_fraction = 0.25;  // rho
    double smoothing = 0.8;        // eta
    double stddev_floor = 1e-3;
    double init_stddev_fraction = 0.5;  // of the action range C
};

struct CemState {
    std::vector<double> mean;
    std::vector<double> stddev;
    int iteration = 0;
};

class CemTrainer : public Trainer {
  public:
    CemTrainer(const CemOptions& opt, int action_dim, double action_max,
               uint64_t seed);

    // fitness of one constant-action policy (harness: negative averaged
    // returning day over a fixed-seed evaluation episode)
    using EvaluateFn = std::function<double(const std::vector<double>& action)>;

    void iterate(const EvaluateFn& evaluate);

    ActionVector act(const UserState& state, UserGroup group, bool explore,
                     Rng& rng) override;
    RetentionRewardFn retention_reward_fn() override;
    LossRow train_step(ReplayBuffer& buffer) override;
    Checkpoint checkpoint() const override { return Checkpoint{}; }
    bool uses_replay() const override { return false; }

    const CemState& state() const { return state_; }
    void save_state(const std::string& path) const;

  private:
    CemOptions opt_;
    CemState state_;
    int action_dim_;
    double action_max_;
    Rng rng_;
};

// ---- TD3 ------------------------------------------------------------------

struct Td3Options {
    double gamma = 0.95;
    double actor_lr = 1e-4;
    double critic_lr = 1e-3;
    double tau = 0.005;
    int hidden = 64;
    bool twin = true;               // false degenerates to DDPG targets
    double policy_noise_frac = 0.2; // stddev of smoothing noise, fraction of C
    double noise_clip_frac = 0.5;   // clip of smoothing noise, fraction of C
    int policy_delay = 2;
    double explore_noise_frac = 0.1;
    int batch_size = 256;
    int min_fill = 5000;
    int train_every = 8;
};

// Clipped-double-Q targets with target-policy smoothing. `q2_target` may be
// null (single-critic / DDPG degenerate). Reward per sample is the
// immediate reward minus the terminal returning-time cost.
Vec td3_targets(const Mlp& q1_target, const Mlp* q2_target,
                const Mlp& actor_target, const AssembledBatch& b,
                const Td3Options& opt, double action_max, Rng& noise_rng);

class Td3Trainer : public Trainer {
  public:
    Td3Trainer(const Td3Options& opt, const StateLayout& layout, int action_dim,
               double action_max, uint64_t seed);

    ActionVector act(const UserState& state, UserGroup group, bool explore,
                     Rng& rng) override;
    RetentionRewardFn retention_reward_fn() override;
    LossRow train_step(ReplayBuffer& buffer) override;
    Checkpoint checkpoint() const override;

    const Mlp& actor() const { return actor_; }
    const Mlp& critic1() const { return q1_; }
    const Mlp& critic2() const { return q2_; }
    const Td3Options& options() const { return opt_; }

  private:
    LossRow train_step_on(const std::vector<TransitionSample>& raw);

    Td3Options opt_;
    StateLayout layout_;
    int action_dim_;
    double action_max_;
    uint64_t seed_;

    Mlp actor_, q1_, q2_;
    TargetCopy actor_target_, q1_target_, q2_target_;
    Adam actor_opt_, q1_opt_, q2_opt_;
    Rng noise_rng_;
    int64_t step_ = 0;
};

}  // namespace retention

#endif
