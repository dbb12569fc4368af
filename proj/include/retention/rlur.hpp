#ifndef RETENTION_RLUR_HPP
#define RETENTION_RLUR_HPP

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "retention/approx.hpp"
#include "retention/core.hpp"

namespace retention {

// Slice layout of the flattened UserState, shared by trainers so the RND
// embedder can address the behavior-history block.
struct StateLayout {
    int profile = 7;
    int history = 6;
    int context = 2;
    int candidate_summary = 16;
    int total() const { return profile + history + context + candidate_summary; }
};

struct RlurHyper {
    double gamma = 0.95;
    double lambda_t = 1.0;         // retention critic weight in the actor loss
    double lambda_i = 1.0;         // immediate critic weight
    double beta_percentile = 60.0; // labeling percentile for the classifier
    double alpha_clip = 3.0;       // upper bound of the normalized reward
    double reg_lambda = 1.5;       // soft regularization coefficient

    void validate() const;  // throws std::invalid_argument
};

// The soft-regularization weight as written up-weights samples the current
// policy makes more likely than the behavior policy did; `Inverse` flips
// the exponent sign to match the prose intuition instead. Kept as a switch.
enum class SoftRegDirection { AsWritten, Inverse };

struct RlurOptions {
    RlurHyper hyper;
    bool reward_normalization = true;  // off = raw returning time as reward
    bool dual_policy = true;           // one actor per activity group
    bool immediate_critic = true;      // Q_I plus the RND pair
    SoftRegDirection soft_reg_direction = SoftRegDirection::AsWritten;

    int hidden = 64;  // two hidden layers of this width everywhere
    int rnd_embed_dim = 8;
    double actor_lr = 1e-4;
    double critic_lr = 1e-3;
    double tau = 0.005;
    double sigma_floor = 1e-3;
    int batch_size = 256;
    int min_fill = 5000;
    int train_every = 8;
    // critic-only phase before actor updates begin; early actor steps
    // against unconverged critics destabilize the raw-reward variants and
    // inflate the off-policy density gap
    int actor_warmup_steps = 1500;

    // T_beta bookkeeping: refreshed on every close until the first refresh
    // mark, then every refresh interval, over a sliding window
    int t_beta_first_refresh = 100;
    int t_beta_refresh_every = 1000;
    int t_beta_window = 10000;
    int classifier_batch = 128;
};

// ---- pure pieces (unit-tested directly, reused by the toy check) --------

// Nearest-rank percentile: smallest value whose cumulative fraction is at
// least beta/100. Throws on an empty list.
double percentile_nearest_rank(std::vector<double> values, double beta);

// clip{0, T / ((1 - T') * T_beta), alpha}; the denominator is floored at
// 1e-6 * T_beta to cover T' -> 1.
double normalized_retention_reward(double returning_time, double t_prime,
                                   double t_beta, double alpha);

// Binary cross-entropy with the prediction clamped to [1e-6, 1-1e-6].
double binary_cross_entropy(double prediction, double label);

// exp(max{lambda * (log_p - log_pb), 0}), or the inverse direction.
double soft_regularization_weight(double log_p, double log_pb, double lambda,
                                  SoftRegDirection dir = SoftRegDirection::AsWritten);

// ---- batch machinery -----------------------------------------------------

// Replay batch rearranged into matrices for batched net passes.
struct AssembledBatch {
    Mat states;          // B x state_dim
    Mat actions;         // B x n
    Mat next_states;     // B x state_dim
    Mat history;         // B x layout.history (RND input, from `states`)
    Vec immediate;       // B
    Vec retention;       // B
    Vec gamma_it;        // B
    Vec bootstrap_mask;  // B; 0 where the episode ended with the sample
    Mat behavior_mu;     // B x n
    Mat behavior_sigma;  // B x n
    std::vector<UserGroup> groups;
    int size() const { return static_cast<int>(states.rows()); }
};

AssembledBatch assemble_batch(const std::vector<TransitionSample>& batch,
                              const StateLayout& layout);

// Mean actions of the bootstrap policy at a batch of next states, row i
// produced by the actor owning groups[i].
using BootstrapActions =
    std::function<Mat(const Mat& next_states, const std::vector<UserGroup>& groups)>;

// TD targets of the retention critic: retention_reward + gamma_it *
// Q_target(s', pi(s')) with the bootstrap masked out on episode-end
// samples. gamma_it comes from each sample (1 or gamma), never a constant.
Vec retention_td_targets(const Mlp& q_target, const AssembledBatch& b,
                         const BootstrapActions& next_actions);

// One mean-squared TD regression step on the retention critic. Shared by
// the full trainer, the naive variants, and the toy-MDP check.
double retention_td_step(Mlp& q, const Mlp& q_target, Adam& opt,
                         const AssembledBatch& b,
                         const BootstrapActions& next_actions);

// Immediate-critic analog: target = (immediate + intrinsic) + gamma *
// Q_target(s', pi(s')), uniform gamma on every sample, bootstrapping
// through session ends (masked only at horizon cuts).
Vec immediate_td_targets(const Mlp& q_target, const AssembledBatch& b,
                         const Vec& intrinsic, double gamma,
                         const BootstrapActions& next_actions);
double immediate_td_step(Mlp& q, const Mlp& q_target, Adam& opt,
                         const AssembledBatch& b, const Vec& intrinsic,
                         double gamma, const BootstrapActions& next_actions);

// Random-network-distillation pair over the behavior-history block.
struct RndPair {
    Mlp trainable;
    Mlp fixed;  // never updated after initialization
};

// Per-row squared distance between the two embeddings.
Vec rnd_intrinsic(const RndPair& rnd, const Mat& history);
// Descends the mean squared embedding distance on the trainable net only.
double rnd_update(RndPair& rnd, Adam& opt, const Mat& history);

// ---- trainer interfaces ---------------------------------------------------

class Policy {
  public:
    virtual ~Policy() = default;
    virtual ActionVector act(const UserState& state, UserGroup group,
                             bool explore, Rng& rng) = 0;
};

// Raised when a training step produced a non-finite loss or gradient; the
// offending batch rides along so the run can serialize it before aborting.
struct GradientBlowupError : std::runtime_error {
    GradientBlowupError(const std::string& msg, std::vector<TransitionSample> b)
        : std::runtime_error(msg), batch(std::move(b)) {}
    std::vector<TransitionSample> batch;
};

struct LossRow {
    int64_t step = 0;
    double loss_t = 0.0;
    double loss_i = 0.0;
    double loss_cls = 0.0;
    double loss_rnd = 0.0;
    double actor_loss_high = 0.0;
    double actor_loss_low = 0.0;
    double mean_w = 1.0;
};

class Trainer : public Policy {
  public:
    // Installed into the replay buffer; invoked once per closed session.
    virtual RetentionRewardFn retention_reward_fn() = 0;
    virtual LossRow train_step(ReplayBuffer& buffer) = 0;
    virtual Checkpoint checkpoint() const = 0;
    virtual bool uses_replay() const { return true; }
};

class RlurTrainer : public Trainer {
  public:
    RlurTrainer(const RlurOptions& opt, const StateLayout& layout,
                int action_dim, double action_max, uint64_t seed);

    ActionVector act(const UserState& state, UserGroup group, bool explore,
                     Rng& rng) override;
    RetentionRewardFn retention_reward_fn() override;
    LossRow train_step(ReplayBuffer& buffer) override;
    Checkpoint checkpoint() const override;
    // replaces all networks from a checkpoint written by this wiring
    void restore(const Checkpoint& ck);

    // introspection (tests, logging)
    double t_beta() const { return t_beta_; }
    int64_t closed_sessions() const { return closes_; }
    int64_t steps_taken() const { return step_; }
    const Mlp& actor(UserGroup g) const;
    const Mlp& retention_critic() const { return q_t_; }
    const Mlp* immediate_critic() const;
    const RndPair* rnd() const;
    const Mlp* classifier() const;
    const RlurOptions& options() const { return opt_; }
    BootstrapActions bootstrap_actions() const;

    // group dispatch shared with act(): the actor serving a group
    Mlp& mutable_actor(UserGroup g);

  private:
    double on_session_close(const SessionFeatures& features, double gap);
    LossRow train_step_on(const std::vector<TransitionSample>& batch);
    struct ActorStepResult {
        double loss = 0.0;
        double mean_w = 1.0;
        bool skipped = false;
    };
    ActorStepResult actor_step(Mlp& actor, Adam& opt, const AssembledBatch& b,
                               const std::vector<int>& rows);

    RlurOptions opt_;
    StateLayout layout_;
    int action_dim_;
    double action_max_;
    uint64_t seed_;

    Mlp actor_high_, actor_low_;
    Adam actor_high_opt_, actor_low_opt_;
    Mlp q_t_;
    TargetCopy q_t_target_;
    Adam q_t_opt_;

    // present only with the immediate critic enabled
    std::optional<Mlp> q_i_;
    std::optional<TargetCopy> q_i_target_;
    std::optional<Adam> q_i_opt_;
    std::optional<RndPair> rnd_;
    std::optional<Adam> rnd_opt_;

    // present only with reward normalization enabled
    std::optional<Mlp> classifier_;
    std::optional<Adam> classifier_opt_;

    std::deque<std::pair<std::vector<double>, double>> session_window_;
    double t_beta_ = 0.0;
    int64_t closes_ = 0;
    int64_t step_ = 0;
    Rng cls_rng_;
    int64_t empty_group_warnings_ = 0;
};

// Trainer variant of the naive ablation: retention critic only, raw
// returning-time reward, one policy, no normalization, no RND, no
// immediate critic, no soft regularization.
std::unique_ptr<RlurTrainer> make_rlur_naive(double gamma, const RlurOptions& base,
                                             const StateLayout& layout,
                                             int action_dim, double action_max,
                                             uint64_t seed);

}  // namespace retention

#endif
