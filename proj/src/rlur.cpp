#include "retention/rlur.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace retention {

void RlurHyper::validate() const {
    // gamma = 0 is admitted for the myopic naive variant; 1 would diverge
    if (!(gamma >= 0.0 && gamma < 1.0))
        throw std::invalid_argument("gamma must be in [0,1)");
    if (lambda_t < 0.0 || lambda_i < 0.0)
        throw std::invalid_argument("critic weights must be nonnegative");
    if (!(beta_percentile > 0.0 && beta_percentile < 100.0))
        throw std::invalid_argument("beta percentile must be in (0,100)");
    if (!(alpha_clip > 0.0))
        throw std::invalid_argument("alpha must be positive");
    if (reg_lambda < 0.0)
        throw std::invalid_argument("regularization coefficient must be >= 0");
}

double percentile_nearest_rank(std::vector<double> values, double beta) {
    if (values.empty())
        throw std::invalid_argument("percentile of an empty list");
    if (!(beta > 0.0 && beta <= 100.0))
        throw std::invalid_argument("percentile beta out of range");
    std::sort(values.begin(), values.end());
    const size_t n = values.size();
    size_t rank = static_cast<size_t>(std::ceil(beta / 100.0 * n));
    rank = std::clamp<size_t>(rank, 1, n);
    return values[rank - 1];
}

double normalized_retention_reward(double returning_time, double t_prime,
                                   double t_beta, double alpha) {
    if (!(t_beta > 0.0))
        throw std::invalid_argument("normalized_retention_reward: T_beta <= 0");
    const double denom =
        std::max((1.0 - t_prime) * t_beta, 1e-6 * t_beta);
    const double r = returning_time / denom;
    return std::clamp(r, 0.0, alpha);
}

double binary_cross_entropy(double prediction, double label) {
    const double p = std::clamp(prediction, 1e-6, 1.0 - 1e-6);
    return -(label * std::log(p) + (1.0 - label) * std::log(1.0 - p));
}

double soft_regularization_weight(double log_p, double log_pb, double lambda,
                                  SoftRegDirection dir) {
    const double gap = lambda * (log_p - log_pb);
    double m = std::max(gap, 0.0);
    m = std::min(m, 50.0);  // overflow guard; keeps w monotone
    return dir == SoftRegDirection::AsWritten ? std::exp(m) : std::exp(-m);
}

AssembledBatch assemble_batch(const std::vector<TransitionSample>& batch,
                              const StateLayout& layout) {
    if (batch.empty()) throw std::invalid_argument("assemble_batch: empty batch");
    const int B = static_cast<int>(batch.size());
    const int sdim = batch.front().state.dim();
    const int adim = static_cast<int>(batch.front().action.values.size());

    AssembledBatch out;
    out.states.resize(B, sdim);
    out.actions.resize(B, adim);
    out.next_states.resize(B, sdim);
    out.history.resize(B, layout.history);
    out.immediate.resize(B);
    out.retention.resize(B);
    out.gamma_it.resize(B);
    out.bootstrap_mask.resize(B);
    out.behavior_mu.resize(B, adim);
    out.behavior_sigma.resize(B, adim);
    out.groups.resize(B);

    std::vector<double> flat(sdim);
    for (int i = 0; i < B; ++i) {
        const TransitionSample& t = batch[i];
        t.state.flatten_into(flat.data());
        for (int j = 0; j < sdim; ++j) out.states(i, j) = flat[j];
        t.next_state.flatten_into(flat.data());
        for (int j = 0; j < sdim; ++j) out.next_states(i, j) = flat[j];
        for (int j = 0; j < adim; ++j) {
            out.actions(i, j) = t.action.values[j];
            out.behavior_mu(i, j) = t.action.behavior_mu[j];
            out.behavior_sigma(i, j) = t.action.behavior_sigma[j];
        }
        for (int j = 0; j < layout.history; ++j)
            out.history(i, j) = out.states(i, layout.profile + j);
        out.immediate(i) = t.immediate_reward;
        out.retention(i) = t.retention_reward;
        out.gamma_it(i) = t.gamma_it;
        out.bootstrap_mask(i) = t.episode_end ? 0.0 : 1.0;
        out.groups[i] = t.user_group;
    }
    return out;
}

namespace {

Mat hcat(const Mat& a, const Mat& b) {
    Mat out(a.rows(), a.cols() + b.cols());
    out << a, b;
    return out;
}

}  // namespace

Vec retention_td_targets(const Mlp& q_target, const AssembledBatch& b,
                         const BootstrapActions& next_actions) {
    const Mat a_next = next_actions(b.next_states, b.groups);
    const Mat q_next = q_target.forward(hcat(b.next_states, a_next));
    return b.retention.array() +
           b.gamma_it.array() * b.bootstrap_mask.array() *
               q_next.col(0).array();
}

double retention_td_step(Mlp& q, const Mlp& q_target, Adam& opt,
                         const AssembledBatch& b,
                         const BootstrapActions& next_actions) {
    const Vec target = retention_td_targets(q_target, b, next_actions);
    MlpCache cache;
    const Mat pred = q.forward(hcat(b.states, b.actions), cache);
    const Vec diff = pred.col(0) - target;
    const double loss = diff.squaredNorm() / b.size();
    Mat dY = (2.0 / b.size()) * diff;
    MlpGrads grads;
    q.backward(cache, dY, grads);
    opt.step(q, grads);
    return loss;
}

Vec immediate_td_targets(const Mlp& q_target, const AssembledBatch& b,
                         const Vec& intrinsic, double gamma,
                         const BootstrapActions& next_actions) {
    const Mat a_next = next_actions(b.next_states, b.groups);
    const Mat q_next = q_target.forward(hcat(b.next_states, a_next));
    return (b.immediate + intrinsic).array() +
           gamma * b.bootstrap_mask.array() * q_next.col(0).array();
}

double immediate_td_step(Mlp& q, const Mlp& q_target, Adam& opt,
                         const AssembledBatch& b, const Vec& intrinsic,
                         double gamma, const BootstrapActions& next_actions) {
    const Vec target = immediate_td_targets(q_target, b, intrinsic, gamma,
                                            next_actions);
    MlpCache cache;
    const Mat pred = q.forward(hcat(b.states, b.actions), cache);
    const Vec diff = pred.col(0) - target;
    const double loss = diff.squaredNorm() / b.size();
    Mat dY = (2.0 / b.size()) * diff;
    MlpGrads grads;
    q.backward(cache, dY, grads);
    opt.step(q, grads);
    return loss;
}

Vec rnd_intrinsic(const RndPair& rnd, const Mat& history) {
    const Mat diff = rnd.trainable.forward(history) - rnd.fixed.forward(history);
    return diff.rowwise().squaredNorm();
}

double rnd_update(RndPair& rnd, Adam& opt, const Mat& history) {
    MlpCache cache;
    const Mat e_train = rnd.trainable.forward(history, cache);
    const Mat e_fixed = rnd.fixed.forward(history);
    const Mat diff = e_train - e_fixed;
    const double loss = diff.squaredNorm() / history.rows();
    const Mat dY = (2.0 / history.rows()) * diff;
    MlpGrads grads;
    rnd.trainable.backward(cache, dY, grads);
    opt.step(rnd.trainable, grads);
    return loss;
}

// ---- trainer ---------------------------------------------------------------

RlurTrainer::RlurTrainer(const RlurOptions& opt, const StateLayout& layout,
                         int action_dim, double action_max, uint64_t seed)
    : opt_(opt),
      layout_(layout),
      action_dim_(action_dim),
      action_max_(action_max),
      seed_(seed),
      actor_high_opt_(opt.actor_lr),
      actor_low_opt_(opt.actor_lr),
      q_t_opt_(opt.critic_lr),
      cls_rng_(substream_seed(seed, "classifier-batch")) {
    opt_.hyper.validate();
    if (action_dim_ < 1) throw std::invalid_argument("action_dim must be >= 1");
    if (!(action_max_ > 0.0))
        throw std::invalid_argument("action_max must be positive");

    const int sdim = layout_.total();
    const int h = opt_.hidden;

    MlpConfig actor_cfg;
    actor_cfg.layer_dims = {sdim, h, h, 2 * action_dim_};
    actor_cfg.output = Activation::MeanSigma;
    actor_cfg.output_scale = action_max_;
    actor_cfg.softplus_floor = opt_.sigma_floor;
    {
        Rng rng(substream_seed(seed, "init-actor-high"));
        actor_high_ = Mlp(actor_cfg, rng);
    }
    if (opt_.dual_policy) {
        Rng rng(substream_seed(seed, "init-actor-low"));
        actor_low_ = Mlp(actor_cfg, rng);
    }

    MlpConfig critic_cfg;
    critic_cfg.layer_dims = {sdim + action_dim_, h, h, 1};
    {
        Rng rng(substream_seed(seed, "init-q-t"));
        q_t_ = Mlp(critic_cfg, rng);
        q_t_target_ = TargetCopy(q_t_, opt_.tau);
    }

    if (opt_.immediate_critic) {
        Rng rng(substream_seed(seed, "init-q-i"));
        q_i_ = Mlp(critic_cfg, rng);
        q_i_target_ = TargetCopy(*q_i_, opt_.tau);
        q_i_opt_ = Adam(opt_.critic_lr);

        MlpConfig rnd_cfg;
        rnd_cfg.layer_dims = {layout_.history, h, h, opt_.rnd_embed_dim};
        rnd_cfg.init_output_scale = 0.15;  // embedding distances start small
        Rng rng_t(substream_seed(seed, "init-rnd-trainable"));
        Rng rng_f(substream_seed(seed, "init-rnd-fixed"));
        rnd_ = RndPair{Mlp(rnd_cfg, rng_t), Mlp(rnd_cfg, rng_f)};
        rnd_opt_ = Adam(opt_.critic_lr);
    }

    if (opt_.reward_normalization) {
        MlpConfig cls_cfg;
        cls_cfg.layer_dims = {SessionFeatures::flat_dim(layout_.profile), h, h, 1};
        cls_cfg.output = Activation::Sigmoid;
        Rng rng(substream_seed(seed, "init-classifier"));
        classifier_ = Mlp(cls_cfg, rng);
        classifier_opt_ = Adam(opt_.critic_lr);
    }
}

const Mlp& RlurTrainer::actor(UserGroup g) const {
    if (opt_.dual_policy && g == UserGroup::LowActive) return actor_low_;
    return actor_high_;
}

Mlp& RlurTrainer::mutable_actor(UserGroup g) {
    if (opt_.dual_policy && g == UserGroup::LowActive) return actor_low_;
    return actor_high_;
}

const Mlp* RlurTrainer::immediate_critic() const {
    return q_i_ ? &*q_i_ : nullptr;
}
const RndPair* RlurTrainer::rnd() const { return rnd_ ? &*rnd_ : nullptr; }
const Mlp* RlurTrainer::classifier() const {
    return classifier_ ? &*classifier_ : nullptr;
}

ActionVector RlurTrainer::act(const UserState& state, UserGroup group,
                              bool explore, Rng& rng) {
    Vec x(state.dim());
    state.flatten_into(x.data());
    const Vec out = actor(group).forward1(x);

    ActionVector a;
    a.values.resize(action_dim_);
    a.behavior_mu.resize(action_dim_);
    a.behavior_sigma.resize(action_dim_);
    for (int i = 0; i < action_dim_; ++i) {
        const double mu = out(i);
        const double sigma = out(action_dim_ + i);
        a.behavior_mu[i] = mu;
        a.behavior_sigma[i] = sigma;
        double v = mu;
        if (explore) v = std::clamp(rng.normal(mu, sigma), 0.0, action_max_);
        a.values[i] = v;
    }
    return a;
}

RetentionRewardFn RlurTrainer::retention_reward_fn() {
    return [this](const SessionFeatures& f, double gap) {
        return on_session_close(f, gap);
    };
}

double RlurTrainer::on_session_close(const SessionFeatures& features,
                                     double gap) {
    session_window_.emplace_back(features.flat(), gap);
    while (session_window_.size() > static_cast<size_t>(opt_.t_beta_window))
        session_window_.pop_front();
    ++closes_;

    const bool refresh =
        closes_ <= opt_.t_beta_first_refresh ||
        (closes_ - opt_.t_beta_first_refresh) % opt_.t_beta_refresh_every == 0;
    if (refresh) {
        std::vector<double> gaps;
        gaps.reserve(session_window_.size());
        for (const auto& [_, g] : session_window_) gaps.push_back(g);
        t_beta_ = percentile_nearest_rank(std::move(gaps),
                                          opt_.hyper.beta_percentile);
    }

    if (!opt_.reward_normalization) return gap;

    Vec x = Eigen::Map<const Vec>(session_window_.back().first.data(),
                                  session_window_.back().first.size());
    const double t_prime = classifier_->forward1(x)(0);
    return normalized_retention_reward(gap, t_prime, t_beta_,
                                       opt_.hyper.alpha_clip);
}

BootstrapActions RlurTrainer::bootstrap_actions() const {
    return [this](const Mat& next_states, const std::vector<UserGroup>& groups) {
        Mat actions(next_states.rows(), action_dim_);
        for (int pass = 0; pass < 2; ++pass) {
            const UserGroup g =
                pass == 0 ? UserGroup::HighActive : UserGroup::LowActive;
            std::vector<int> rows;
            for (int i = 0; i < next_states.rows(); ++i)
                if (groups[i] == g) rows.push_back(i);
            if (rows.empty()) continue;
            Mat sub(rows.size(), next_states.cols());
            for (size_t r = 0; r < rows.size(); ++r)
                sub.row(r) = next_states.row(rows[r]);
            const Mat out = actor(g).forward(sub);
            for (size_t r = 0; r < rows.size(); ++r)
                actions.row(rows[r]) = out.row(r).head(action_dim_);
        }
        return actions;
    };
}

RlurTrainer::ActorStepResult RlurTrainer::actor_step(
    Mlp& actor_net, Adam& opt, const AssembledBatch& b,
    const std::vector<int>& rows) {
    ActorStepResult res;
    if (rows.empty()) {
        res.skipped = true;
        return res;
    }
    const int n = action_dim_;
    const int B = static_cast<int>(rows.size());

    Mat states(B, b.states.cols());
    Mat actions(B, n), mu_b(B, n), sigma_b(B, n);
    for (int r = 0; r < B; ++r) {
        states.row(r) = b.states.row(rows[r]);
        actions.row(r) = b.actions.row(rows[r]);
        mu_b.row(r) = b.behavior_mu.row(rows[r]);
        sigma_b.row(r) = b.behavior_sigma.row(rows[r]);
    }

    MlpCache actor_cache;
    const Mat out = actor_net.forward(states, actor_cache);
    const Mat mu = out.leftCols(n);
    const Mat sigma = out.rightCols(n);

    // per-sample soft-regularization weight; stop-gradient by construction
    Vec w(B);
    for (int r = 0; r < B; ++r) {
        double log_p = 0.0, log_pb = 0.0;
        for (int j = 0; j < n; ++j) {
            const double zp = (actions(r, j) - mu(r, j)) / sigma(r, j);
            log_p += -0.5 * std::log(2.0 * M_PI) - std::log(sigma(r, j)) -
                     0.5 * zp * zp;
            const double zb = (actions(r, j) - mu_b(r, j)) / sigma_b(r, j);
            log_pb += -0.5 * std::log(2.0 * M_PI) - std::log(sigma_b(r, j)) -
                      0.5 * zb * zb;
        }
        w(r) = soft_regularization_weight(log_p, log_pb, opt_.hyper.reg_lambda,
                                          opt_.soft_reg_direction);
    }

    // L = mean_i w_i (lambda_T Q_T(s, mu) - lambda_I Q_I(s, mu)); critics
    // frozen, gradients reach the actor through the critics' action input
    MlpCache qt_cache;
    const Mat qt = q_t_.forward(hcat(states, mu), qt_cache);
    Mat d_mu = Mat::Zero(B, n);
    double loss = 0.0;
    {
        Mat dQ = Mat::Zero(B, 1);
        for (int r = 0; r < B; ++r)
            dQ(r, 0) = w(r) * opt_.hyper.lambda_t / B;
        const Mat dIn = q_t_.input_gradient(qt_cache, dQ);
        d_mu += dIn.rightCols(n);
        for (int r = 0; r < B; ++r)
            loss += w(r) * opt_.hyper.lambda_t * qt(r, 0);
    }
    if (q_i_) {
        MlpCache qi_cache;
        const Mat qi = q_i_->forward(hcat(states, mu), qi_cache);
        Mat dQ = Mat::Zero(B, 1);
        for (int r = 0; r < B; ++r)
            dQ(r, 0) = -w(r) * opt_.hyper.lambda_i / B;
        const Mat dIn = q_i_->input_gradient(qi_cache, dQ);
        d_mu += dIn.rightCols(n);
        for (int r = 0; r < B; ++r)
            loss -= w(r) * opt_.hyper.lambda_i * qi(r, 0);
    }
    loss /= B;

    Mat dOut = Mat::Zero(B, 2 * n);
    dOut.leftCols(n) = d_mu;  // sigma head carries no actor-loss gradient
    MlpGrads grads;
    actor_net.backward(actor_cache, dOut, grads);
    opt.step(actor_net, grads);

    res.loss = loss;
    res.mean_w = w.mean();
    return res;
}

LossRow RlurTrainer::train_step(ReplayBuffer& buffer) {
    const size_t need =
        std::max<size_t>(opt_.min_fill, static_cast<size_t>(opt_.batch_size));
    if (buffer.size() < need)
        throw std::logic_error("train_step called before the buffer is warm");

    const auto batch = buffer.sample_batch(
        opt_.batch_size,
        substream_seed(seed_, "batch", static_cast<uint64_t>(step_)));
    try {
        return train_step_on(batch);
    } catch (const std::runtime_error& err) {
        throw GradientBlowupError(err.what(), batch);
    }
}

LossRow RlurTrainer::train_step_on(const std::vector<TransitionSample>& batch) {
    LossRow row;
    row.step = step_;

    // fixed update order: classifier, RND, retention critic, immediate
    // critic, actor per group, target tracking
    if (classifier_ && !session_window_.empty()) {
        const int Bc = static_cast<int>(std::min<size_t>(
            opt_.classifier_batch, session_window_.size()));
        std::vector<size_t> idx(session_window_.size());
        std::iota(idx.begin(), idx.end(), size_t{0});
        for (int i = 0; i < Bc; ++i) {
            const size_t j = i + cls_rng_.uniform_index(idx.size() - i);
            std::swap(idx[i], idx[j]);
        }
        const int dim = static_cast<int>(session_window_.front().first.size());
        Mat x(Bc, dim);
        Vec y(Bc);
        for (int i = 0; i < Bc; ++i) {
            const auto& [features, gap] = session_window_[idx[i]];
            for (int j = 0; j < dim; ++j) x(i, j) = features[j];
            y(i) = gap < t_beta_ ? 1.0 : 0.0;
        }
        MlpCache cache;
        const Mat p = classifier_->forward(x, cache);
        double loss = 0.0;
        Mat dY(Bc, 1);
        for (int i = 0; i < Bc; ++i) {
            const double pi = std::clamp(p(i, 0), 1e-9, 1.0 - 1e-9);
            loss += binary_cross_entropy(p(i, 0), y(i));
            dY(i, 0) = (pi - y(i)) / (pi * (1.0 - pi)) / Bc;
        }
        MlpGrads grads;
        classifier_->backward(cache, dY, grads);
        classifier_opt_->step(*classifier_, grads);
        row.loss_cls = loss / Bc;
    }

    const AssembledBatch b = assemble_batch(batch, layout_);

    if (rnd_) row.loss_rnd = rnd_update(*rnd_, *rnd_opt_, b.history);

    const BootstrapActions pi = bootstrap_actions();
    row.loss_t = retention_td_step(q_t_, q_t_target_.net(), q_t_opt_, b, pi);

    if (q_i_) {
        const Vec intrinsic = rnd_intrinsic(*rnd_, b.history);
        row.loss_i = immediate_td_step(*q_i_, q_i_target_->net(), *q_i_opt_, b,
                                       intrinsic, opt_.hyper.gamma, pi);
    }

    if (step_ >= opt_.actor_warmup_steps) {
        std::vector<int> rows_high, rows_low;
        for (int i = 0; i < b.size(); ++i) {
            if (!opt_.dual_policy || b.groups[i] == UserGroup::HighActive)
                rows_high.push_back(i);
            else
                rows_low.push_back(i);
        }
        double w_sum = 0.0;
        int w_count = 0;
        {
            const auto res =
                actor_step(actor_high_, actor_high_opt_, b, rows_high);
            if (res.skipped) {
                ++empty_group_warnings_;
            } else {
                row.actor_loss_high = res.loss;
                w_sum += res.mean_w * rows_high.size();
                w_count += static_cast<int>(rows_high.size());
            }
        }
        if (opt_.dual_policy) {
            const auto res = actor_step(actor_low_, actor_low_opt_, b, rows_low);
            if (res.skipped) {
                ++empty_group_warnings_;
            } else {
                row.actor_loss_low = res.loss;
                w_sum += res.mean_w * rows_low.size();
                w_count += static_cast<int>(rows_low.size());
            }
        }
        row.mean_w = w_count ? w_sum / w_count : 1.0;
    }

    q_t_target_.soft_update(q_t_);
    if (q_i_target_) q_i_target_->soft_update(*q_i_);

    ++step_;
    return row;
}

Checkpoint RlurTrainer::checkpoint() const {
    Checkpoint ck;
    ck.add("actor_high", actor_high_);
    if (opt_.dual_policy) ck.add("actor_low", actor_low_);
    ck.add("q_t", q_t_);
    ck.add("q_t_target", q_t_target_.net());
    if (q_i_) {
        ck.add("q_i", *q_i_);
        ck.add("q_i_target", q_i_target_->net());
        ck.add("rnd_trainable", rnd_->trainable);
        ck.add("rnd_fixed", rnd_->fixed);
    }
    if (classifier_) ck.add("classifier", *classifier_);
    return ck;
}

namespace {

void restore_net(const Checkpoint& ck, const std::string& name, Mlp& into) {
    const Mlp& loaded = ck.get(name);
    if (loaded.config().layer_dims != into.config().layer_dims)
        throw std::invalid_argument("checkpoint entry " + name +
                                    " has mismatched dimensions");
    into = loaded;
}

}  // namespace

void RlurTrainer::restore(const Checkpoint& ck) {
    restore_net(ck, "actor_high", actor_high_);
    if (opt_.dual_policy) restore_net(ck, "actor_low", actor_low_);
    restore_net(ck, "q_t", q_t_);
    {
        Mlp shadow = q_t_;
        restore_net(ck, "q_t_target", shadow);
        q_t_target_ = TargetCopy(shadow, opt_.tau);
    }
    if (q_i_) {
        restore_net(ck, "q_i", *q_i_);
        Mlp shadow = *q_i_;
        restore_net(ck, "q_i_target", shadow);
        q_i_target_ = TargetCopy(shadow, opt_.tau);
        restore_net(ck, "rnd_trainable", rnd_->trainable);
        restore_net(ck, "rnd_fixed", rnd_->fixed);
    }
    if (classifier_) restore_net(ck, "classifier", *classifier_);
}

std::unique_ptr<RlurTrainer> make_rlur_naive(double gamma,
                                             const RlurOptions& base,
                                             const StateLayout& layout,
                                             int action_dim, double action_max,
                                             uint64_t seed) {
    RlurOptions opt = base;
    opt.hyper.gamma = gamma;
    opt.hyper.reg_lambda = 0.0;  // no regularization
    opt.reward_normalization = false;
    opt.dual_policy = false;
    opt.immediate_critic = false;
    return std::make_unique<RlurTrainer>(opt, layout, action_dim, action_max,
                                         seed);
}

}  // namespace retention
