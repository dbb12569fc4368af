#ifndef RETENTION_APPROX_HPP
#define RETENTION_APPROX_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "retention/rng.hpp"

namespace retention {

using Mat = Eigen::MatrixXd;  // rows index the batch
using Vec = Eigen::VectorXd;

// Output-layer nonlinearities. Hidden layers are always rectifiers.
// MeanSigma is the two-headed actor output: the first half of the output
// vector passes through a sigmoid scaled to [0, scale] (action mean), the
// second half through softplus plus a floor (action stddev).
enum class Activation { Identity, Sigmoid, ScaledSigmoid, Softplus, MeanSigma };

struct MlpConfig {
    std::vector<int> layer_dims;  // [input, hidden..., output]
    Activation output = Activation::Identity;
    double output_scale = 1.0;   // ScaledSigmoid / MeanSigma mean range
    double softplus_floor = 0.0; // Softplus / MeanSigma sigma floor
    double init_output_scale = 1.0;  // multiplier on the output-layer init
};

// Per-layer parameter gradients, shaped like the network they came from.
struct MlpGrads {
    std::vector<Mat> W;
    std::vector<Vec> b;

    void set_zero();
    bool all_finite() const;
    void scale(double s);
};

// Forward-pass intermediates needed by the backward pass.
struct MlpCache {
    Mat input;
    std::vector<Mat> pre;   // pre-activations per layer
    std::vector<Mat> post;  // activations per layer (last = network output)
};

// Plain feedforward network with explicit analytic gradients. Batched
// forward/backward operate on row-major batches through Eigen products;
// differentiation is implemented here, not delegated.
class Mlp {
  public:
    Mlp() = default;
    Mlp(MlpConfig cfg, Rng& init_rng);

    int input_dim() const { return cfg_.layer_dims.front(); }
    int output_dim() const { return cfg_.layer_dims.back(); }
    const MlpConfig& config() const { return cfg_; }
    size_t layer_count() const { return W_.size(); }

    Mat forward(const Mat& X) const;
    Mat forward(const Mat& X, MlpCache& cache) const;
    Vec forward1(const Vec& x) const;

    // dY is dLoss/dOutput (batch x out). Accumulates parameter gradients
    // into `grads` (which is resized/zeroed if empty) and returns
    // dLoss/dInput (batch x in).
    Mat backward(const MlpCache& cache, const Mat& dY, MlpGrads& grads) const;

    // Input gradient only; parameter gradients are discarded. Used when a
    // frozen critic is differentiated with respect to its action input.
    Mat input_gradient(const MlpCache& cache, const Mat& dY) const;

    MlpGrads zero_grads() const;

    // Flat parameter view: weights first (row-major within each layer),
    // then biases, layer by layer. Used by the optimizer, checkpoints, and
    // finite-difference tests.
    size_t param_count() const;
    double get_param(size_t i) const;
    void set_param(size_t i, double v);
    double grad_at(const MlpGrads& g, size_t i) const;
    bool params_finite() const;

    std::vector<Mat>& weights() { return W_; }
    std::vector<Vec>& biases() { return b_; }
    const std::vector<Mat>& weights() const { return W_; }
    const std::vector<Vec>& biases() const { return b_; }

  private:
    Mat apply_output(const Mat& Z) const;
    Mat output_derivative(const Mat& Z) const;

    MlpConfig cfg_;
    std::vector<Mat> W_;  // out x in per layer
    std::vector<Vec> b_;
};

// Bias-corrected adaptive-moment optimizer over one network's parameters.
class Adam {
  public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // Applies one update in place. Throws on non-finite gradients
    // ("gradient blow-up") so the run can abort with diagnostics.
    void step(Mlp& net, const MlpGrads& grads);

    int64_t step_count() const { return t_; }
    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }

  private:
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::vector<Mat> mW_, vW_;
    std::vector<Vec> mb_, vb_;
};

// Shadow copy of a tracked network, blended toward the source by rate tau.
class TargetCopy {
  public:
    TargetCopy() = default;
    TargetCopy(const Mlp& source, double tau);

    void soft_update(const Mlp& source);
    const Mlp& net() const { return shadow_; }
    double tau() const { return tau_; }

  private:
    Mlp shadow_;
    double tau_ = 0.005;
};

// Sum over dimensions of the diagonal-Gaussian log density of x under
// N(mu, diag(sigma^2)). Throws if any sigma is not positive.
double gaussian_log_density(std::span<const double> x,
                            std::span<const double> mu,
                            std::span<const double> sigma);

// ---- checkpointing ----------------------------------------------------

// Named-network checkpoint, text format with a versioned header and
// deterministic ordering. Shapes and output activations round-trip so a
// loaded network is usable directly.
class Checkpoint {
  public:
    void add(const std::string& name, const Mlp& net);
    const Mlp& get(const std::string& name) const;
    bool has(const std::string& name) const;
    std::vector<std::string> names() const;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

  private:
    std::vector<std::pair<std::string, Mlp>> entries_;
};

}  // namespace retention

#endif
