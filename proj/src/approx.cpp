#include "retention/approx.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace retention {

namespace {

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

double softplus(double z) {
    if (z > 30.0) return z;
    if (z < -30.0) return std::exp(z);
    return std::log1p(std::exp(z));
}

}  // namespace

void MlpGrads::set_zero() {
    for (auto& w : W) w.setZero();
    for (auto& v : b) v.setZero();
}

bool MlpGrads::all_finite() const {
    for (const auto& w : W)
        if (!w.allFinite()) return false;
    for (const auto& v : b)
        if (!v.allFinite()) return false;
    return true;
}

void MlpGrads::scale(double s) {
    for (auto& w : W) w *= s;
    for (auto& v : b) v *= s;
}

Mlp::Mlp(MlpConfig cfg, Rng& init_rng) : cfg_(std::move(cfg)) {
    if (cfg_.layer_dims.size() < 2)
        throw std::invalid_argument("Mlp needs at least input and output dims");
    for (int d : cfg_.layer_dims)
        if (d <= 0) throw std::invalid_argument("Mlp layer dims must be positive");
    if (cfg_.output == Activation::MeanSigma && cfg_.layer_dims.back() % 2 != 0)
        throw std::invalid_argument("MeanSigma output needs an even dimension");

    const size_t layers = cfg_.layer_dims.size() - 1;
    W_.resize(layers);
    b_.resize(layers);
    for (size_t l = 0; l < layers; ++l) {
        const int fan_in = cfg_.layer_dims[l];
        const int fan_out = cfg_.layer_dims[l + 1];
        // rectifier-scaled init on hidden layers, smaller on the output layer
        const double scale = (l + 1 < layers)
                                 ? std::sqrt(2.0 / fan_in)
                                 : cfg_.init_output_scale * std::sqrt(1.0 / fan_in);
        W_[l].resize(fan_out, fan_in);
        for (int r = 0; r < fan_out; ++r)
            for (int c = 0; c < fan_in; ++c)
                W_[l](r, c) = scale * init_rng.normal();
        b_[l] = Vec::Zero(fan_out);
    }
}

Mat Mlp::apply_output(const Mat& Z) const {
    Mat A(Z.rows(), Z.cols());
    switch (cfg_.output) {
        case Activation::Identity:
            A = Z;
            break;
        case Activation::Sigmoid:
            A = Z.unaryExpr([](double z) { return sigmoid(z); });
            break;
        case Activation::ScaledSigmoid:
            A = Z.unaryExpr(
                [s = cfg_.output_scale](double z) { return s * sigmoid(z); });
            break;
        case Activation::Softplus:
            A = Z.unaryExpr([f = cfg_.softplus_floor](double z) {
                return softplus(z) + f;
            });
            break;
        case Activation::MeanSigma: {
            const Eigen::Index half = Z.cols() / 2;
            A.leftCols(half) = Z.leftCols(half).unaryExpr(
                [s = cfg_.output_scale](double z) { return s * sigmoid(z); });
            A.rightCols(half) = Z.rightCols(half).unaryExpr(
                [f = cfg_.softplus_floor](double z) { return softplus(z) + f; });
            break;
        }
    }
    return A;
}

Mat Mlp::output_derivative(const Mat& Z) const {
    Mat D(Z.rows(), Z.cols());
    switch (cfg_.output) {
        case Activation::Identity:
            D.setOnes();
            break;
        case Activation::Sigmoid:
            D = Z.unaryExpr([](double z) {
                const double s = sigmoid(z);
                return s * (1.0 - s);
            });
            break;
        case Activation::ScaledSigmoid:
            D = Z.unaryExpr([s = cfg_.output_scale](double z) {
                const double sig = sigmoid(z);
                return s * sig * (1.0 - sig);
            });
            break;
        case Activation::Softplus:
            D = Z.unaryExpr([](double z) { return sigmoid(z); });
            break;
        case Activation::MeanSigma: {
            const Eigen::Index half = Z.cols() / 2;
            D.leftCols(half) = Z.leftCols(half).unaryExpr(
                [s = cfg_.output_scale](double z) {
                    const double sig = sigmoid(z);
                    return s * sig * (1.0 - sig);
                });
            D.rightCols(half) = Z.rightCols(half).unaryExpr(
                [](double z) { return sigmoid(z); });
            break;
        }
    }
    return D;
}

Mat Mlp::forward(const Mat& X) const {
    MlpCache cache;
    return forward(X, cache);
}

Mat Mlp::forward(const Mat& X, MlpCache& cache) const {
    if (X.cols() != input_dim())
        throw std::invalid_argument("Mlp forward: input has " +
                                    std::to_string(X.cols()) +
                                    " columns, expected " +
                                    std::to_string(input_dim()));
    const size_t layers = W_.size();
    cache.input = X;
    cache.pre.assign(layers, Mat());
    cache.post.assign(layers, Mat());

    const Mat* prev = &cache.input;
    for (size_t l = 0; l < layers; ++l) {
        Mat& Z = cache.pre[l];
        Z.noalias() = (*prev) * W_[l].transpose();
        Z.rowwise() += b_[l].transpose();
        if (l + 1 < layers)
            cache.post[l] = Z.cwiseMax(0.0);
        else
            cache.post[l] = apply_output(Z);
        prev = &cache.post[l];
    }
    return cache.post.back();
}

Vec Mlp::forward1(const Vec& x) const {
    Mat X = x.transpose();
    return forward(X).row(0).transpose();
}

Mat Mlp::backward(const MlpCache& cache, const Mat& dY, MlpGrads& grads) const {
    const size_t layers = W_.size();
    if (grads.W.empty()) grads = zero_grads();

    Mat delta = dY.cwiseProduct(output_derivative(cache.pre.back()));
    for (size_t l = layers; l-- > 0;) {
        const Mat& below = (l == 0) ? cache.input : cache.post[l - 1];
        grads.W[l].noalias() += delta.transpose() * below;
        grads.b[l] += delta.colwise().sum().transpose();
        if (l == 0) {
            return delta * W_[0];
        }
        Mat next = delta * W_[l];
        delta = next.cwiseProduct(
            (cache.pre[l - 1].array() > 0.0).cast<double>().matrix());
    }
    return Mat();  // unreachable
}

Mat Mlp::input_gradient(const MlpCache& cache, const Mat& dY) const {
    const size_t layers = W_.size();
    Mat delta = dY.cwiseProduct(output_derivative(cache.pre.back()));
    for (size_t l = layers; l-- > 0;) {
        if (l == 0) return delta * W_[0];
        Mat next = delta * W_[l];
        delta = next.cwiseProduct(
            (cache.pre[l - 1].array() > 0.0).cast<double>().matrix());
    }
    return Mat();
}

MlpGrads Mlp::zero_grads() const {
    MlpGrads g;
    g.W.reserve(W_.size());
    g.b.reserve(b_.size());
    for (const auto& w : W_) g.W.push_back(Mat::Zero(w.rows(), w.cols()));
    for (const auto& v : b_) g.b.push_back(Vec::Zero(v.size()));
    return g;
}

size_t Mlp::param_count() const {
    size_t n = 0;
    for (const auto& w : W_) n += static_cast<size_t>(w.size());
    for (const auto& v : b_) n += static_cast<size_t>(v.size());
    return n;
}

namespace {
// Flat layout: all weight matrices (row-major), then all bias vectors.
template <typename MatVec, typename VecVec>
auto* locate_param(MatVec& W, VecVec& b, size_t i) {
    for (auto& w : W) {
        const size_t n = static_cast<size_t>(w.size());
        if (i < n) {
            const size_t cols = static_cast<size_t>(w.cols());
            return &w(static_cast<Eigen::Index>(i / cols),
                      static_cast<Eigen::Index>(i % cols));
        }
        i -= n;
    }
    for (auto& v : b) {
        const size_t n = static_cast<size_t>(v.size());
        if (i < n) return &v(static_cast<Eigen::Index>(i));
        i -= n;
    }
    throw std::out_of_range("Mlp parameter index out of range");
}
}  // namespace

double Mlp::get_param(size_t i) const {
    return *locate_param(W_, b_, i);
}

void Mlp::set_param(size_t i, double v) {
    *locate_param(W_, b_, i) = v;
}

double Mlp::grad_at(const MlpGrads& g, size_t i) const {
    return *locate_param(g.W, g.b, i);
}

bool Mlp::params_finite() const {
    for (const auto& w : W_)
        if (!w.allFinite()) return false;
    for (const auto& v : b_)
        if (!v.allFinite()) return false;
    return true;
}

void Adam::step(Mlp& net, const MlpGrads& grads) {
    if (!grads.all_finite())
        throw std::runtime_error("gradient blow-up: non-finite gradient");
    auto& W = net.weights();
    auto& b = net.biases();
    if (grads.W.size() != W.size() || grads.b.size() != b.size())
        throw std::invalid_argument("Adam: gradient shape mismatch");

    if (mW_.empty()) {
        for (const auto& w : W) {
            mW_.push_back(Mat::Zero(w.rows(), w.cols()));
            vW_.push_back(Mat::Zero(w.rows(), w.cols()));
        }
        for (const auto& v : b) {
            mb_.push_back(Vec::Zero(v.size()));
            vb_.push_back(Vec::Zero(v.size()));
        }
    }

    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t l = 0; l < W.size(); ++l) {
        mW_[l] = beta1_ * mW_[l] + (1.0 - beta1_) * grads.W[l];
        vW_[l] = beta2_ * vW_[l] + (1.0 - beta2_) * grads.W[l].cwiseProduct(grads.W[l]);
        W[l].array() -= lr_ * (mW_[l].array() / c1) /
                        ((vW_[l].array() / c2).sqrt() + eps_);
    }
    for (size_t l = 0; l < b.size(); ++l) {
        mb_[l] = beta1_ * mb_[l] + (1.0 - beta1_) * grads.b[l];
        vb_[l] = beta2_ * vb_[l] + (1.0 - beta2_) * grads.b[l].cwiseProduct(grads.b[l]);
        b[l].array() -= lr_ * (mb_[l].array() / c1) /
                        ((vb_[l].array() / c2).sqrt() + eps_);
    }
    if (!net.params_finite())
        throw std::runtime_error("gradient blow-up: non-finite parameters");
}

TargetCopy::TargetCopy(const Mlp& source, double tau)
    : shadow_(source), tau_(tau) {
    if (!(tau > 0.0 && tau <= 1.0))
        throw std::invalid_argument("TargetCopy tau must be in (0,1]");
}

void TargetCopy::soft_update(const Mlp& source) {
    auto& sw = shadow_.weights();
    auto& sb = shadow_.biases();
    const auto& w = source.weights();
    const auto& b = source.biases();
    if (sw.size() != w.size())
        throw std::invalid_argument("soft_update: layer count mismatch");
    for (size_t l = 0; l < sw.size(); ++l) {
        if (sw[l].rows() != w[l].rows() || sw[l].cols() != w[l].cols())
            throw std::invalid_argument("soft_update: shape mismatch");
        sw[l] = tau_ * w[l] + (1.0 - tau_) * sw[l];
        sb[l] = tau_ * b[l] + (1.0 - tau_) * sb[l];
    }
}

double gaussian_log_density(std::span<const double> x,
                            std::span<const double> mu,
                            std::span<const double> sigma) {
    if (x.size() != mu.size() || x.size() != sigma.size())
        throw std::invalid_argument("gaussian_log_density: size mismatch");
    constexpr double kLogTwoPi = 1.8378770664093454836;  // ln(2*pi)
    double total = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        if (!(sigma[i] > 0.0))
            throw std::invalid_argument("gaussian_log_density: sigma <= 0");
        const double z = (x[i] - mu[i]) / sigma[i];
        total += -0.5 * kLogTwoPi - std::log(sigma[i]) - 0.5 * z * z;
    }
    return total;
}

// ---- checkpointing ----------------------------------------------------

void Checkpoint::add(const std::string& name, const Mlp& net) {
    if (name.find(' ') != std::string::npos || name.empty())
        throw std::invalid_argument("checkpoint names must be nonempty, no spaces");
    for (const auto& [n, _] : entries_)
        if (n == name)
            throw std::invalid_argument("duplicate checkpoint entry: " + name);
    entries_.emplace_back(name, net);
}

const Mlp& Checkpoint::get(const std::string& name) const {
    for (const auto& [n, net] : entries_)
        if (n == name) return net;
    throw std::out_of_range("checkpoint has no entry: " + name);
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& [n, _] : entries_)
        if (n == name) return true;
    return false;
}

std::vector<std::string> Checkpoint::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [n, _] : entries_) out.push_back(n);
    return out;
}

void Checkpoint::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out << std::setprecision(17);
    out << "retention-checkpoint 1\n";
    out << "nets " << entries_.size() << "\n";
    for (const auto& [name, net] : entries_) {
        const auto& cfg = net.config();
        out << "net " << name << " dims";
        for (int d : cfg.layer_dims) out << " " << d;
        out << " activation " << static_cast<int>(cfg.output) << " scale "
            << cfg.output_scale << " floor " << cfg.softplus_floor << "\n";
        for (size_t l = 0; l < net.layer_count(); ++l) {
            const Mat& w = net.weights()[l];
            out << "W" << l << " " << w.rows() << " " << w.cols() << "\n";
            for (Eigen::Index r = 0; r < w.rows(); ++r) {
                for (Eigen::Index c = 0; c < w.cols(); ++c)
                    out << (c ? " " : "") << w(r, c);
                out << "\n";
            }
            const Vec& v = net.biases()[l];
            out << "b" << l << " " << v.size() << "\n";
            for (Eigen::Index r = 0; r < v.size(); ++r)
                out << (r ? " " : "") << v(r);
            out << "\n";
        }
    }
    out << "end\n";
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string word;
    int version = 0;
    in >> word >> version;
    if (word != "retention-checkpoint" || version != 1)
        throw std::runtime_error("unsupported checkpoint header in " + path);
    size_t count = 0;
    in >> word >> count;
    if (word != "nets") throw std::runtime_error("malformed checkpoint: " + path);

    Checkpoint ck;
    for (size_t e = 0; e < count; ++e) {
        std::string name;
        in >> word >> name;
        if (word != "net") throw std::runtime_error("malformed checkpoint: " + path);
        in >> word;  // "dims"
        MlpConfig cfg;
        // dims run until the "activation" token
        while (in >> word && word != "activation")
            cfg.layer_dims.push_back(std::stoi(word));
        int act = 0;
        in >> act;
        cfg.output = static_cast<Activation>(act);
        in >> word >> cfg.output_scale;  // "scale"
        in >> word >> cfg.softplus_floor;  // "floor"

        Rng dummy(0);
        Mlp net(cfg, dummy);
        for (size_t l = 0; l < net.layer_count(); ++l) {
            Eigen::Index rows = 0, cols = 0;
            in >> word >> rows >> cols;
            if (word != "W" + std::to_string(l) ||
                rows != net.weights()[l].rows() || cols != net.weights()[l].cols())
                throw std::runtime_error("checkpoint shape mismatch in " + path);
            for (Eigen::Index r = 0; r < rows; ++r)
                for (Eigen::Index c = 0; c < cols; ++c) in >> net.weights()[l](r, c);
            Eigen::Index len = 0;
            in >> word >> len;
            if (word != "b" + std::to_string(l) || len != net.biases()[l].size())
                throw std::runtime_error("checkpoint shape mismatch in " + path);
            for (Eigen::Index r = 0; r < len; ++r) in >> net.biases()[l](r);
        }
        if (!in) throw std::runtime_error("truncated checkpoint: " + path);
        ck.entries_.emplace_back(name, std::move(net));
    }
    return ck;
}

}  // namespace retention
