#pragma once

// Small dense networks with hand-written reverse mode. Parameters live in one flat
// vector owned by the caller; layers only record offsets into it, which keeps
// networks copyable and makes optimiser steps and finite-difference checks trivial.

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "kellylab/error.hpp"
#include "kellylab/random.hpp"

namespace kellylab::nn {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Activation { identity, tanh, relu };

struct DenseLayer {
    Index in = 0;
    Index out = 0;
    Index weight_offset = 0;  ///< out x in, column-major
    Index bias_offset = 0;
    Activation activation = Activation::identity;

    Index parameter_count() const noexcept { return in * out + out; }
};

inline MatrixXd activate(Activation a, MatrixXd z) {
    switch (a) {
    case Activation::tanh: return z.array().tanh().matrix();
    case Activation::relu: return z.cwiseMax(0.0);
    case Activation::identity: break;
    }
    return z;
}

/// d(activation)/dz expressed through the activation's output y.
inline MatrixXd activation_slope(Activation a, const MatrixXd& y) {
    switch (a) {
    case Activation::tanh: return (1.0 - y.array().square()).matrix();
    case Activation::relu: return (y.array() > 0.0).cast<double>().matrix();
    case Activation::identity: break;
    }
    return MatrixXd::Ones(y.rows(), y.cols());
}

/// Stack of dense layers. Inputs are column batches (features x batch).
class Mlp {
public:
    struct Cache {
        std::vector<MatrixXd> outputs;  ///< outputs[0] is the input
    };

    Mlp() = default;

    /// Lays the layers out at `offset` and advances it past them. An empty `sizes`
    /// gives the identity map.
    Mlp(Index in, const std::vector<Index>& sizes, Activation hidden, Activation last, Index& offset) : in_(in) {
        Index prev = in;
        for (std::size_t i = 0; i < sizes.size(); ++i) {
            if (sizes[i] < 1) throw ConfigError("network: layer sizes must be >= 1");
            DenseLayer l;
            l.in = prev;
            l.out = sizes[i];
            l.weight_offset = offset;
            l.bias_offset = offset + l.in * l.out;
            l.activation = i + 1 == sizes.size() ? last : hidden;
            offset += l.parameter_count();
            layers_.push_back(l);
            prev = l.out;
        }
    }

    Index in_dim() const noexcept { return in_; }
    Index out_dim() const noexcept { return layers_.empty() ? in_ : layers_.back().out; }
    const std::vector<DenseLayer>& layers() const noexcept { return layers_; }

    MatrixXd forward(const VectorXd& params, const MatrixXd& x, Cache* cache = nullptr) const {
        if (cache) {
            cache->outputs.clear();
            cache->outputs.push_back(x);
        }
        MatrixXd h = x;
        for (const auto& l : layers_) {
            const Eigen::Map<const MatrixXd> w(params.data() + l.weight_offset, l.out, l.in);
            const Eigen::Map<const VectorXd> b(params.data() + l.bias_offset, l.out);
            MatrixXd z = w * h;
            z.colwise() += b;
            h = activate(l.activation, std::move(z));
            if (cache) cache->outputs.push_back(h);
        }
        return h;
    }

    /// Accumulates parameter gradients into `grad` and returns d(loss)/d(input).
    MatrixXd backward(const VectorXd& params, const Cache& cache, MatrixXd d_out, VectorXd& grad) const {
        for (std::size_t i = layers_.size(); i-- > 0;) {
            const auto& l = layers_[i];
            const MatrixXd& y = cache.outputs[i + 1];
            const MatrixXd& x = cache.outputs[i];
            const MatrixXd dz = d_out.cwiseProduct(activation_slope(l.activation, y));
            Eigen::Map<MatrixXd> dw(grad.data() + l.weight_offset, l.out, l.in);
            Eigen::Map<VectorXd> db(grad.data() + l.bias_offset, l.out);
            dw.noalias() += dz * x.transpose();
            db += dz.rowwise().sum();
            const Eigen::Map<const MatrixXd> w(params.data() + l.weight_offset, l.out, l.in);
            d_out = w.transpose() * dz;
        }
        return d_out;
    }

    /// Orthogonal weights (hidden_gain on every layer but the last, last_gain on the
    /// last), zero biases.
    void init_orthogonal(VectorXd& params, Rng& rng, double hidden_gain, double last_gain) const;

private:
    Index in_ = 0;
    std::vector<DenseLayer> layers_;
};

/// rows x cols matrix with orthonormal rows or columns (whichever is fewer), scaled by gain.
inline MatrixXd orthogonal_matrix(Index rows, Index cols, double gain, Rng& rng) {
    const Index big = std::max(rows, cols), small = std::min(rows, cols);
    MatrixXd a(big, small);
    for (Index j = 0; j < small; ++j)
        for (Index i = 0; i < big; ++i) a(i, j) = rng.normal();
    Eigen::HouseholderQR<MatrixXd> qr(a);
    MatrixXd q = qr.householderQ() * MatrixXd::Identity(big, small);
    const MatrixXd r = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
    for (Index j = 0; j < small; ++j)
        if (r(j, j) < 0.0) q.col(j) *= -1.0;
    if (rows < cols) q.transposeInPlace();
    return gain * q;
}

inline void Mlp::init_orthogonal(VectorXd& params, Rng& rng, double hidden_gain, double last_gain) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        const double gain = i + 1 == layers_.size() ? last_gain : hidden_gain;
        Eigen::Map<MatrixXd>(params.data() + l.weight_offset, l.out, l.in) = orthogonal_matrix(l.out, l.in, gain, rng);
        Eigen::Map<VectorXd>(params.data() + l.bias_offset, l.out).setZero();
    }
}

/// Scales `grad` in place so its L2 norm is at most max_norm. Returns the norm
/// before clipping.
inline double clip_grad_norm(VectorXd& grad, double max_norm) {
    const double norm = grad.norm();
    const double coef = max_norm / (norm + 1e-6);
    if (coef < 1.0) grad *= coef;
    return norm;
}

struct AdamConfig {
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adaptive moment estimation with bias correction:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
///   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
class Adam {
public:
    Adam() = default;
    Adam(Index n, AdamConfig cfg) : cfg_(cfg), m_(VectorXd::Zero(n)), v_(VectorXd::Zero(n)) {}

    void step(VectorXd& params, const VectorXd& grad) {
        ++t_;
        m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
        v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseAbs2();
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        params.array() -= cfg_.learning_rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.epsilon);
    }

    long steps() const noexcept { return t_; }
    const AdamConfig& config() const noexcept { return cfg_; }

private:
    AdamConfig cfg_;
    VectorXd m_;
    VectorXd v_;
    long t_ = 0;
};

} // namespace kellylab::nn
