#pragma once

#include "refground/core.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdint>
#include <random>

namespace refground {

/// Three fully-connected layers: FC-BN-ReLU, FC-BN-ReLU, FC, followed by a
/// sigmoid on the single output. Rows of every input matrix are samples.
///
/// Batch normalization uses batch statistics in train_forward() and the
/// running statistics everywhere else.
template <typename Scalar>
class BatchNormMlp {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

  static constexpr Scalar kBnEps = Scalar(1e-5);
  static constexpr Scalar kBnMomentum = Scalar(0.1);

  struct Dense {
    Matrix w;  // out x in
    Vector b;
  };

  struct BatchNorm {
    Vector gamma, beta, running_mean, running_var;
  };

  struct Gradients {
    Dense fc1, fc2, fc3;
    Vector bn1_gamma, bn1_beta, bn2_gamma, bn2_beta;
  };

  Dense fc1, fc2, fc3;
  BatchNorm bn1, bn2;

  BatchNormMlp() = default;

  BatchNormMlp(int input_dim, int hidden_dim, std::uint64_t seed) {
    if (input_dim <= 0 || hidden_dim <= 0) throw DomainError("BatchNormMlp: dimensions must be positive");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto init = [&](int out, int in, double scale) {
      Dense d{Matrix(out, in), Vector::Zero(out)};
      for (int r = 0; r < out; ++r) {
        for (int c = 0; c < in; ++c) d.w(r, c) = static_cast<Scalar>(scale * normal(rng));
      }
      return d;
    };
    fc1 = init(hidden_dim, input_dim, std::sqrt(2.0 / input_dim));
    fc2 = init(hidden_dim, hidden_dim, std::sqrt(2.0 / hidden_dim));
    fc3 = init(1, hidden_dim, std::sqrt(1.0 / hidden_dim));
    auto fresh = [&] {
      return BatchNorm{Vector::Ones(hidden_dim), Vector::Zero(hidden_dim), Vector::Zero(hidden_dim),
                       Vector::Ones(hidden_dim)};
    };
    bn1 = fresh();
    bn2 = fresh();
  }

  int input_dim() const { return static_cast<int>(fc1.w.cols()); }
  int hidden_dim() const { return static_cast<int>(fc1.w.rows()); }

  /// Pre-sigmoid outputs in inference mode.
  Vector logits(const Matrix& x) const {
    check_input(x);
    Matrix h = apply_running(affine(x, fc1), bn1).cwiseMax(Scalar(0));
    h = apply_running(affine(h, fc2), bn2).cwiseMax(Scalar(0));
    return affine(h, fc3).col(0);
  }

  Vector scores(const Matrix& x) const { return logits(x).unaryExpr(&sigmoid); }

  static Scalar sigmoid(Scalar z) {
    const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-z));
    // Keep the output strictly inside (0,1) even when exp saturates.
    return std::clamp(s, std::numeric_limits<Scalar>::min(), std::nextafter(Scalar(1), Scalar(0)));
  }

  struct Cache {
    Matrix x, z1hat, a1, z2hat, a2;
    Vector inv_std1, inv_std2;
  };

  /// Training-mode forward pass. Updates running statistics when asked.
  Vector train_forward(const Matrix& x, Cache& cache, bool update_running) {
    check_input(x);
    if (x.rows() < 2) throw DomainError("BatchNormMlp: training batches need at least 2 rows");
    cache.x = x;
    cache.z1hat = normalize_batch(affine(x, fc1), bn1, cache.inv_std1, update_running);
    cache.a1 = scale_shift(cache.z1hat, bn1).cwiseMax(Scalar(0));
    cache.z2hat = normalize_batch(affine(cache.a1, fc2), bn2, cache.inv_std2, update_running);
    cache.a2 = scale_shift(cache.z2hat, bn2).cwiseMax(Scalar(0));
    return affine(cache.a2, fc3).col(0);
  }

  /// Parameter gradients given d(loss)/d(logits) for the cached batch.
  Gradients backward(const Cache& c, const Vector& dlogits) const {
    Gradients g;
    g.fc3.w = dlogits.transpose() * c.a2;
    g.fc3.b = Vector::Constant(1, dlogits.sum());
    Matrix da2 = dlogits * fc3.w;
    Matrix dy2 = da2.cwiseProduct(relu_mask(c.a2));
    Matrix dz2 = batch_norm_backward(dy2, c.z2hat, c.inv_std2, bn2, g.bn2_gamma, g.bn2_beta);
    g.fc2.w = dz2.transpose() * c.a1;
    g.fc2.b = dz2.colwise().sum().transpose();
    Matrix da1 = dz2 * fc2.w;
    Matrix dy1 = da1.cwiseProduct(relu_mask(c.a1));
    Matrix dz1 = batch_norm_backward(dy1, c.z1hat, c.inv_std1, bn1, g.bn1_gamma, g.bn1_beta);
    g.fc1.w = dz1.transpose() * c.x;
    g.fc1.b = dz1.colwise().sum().transpose();
    return g;
  }

 private:
  void check_input(const Matrix& x) const {
    if (x.cols() != input_dim()) throw DomainError("BatchNormMlp: input dimension mismatch");
  }

  static Matrix affine(const Matrix& x, const Dense& d) {
    return (x * d.w.transpose()).rowwise() + d.b.transpose();
  }

  static Matrix apply_running(const Matrix& z, const BatchNorm& bn) {
    const RowVector inv = (bn.running_var.array() + kBnEps).rsqrt().matrix().transpose();
    Matrix out = (z.rowwise() - bn.running_mean.transpose()).array().rowwise() * inv.array();
    return scale_shift(out, bn);
  }

  static Matrix scale_shift(const Matrix& xhat, const BatchNorm& bn) {
    Matrix out = xhat.array().rowwise() * bn.gamma.transpose().array();
    return out.rowwise() + bn.beta.transpose();
  }

  static Matrix normalize_batch(const Matrix& z, BatchNorm& bn, Vector& inv_std, bool update) {
    const Scalar n = static_cast<Scalar>(z.rows());
    const RowVector mean = z.colwise().mean();
    const Matrix centered = z.rowwise() - mean;
    const RowVector var = centered.colwise().squaredNorm() / n;
    inv_std = (var.array() + kBnEps).rsqrt().matrix().transpose();
    if (update) {
      const RowVector unbiased = var * (n / (n - Scalar(1)));
      bn.running_mean = (Scalar(1) - kBnMomentum) * bn.running_mean + kBnMomentum * mean.transpose();
      bn.running_var = (Scalar(1) - kBnMomentum) * bn.running_var + kBnMomentum * unbiased.transpose();
    }
    return centered.array().rowwise() * inv_std.transpose().array();
  }

  static Matrix relu_mask(const Matrix& activated) {
    return (activated.array() > Scalar(0)).template cast<Scalar>().matrix();
  }

  static Matrix batch_norm_backward(const Matrix& dy, const Matrix& xhat, const Vector& inv_std,
                                    const BatchNorm& bn, Vector& dgamma, Vector& dbeta) {
    const Scalar n = static_cast<Scalar>(dy.rows());
    dgamma = dy.cwiseProduct(xhat).colwise().sum().transpose();
    dbeta = dy.colwise().sum().transpose();
    const Matrix dxhat = dy.array().rowwise() * bn.gamma.transpose().array();
    const RowVector sum_d = dxhat.colwise().sum();
    const RowVector sum_dx = dxhat.cwiseProduct(xhat).colwise().sum();
    Matrix dz = (n * dxhat).rowwise() - sum_d;
    dz -= (xhat.array().rowwise() * sum_dx.array()).matrix();
    return (dz.array().rowwise() * (inv_std.transpose().array() / n)).matrix();
  }
};

}  // namespace refground
