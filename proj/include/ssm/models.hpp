#pragma once

// Unnormalized density models, score networks and data generators.
//
// Every trainable model is an immutable value holding a flat parameter
// vector. Tape-level evaluation takes the parameters as a separate rank-1
// tensor so objectives can be differentiated with respect to them; inputs
// are batches of points stored as rows of an [N, D] tensor.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ssm/tensor.hpp"

namespace ssm {

using ad::Var;

/// Gaussian N(mean, precision^{-1}) with precision = L L^T, where L is lower
/// triangular with diag(L) = softplus(diag_raw) > 0.
/// Parameter layout: [mean (D), diag_raw (D), strictly-lower entries of L in
/// column-major order (D(D-1)/2)].
class GaussianModel {
 public:
  GaussianModel(Vector mean, Vector diag_raw, Vector offdiag);

  static GaussianModel from_moments(const Vector& mean,
                                    const Matrix& precision);
  static GaussianModel standard(Index dim);

  Index dim() const { return mean_.size(); }
  Index num_parameters() const;
  Vector parameters() const;
  GaussianModel with_parameters(const Vector& theta) const;

  const Vector& mean() const { return mean_; }
  const Vector& diag_raw() const { return diag_raw_; }
  const Vector& offdiag() const { return offdiag_; }
  Matrix cholesky_factor() const;
  Matrix precision() const;
  Matrix covariance() const;

  /// -1/2 (x - mean)^T precision (x - mean) per row of x ([N, D] -> [N]).
  Var log_unnormalized_density(const Var& x, const Var& theta) const;
  Var mean(const Var& theta) const;
  Var precision(const Var& theta) const;

  double log_unnormalized_density(const Vector& x) const;
  /// Analytic score precision (mean - x), row-wise.
  Matrix score(const Matrix& x) const;
  Matrix hessian() const { return -precision(); }

  /// n draws from N(mean, precision^{-1}) via a triangular solve with L^T.
  Matrix sample(Index n, std::uint64_t seed) const;

 private:
  Vector mean_;
  Vector diag_raw_;
  Vector offdiag_;
};

/// Gaussian-mixture kernel k(x, y) = sum_r rho_r exp(-|x - y|^2 / (2 s_r^2)).
struct KernelMixture {
  Vector bandwidths;
  Vector weights;

  double operator()(const Vector& x, const Vector& y) const;
};

/// Fixed feature map phi(x) = x + W2 softplus(W1 x + b1) applied before the
/// kernel. One hidden layer with a skip connection.
struct FeatureExtractor {
  Matrix w1;  // [H, D]
  Vector b1;  // [H]
  Matrix w2;  // [D, H]

  static FeatureExtractor random(Index dim, Index hidden, std::uint64_t seed);
  Vector operator()(const Vector& x) const;
  Var apply(const Var& x) const;  // [N, D] -> [N, D]
};

/// Kernel exponential family: log p(x) = sum_l alpha_l k(x, z_l) + log q0(x)
/// with q0 = N(0, base_scale^2 I). Only alpha is trainable; the inducing
/// points, kernel and feature map are fixed per model.
class KefModel {
 public:
  KefModel(Matrix inducing_points, Vector alpha, KernelMixture kernel,
           double base_scale = 2.0,
           std::optional<FeatureExtractor> features = std::nullopt);

  Index dim() const { return inducing_.cols(); }
  Index num_inducing() const { return inducing_.rows(); }
  Index num_parameters() const { return alpha_.size(); }
  Vector parameters() const { return alpha_; }
  KefModel with_parameters(const Vector& alpha) const;

  const Matrix& inducing_points() const { return inducing_; }
  const Vector& alpha() const { return alpha_; }
  const KernelMixture& kernel() const { return kernel_; }
  double base_scale() const { return base_scale_; }
  const std::optional<FeatureExtractor>& features() const { return features_; }

  double kernel_value(const Vector& x, const Vector& z) const;
  double log_base_density(const Vector& x) const;
  Vector base_score(const Vector& x) const;
  double log_unnormalized_density(const Vector& x) const;

  Var log_unnormalized_density(const Var& x, const Var& theta) const;
  /// Kernel matrix k(x_i, z_l) as an [N, L] tensor.
  Var kernel_matrix(const Var& x) const;

 private:
  Matrix inducing_;
  Vector alpha_;
  KernelMixture kernel_;
  double base_scale_;
  std::optional<FeatureExtractor> features_;
};

/// (v . grad_x k(x, z), v^T hess_x k(x, z) v) in closed form for the
/// Gaussian-mixture kernel on raw inputs.
struct KernelDerivatives {
  double directional = 0.0;
  double curvature = 0.0;
};
KernelDerivatives kernel_derivatives(const KefModel& kef, const Vector& x,
                                     const Vector& z, const Vector& v);
/// Same quantities by differentiating the tape expression twice. Works with a
/// feature extractor.
KernelDerivatives kernel_derivatives_autodiff(const KefModel& kef,
                                              const Vector& x, const Vector& z,
                                              const Vector& v);

enum class Activation { softplus, tanh };

/// Fully connected network with a flat parameter vector. Layer l stores its
/// weight [in, out] (column-major) followed by its bias [out].
class Mlp {
 public:
  Mlp(std::vector<Index> sizes, Activation activation);

  const std::vector<Index>& sizes() const { return sizes_; }
  Activation activation() const { return activation_; }
  Index input_dim() const { return sizes_.front(); }
  Index output_dim() const { return sizes_.back(); }
  Index num_parameters() const;

  /// Glorot-uniform weights, zero biases.
  Vector initial_parameters(std::uint64_t seed) const;

  Var forward(const Var& x, const Var& theta) const;  // [N, in] -> [N, out]
  Matrix forward(const Matrix& x, const Vector& theta) const;

 private:
  std::vector<Index> sizes_;
  Activation activation_;
};

/// Scalar-output network used as log p(x) (the negative energy).
class MlpEnergy {
 public:
  MlpEnergy(Index dim, std::vector<Index> hidden, Vector theta,
            Activation activation = Activation::softplus);
  static MlpEnergy random(Index dim, std::uint64_t seed,
                          std::vector<Index> hidden = {32, 32},
                          Activation activation = Activation::softplus);

  Index dim() const { return net_.input_dim(); }
  Index num_parameters() const { return theta_.size(); }
  const Vector& parameters() const { return theta_; }
  MlpEnergy with_parameters(const Vector& theta) const;
  const Mlp& network() const { return net_; }

  Var log_unnormalized_density(const Var& x, const Var& theta) const;
  double log_unnormalized_density(const Vector& x) const;

 private:
  Mlp net_;
  Vector theta_;
};

/// Vector-valued network h(x): R^D -> R^D. Not constrained to be a gradient.
class ScoreNetwork {
 public:
  ScoreNetwork(Index dim, std::vector<Index> hidden, Vector theta,
               Activation activation = Activation::tanh);
  static ScoreNetwork random(Index dim, std::uint64_t seed,
                             std::vector<Index> hidden = {64, 64, 64},
                             Activation activation = Activation::tanh);

  Index dim() const { return net_.input_dim(); }
  Index num_parameters() const { return theta_.size(); }
  const Vector& parameters() const { return theta_; }
  ScoreNetwork with_parameters(const Vector& theta) const;
  const Mlp& network() const { return net_; }

  Var forward(const Var& x, const Var& theta) const { return net_.forward(x, theta); }
  Matrix operator()(const Matrix& x) const { return net_.forward(x, theta_); }

 private:
  Mlp net_;
  Vector theta_;
};

/// Reparameterized diagonal Gaussian x = mean + exp(log_scale) * eps.
class ReparamGaussian {
 public:
  ReparamGaussian(Vector mean, Vector log_scale);

  Index dim() const { return mean_.size(); }
  const Vector& mean() const { return mean_; }
  const Vector& log_scale() const { return log_scale_; }

  /// Standard normal noise driving `sample` for the same seed.
  Matrix noise(Index n, std::uint64_t seed) const;
  Matrix sample(Index n, std::uint64_t seed) const;
  Matrix transform(const Matrix& eps) const;
  /// Tape version of the sampling rule; mean and log_scale are [D] tensors.
  static Var transform(const Var& mean, const Var& log_scale, const Var& eps);

  double entropy() const;
  Matrix score(const Matrix& x) const;
  Matrix covariance() const;

 private:
  Vector mean_;
  Vector log_scale_;
};

double softplus(double x);
double inverse_softplus(double y);

}  // namespace ssm
