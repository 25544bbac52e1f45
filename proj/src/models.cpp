#include "ssm/models.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "ssm/derivatives.hpp"
#include "ssm/random.hpp"

namespace ssm {

using ad::Shape;
using ad::Tape;

namespace {

constexpr std::uint64_t kGaussianSampleTag = 0x6761757373ULL;
constexpr std::uint64_t kReparamNoiseTag = 0x726570ULL;

void check_batch(const char* who, const Var& x, Index dim) {
  if (x.shape().rank != 2 || x.shape().cols != dim) {
    throw ShapeError(std::string(who) + ": expected batch [N," +
                     std::to_string(dim) + "], got " + x.shape().str());
  }
}

void check_theta(const char* who, const Var& theta, Index count) {
  if (theta.shape() != Shape::vector(count)) {
    throw ShapeError(std::string(who) + ": expected parameters [" +
                     std::to_string(count) + "], got " + theta.shape().str());
  }
}

}  // namespace

double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double inverse_softplus(double y) {
  if (!(y > 0.0)) throw std::domain_error("inverse_softplus: argument must be > 0");
  return y + std::log(-std::expm1(-y));
}

// ---------------------------------------------------------------------------
// GaussianModel

GaussianModel::GaussianModel(Vector mean, Vector diag_raw, Vector offdiag)
    : mean_(std::move(mean)),
      diag_raw_(std::move(diag_raw)),
      offdiag_(std::move(offdiag)) {
  const Index d = mean_.size();
  if (d < 1 || diag_raw_.size() != d || offdiag_.size() != d * (d - 1) / 2) {
    throw std::invalid_argument("GaussianModel: inconsistent parameter sizes");
  }
}

GaussianModel GaussianModel::from_moments(const Vector& mean,
                                          const Matrix& precision) {
  const Index d = mean.size();
  if (precision.rows() != d || precision.cols() != d) {
    throw ShapeError("GaussianModel: precision must be [D,D]");
  }
  Eigen::LLT<Matrix> llt(precision);
  if (llt.info() != Eigen::Success) {
    throw std::invalid_argument("GaussianModel: precision is not positive definite");
  }
  const Matrix l = llt.matrixL();
  Vector raw(d);
  for (Index i = 0; i < d; ++i) raw(i) = inverse_softplus(l(i, i));
  Vector off(d * (d - 1) / 2);
  Index k = 0;
  for (Index j = 0; j < d; ++j)
    for (Index i = j + 1; i < d; ++i) off(k++) = l(i, j);
  return GaussianModel(mean, raw, off);
}

GaussianModel GaussianModel::standard(Index dim) {
  return from_moments(Vector::Zero(dim), Matrix::Identity(dim, dim));
}

Index GaussianModel::num_parameters() const {
  const Index d = dim();
  return 2 * d + d * (d - 1) / 2;
}

Vector GaussianModel::parameters() const {
  Vector theta(num_parameters());
  theta << mean_, diag_raw_, offdiag_;
  return theta;
}

GaussianModel GaussianModel::with_parameters(const Vector& theta) const {
  if (theta.size() != num_parameters()) {
    throw ShapeError("GaussianModel: wrong parameter count");
  }
  const Index d = dim();
  return GaussianModel(theta.head(d), theta.segment(d, d),
                       theta.tail(d * (d - 1) / 2));
}

Matrix GaussianModel::cholesky_factor() const {
  const Index d = dim();
  Matrix l = Matrix::Zero(d, d);
  for (Index i = 0; i < d; ++i) l(i, i) = softplus(diag_raw_(i));
  Index k = 0;
  for (Index j = 0; j < d; ++j)
    for (Index i = j + 1; i < d; ++i) l(i, j) = offdiag_(k++);
  return l;
}

Matrix GaussianModel::precision() const {
  const Matrix l = cholesky_factor();
  return l * l.transpose();
}

Matrix GaussianModel::covariance() const { return precision().inverse(); }

Var GaussianModel::mean(const Var& theta) const {
  check_theta("GaussianModel", theta, num_parameters());
  return ad::slice(theta, 0, dim());
}

Var GaussianModel::precision(const Var& theta) const {
  check_theta("GaussianModel", theta, num_parameters());
  const Index d = dim();
  const Index k = d * (d - 1) / 2;
  const Shape square = Shape::matrix(d, d);

  std::vector<Index> diag(static_cast<std::size_t>(d));
  for (Index i = 0; i < d; ++i) diag[static_cast<std::size_t>(i)] = i + i * d;
  Var l = ad::scatter(ad::softplus(ad::slice(theta, d, d)),
                      ad::make_index_list(std::move(diag)), square);
  if (k > 0) {
    std::vector<Index> lower;
    lower.reserve(static_cast<std::size_t>(k));
    for (Index j = 0; j < d; ++j)
      for (Index i = j + 1; i < d; ++i) lower.push_back(i + j * d);
    l = ad::add(l, ad::scatter(ad::slice(theta, 2 * d, k),
                               ad::make_index_list(std::move(lower)), square));
  }
  return ad::matmul(l, ad::transpose(l));
}

Var GaussianModel::log_unnormalized_density(const Var& x,
                                            const Var& theta) const {
  check_batch("GaussianModel", x, dim());
  const Var centered = ad::sub(x, mean(theta));
  const Var quad =
      ad::sum_axis1(ad::mul(ad::matmul(centered, precision(theta)), centered));
  return ad::scale(quad, -0.5);
}

double GaussianModel::log_unnormalized_density(const Vector& x) const {
  const Vector c = x - mean_;
  return -0.5 * c.dot(precision() * c);
}

Matrix GaussianModel::score(const Matrix& x) const {
  return (-(x.rowwise() - mean_.transpose())) * precision();
}

Matrix GaussianModel::sample(Index n, std::uint64_t seed) const {
  if (n < 1) throw std::invalid_argument("sample: n must be >= 1");
  const Matrix z = standard_normal(n, dim(), seed, kGaussianSampleTag);
  const Matrix l = cholesky_factor();
  // Rows y solve L^T y = z, so cov(y) = (L L^T)^{-1}.
  Matrix y = l.transpose().triangularView<Eigen::Upper>().solve(
      z.transpose());
  return (y.transpose().rowwise() + mean_.transpose());
}

// ---------------------------------------------------------------------------
// Kernel exponential family

double KernelMixture::operator()(const Vector& x, const Vector& y) const {
  const double d2 = (x - y).squaredNorm();
  double k = 0.0;
  for (Index r = 0; r < bandwidths.size(); ++r) {
    k += weights(r) * std::exp(-d2 / (2.0 * bandwidths(r) * bandwidths(r)));
  }
  return k;
}

FeatureExtractor FeatureExtractor::random(Index dim, Index hidden,
                                          std::uint64_t seed) {
  SplitMix64 g = make_stream(seed, {0x66656174ULL});
  const double a1 = std::sqrt(6.0 / static_cast<double>(dim + hidden));
  std::uniform_real_distribution<double> u1(-a1, a1);
  FeatureExtractor f;
  f.w1.resize(hidden, dim);
  f.b1 = Vector::Zero(hidden);
  f.w2.resize(dim, hidden);
  for (Index i = 0; i < f.w1.size(); ++i) f.w1.data()[i] = u1(g);
  for (Index i = 0; i < f.w2.size(); ++i) f.w2.data()[i] = u1(g);
  return f;
}

Vector FeatureExtractor::operator()(const Vector& x) const {
  Vector h = w1 * x + b1;
  for (Index i = 0; i < h.size(); ++i) h(i) = softplus(h(i));
  return x + w2 * h;
}

Var FeatureExtractor::apply(const Var& x) const {
  Tape& tape = x.tape();
  const Var w1t = tape.constant_matrix(w1.transpose());
  const Var w2t = tape.constant_matrix(w2.transpose());
  const Var h = ad::softplus(ad::add(ad::matmul(x, w1t), tape.constant(b1)));
  return ad::add(x, ad::matmul(h, w2t));
}

KefModel::KefModel(Matrix inducing_points, Vector alpha, KernelMixture kernel,
                   double base_scale, std::optional<FeatureExtractor> features)
    : inducing_(std::move(inducing_points)),
      alpha_(std::move(alpha)),
      kernel_(std::move(kernel)),
      base_scale_(base_scale),
      features_(std::move(features)) {
  if (alpha_.size() != inducing_.rows()) {
    throw std::invalid_argument("KefModel: one coefficient per inducing point");
  }
  if (kernel_.bandwidths.size() != kernel_.weights.size() ||
      kernel_.bandwidths.size() == 0) {
    throw std::invalid_argument("KefModel: kernel mixture sizes differ");
  }
  if ((kernel_.bandwidths.array() <= 0.0).any()) {
    throw std::invalid_argument("KefModel: bandwidths must be > 0");
  }
  if ((kernel_.weights.array() < 0.0).any()) {
    throw std::invalid_argument("KefModel: kernel weights must be >= 0");
  }
  if (!(base_scale_ > 0.0)) {
    throw std::invalid_argument("KefModel: base scale must be > 0");
  }
}

KefModel KefModel::with_parameters(const Vector& alpha) const {
  KefModel out = *this;
  if (alpha.size() != alpha_.size()) {
    throw ShapeError("KefModel: wrong parameter count");
  }
  out.alpha_ = alpha;
  return out;
}

double KefModel::kernel_value(const Vector& x, const Vector& z) const {
  if (features_) return kernel_((*features_)(x), (*features_)(z));
  return kernel_(x, z);
}

double KefModel::log_base_density(const Vector& x) const {
  const double s2 = base_scale_ * base_scale_;
  return -0.5 * x.squaredNorm() / s2 -
         0.5 * static_cast<double>(dim()) *
             std::log(2.0 * std::numbers::pi * s2);
}

Vector KefModel::base_score(const Vector& x) const {
  return -x / (base_scale_ * base_scale_);
}

double KefModel::log_unnormalized_density(const Vector& x) const {
  double f = 0.0;
  for (Index l = 0; l < num_inducing(); ++l) {
    f += alpha_(l) * kernel_value(x, inducing_.row(l).transpose());
  }
  return f + log_base_density(x);
}

Var KefModel::kernel_matrix(const Var& x) const {
  check_batch("KefModel", x, dim());
  Tape& tape = x.tape();
  const Index n = x.shape().rows;
  const Index l = num_inducing();

  Matrix fz = inducing_;
  if (features_) {
    for (Index i = 0; i < l; ++i) {
      fz.row(i) = (*features_)(inducing_.row(i).transpose()).transpose();
    }
  }
  const Var fx = features_ ? features_->apply(x) : x;
  const Var sqx = ad::sum_axis1(ad::square(fx));
  const Vector sqz = fz.rowwise().squaredNorm();
  const Var cross = ad::matmul(fx, tape.constant_matrix(fz.transpose()));
  const Var d2 = ad::sub(ad::add(ad::expand_axis1(sqx, l),
                                 ad::expand_axis0(tape.constant(sqz), n)),
                         ad::scale(cross, 2.0));
  Var k;
  for (Index r = 0; r < kernel_.bandwidths.size(); ++r) {
    const double s = kernel_.bandwidths(r);
    const Var term =
        ad::scale(ad::exp(ad::scale(d2, -1.0 / (2.0 * s * s))), kernel_.weights(r));
    k = k.valid() ? ad::add(k, term) : term;
  }
  return k;
}

Var KefModel::log_unnormalized_density(const Var& x, const Var& theta) const {
  check_theta("KefModel", theta, num_parameters());
  const double s2 = base_scale_ * base_scale_;
  const double log_norm = -0.5 * static_cast<double>(dim()) *
                          std::log(2.0 * std::numbers::pi * s2);
  const Var f = ad::matvec(kernel_matrix(x), theta);
  const Var base =
      ad::add_scalar(ad::scale(ad::sum_axis1(ad::square(x)), -0.5 / s2), log_norm);
  return ad::add(f, base);
}

KernelDerivatives kernel_derivatives(const KefModel& kef, const Vector& x,
                                     const Vector& z, const Vector& v) {
  if (x.size() != kef.dim() || z.size() != kef.dim() || v.size() != kef.dim()) {
    throw ShapeError("kernel_derivatives: dimension mismatch");
  }
  if (kef.features()) {
    throw std::invalid_argument(
        "kernel_derivatives: closed form needs raw inputs; use the autodiff "
        "variant with a feature extractor");
  }
  const Vector diff = x - z;
  const double vd = v.dot(diff);
  const double vv = v.squaredNorm();
  const double d2 = diff.squaredNorm();
  const KernelMixture& k = kef.kernel();
  KernelDerivatives out;
  for (Index r = 0; r < k.bandwidths.size(); ++r) {
    const double s2 = k.bandwidths(r) * k.bandwidths(r);
    const double e = k.weights(r) * std::exp(-d2 / (2.0 * s2));
    out.directional += -e * vd / s2;
    out.curvature += e * (vd * vd / (s2 * s2) - vv / s2);
  }
  return out;
}

KernelDerivatives kernel_derivatives_autodiff(const KefModel& kef,
                                              const Vector& x, const Vector& z,
                                              const Vector& v) {
  if (x.size() != kef.dim() || z.size() != kef.dim() || v.size() != kef.dim()) {
    throw ShapeError("kernel_derivatives: dimension mismatch");
  }
  const KefModel single(Matrix(z.transpose()), Vector::Zero(1), kef.kernel(),
                        kef.base_scale(), kef.features());
  const Index d = kef.dim();
  const ad::ScalarFn k = [&](const Var& xv) {
    return ad::sum(single.kernel_matrix(ad::reshape(xv, Shape::matrix(1, d))));
  };
  Tape tape;
  KernelDerivatives out;
  out.directional = ad::gradient(tape, k, x).dot(v);
  out.curvature = v.dot(ad::hvp(tape, k, x, v));
  return out;
}

// ---------------------------------------------------------------------------
// Networks

Mlp::Mlp(std::vector<Index> sizes, Activation activation)
    : sizes_(std::move(sizes)), activation_(activation) {
  if (sizes_.size() < 2) throw std::invalid_argument("Mlp: need >= 2 layer sizes");
  for (Index s : sizes_) {
    if (s < 1) throw std::invalid_argument("Mlp: layer sizes must be >= 1");
  }
}

Index Mlp::num_parameters() const {
  Index n = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    n += sizes_[l] * sizes_[l + 1] + sizes_[l + 1];
  }
  return n;
}

Vector Mlp::initial_parameters(std::uint64_t seed) const {
  Vector theta = Vector::Zero(num_parameters());
  Index off = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const Index in = sizes_[l];
    const Index out = sizes_[l + 1];
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    SplitMix64 g = make_stream(seed, {0x6D6C70ULL, l});
    std::uniform_real_distribution<double> u(-a, a);
    for (Index i = 0; i < in * out; ++i) theta(off + i) = u(g);
    off += in * out + out;
  }
  return theta;
}

Var Mlp::forward(const Var& x, const Var& theta) const {
  check_batch("Mlp", x, input_dim());
  check_theta("Mlp", theta, num_parameters());
  Var h = x;
  Index off = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const Index in = sizes_[l];
    const Index out = sizes_[l + 1];
    const Var w = ad::reshape(ad::slice(theta, off, in * out), Shape::matrix(in, out));
    const Var b = ad::slice(theta, off + in * out, out);
    off += in * out + out;
    h = ad::add(ad::matmul(h, w), b);
    if (l + 2 < sizes_.size()) {
      h = activation_ == Activation::tanh ? ad::tanh(h) : ad::softplus(h);
    }
  }
  return h;
}

Matrix Mlp::forward(const Matrix& x, const Vector& theta) const {
  Tape tape;
  const Var xv = tape.constant_matrix(x);
  return forward(xv, tape.constant(theta)).value();
}

MlpEnergy::MlpEnergy(Index dim, std::vector<Index> hidden, Vector theta,
                     Activation activation)
    : net_([&] {
        std::vector<Index> sizes{dim};
        sizes.insert(sizes.end(), hidden.begin(), hidden.end());
        sizes.push_back(1);
        return Mlp(std::move(sizes), activation);
      }()),
      theta_(std::move(theta)) {
  if (theta_.size() != net_.num_parameters()) {
    throw ShapeError("MlpEnergy: wrong parameter count");
  }
}

MlpEnergy MlpEnergy::random(Index dim, std::uint64_t seed,
                            std::vector<Index> hidden, Activation activation) {
  std::vector<Index> sizes{dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(1);
  const Vector theta = Mlp(sizes, activation).initial_parameters(seed);
  return MlpEnergy(dim, std::move(hidden), theta, activation);
}

MlpEnergy MlpEnergy::with_parameters(const Vector& theta) const {
  MlpEnergy out = *this;
  if (theta.size() != theta_.size()) throw ShapeError("MlpEnergy: wrong parameter count");
  out.theta_ = theta;
  return out;
}

Var MlpEnergy::log_unnormalized_density(const Var& x, const Var& theta) const {
  const Var out = net_.forward(x, theta);
  return ad::reshape(out, Shape::vector(out.shape().rows));
}

double MlpEnergy::log_unnormalized_density(const Vector& x) const {
  return net_.forward(Matrix(x.transpose()), theta_)(0, 0);
}

ScoreNetwork::ScoreNetwork(Index dim, std::vector<Index> hidden, Vector theta,
                           Activation activation)
    : net_([&] {
        std::vector<Index> sizes{dim};
        sizes.insert(sizes.end(), hidden.begin(), hidden.end());
        sizes.push_back(dim);
        return Mlp(std::move(sizes), activation);
      }()),
      theta_(std::move(theta)) {
  if (theta_.size() != net_.num_parameters()) {
    throw ShapeError("ScoreNetwork: wrong parameter count");
  }
}

ScoreNetwork ScoreNetwork::random(Index dim, std::uint64_t seed,
                                  std::vector<Index> hidden,
                                  Activation activation) {
  std::vector<Index> sizes{dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(dim);
  const Vector theta = Mlp(sizes, activation).initial_parameters(seed);
  return ScoreNetwork(dim, std::move(hidden), theta, activation);
}

ScoreNetwork ScoreNetwork::with_parameters(const Vector& theta) const {
  ScoreNetwork out = *this;
  if (theta.size() != theta_.size()) throw ShapeError("ScoreNetwork: wrong parameter count");
  out.theta_ = theta;
  return out;
}

// ---------------------------------------------------------------------------
// ReparamGaussian

ReparamGaussian::ReparamGaussian(Vector mean, Vector log_scale)
    : mean_(std::move(mean)), log_scale_(std::move(log_scale)) {
  if (mean_.size() != log_scale_.size() || mean_.size() < 1) {
    throw std::invalid_argument("ReparamGaussian: mean and log_scale sizes differ");
  }
}

Matrix ReparamGaussian::noise(Index n, std::uint64_t seed) const {
  if (n < 1) throw std::invalid_argument("sample: n must be >= 1");
  return standard_normal(n, dim(), seed, kReparamNoiseTag);
}

Matrix ReparamGaussian::transform(const Matrix& eps) const {
  const Eigen::RowVectorXd scale = log_scale_.array().exp().transpose();
  return (eps.array().rowwise() * scale.array()).rowwise() +
         mean_.transpose().array();
}

Matrix ReparamGaussian::sample(Index n, std::uint64_t seed) const {
  return transform(noise(n, seed));
}

Var ReparamGaussian::transform(const Var& mean, const Var& log_scale,
                               const Var& eps) {
  return ad::add(mean, ad::mul(ad::exp(log_scale), eps));
}

double ReparamGaussian::entropy() const {
  return log_scale_.sum() + 0.5 * static_cast<double>(dim()) *
                                (1.0 + std::log(2.0 * std::numbers::pi));
}

Matrix ReparamGaussian::score(const Matrix& x) const {
  const Eigen::RowVectorXd inv_var = (-2.0 * log_scale_.array()).exp().transpose();
  return -((x.rowwise() - mean_.transpose()).array().rowwise() *
           inv_var.array())
              .matrix();
}

Matrix ReparamGaussian::covariance() const {
  return (2.0 * log_scale_.array()).exp().matrix().asDiagonal();
}

}  // namespace ssm
