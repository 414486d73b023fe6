#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "corefed/errors.hpp"
#include "corefed/rng.hpp"
#include "corefed/variational.hpp"

namespace corefed {

enum class Activation { relu, tanh, sigmoid };
enum class LikelihoodKind { gaussian_regression, categorical };

inline Activation parse_activation(const std::string &s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "sigmoid") return Activation::sigmoid;
  throw ConfigError("unknown activation '" + s + "'");
}

inline const char *to_string(Activation a) {
  switch (a) {
  case Activation::relu: return "relu";
  case Activation::tanh: return "tanh";
  case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

/// Fully connected network shape and observation model.
///
/// layer_sizes = (s_0, s_1, ..., s_{L+1}); parameters are laid out layer by
/// layer as a row-major weight block W_l (s_{l+1} x s_l) followed by the bias
/// b_l (s_{l+1}).
struct NetworkSpec {
  std::vector<int> layer_sizes;
  Activation activation = Activation::relu;
  LikelihoodKind likelihood = LikelihoodKind::gaussian_regression;
  double sigma_eps = 1.0;

  int input_dim() const { return layer_sizes.front(); }
  int output_dim() const { return layer_sizes.back(); }
  int num_layers() const { return static_cast<int>(layer_sizes.size()) - 1; }

  Eigen::Index parameter_count() const {
    Eigen::Index t = 0;
    for (int l = 0; l < num_layers(); ++l) {
      t += static_cast<Eigen::Index>(layer_sizes[l] + 1) * layer_sizes[l + 1];
    }
    return t;
  }

  void validate() const {
    if (layer_sizes.size() < 2) {
      throw DomainError("NetworkSpec: need at least input and output sizes");
    }
    for (int s : layer_sizes) {
      if (s < 1) throw DomainError("NetworkSpec: layer sizes must be >= 1");
    }
    if (likelihood == LikelihoodKind::gaussian_regression && !(sigma_eps > 0.0)) {
      throw DomainError("NetworkSpec: sigma_eps must be positive");
    }
    if (likelihood == LikelihoodKind::categorical && output_dim() < 2) {
      throw DomainError("NetworkSpec: categorical likelihood needs >= 2 outputs");
    }
  }
};

/// n rows of inputs with either real targets (regression) or integer labels.
struct LabeledDataset {
  Matrix x;                 // n x s_0
  Matrix y;                 // n x s_{L+1}, regression only
  std::vector<int> labels;  // length n, classification only

  Eigen::Index size() const { return x.rows(); }
  bool is_classification() const { return !labels.empty(); }

  LabeledDataset subset(const std::vector<std::size_t> &idx) const {
    LabeledDataset out;
    out.x.resize(static_cast<Eigen::Index>(idx.size()), x.cols());
    if (!is_classification()) out.y.resize(static_cast<Eigen::Index>(idx.size()), y.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto i = static_cast<Eigen::Index>(idx[r]);
      out.x.row(static_cast<Eigen::Index>(r)) = x.row(i);
      if (is_classification()) {
        out.labels.push_back(labels[idx[r]]);
      } else {
        out.y.row(static_cast<Eigen::Index>(r)) = y.row(i);
      }
    }
    return out;
  }
};

inline void check_dataset(const NetworkSpec &spec, const LabeledDataset &d) {
  if (d.size() < 1) throw DomainError("dataset is empty");
  if (d.x.cols() != spec.input_dim()) {
    throw DimensionError("dataset input width " + std::to_string(d.x.cols()) +
                         " != network input " + std::to_string(spec.input_dim()));
  }
  if (spec.likelihood == LikelihoodKind::categorical) {
    if (static_cast<Eigen::Index>(d.labels.size()) != d.size()) {
      throw DimensionError("classification dataset needs one label per row");
    }
  } else if (d.y.rows() != d.size() || d.y.cols() != spec.output_dim()) {
    throw DimensionError("regression targets must be n x output_dim");
  }
}

/// Indices into a dataset plus optional per-point weights (empty = all 1).
struct Minibatch {
  std::vector<std::size_t> indices;
  std::vector<double> weights;

  std::size_t size() const { return indices.size(); }
  double weight(std::size_t j) const { return weights.empty() ? 1.0 : weights[j]; }
};

namespace detail {

using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline double activate(Activation a, double z) {
  switch (a) {
  case Activation::relu: return z > 0.0 ? z : 0.0;
  case Activation::tanh: return std::tanh(z);
  case Activation::sigmoid: return sigmoid(z);
  }
  return z;
}

/// Derivative expressed through pre-activation z and activation value h.
inline double activate_grad(Activation a, double z, double h) {
  switch (a) {
  case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
  case Activation::tanh: return 1.0 - h * h;
  case Activation::sigmoid: return h * (1.0 - h);
  }
  return 1.0;
}

inline void check_theta(const NetworkSpec &spec, const Vector &theta) {
  if (theta.size() != spec.parameter_count()) {
    throw DimensionError("parameter vector length " + std::to_string(theta.size()) +
                         " != network parameter count " +
                         std::to_string(spec.parameter_count()));
  }
}

/// Batched forward pass keeping pre- and post-activations for backprop.
struct BatchForward {
  std::vector<Matrix> pre;   // per layer, rows = batch
  std::vector<Matrix> post;  // post[0] = input
};

inline BatchForward forward_batch(const NetworkSpec &spec, const Vector &theta, const Matrix &x) {
  BatchForward f;
  f.post.push_back(x);
  Eigen::Index off = 0;
  const int layers = spec.num_layers();
  for (int l = 0; l < layers; ++l) {
    const int in = spec.layer_sizes[l];
    const int out = spec.layer_sizes[l + 1];
    RowMajorMap w(theta.data() + off, out, in);
    off += static_cast<Eigen::Index>(in) * out;
    Eigen::Map<const Vector> b(theta.data() + off, out);
    off += out;
    Matrix z = f.post.back() * w.transpose();
    z.rowwise() += b.transpose();
    if (l + 1 < layers) {
      Matrix h = z.unaryExpr([a = spec.activation](double v) { return activate(a, v); });
      f.pre.push_back(std::move(z));
      f.post.push_back(std::move(h));
    } else {
      f.pre.push_back(z);
      f.post.push_back(std::move(z));
    }
  }
  return f;
}

/// Per-row log-likelihoods and d ll / d output for a forward result.
inline Vector row_log_likelihoods(const NetworkSpec &spec, const Matrix &out,
                                  const LabeledDataset &data, const std::vector<std::size_t> &idx,
                                  Matrix *d_out) {
  const auto b = static_cast<Eigen::Index>(idx.size());
  Vector ll(b);
  if (d_out) d_out->resize(b, out.cols());
  if (spec.likelihood == LikelihoodKind::gaussian_regression) {
    const double s2 = spec.sigma_eps * spec.sigma_eps;
    const double norm = 0.5 * static_cast<double>(out.cols()) * std::log(2.0 * std::numbers::pi * s2);
    for (Eigen::Index r = 0; r < b; ++r) {
      const auto i = static_cast<Eigen::Index>(idx[static_cast<std::size_t>(r)]);
      const Eigen::RowVectorXd resid = data.y.row(i) - out.row(r);
      ll[r] = -resid.squaredNorm() / (2.0 * s2) - norm;
      if (d_out) d_out->row(r) = resid / s2;
    }
  } else {
    for (Eigen::Index r = 0; r < b; ++r) {
      const int label = data.labels[idx[static_cast<std::size_t>(r)]];
      if (label < 0 || label >= out.cols()) {
        throw DomainError("label " + std::to_string(label) + " outside output range");
      }
      const double mx = out.row(r).maxCoeff();
      const Eigen::RowVectorXd e = (out.row(r).array() - mx).exp().matrix();
      const double lse = mx + std::log(e.sum());
      ll[r] = out(r, label) - lse;
      if (d_out) {
        d_out->row(r) = -e / e.sum();
        (*d_out)(r, label) += 1.0;
      }
    }
  }
  return ll;
}

inline Matrix gather_rows(const Matrix &m, const std::vector<std::size_t> &idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    out.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(idx[r]));
  }
  return out;
}

} // namespace detail

/// f_theta(x) for a single input.
inline Vector forward(const NetworkSpec &spec, const Vector &theta, const Vector &x) {
  detail::check_theta(spec, theta);
  if (x.size() != spec.input_dim()) {
    throw DimensionError("forward: input length " + std::to_string(x.size()) +
                         " != " + std::to_string(spec.input_dim()));
  }
  auto f = detail::forward_batch(spec, theta, x.transpose());
  return f.post.back().row(0).transpose();
}

/// Network outputs for every row of x.
inline Matrix forward_rows(const NetworkSpec &spec, const Vector &theta, const Matrix &x) {
  detail::check_theta(spec, theta);
  if (x.cols() != spec.input_dim()) throw DimensionError("forward_rows: input width mismatch");
  return detail::forward_batch(spec, theta, x).post.back();
}

/// log p_theta(y | x) for regression targets.
inline double log_likelihood(const NetworkSpec &spec, const Vector &theta, const Vector &x,
                             const Vector &y) {
  if (spec.likelihood != LikelihoodKind::gaussian_regression) {
    throw DomainError("log_likelihood: regression target given to categorical model");
  }
  if (!(spec.sigma_eps > 0.0)) throw DomainError("log_likelihood: sigma_eps must be positive");
  const Vector out = forward(spec, theta, x);
  detail::require_same_size(static_cast<std::size_t>(y.size()),
                            static_cast<std::size_t>(out.size()), "log_likelihood target");
  const double s2 = spec.sigma_eps * spec.sigma_eps;
  return -(y - out).squaredNorm() / (2.0 * s2) -
         0.5 * static_cast<double>(out.size()) * std::log(2.0 * std::numbers::pi * s2);
}

/// log softmax(f_theta(x))[label].
inline double log_likelihood(const NetworkSpec &spec, const Vector &theta, const Vector &x, int label) {
  if (spec.likelihood != LikelihoodKind::categorical) {
    throw DomainError("log_likelihood: label given to regression model");
  }
  const Vector out = forward(spec, theta, x);
  if (label < 0 || label >= out.size()) throw DomainError("log_likelihood: label out of range");
  const double mx = out.maxCoeff();
  return out[label] - mx - std::log((out.array() - mx).exp().sum());
}

/// log-likelihood of every listed row under theta.
inline Vector log_likelihoods(const NetworkSpec &spec, const Vector &theta, const LabeledDataset &data,
                              const std::vector<std::size_t> &idx) {
  detail::check_theta(spec, theta);
  if (spec.likelihood == LikelihoodKind::gaussian_regression && !(spec.sigma_eps > 0.0)) {
    throw DomainError("sigma_eps must be positive");
  }
  const auto f = detail::forward_batch(spec, theta, detail::gather_rows(data.x, idx));
  return detail::row_log_likelihoods(spec, f.post.back(), data, idx, nullptr);
}

inline std::vector<std::size_t> all_indices(Eigen::Index n) {
  std::vector<std::size_t> idx(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

/// sum_j c_j log p_theta(D_j) and its gradient w.r.t. theta (accumulated into grad).
inline double weighted_log_likelihood_gradient(const NetworkSpec &spec, const Vector &theta,
                                               const LabeledDataset &data,
                                               const std::vector<std::size_t> &idx,
                                               const Vector &coef, Vector &grad) {
  const auto f = detail::forward_batch(spec, theta, detail::gather_rows(data.x, idx));
  Matrix delta;
  const Vector ll = detail::row_log_likelihoods(spec, f.post.back(), data, idx, &delta);
  delta = coef.asDiagonal() * delta;  // d(sum c ll)/d out

  // Walk layers backwards; offsets recomputed from the front.
  const int layers = spec.num_layers();
  std::vector<Eigen::Index> offsets(static_cast<std::size_t>(layers));
  Eigen::Index off = 0;
  for (int l = 0; l < layers; ++l) {
    offsets[static_cast<std::size_t>(l)] = off;
    off += static_cast<Eigen::Index>(spec.layer_sizes[l] + 1) * spec.layer_sizes[l + 1];
  }
  for (int l = layers - 1; l >= 0; --l) {
    const int in = spec.layer_sizes[l];
    const int out = spec.layer_sizes[l + 1];
    const Eigen::Index o = offsets[static_cast<std::size_t>(l)];
    const Matrix &a_prev = f.post[static_cast<std::size_t>(l)];
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> gw(grad.data() + o, out, in);
    gw.noalias() += delta.transpose() * a_prev;
    Eigen::Map<Vector> gb(grad.data() + o + static_cast<Eigen::Index>(in) * out, out);
    gb += delta.colwise().sum().transpose();
    if (l > 0) {
      detail::RowMajorMap w(theta.data() + o, out, in);
      Matrix d_prev = delta * w;
      const Matrix &z = f.pre[static_cast<std::size_t>(l - 1)];
      const Matrix &h = f.post[static_cast<std::size_t>(l)];
      for (Eigen::Index r = 0; r < d_prev.rows(); ++r) {
        for (Eigen::Index c = 0; c < d_prev.cols(); ++c) {
          d_prev(r, c) *= detail::activate_grad(spec.activation, z(r, c), h(r, c));
        }
      }
      delta = std::move(d_prev);
    }
  }
  return coef.dot(ll);
}

/// Inputs shared by elbo_estimate and elbo_gradient.
struct ElboTerms {
  const NetworkSpec &spec;
  const LabeledDataset &data;
  const Minibatch &batch;
  double n;     // client data size (scales the minibatch sum)
  double zeta;  // weight on KL(v || z)
  const std::vector<Vector> &noise;  // K standard-normal draws of length T
};

namespace detail {

inline Vector batch_coefficients(const ElboTerms &t) {
  if (t.batch.size() == 0) throw DomainError("elbo: empty minibatch");
  if (t.noise.empty()) throw DomainError("elbo: need at least one Monte-Carlo draw");
  if (!t.batch.weights.empty() && t.batch.weights.size() != t.batch.size()) {
    throw DimensionError("elbo: weights length must equal batch size");
  }
  if (!(t.zeta >= 0.0)) throw DomainError("elbo: zeta must be nonnegative");
  const auto b = static_cast<Eigen::Index>(t.batch.size());
  Vector c(b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const double w = t.batch.weight(static_cast<std::size_t>(j));
    if (!(w >= 0.0)) throw DomainError("elbo: negative weight");
    c[j] = w;
  }
  return c;
}

} // namespace detail

/// Minibatch Monte-Carlo estimate
///   -(n/b)(1/K) sum_j sum_k w_j log p_{theta_k}(D_j) + zeta KL(v || z),
/// with theta_k = reparameterize(v, noise[k]).
inline double elbo_estimate(const MeanFieldGaussian &v, const MeanFieldGaussian &z, const ElboTerms &t) {
  const Vector c = detail::batch_coefficients(t);
  const double scale = -t.n / (static_cast<double>(t.batch.size()) * static_cast<double>(t.noise.size()));
  double data_term = 0.0;
  for (const auto &g : t.noise) {
    const Vector theta = reparameterize(v, g);
    data_term += c.dot(log_likelihoods(t.spec, theta, t.data, t.batch.indices));
  }
  double value = scale * data_term;
  if (t.zeta != 0.0) value += t.zeta * kl_diag_gauss(v, z);
  return value;
}

/// Exact pathwise gradient of elbo_estimate w.r.t. (mu, rho) under the same
/// noise; packed as (d mu, d rho), length 2T.
inline Vector elbo_gradient(const MeanFieldGaussian &v, const MeanFieldGaussian &z, const ElboTerms &t) {
  Vector c = detail::batch_coefficients(t);
  detail::check_theta(t.spec, v.mu);
  const auto dim = v.size();
  const double scale = -t.n / (static_cast<double>(t.batch.size()) * static_cast<double>(t.noise.size()));
  c *= scale;
  Vector d_mu = Vector::Zero(dim);
  Vector d_rho = Vector::Zero(dim);
  const Vector dsig = v.rho.unaryExpr([](double r) { return sigmoid(r); });
  if (c.cwiseAbs().maxCoeff() > 0.0) {
    Vector d_theta(dim);
    for (const auto &g : t.noise) {
      detail::require_same_size(static_cast<std::size_t>(g.size()), static_cast<std::size_t>(dim),
                                "elbo_gradient noise");
      const Vector theta = reparameterize(v, g);
      d_theta.setZero();
      weighted_log_likelihood_gradient(t.spec, theta, t.data, t.batch.indices, c, d_theta);
      d_mu += d_theta;
      d_rho += d_theta.cwiseProduct(g).cwiseProduct(dsig);
    }
  }
  if (t.zeta != 0.0) {
    const auto kg = kl_diag_gauss_gradient(v, z);
    d_mu += t.zeta * kg.d_mu_q;
    d_rho += t.zeta * kg.d_rho_q;
  }
  Vector out(2 * dim);
  out << d_mu, d_rho;
  return out;
}

/// v <- v - eta * grad (grad packed as (d mu, d rho)).
inline void sgd_step(MeanFieldGaussian &v, const Vector &grad, double eta) {
  const auto t = v.size();
  v.mu -= eta * grad.head(t);
  v.rho -= eta * grad.tail(t);
}

/// Initial variational parameters: mu ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) per
/// layer, rho constant (default -3, sigma ~ 0.0486).
inline MeanFieldGaussian init_variational(const NetworkSpec &spec, Rng &rng, double rho0 = -3.0) {
  spec.validate();
  const auto t = spec.parameter_count();
  Vector mu(t);
  Eigen::Index off = 0;
  for (int l = 0; l < spec.num_layers(); ++l) {
    const int in = spec.layer_sizes[l];
    const int out = spec.layer_sizes[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    const Eigen::Index count = static_cast<Eigen::Index>(in + 1) * out;
    for (Eigen::Index i = 0; i < count; ++i) mu[off + i] = u(rng);
    off += count;
  }
  return {mu, Vector::Constant(t, rho0)};
}

/// Mean predictive error of the network at theta on a labelled set: MSE for
/// regression, classification accuracy otherwise.
struct EvalResult {
  double loss = 0.0;    // mean negative log-likelihood
  double metric = 0.0;  // MSE (regression) or accuracy (classification)
};

inline EvalResult evaluate(const NetworkSpec &spec, const Vector &theta, const LabeledDataset &data) {
  const auto idx = all_indices(data.size());
  const Matrix out = forward_rows(spec, theta, data.x);
  const Vector ll = detail::row_log_likelihoods(spec, out, data, idx, nullptr);
  EvalResult r;
  r.loss = -ll.mean();
  if (spec.likelihood == LikelihoodKind::gaussian_regression) {
    r.metric = (data.y - out).rowwise().squaredNorm().mean();
  } else {
    Eigen::Index hits = 0;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      Eigen::Index arg = 0;
      out.row(i).maxCoeff(&arg);
      if (arg == data.labels[static_cast<std::size_t>(i)]) ++hits;
    }
    r.metric = static_cast<double>(hits) / static_cast<double>(out.rows());
  }
  return r;
}

} // namespace corefed
