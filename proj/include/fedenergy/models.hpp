#pragma once

#include "fedenergy/core.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace fedenergy {

struct DataPoint {
  Eigen::VectorXd features;
  double target = 0.0;  // regression value, or class label stored as an integer-valued double
  int group = -1;       // source group tag used by the optimum-skew partition; -1 when unused
};

using Dataset = std::vector<DataPoint>;

enum class ModelKind { Quadratic, Logistic, TinyMlp };

inline const char* to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::Quadratic: return "quadratic";
    case ModelKind::Logistic: return "logistic-l2";
    case ModelKind::TinyMlp: return "tiny-mlp";
  }
  return "?";
}

/// Per-sample loss l(w, x) plus an optional (l2/2)||w||^2 term.
///
/// quadratic:   l = (w.x - y)^2 / 2
/// logistic-l2: multinomial softmax cross-entropy, parameters are a classes x d
///              row-major weight matrix (classes = 2 is ordinary logistic regression)
/// tiny-mlp:    one tanh hidden layer; scalar squared loss when classes == 0,
///              softmax cross-entropy otherwise. Non-convex.
struct LossModel {
  ModelKind kind = ModelKind::Quadratic;
  Eigen::Index input_dim = 1;
  double l2 = 0.0;
  int classes = 0;
  int hidden = 8;

  static LossModel quadratic(Eigen::Index d, double l2 = 0.0) {
    return validated({ModelKind::Quadratic, d, l2, 0, 0});
  }
  static LossModel logistic(Eigen::Index d, int classes, double l2) {
    return validated({ModelKind::Logistic, d, l2, classes, 0});
  }
  static LossModel tiny_mlp(Eigen::Index d, int hidden, int classes, double l2 = 0.0) {
    return validated({ModelKind::TinyMlp, d, l2, classes, hidden});
  }

  bool convex() const { return kind != ModelKind::TinyMlp; }
  bool classification() const { return classes >= 2; }
  Eigen::Index outputs() const { return classes >= 2 ? classes : 1; }

  Eigen::Index parameter_count() const {
    switch (kind) {
      case ModelKind::Quadratic: return input_dim;
      case ModelKind::Logistic: return classes * input_dim;
      case ModelKind::TinyMlp: return hidden * input_dim + hidden + outputs() * hidden + outputs();
    }
    return 0;
  }

  static LossModel validated(LossModel m) {
    if (m.input_dim <= 0) throw InvalidArgument("LossModel: input dimension must be positive");
    if (!(m.l2 >= 0.0) || !std::isfinite(m.l2)) throw InvalidArgument("LossModel: l2 must be finite and >= 0");
    if (m.kind == ModelKind::Quadratic && m.classes != 0) throw InvalidArgument("LossModel: quadratic is regression only");
    if (m.kind == ModelKind::Logistic && m.classes < 2) throw InvalidArgument("LossModel: logistic-l2 needs classes >= 2");
    if (m.kind == ModelKind::TinyMlp) {
      if (m.hidden < 1 || m.hidden > 32) throw InvalidArgument("LossModel: tiny-mlp hidden units must be in [1, 32]");
      if (m.classes == 1 || m.classes < 0) throw InvalidArgument("LossModel: tiny-mlp classes must be 0 or >= 2");
    }
    return m;
  }
};

struct MinibatchSample {
  std::vector<std::size_t> indices;  // distinct, ascending
};

struct SmoothnessConstants {
  double mu = 0.0;
  double L = 0.0;
  double sigma2 = 0.0;
  double G2 = 0.0;
};

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void check_params(const LossModel& model, const ModelVector& w) {
  if (w.size() != model.parameter_count()) {
    throw InvalidArgument("model parameters: expected " + std::to_string(model.parameter_count()) +
                          " entries, got " + std::to_string(w.size()));
  }
}

inline void check_point(const LossModel& model, const DataPoint& x) {
  if (x.features.size() != model.input_dim) {
    throw InvalidArgument("data point: expected " + std::to_string(model.input_dim) + " features, got " +
                          std::to_string(x.features.size()));
  }
  if (model.classification()) {
    const double y = x.target;
    if (!(y >= 0.0) || y >= model.classes || y != std::floor(y)) {
      throw InvalidArgument("data point: class label out of range");
    }
  }
}

inline double log_sum_exp(const Eigen::VectorXd& z) {
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum());
}

inline Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
  Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

struct MlpView {
  Eigen::Map<const RowMajor> W1;
  Eigen::Map<const Eigen::VectorXd> b1;
  Eigen::Map<const RowMajor> W2;
  Eigen::Map<const Eigen::VectorXd> b2;

  MlpView(const LossModel& m, const double* p)
      : W1(p, m.hidden, m.input_dim),
        b1(p + m.hidden * m.input_dim, m.hidden),
        W2(p + m.hidden * m.input_dim + m.hidden, m.outputs(), m.hidden),
        b2(p + m.hidden * m.input_dim + m.hidden + m.outputs() * m.hidden, m.outputs()) {}
};

}  // namespace detail

/// Unregularized per-sample loss.
inline double sample_loss(const LossModel& model, const ModelVector& w, const DataPoint& x) {
  switch (model.kind) {
    case ModelKind::Quadratic: {
      const double r = w.dot(x.features) - x.target;
      return 0.5 * r * r;
    }
    case ModelKind::Logistic: {
      Eigen::Map<const detail::RowMajor> W(w.data(), model.classes, model.input_dim);
      const Eigen::VectorXd z = W * x.features;
      return detail::log_sum_exp(z) - z(static_cast<Eigen::Index>(x.target));
    }
    case ModelKind::TinyMlp: {
      const detail::MlpView net(model, w.data());
      const Eigen::VectorXd a = (net.W1 * x.features + net.b1).array().tanh().matrix();
      const Eigen::VectorXd z = net.W2 * a + net.b2;
      if (!model.classification()) {
        const double r = z(0) - x.target;
        return 0.5 * r * r;
      }
      return detail::log_sum_exp(z) - z(static_cast<Eigen::Index>(x.target));
    }
  }
  return 0.0;
}

/// out += scale * grad_w l(w, x), unregularized.
inline void accumulate_sample_gradient(const LossModel& model, const ModelVector& w, const DataPoint& x,
                                       double scale, ModelVector& out) {
  switch (model.kind) {
    case ModelKind::Quadratic: {
      const double r = w.dot(x.features) - x.target;
      out.noalias() += (scale * r) * x.features;
      return;
    }
    case ModelKind::Logistic: {
      Eigen::Map<const detail::RowMajor> W(w.data(), model.classes, model.input_dim);
      Eigen::VectorXd dz = detail::softmax(W * x.features);
      dz(static_cast<Eigen::Index>(x.target)) -= 1.0;
      Eigen::Map<detail::RowMajor> G(out.data(), model.classes, model.input_dim);
      G.noalias() += (scale * dz) * x.features.transpose();
      return;
    }
    case ModelKind::TinyMlp: {
      const detail::MlpView net(model, w.data());
      const Eigen::VectorXd a = (net.W1 * x.features + net.b1).array().tanh().matrix();
      const Eigen::VectorXd z = net.W2 * a + net.b2;
      Eigen::VectorXd dz;
      if (model.classification()) {
        dz = detail::softmax(z);
        dz(static_cast<Eigen::Index>(x.target)) -= 1.0;
      } else {
        dz = Eigen::VectorXd::Constant(1, z(0) - x.target);
      }
      const Eigen::VectorXd dpre = ((net.W2.transpose() * dz).array() * (1.0 - a.array().square())).matrix();
      const Eigen::Index h = model.hidden, d = model.input_dim, o = model.outputs();
      double* g = out.data();
      Eigen::Map<detail::RowMajor>(g, h, d).noalias() += (scale * dpre) * x.features.transpose();
      Eigen::Map<Eigen::VectorXd>(g + h * d, h) += scale * dpre;
      Eigen::Map<detail::RowMajor>(g + h * d + h, o, h).noalias() += (scale * dz) * a.transpose();
      Eigen::Map<Eigen::VectorXd>(g + h * d + h + o * h, o) += scale * dz;
      return;
    }
  }
}

/// F(w) = (1/|data|) sum_j l(w, x_j) + (l2/2)||w||^2.
inline double loss(const LossModel& model, const ModelVector& w, std::span<const DataPoint> data) {
  detail::check_params(model, w);
  if (data.empty()) throw InvalidArgument("loss: empty dataset");
  double total = 0.0;
  for (const auto& x : data) {
    detail::check_point(model, x);
    total += sample_loss(model, w, x);
  }
  return total / static_cast<double>(data.size()) + 0.5 * model.l2 * w.squaredNorm();
}

/// Full gradient of `loss`.
inline ModelVector full_gradient(const LossModel& model, const ModelVector& w, std::span<const DataPoint> data) {
  detail::check_params(model, w);
  if (data.empty()) throw InvalidArgument("full_gradient: empty dataset");
  ModelVector g = ModelVector::Zero(w.size());
  const double scale = 1.0 / static_cast<double>(data.size());
  for (const auto& x : data) {
    detail::check_point(model, x);
    accumulate_sample_gradient(model, w, x, scale, g);
  }
  g.noalias() += model.l2 * w;
  return g;
}

/// Gradient of the minibatch-average loss (regularizer included).
inline ModelVector stochastic_gradient(const LossModel& model, const ModelVector& w,
                                       std::span<const DataPoint> data, const MinibatchSample& batch) {
  detail::check_params(model, w);
  if (batch.indices.empty()) throw InvalidArgument("stochastic_gradient: empty batch");
  ModelVector g = ModelVector::Zero(w.size());
  const double scale = 1.0 / static_cast<double>(batch.indices.size());
  for (const std::size_t j : batch.indices) {
    if (j >= data.size()) throw InvalidArgument("stochastic_gradient: batch index out of range");
    detail::check_point(model, data[j]);
    accumulate_sample_gradient(model, w, data[j], scale, g);
  }
  g.noalias() += model.l2 * w;
  return g;
}

/// Uniform size-min(b, n) subset of {0..n-1} without replacement (Floyd's algorithm).
/// b >= n yields the whole dataset without consuming randomness.
inline MinibatchSample sample_minibatch(std::size_t n, std::size_t b, RngStream& rng) {
  if (n == 0) throw InvalidArgument("sample_minibatch: empty dataset");
  if (b == 0) throw InvalidArgument("sample_minibatch: batch size must be >= 1");
  MinibatchSample s;
  if (b >= n) {
    s.indices.resize(n);
    for (std::size_t i = 0; i < n; ++i) s.indices[i] = i;
    return s;
  }
  s.indices.reserve(b);
  for (std::size_t j = n - b; j < n; ++j) {
    const auto t = static_cast<std::size_t>(rng.uniform_below(j + 1));
    if (std::find(s.indices.begin(), s.indices.end(), t) == s.indices.end()) {
      s.indices.push_back(t);
    } else {
      s.indices.push_back(j);
    }
  }
  std::sort(s.indices.begin(), s.indices.end());
  return s;
}

inline double classification_accuracy(const LossModel& model, const ModelVector& w, std::span<const DataPoint> data) {
  if (!model.classification()) throw UnsupportedModel("accuracy is defined for classification models only");
  detail::check_params(model, w);
  if (data.empty()) throw InvalidArgument("classification_accuracy: empty dataset");
  std::size_t correct = 0;
  for (const auto& x : data) {
    detail::check_point(model, x);
    Eigen::VectorXd z;
    if (model.kind == ModelKind::Logistic) {
      Eigen::Map<const detail::RowMajor> W(w.data(), model.classes, model.input_dim);
      z = W * x.features;
    } else {
      const detail::MlpView net(model, w.data());
      z = net.W2 * (net.W1 * x.features + net.b1).array().tanh().matrix() + net.b2;
    }
    Eigen::Index arg = 0;
    z.maxCoeff(&arg);
    if (arg == static_cast<Eigen::Index>(x.target)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

inline Eigen::MatrixXd design_matrix(std::span<const DataPoint> data) {
  if (data.empty()) throw InvalidArgument("design_matrix: empty dataset");
  const Eigen::Index d = data.front().features.size();
  Eigen::MatrixXd X(static_cast<Eigen::Index>(data.size()), d);
  for (std::size_t j = 0; j < data.size(); ++j) {
    if (data[j].features.size() != d) throw InvalidArgument("design_matrix: ragged features");
    X.row(static_cast<Eigen::Index>(j)) = data[j].features.transpose();
  }
  return X;
}

/// Eigenvalues of X^T X / n, ascending.
inline Eigen::VectorXd second_moment_spectrum(std::span<const DataPoint> data) {
  const Eigen::MatrixXd X = design_matrix(data);
  const Eigen::MatrixXd S = X.transpose() * X / static_cast<double>(X.rows());
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(S, Eigen::EigenvaluesOnly).eigenvalues();
}

// ---------------------------------------------------------------------------
// Gradient moments under uniform minibatch sampling without replacement

struct GradientMoments {
  double mean_norm2 = 0.0;  // ||grad F_i(w)||^2
  double variance = 0.0;    // E ||g(w, xi) - grad F_i(w)||^2
  double second_moment() const { return variance + mean_norm2; }
};

/// Exact moments of the size-b minibatch gradient at w. The variance of a
/// without-replacement sample mean is (n-b)/(b(n-1)) times the population
/// variance of the per-sample gradients.
inline GradientMoments gradient_moments(const LossModel& model, const ModelVector& w,
                                        std::span<const DataPoint> data, std::size_t batch_size) {
  detail::check_params(model, w);
  if (data.empty()) throw InvalidArgument("gradient_moments: empty dataset");
  if (batch_size == 0) throw InvalidArgument("gradient_moments: batch size must be >= 1");
  const std::size_t n = data.size();
  const auto p = model.parameter_count();
  Eigen::MatrixXd per_sample(p, static_cast<Eigen::Index>(n));
  for (std::size_t j = 0; j < n; ++j) {
    ModelVector g = ModelVector::Zero(p);
    accumulate_sample_gradient(model, w, data[j], 1.0, g);
    per_sample.col(static_cast<Eigen::Index>(j)) = g;
  }
  const ModelVector mean = per_sample.rowwise().mean();
  GradientMoments m;
  m.mean_norm2 = (mean + model.l2 * w).squaredNorm();
  const std::size_t b = std::min(batch_size, n);
  if (n > 1 && b < n) {
    const double population = (per_sample.colwise() - mean).colwise().squaredNorm().sum() / static_cast<double>(n);
    m.variance = population * static_cast<double>(n - b) / (static_cast<double>(b) * static_cast<double>(n - 1));
  }
  return m;
}

/// E||g(w_local, xi) - grad F_i(w_round_start)||^2: the variance measured
/// against the round-start gradient, as the bounded-variance assumption states it.
inline double round_start_variance(const LossModel& model, const ModelVector& w_local, const ModelVector& w_round_start,
                                   std::span<const DataPoint> data, std::size_t batch_size) {
  const GradientMoments m = gradient_moments(model, w_local, data, batch_size);
  const ModelVector drift = full_gradient(model, w_local, data) - full_gradient(model, w_round_start, data);
  return m.variance + drift.squaredNorm();
}

struct ConstantsEstimate {
  SmoothnessConstants constants;
  std::string protocol;  // how sigma2 / G2 were obtained
};

/// mu and L are analytic (data spectra plus l2); sigma2 and G2 are exact
/// minibatch moments maximized over `w_samples` and clients.
inline ConstantsEstimate estimate_constants(const LossModel& model, std::span<const Dataset> datasets,
                                            std::span<const ModelVector> w_samples, std::size_t batch_size) {
  if (!model.convex()) throw UnsupportedModel("estimate_constants: tiny-mlp is non-convex");
  if (datasets.empty()) throw InvalidArgument("estimate_constants: no client datasets");
  ConstantsEstimate est;
  double mu = std::numeric_limits<double>::infinity();
  double L = 0.0;
  for (const auto& data : datasets) {
    const Eigen::VectorXd spectrum = second_moment_spectrum(data);
    if (model.kind == ModelKind::Quadratic) {
      mu = std::min(mu, std::max(0.0, spectrum.minCoeff()) + model.l2);
      L = std::max(L, spectrum.maxCoeff() + model.l2);
    } else {
      // Softmax Hessian is bounded by (1/2) X^T X / n; its lower bound is only the regularizer.
      mu = std::min(mu, model.l2);
      L = std::max(L, 0.5 * spectrum.maxCoeff() + model.l2);
    }
  }
  est.constants.mu = mu;
  est.constants.L = L;
  for (const auto& w : w_samples) {
    for (const auto& data : datasets) {
      const GradientMoments m = gradient_moments(model, w, data, batch_size);
      est.constants.sigma2 = std::max(est.constants.sigma2, m.variance);
      est.constants.G2 = std::max(est.constants.G2, m.second_moment());
    }
  }
  est.protocol = "mu,L analytic from per-client second-moment spectra; sigma2,G2 exact batch-" +
                 std::to_string(batch_size) + " moments maximized over " + std::to_string(w_samples.size()) +
                 " model samples x " + std::to_string(datasets.size()) + " clients";
  return est;
}

// ---------------------------------------------------------------------------
// Optima

namespace detail {

inline ModelVector logistic_newton(const LossModel& model, std::span<const DataPoint> data) {
  const Eigen::Index C = model.classes, d = model.input_dim, P = C * d;
  ModelVector w = ModelVector::Zero(P);
  const double n = static_cast<double>(data.size());
  for (int iter = 0; iter < 200; ++iter) {
    const ModelVector g = full_gradient(model, w, data);
    if (g.norm() < 1e-12) break;
    Eigen::MatrixXd H = model.l2 * Eigen::MatrixXd::Identity(P, P);
    Eigen::Map<const RowMajor> W(w.data(), C, d);
    for (const auto& x : data) {
      const Eigen::VectorXd p = softmax(W * x.features);
      const Eigen::MatrixXd S = Eigen::MatrixXd(p.asDiagonal()) - p * p.transpose();
      const Eigen::MatrixXd xx = x.features * x.features.transpose() / n;
      for (Eigen::Index a = 0; a < C; ++a) {
        for (Eigen::Index b = 0; b < C; ++b) {
          H.block(a * d, b * d, d, d) += S(a, b) * xx;
        }
      }
    }
    const ModelVector step = H.ldlt().solve(g);
    const double f0 = loss(model, w, data);
    const double decrease = g.dot(step);
    ModelVector next = w - step;
    // Once the predicted decrease is below the rounding level of F the line search
    // cannot tell steps apart; full Newton steps are safe there.
    if (decrease > 1e-12 * std::max(1.0, std::abs(f0))) {
      double alpha = 1.0;
      while (loss(model, next, data) > f0 - 1e-4 * alpha * decrease && alpha > 1e-10) {
        alpha *= 0.5;
        next = w - alpha * step;
      }
    }
    w = next;
  }
  return w;
}

}  // namespace detail

/// Minimizer of `loss` over data: normal equations for quadratic, damped Newton for logistic-l2.
/// The returned point has gradient norm < 1e-10.
inline ModelVector closed_form_optimum(const LossModel& model, std::span<const DataPoint> data) {
  if (data.empty()) throw InvalidArgument("closed_form_optimum: empty dataset");
  for (const auto& x : data) detail::check_point(model, x);
  switch (model.kind) {
    case ModelKind::Quadratic: {
      const Eigen::MatrixXd X = design_matrix(data);
      Eigen::VectorXd y(X.rows());
      for (std::size_t j = 0; j < data.size(); ++j) y(static_cast<Eigen::Index>(j)) = data[j].target;
      const double n = static_cast<double>(X.rows());
      Eigen::MatrixXd A = X.transpose() * X / n;
      A.diagonal().array() += model.l2;
      const Eigen::VectorXd rhs = X.transpose() * y / n;
      const Eigen::VectorXd spectrum = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(A, Eigen::EigenvaluesOnly).eigenvalues();
      if (spectrum.minCoeff() <= 1e-12 * std::max(1.0, spectrum.maxCoeff())) {
        throw RankDeficient("closed_form_optimum: normal equations are singular (rank-deficient design, l2 = 0)");
      }
      const auto ldlt = A.ldlt();
      ModelVector w = ldlt.solve(rhs);
      for (int refine = 0; refine < 3; ++refine) w += ldlt.solve(rhs - A * w);
      return w;
    }
    case ModelKind::Logistic: {
      if (model.l2 <= 0.0) throw RankDeficient("closed_form_optimum: unregularized softmax optimum is not unique");
      ModelVector w = detail::logistic_newton(model, data);
      if (!(full_gradient(model, w, data).norm() < 1e-10)) {
        throw std::runtime_error("closed_form_optimum: Newton iteration did not reach gradient norm 1e-10");
      }
      return w;
    }
    case ModelKind::TinyMlp:
      throw UnsupportedModel("closed_form_optimum: tiny-mlp has no closed-form optimum");
  }
  return {};
}

/// min_w loss(w) over data. For quadratic losses this also covers rank-deficient
/// designs via the minimum-norm least-squares solution.
inline double minimum_value(const LossModel& model, std::span<const DataPoint> data) {
  if (model.kind == ModelKind::Quadratic) {
    const Eigen::MatrixXd X = design_matrix(data);
    Eigen::VectorXd y(X.rows());
    for (std::size_t j = 0; j < data.size(); ++j) y(static_cast<Eigen::Index>(j)) = data[j].target;
    const double n = static_cast<double>(X.rows());
    Eigen::MatrixXd A = X.transpose() * X / n;
    A.diagonal().array() += model.l2;
    const Eigen::VectorXd rhs = X.transpose() * y / n;
    const ModelVector w = A.completeOrthogonalDecomposition().solve(rhs);
    return loss(model, w, data);
  }
  return loss(model, closed_form_optimum(model, data), data);
}

}  // namespace fedenergy
