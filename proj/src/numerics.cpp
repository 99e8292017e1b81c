#include "depthlens/numerics.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "depthlens/error.hpp"

namespace depthlens {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
  require_finite(std::span<const double>(&fill, 1), "matrix fill value");
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("matrix data has " + std::to_string(data_.size()) + " entries, expected " +
                     std::to_string(rows_) + "x" + std::to_string(cols_));
  }
  require_finite(data_, "matrix");
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

std::string_view to_string(NormKind kind) {
  return kind == NormKind::layernorm ? "layernorm" : "rmsnorm";
}

NormKind parse_norm_kind(std::string_view text) {
  if (text == "layernorm") return NormKind::layernorm;
  if (text == "rmsnorm") return NormKind::rmsnorm;
  throw DataError("unknown norm kind '" + std::string(text) + "' (expected layernorm or rmsnorm)");
}

NormSpec::NormSpec(NormKind kind, double epsilon, Vector gamma, Vector beta)
    : kind_(kind), epsilon_(epsilon), gamma_(std::move(gamma)), beta_(std::move(beta)) {
  if (!(epsilon_ > 0.0) || !std::isfinite(epsilon_)) {
    throw DataError("norm epsilon must be finite and > 0, got " + std::to_string(epsilon_));
  }
  require_finite(gamma_, "norm gamma");
  require_finite(beta_, "norm beta");
  if (kind_ == NormKind::layernorm && beta_.size() != gamma_.size()) {
    throw ShapeError("layernorm beta has length " + std::to_string(beta_.size()) +
                     ", gamma has length " + std::to_string(gamma_.size()));
  }
  if (kind_ == NormKind::rmsnorm && !beta_.empty()) {
    throw DataError("rmsnorm must not carry a beta vector");
  }
}

NormSpec NormSpec::layer_norm(double epsilon, Vector gamma, Vector beta) {
  return NormSpec(NormKind::layernorm, epsilon, std::move(gamma), std::move(beta));
}

NormSpec NormSpec::rms_norm(double epsilon, Vector gamma) {
  return NormSpec(NormKind::rmsnorm, epsilon, std::move(gamma), {});
}

void require_finite(std::span<const double> values, std::string_view what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericalError(std::string(what) + ": non-finite value " + std::to_string(values[i]) +
                           " at index " + std::to_string(i));
    }
  }
}

namespace {

double max_of(std::span<const double> x) {
  double m = x[0];
  for (double v : x) m = v > m ? v : m;
  return m;
}

void require_same_length(std::size_t a, std::size_t b, std::string_view what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": length " + std::to_string(a) + " vs " +
                     std::to_string(b));
  }
}

}  // namespace

Vector softmax(std::span<const double> logits) {
  require_finite(logits, "softmax input");
  if (logits.empty()) return {};
  const double m = max_of(logits);
  Vector out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

Vector log_softmax(std::span<const double> logits) {
  require_finite(logits, "log_softmax input");
  if (logits.empty()) return {};
  const double m = max_of(logits);
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - m);
  const double log_norm = m + std::log(sum);
  Vector out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - log_norm;
  return out;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  require_same_length(p.size(), q.size(), "kl_divergence");
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) sum += p[i] * std::log(p[i] / q[i]);
  }
  return sum;
}

Vector apply_norm(std::span<const double> h, const NormSpec& spec, NormCache& cache) {
  require_same_length(h.size(), spec.dim(), "apply_norm");
  const std::size_t d = h.size();
  const auto n = static_cast<double>(d);
  cache.normalized.assign(d, 0.0);
  Vector out(d);
  if (spec.kind() == NormKind::layernorm) {
    double mean = 0.0;
    for (double v : h) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : h) var += (v - mean) * (v - mean);
    var /= n;
    cache.inv_scale = 1.0 / std::sqrt(var + spec.epsilon());
    for (std::size_t i = 0; i < d; ++i) {
      cache.normalized[i] = (h[i] - mean) * cache.inv_scale;
      out[i] = spec.gamma()[i] * cache.normalized[i] + spec.beta()[i];
    }
  } else {
    double mean_sq = 0.0;
    for (double v : h) mean_sq += v * v;
    mean_sq /= n;
    cache.inv_scale = 1.0 / std::sqrt(mean_sq + spec.epsilon());
    for (std::size_t i = 0; i < d; ++i) {
      cache.normalized[i] = h[i] * cache.inv_scale;
      out[i] = spec.gamma()[i] * cache.normalized[i];
    }
  }
  return out;
}

Vector apply_norm(std::span<const double> h, const NormSpec& spec) {
  NormCache cache;
  return apply_norm(h, spec, cache);
}

Vector apply_norm_backward(std::span<const double> grad_out, const NormSpec& spec,
                           const NormCache& cache) {
  require_same_length(grad_out.size(), spec.dim(), "apply_norm_backward");
  const std::size_t d = grad_out.size();
  const auto n = static_cast<double>(d);
  const Vector& xhat = cache.normalized;
  Vector g(d);
  for (std::size_t i = 0; i < d; ++i) g[i] = spec.gamma()[i] * grad_out[i];

  double g_dot_xhat = 0.0;
  for (std::size_t i = 0; i < d; ++i) g_dot_xhat += g[i] * xhat[i];
  g_dot_xhat /= n;

  Vector out(d);
  if (spec.kind() == NormKind::layernorm) {
    double g_mean = 0.0;
    for (double v : g) g_mean += v;
    g_mean /= n;
    for (std::size_t i = 0; i < d; ++i) {
      out[i] = cache.inv_scale * (g[i] - g_mean - xhat[i] * g_dot_xhat);
    }
  } else {
    for (std::size_t i = 0; i < d; ++i) {
      out[i] = cache.inv_scale * (g[i] - xhat[i] * g_dot_xhat);
    }
  }
  return out;
}

Vector project(const Matrix& unembedding, std::span<const double> x) {
  require_same_length(unembedding.cols(), x.size(), "project");
  Vector out(unembedding.rows());
  for (std::size_t r = 0; r < unembedding.rows(); ++r) {
    const auto w = unembedding.row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < w.size(); ++c) acc += w[c] * x[c];
    out[r] = acc;
  }
  return out;
}

Vector project_transpose(const Matrix& unembedding, std::span<const double> g) {
  require_same_length(unembedding.rows(), g.size(), "project_transpose");
  Vector out(unembedding.cols(), 0.0);
  for (std::size_t r = 0; r < unembedding.rows(); ++r) {
    const double gr = g[r];
    if (gr == 0.0) continue;
    const auto w = unembedding.row(r);
    for (std::size_t c = 0; c < w.size(); ++c) out[c] += gr * w[c];
  }
  return out;
}

std::size_t rank_of(std::span<const double> logits, TokenId token) {
  if (token >= logits.size()) {
    throw ShapeError("token id " + std::to_string(token) + " out of range for " +
                     std::to_string(logits.size()) + " logits");
  }
  const double target = logits[token];
  std::size_t rank = 1;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i] > target || (i < token && logits[i] == target)) ++rank;
  }
  return rank;
}

TokenId top1(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("top1 of empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

}  // namespace depthlens
