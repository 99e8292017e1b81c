#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace depthlens {

using TokenId = std::uint32_t;
using Vector = std::vector<double>;

// Dense row-major matrix of 64-bit floats. Entries are finite on construction.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

enum class NormKind { layernorm, rmsnorm };

std::string_view to_string(NormKind kind);
NormKind parse_norm_kind(std::string_view text);

// Final normalization applied before the unembedding. Immutable once built.
class NormSpec {
 public:
  static NormSpec layer_norm(double epsilon, Vector gamma, Vector beta);
  static NormSpec rms_norm(double epsilon, Vector gamma);

  NormKind kind() const { return kind_; }
  double epsilon() const { return epsilon_; }
  std::size_t dim() const { return gamma_.size(); }
  const Vector& gamma() const { return gamma_; }
  // Empty for rmsnorm.
  const Vector& beta() const { return beta_; }
  bool has_beta() const { return kind_ == NormKind::layernorm; }

  friend bool operator==(const NormSpec&, const NormSpec&) = default;

 private:
  NormSpec(NormKind kind, double epsilon, Vector gamma, Vector beta);

  NormKind kind_ = NormKind::layernorm;
  double epsilon_ = 0.0;
  Vector gamma_;
  Vector beta_;
};

// Throws NumericalError naming `what` if any entry is NaN or infinite.
void require_finite(std::span<const double> values, std::string_view what);

Vector softmax(std::span<const double> logits);
// ln softmax(logits), computed without forming the probabilities.
Vector log_softmax(std::span<const double> logits);

// Forward KL divergence sum_i p_i ln(p_i / q_i) in nats; terms with p_i = 0
// contribute nothing.
double kl_divergence(std::span<const double> p, std::span<const double> q);

Vector apply_norm(std::span<const double> h, const NormSpec& spec);

// Intermediate values of a forward normalization needed by the backward pass.
struct NormCache {
  Vector normalized;  // (h - mean) / scale for layernorm, h / rms for rmsnorm
  double inv_scale = 0.0;
};

Vector apply_norm(std::span<const double> h, const NormSpec& spec, NormCache& cache);

// Vector-Jacobian product of apply_norm with respect to its input h.
Vector apply_norm_backward(std::span<const double> grad_out, const NormSpec& spec,
                           const NormCache& cache);

// logits_i = row_i(unembedding) . x, summed left to right.
Vector project(const Matrix& unembedding, std::span<const double> x);
// unembedding^T . g
Vector project_transpose(const Matrix& unembedding, std::span<const double> g);

// 1-based rank; ties go to the lower token id.
std::size_t rank_of(std::span<const double> logits, TokenId token);
TokenId top1(std::span<const double> logits);

}  // namespace depthlens
