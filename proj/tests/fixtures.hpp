#pragma once

// Random instances and the finite-difference gradient check.

#include <algorithm>
#include <cmath>
#include <random>

#include "depthlens/lens.hpp"
#include "oracle.hpp"

namespace fixtures {

using namespace depthlens;

inline Vector gaussian(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Vector v(n);
  for (double& x : v) x = g(rng);
  return v;
}

inline Translator random_translator(std::mt19937_64& rng, std::size_t d, double scale) {
  Translator t = Translator::identity(d);
  for (double& a : t.weight.values()) a += scale * std::normal_distribution<double>()(rng);
  t.bias = gaussian(rng, d, scale);
  return t;
}

inline NormSpec random_norm(std::mt19937_64& rng, std::size_t d, bool layernorm) {
  Vector gamma = gaussian(rng, d, 0.3);
  for (double& g : gamma) g += 1.0;
  return layernorm ? NormSpec::layer_norm(1e-5, gamma, gaussian(rng, d, 0.1))
                   : NormSpec::rms_norm(1e-5, gamma);
}

// Largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-6) over every
// entry of (A, b), numeric by central differences on the oracle loss.
inline double max_fd_error(const Vector& final_logits, const Vector& h, const Translator& t,
                    const NormSpec& norm, const Matrix& wu, const Vector& w) {
  const LensGradient g = lens_loss_and_grad(final_logits, h, t, norm, wu, w);
  const double step = 1e-5;
  const std::size_t d = h.size();
  double worst = 0.0;
  auto rel = [](double a, double f) {
    return std::abs(a - f) / std::max({std::abs(a), std::abs(f), 1e-6});
  };
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j <= d; ++j) {
      Translator tp = t, tm = t;
      double& xp = j < d ? tp.weight(i, j) : tp.bias[i];
      double& xm = j < d ? tm.weight(i, j) : tm.bias[i];
      xp += step;
      xm -= step;
      const long double fd = (oracle::loss(final_logits, h, tp, norm, wu, w) -
                              oracle::loss(final_logits, h, tm, norm, wu, w)) /
                             (2.0L * step);
      const double analytic = j < d ? g.grad_weight(i, j) : g.grad_bias[i];
      worst = std::max(worst, rel(analytic, static_cast<double>(fd)));
    }
  }
  return worst;
}

}  // namespace fixtures
