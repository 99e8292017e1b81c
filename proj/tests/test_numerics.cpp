#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"

#include "depthlens/error.hpp"
#include "depthlens/numerics.hpp"
#include "oracle.hpp"

using namespace depthlens;

namespace {

Vector random_vector(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Vector v(n);
  for (double& x : v) x = g(rng);
  return v;
}

}  // namespace

TEST_SUITE("numerics") {

TEST_CASE("matrix rejects bad shapes and non-finite entries") {
  CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Matrix(1, 2, std::vector<double>{1, std::nan("")}), NumericalError);
  CHECK_THROWS_AS(Matrix(1, 1, std::vector<double>{std::numeric_limits<double>::infinity()}),
                  NumericalError);
  const Matrix id = Matrix::identity(3);
  CHECK(id(0, 0) == 1.0);
  CHECK(id(0, 1) == 0.0);
  CHECK(id(2, 2) == 1.0);
}

TEST_CASE("norm spec invariants") {
  CHECK_THROWS_AS(NormSpec::layer_norm(0.0, {1, 1}, {0, 0}), DataError);
  CHECK_THROWS_AS(NormSpec::rms_norm(-1e-5, {1, 1}), DataError);
  CHECK_THROWS_AS(NormSpec::layer_norm(1e-5, {1, 1}, {0}), ShapeError);
  CHECK_THROWS_AS(NormSpec::rms_norm(std::nan(""), {1}), DataError);
  const auto rms = NormSpec::rms_norm(1e-5, {1, 2});
  CHECK_FALSE(rms.has_beta());
  CHECK(rms.beta().empty());
  CHECK(parse_norm_kind("rmsnorm") == NormKind::rmsnorm);
  CHECK(to_string(NormKind::layernorm) == "layernorm");
  CHECK_THROWS_AS(parse_norm_kind("batchnorm"), DataError);
}

TEST_CASE("softmax examples") {
  const Vector u = softmax(Vector{0, 0, 0, 0});
  for (double p : u) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));

  // [0, ln 3]: e^z / sum e^z = 1/4, 3/4
  const Vector p = softmax(Vector{0.0, std::log(3.0)});
  CHECK(std::abs(p[0] - 0.25) <= 1e-15);
  CHECK(std::abs(p[1] - 0.75) <= 1e-15);

  CHECK_THROWS_AS(softmax(Vector{0.0, std::nan("")}), NumericalError);
  CHECK_THROWS_AS(softmax(Vector{std::numeric_limits<double>::infinity(), 0.0}), NumericalError);
}

TEST_CASE("softmax is normalized, positive and shift invariant") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> shift(-50.0, 50.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const Vector z = random_vector(rng, 1 + trial % 17, 5.0);
    const Vector p = softmax(z);
    double sum = 0;
    for (double x : p) {
      CHECK(x > 0.0);
      CHECK(x <= 1.0);
      sum += x;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);

    const double c = shift(rng);
    Vector zc = z;
    for (double& x : zc) x += c;
    const Vector pc = softmax(zc);
    for (std::size_t i = 0; i < p.size(); ++i) {
      CHECK(std::abs(pc[i] - p[i]) <= 1e-12 * std::max(p[i], 1e-300) + 1e-15);
    }
  }
}

TEST_CASE("softmax survives extreme logits") {
  const Vector p = softmax(Vector{1000.0, 999.0, -1000.0});
  CHECK(std::isfinite(p[0]));
  CHECK(p[2] >= 0.0);
  CHECK(p[0] + p[1] + p[2] == doctest::Approx(1.0).epsilon(1e-12));
  const Vector lp = log_softmax(Vector{1000.0, 999.0, -1000.0});
  CHECK(lp[2] == doctest::Approx(-2000.0 - std::log1p(std::exp(-1.0))).epsilon(1e-12));
}

TEST_CASE("log_softmax matches the oracle") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const Vector z = random_vector(rng, 7, 3.0);
    const Vector lp = log_softmax(z);
    const auto q = oracle::softmax(z);
    for (std::size_t i = 0; i < z.size(); ++i) {
      CHECK(std::abs(lp[i] - static_cast<double>(std::log(q[i]))) <= 1e-12);
    }
  }
}

TEST_CASE("kl divergence examples") {
  const Vector p{0.2, 0.3, 0.5};
  CHECK(kl_divergence(p, p) == 0.0);
  // p=[1,0], q=[1/2,1/2]: 1 * ln 2
  CHECK(std::abs(kl_divergence(Vector{1.0, 0.0}, Vector{0.5, 0.5}) - 0.693147180559945309) <= 1e-15);
  CHECK_THROWS_AS(kl_divergence(Vector{1.0}, Vector{0.5, 0.5}), ShapeError);
}

TEST_CASE("kl divergence is non-negative and matches the oracle") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + trial % 9;
    const Vector p = softmax(random_vector(rng, n, 2.0));
    const Vector q = softmax(random_vector(rng, n, 2.0));
    const double kl = kl_divergence(p, q);
    CHECK(kl >= 0.0);
    oracle::LVec lp(p.begin(), p.end()), lq(q.begin(), q.end());
    CHECK(std::abs(kl - static_cast<double>(oracle::kl(lp, lq))) <= 1e-12);
    CHECK(kl_divergence(p, p) == 0.0);
  }
}

TEST_CASE("apply_norm examples") {
  SUBCASE("layernorm with zero gamma returns beta") {
    const auto spec = NormSpec::layer_norm(1e-5, {0, 0, 0}, {0.5, -1.0, 2.0});
    const Vector y = apply_norm(Vector{3.0, -7.0, 11.0}, spec);
    CHECK(y == Vector{0.5, -1.0, 2.0});
  }
  SUBCASE("rmsnorm [3,4]") {
    // [3,4] / sqrt((9 + 16) / 2)
    const auto spec = NormSpec::rms_norm(1e-300, {1, 1});
    const Vector y = apply_norm(Vector{3.0, 4.0}, spec);
    CHECK(std::abs(y[0] - 0.848528137423857) <= 1e-12);
    CHECK(std::abs(y[1] - 1.131370849898476) <= 1e-12);
  }
  SUBCASE("layernorm [1,-1] at tiny eps") {
    const auto spec = NormSpec::layer_norm(1e-300, {1, 1}, {0, 0});
    const Vector y = apply_norm(Vector{1.0, -1.0}, spec);
    CHECK(std::abs(y[0] - 1.0) <= 1e-15);
    CHECK(std::abs(y[1] + 1.0) <= 1e-15);
  }
  SUBCASE("all-zero input stays finite") {
    const Vector y = apply_norm(Vector{0, 0, 0}, NormSpec::rms_norm(1e-5, {1, 1, 1}));
    for (double v : y) CHECK(v == 0.0);
    const Vector z = apply_norm(Vector{0, 0}, NormSpec::layer_norm(1e-5, {1, 1}, {0.25, 0}));
    CHECK(z == Vector{0.25, 0.0});
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(apply_norm(Vector{1, 2, 3}, NormSpec::rms_norm(1e-5, {1, 1})), ShapeError);
  }
}

TEST_CASE("layernorm standardizes at small eps") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 2 + trial % 10;
    const auto spec = NormSpec::layer_norm(1e-12, Vector(d, 1.0), Vector(d, 0.0));
    const Vector y = apply_norm(random_vector(rng, d, 3.0), spec);
    double mean = 0, sq = 0;
    for (double v : y) mean += v;
    mean /= d;
    for (double v : y) sq += (v - mean) * (v - mean);
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(std::abs(sq / d - 1.0) <= 1e-6);
  }
}

TEST_CASE("apply_norm matches the oracle for both kinds") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 1 + trial % 6;
    const Vector gamma = random_vector(rng, d), beta = random_vector(rng, d);
    const Vector h = random_vector(rng, d, 2.0);
    for (const auto& spec : {NormSpec::layer_norm(1e-5, gamma, beta), NormSpec::rms_norm(1e-5, gamma)}) {
      const Vector y = apply_norm(h, spec);
      const auto ref = oracle::norm(oracle::LVec(h.begin(), h.end()), spec);
      for (std::size_t i = 0; i < d; ++i) CHECK(std::abs(y[i] - static_cast<double>(ref[i])) <= 1e-12);
    }
  }
}

TEST_CASE("apply_norm_backward matches central differences") {
  std::mt19937_64 rng(29);
  const double step = 1e-6;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 2 + trial % 5;
    const Vector gamma = random_vector(rng, d), beta = random_vector(rng, d);
    const Vector h = random_vector(rng, d, 2.0), gy = random_vector(rng, d);
    for (const auto& spec : {NormSpec::layer_norm(1e-5, gamma, beta), NormSpec::rms_norm(1e-5, gamma)}) {
      NormCache cache;
      apply_norm(h, spec, cache);
      const Vector gx = apply_norm_backward(gy, spec, cache);
      for (std::size_t j = 0; j < d; ++j) {
        Vector hp = h, hm = h;
        hp[j] += step;
        hm[j] -= step;
        const Vector yp = apply_norm(hp, spec), ym = apply_norm(hm, spec);
        double fd = 0;
        for (std::size_t i = 0; i < d; ++i) fd += gy[i] * (yp[i] - ym[i]) / (2 * step);
        CHECK(std::abs(gx[j] - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
      }
    }
  }
}

TEST_CASE("project examples") {
  CHECK(project(Matrix::identity(2), Vector{1.0, -1.0}) == Vector{1.0, -1.0});
  CHECK(project(Matrix(3, 2), Vector{4.0, 5.0}) == Vector{0.0, 0.0, 0.0});
  // rows . [1,1]
  const Matrix w(3, 2, std::vector<double>{1, 2, 3, 4, 0, 1});
  CHECK(project(w, Vector{1.0, 1.0}) == Vector{3.0, 7.0, 1.0});
  CHECK(project_transpose(w, Vector{1.0, 0.0, 2.0}) == Vector{1.0, 4.0});
  CHECK_THROWS_AS(project(w, Vector{1.0, 1.0, 1.0}), ShapeError);
  CHECK_THROWS_AS(project_transpose(w, Vector{1.0}), ShapeError);
}

TEST_CASE("rank_of and top1 examples") {
  CHECK(rank_of(Vector{2.0, 5.0, 1.0}, 1) == 1);
  CHECK(rank_of(Vector{1.0, 1.0, 0.0}, 1) == 2);
  CHECK(rank_of(Vector{2.0, 5.0, 1.0}, 2) == 3);
  CHECK(rank_of(Vector{1.0, 1.0, 0.0}, 0) == 1);
  CHECK_THROWS_AS(rank_of(Vector{1.0, 2.0}, 2), ShapeError);
  CHECK(top1(Vector{2.0, 5.0, 1.0}) == 1);
  CHECK(top1(Vector{1.0, 1.0, 0.0}) == 0);
}

TEST_CASE("rank_of agrees with a stable sort, ties included") {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> coarse(-3, 3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + trial % 12;
    Vector z(n);
    // coarse integer logits force plenty of ties
    for (double& x : z) x = trial % 2 == 0 ? coarse(rng) : std::normal_distribution<double>()(rng);
    for (TokenId t = 0; t < n; ++t) CHECK(rank_of(z, t) == oracle::rank(z, t));
    const TokenId best = top1(z);
    CHECK(rank_of(z, best) == 1);
    CHECK(best == oracle::argmax(z));
  }
}

TEST_CASE("operations are pure") {
  std::mt19937_64 rng(37);
  const Vector z = random_vector(rng, 9);
  CHECK(softmax(z) == softmax(z));
  const auto spec = NormSpec::layer_norm(1e-5, random_vector(rng, 9), random_vector(rng, 9));
  CHECK(apply_norm(z, spec) == apply_norm(z, spec));
}

}
