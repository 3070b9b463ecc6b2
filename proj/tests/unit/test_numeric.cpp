#include <cmath>
#include <numbers>

#include "archdoor/autograd.hpp"
#include "archdoor/error.hpp"
#include "archdoor/optim.hpp"
#include "archdoor/random.hpp"
#include "archdoor/tensor.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "sampler_suite.hpp"

using namespace archdoor;

TEST_CASE("tensor shape invariants") {
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  t.at(1, 2) = 5;
  CHECK(t[5] == 5);
  CHECK(t.all_finite());
  t[0] = std::numeric_limits<double>::infinity();
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("gaussian_pdf") {
  CHECK(gaussian_pdf(0, 0, 1) == doctest::Approx(1 / std::sqrt(2 * std::numbers::pi)).epsilon(1e-15));
  CHECK(gaussian_pdf(0.3 + 1.7, 0.3, 2.5) == doctest::Approx(gaussian_pdf(0.3 - 1.7, 0.3, 2.5)).epsilon(1e-15));
  CHECK(gaussian_pdf(2, 0, 2) == doctest::Approx(gaussian_pdf(1, 0, 1) / 2).epsilon(1e-15));
  CHECK(gaussian_pdf(1e3, 0, 1) >= 0);
  CHECK_THROWS_AS(gaussian_pdf(0, 0, 0), DomainError);
  CHECK_THROWS_AS(gaussian_pdf(0, 0, -1), DomainError);
}

TEST_CASE("random streams are reproducible and distinct") {
  RandomSource a(42, 7), b(42, 7), c(42, 8);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs = differs || x != c.next_u64();
  }
  CHECK(differs);
  CHECK(RandomSource(1).derive("eval").stream() == RandomSource(1).derive("eval").stream());
  CHECK(RandomSource(1).derive("eval").stream() != RandomSource(1).derive("train").stream());
  CHECK(RandomSource(1).derive(3).derive(4).stream() != RandomSource(1).derive(4).derive(3).stream());
}

TEST_CASE("derived streams are uncorrelated") {
  RandomSource base(99);
  auto x = base.derive(1), y = base.derive(2);
  const int n = 100000;
  double sxy = 0, sx = 0, sy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < n; ++i) {
    const double u = x.uniform(), v = y.uniform();
    sx += u, sy += v, sxy += u * v, sxx += u * u, syy += v * v;
  }
  const double cov = sxy / n - (sx / n) * (sy / n);
  const double corr = cov / std::sqrt((sxx / n - sx * sx / n / n) * (syy / n - sy * sy / n / n));
  // 5 standard errors of a null correlation at n = 1e5.
  CHECK(std::fabs(corr) < 5 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("distribution parameter validation") {
  CHECK_THROWS_AS(NoiseDistribution::gaussian(0, -1).validate(), DomainError);
  CHECK_THROWS_AS(NoiseDistribution::gamma(0, 1).validate(), DomainError);
  CHECK_THROWS_AS(NoiseDistribution::gamma(1, 0).validate(), DomainError);
  CHECK_THROWS_AS(NoiseDistribution::poisson(-0.1).validate(), DomainError);
  CHECK_THROWS_AS(NoiseDistribution::rayleigh(0).validate(), DomainError);
  CHECK_THROWS_AS(NoiseDistribution::binomial(-1, 0.5).validate(), DomainError);
  CHECK_THROWS_AS(NoiseDistribution::binomial(3, 1.5).validate(), DomainError);
  CHECK_THROWS_AS(NoiseDistribution::log_series(0).validate(), DomainError);
  CHECK_THROWS_AS(NoiseDistribution::log_series(1).validate(), DomainError);
  RandomSource rng(1);
  CHECK_THROWS_AS(sample(NoiseDistribution::poisson(-1), {3}, rng), DomainError);
  CHECK_NOTHROW(NoiseDistribution::poisson(0).validate());
  CHECK_NOTHROW(NoiseDistribution::binomial(0, 0).validate());
}

TEST_CASE("sample examples") {
  RandomSource rng(2024);
  const auto zeros = sample(NoiseDistribution::gaussian(0, 0), {4, 5}, rng);
  for (double v : zeros.data()) CHECK(v == 0);

  // Bounds are 4 standard errors of the mean and about 7 of the standard deviation.
  const auto g = sample(NoiseDistribution::gaussian(0, 50), {1000000}, rng);
  const auto [gm, gs] = oracle::mean_std(g.data());
  CHECK(std::fabs(gm) < 0.2);
  CHECK(std::fabs(gs - 50) < 0.25);

  const auto p = sample(NoiseDistribution::poisson(3), {1000000}, rng);
  CHECK(std::fabs(oracle::mean_std(p.data()).first - 3) < 0.01);

  RandomSource a(5), b(5);
  CHECK(sample(NoiseDistribution::gamma(2, 1), {10}, a) == sample(NoiseDistribution::gamma(2, 1), {10}, b));
}

TEST_CASE("box-muller consumes a fixed number of uniforms") {
  RandomSource a(11), b(11);
  sample(NoiseDistribution::gaussian(0, 1), {3}, a);
  for (int i = 0; i < 4; ++i) b.next_u64();
  CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("distribution moments match their closed forms") {
  CHECK(NoiseDistribution::gamma(2, 3).mean() == doctest::Approx(6));
  CHECK(NoiseDistribution::gamma(2, 3).stddev() == doctest::Approx(std::sqrt(18.0)));
  CHECK(NoiseDistribution::binomial(100, 0.5).stddev() == doctest::Approx(5));
  CHECK(NoiseDistribution::rayleigh(2).mean() == doctest::Approx(2 * std::sqrt(std::numbers::pi / 2)));
  CHECK(NoiseDistribution::logistic(0, 1).stddev() == doctest::Approx(std::numbers::pi / std::sqrt(3.0)));
  CHECK(NoiseDistribution::poisson(9).stddev() == doctest::Approx(3));
}

TEST_CASE("sampler goodness of fit") {
  for (const auto& r : suite::run_sampler_suite()) {
    INFO(r.name << " ks=" << r.ks << " chi2 p=" << r.chi.p_value);
    CHECK(r.pass());
  }
}

// --- core math ----------------------------------------------------------------

TEST_CASE("softmax, matmul and cross entropy examples") {
  const auto s = ag::softmax_rows(Tensor({1, 3}));
  for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));

  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1;
  Tensor a({3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(ag::matmul(eye, a) == a);
  CHECK_THROWS_AS(ag::matmul(a, a), ShapeError);

  auto confident = ag::Var::constant(Tensor({1, 3}, std::vector<double>{0, 800, 0}));
  CHECK(ag::cross_entropy(confident, 1).value()[0] == 0);
}

TEST_CASE("softmax rows sum to one and cross entropy is non-negative") {
  RandomSource rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto scale = 1 + 40 * rng.uniform();
    auto x = sample(NoiseDistribution::gaussian(0, scale), {4, 7}, rng);
    const auto s = ag::softmax_rows(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < 7; ++c) total += s.at(r, c);
      CHECK(std::fabs(total - 1) <= 1e-12);
    }
    Tensor row({1, 7});
    std::copy_n(x.data().begin(), 7, row.data().begin());
    CHECK(ag::cross_entropy(ag::Var::constant(row), static_cast<int>(rng.below(7))).value()[0] >= 0);
  }
}

TEST_CASE("layer norm output is standardized") {
  RandomSource rng(4);
  auto x = ag::Var::constant(sample(NoiseDistribution::gaussian(3, 5), {2, 16}, rng));
  auto y = ag::layer_norm(x, ag::Var::constant(Tensor({16}, 1.0)), ag::Var::constant(Tensor({16})));
  for (std::size_t r = 0; r < 2; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 16; ++c) m += y.value().at(r, c) / 16;
    for (std::size_t c = 0; c < 16; ++c) v += (y.value().at(r, c) - m) * (y.value().at(r, c) - m) / 16;
    CHECK(std::fabs(m) < 1e-12);
    CHECK(v == doctest::Approx(1).epsilon(1e-3));
  }
}

// --- gradients ------------------------------------------------------------------

TEST_CASE("backward examples") {
  auto w = ag::Var::parameter(Tensor({2, 3}, 0.7));
  ag::backward(ag::sum(w));
  for (double g : w.grad().data()) CHECK(g == 1);

  auto s = ag::Var::parameter(Tensor::scalar(3));
  ag::backward(ag::mul(s, s));
  CHECK(s.grad()[0] == 6);

  CHECK_THROWS_AS(ag::backward(w), ShapeError);
}

TEST_CASE("gradients accumulate until zero_grad") {
  auto w = ag::Var::parameter(Tensor::scalar(2));
  ag::backward(ag::scale(w, 3));
  ag::backward(ag::scale(w, 3));
  CHECK(w.grad()[0] == 6);
  w.zero_grad();
  CHECK(w.grad()[0] == 0);
}

TEST_CASE("no-grad mode records nothing") {
  auto w = ag::Var::parameter(Tensor::scalar(2));
  ag::Var y;
  {
    ag::NoGradGuard guard;
    CHECK_FALSE(ag::grad_enabled());
    y = ag::mul(w, w);
  }
  CHECK(ag::grad_enabled());
  CHECK(y.node()->parents.empty());
  CHECK_FALSE(y.requires_grad());
}

namespace {

template <class F>
void check_op_gradient(F f, Tensor x0, double tol = 1e-6) {
  auto x = ag::Var::parameter(x0);
  ag::backward(ag::sum(f(x)));
  for (std::size_t i = 0; i < x0.size(); ++i) {
    Tensor up = x0, down = x0;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    double fu, fd;
    {
      ag::NoGradGuard guard;
      fu = ag::sum(f(ag::Var::constant(up))).value()[0];
      fd = ag::sum(f(ag::Var::constant(down))).value()[0];
    }
    CHECK(x.grad()[i] == doctest::Approx((fu - fd) / 2e-6).epsilon(tol));
  }
}

}  // namespace

TEST_CASE("op gradients against central differences") {
  RandomSource rng(8);
  const auto x0 = sample(NoiseDistribution::gaussian(0, 1), {3, 4}, rng);
  const auto w0 = ag::Var::constant(sample(NoiseDistribution::gaussian(0, 1), {4, 5}, rng));
  const auto v0 = ag::Var::constant(sample(NoiseDistribution::gaussian(0, 1), {3, 4}, rng));
  const auto probe = ag::Var::constant(sample(NoiseDistribution::gaussian(0, 1), {3, 4}, rng));
  auto weighted = [&](const ag::Var& y) { return ag::mul(y, probe); };
  check_op_gradient([&](const ag::Var& x) { return ag::matmul(x, w0); }, x0);
  check_op_gradient([&](const ag::Var& x) { return ag::matmul(x, v0, true); }, x0);
  check_op_gradient([&](const ag::Var& x) { return weighted(ag::softmax(x)); }, x0);
  check_op_gradient([&](const ag::Var& x) { return weighted(ag::relu(x)); }, x0);
  check_op_gradient(
      [&](const ag::Var& x) {
        return weighted(ag::layer_norm(x, ag::Var::constant(Tensor({4}, 1.3)), ag::Var::constant(Tensor({4}, 0.2))));
      },
      x0, 1e-5);
  check_op_gradient([&](const ag::Var& x) { return ag::mean_rows(ag::mul(x, x)); }, x0);
  check_op_gradient([&](const ag::Var& x) { return ag::slice_cols(weighted(x), 1, 2); }, x0);
  check_op_gradient([&](const ag::Var& x) { return ag::cross_entropy(ag::mean_rows(x), 2); }, x0);
}

// --- Adam -----------------------------------------------------------------------

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
  std::vector<Tensor> params{Tensor({3}, std::vector<double>{1, -2, 3})};
  const auto before = params;
  std::vector<Tensor> grads{Tensor({3})};
  auto state = AdamState::for_params(params);
  for (int i = 0; i < 10; ++i) adam_step(params, grads, state, 1e-3);
  CHECK(params == before);
}

TEST_CASE("adam first step moves against the gradient by about lr") {
  for (double g : {0.5, -3.0}) {
    std::vector<Tensor> params{Tensor::scalar(1)};
    std::vector<Tensor> grads{Tensor::scalar(g)};
    auto state = AdamState::for_params(params);
    adam_step(params, grads, state, 0.01);
    const double step = params[0][0] - 1;
    CHECK(std::signbit(step) == std::signbit(-g));
    CHECK(std::fabs(step) == doctest::Approx(0.01).epsilon(1e-5));
  }
}

TEST_CASE("adam converges on a quadratic bowl") {
  std::vector<Tensor> w{Tensor::scalar(0)};
  auto state = AdamState::for_params(w);
  for (int i = 0; i < 500; ++i) {
    std::vector<Tensor> g{Tensor::scalar(2 * (w[0][0] - 5))};
    adam_step(w, g, state, 0.05);
  }
  CHECK(std::fabs(w[0][0] - 5) < 0.1);
}

TEST_CASE("adam rejects mismatched shapes and bad learning rates") {
  std::vector<Tensor> params{Tensor({2})};
  std::vector<Tensor> grads{Tensor({3})};
  auto state = AdamState::for_params(params);
  CHECK_THROWS_AS(adam_step(params, grads, state, 0.1), ShapeError);
  std::vector<Tensor> ok{Tensor({2})};
  CHECK_THROWS_AS(adam_step(params, ok, state, 0), DomainError);
}
