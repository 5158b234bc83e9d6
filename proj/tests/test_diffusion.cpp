#include <doctest.h>

#include <cmath>

#include "avatar/diffusion.hpp"

using namespace avatar;

namespace {

// Closed-form optimal noise prediction for 1D data N(m, s²):
// x_t ~ N(α m, α² s² + σ²)  ⇒  ε*(x) = σ (x − α m) / (α² s² + σ²).
struct GaussianOracle {
  const DiffusionSchedule& sched;
  double m, s;
  torch::Tensor operator()(const torch::Tensor& x, double t, bool) const {
    const double a = std::exp(sched.log_alpha(t)), sig = sched.sigma(t);
    return sig * (x - a * m) / (a * a * s * s + sig * sig);
  }
  // Exact probability-flow map from x_T at t=T to t=1.
  torch::Tensor exact(const torch::Tensor& xT) const {
    const double T = sched.steps();
    const double aT = std::exp(sched.log_alpha(T)), sT = sched.sigma(T);
    const double a1 = std::exp(sched.log_alpha(1.0)), s1 = sched.sigma(1.0);
    auto z = (xT - aT * m) / std::sqrt(aT * aT * s * s + sT * sT);
    return a1 * m + std::sqrt(a1 * a1 * s * s + s1 * s1) * z;
  }
};

double w2_gaussian(double m1, double v1, double m2, double v2) {
  return std::sqrt((m1 - m2) * (m1 - m2) + std::pow(std::sqrt(v1) - std::sqrt(v2), 2));
}

torch::Tensor steps_of(std::int64_t n, int t) { return torch::full({n}, t, torch::kInt64); }

}  // namespace

TEST_SUITE("diffusion") {
  TEST_CASE("linear schedule is monotone and consistent") {
    auto s = DiffusionSchedule::iddpm_linear(1000);
    CHECK(s.beta(1) == doctest::Approx(1e-4));
    CHECK(s.beta(1000) == doctest::Approx(0.02));
    CHECK(s.alpha_bar(0) == 1.0);
    for (int t = 2; t <= 1000; ++t) {
      CHECK(s.beta(t) > s.beta(t - 1));
      CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
    for (int t : {1, 10, 500, 1000}) CHECK(std::sqrt(s.alpha_bar(t)) * std::sqrt(s.alpha_bar(t)) + (1 - s.alpha_bar(t)) ==
                                           doctest::Approx(1.0).epsilon(1e-14));
    auto d = DiffusionSchedule::iddpm_linear(100);
    CHECK(d.beta(1) == doctest::Approx(1e-3));
    CHECK(d.beta(100) == doctest::Approx(0.2));
    CHECK_THROWS_AS(s.beta(0), Error);
    CHECK_THROWS_AS(s.alpha_bar(1001), Error);
    CHECK_THROWS_AS(DiffusionSchedule::linear(10, 0.5, 0.1), Error);
    auto back = DiffusionSchedule::from_json(s.to_json());
    CHECK(back.alpha_bar(777) == s.alpha_bar(777));
  }

  TEST_CASE("q_sample limits, linearity and range") {
    auto s = DiffusionSchedule::iddpm_linear(1000);
    torch::manual_seed(0);
    auto x0 = torch::randn({4, 3}, torch::kFloat64);
    auto noise = torch::randn({4, 3}, torch::kFloat64);
    // At t=1 the signal coefficient is √(1-β₁); the noise share vanishes as β₁ → 0.
    CHECK((q_sample(s, x0, 1, noise) - x0).abs().max().item<double>() < 0.011 * 3);
    auto zero = torch::zeros_like(x0);
    CHECK(torch::allclose(q_sample(s, 2.5 * x0, 300, zero), 2.5 * q_sample(s, x0, 300, zero), 0, 1e-15));
    CHECK_THROWS_AS(q_sample(s, x0, 0, noise), Error);
    CHECK_THROWS_AS(q_sample(s, x0, 1001, noise), Error);
    CHECK_THROWS_AS(q_sample(s, x0, steps_of(4, 0), noise), Error);
    CHECK(torch::equal(q_sample(s, x0, steps_of(4, 300), noise), q_sample(s, x0, 300, noise)));
  }

  TEST_CASE("q_sample Monte-Carlo variance matches the schedule") {
    auto s = DiffusionSchedule::iddpm_linear(1000);
    auto gen = torch_generator(14);
    for (int t : {1, 50, 250, 600, 1000}) {
      auto noise = at::normal(0.0, 1.0, {10000}, gen, torch::kFloat64);
      auto xt = q_sample(s, torch::zeros({10000}, torch::kFloat64), t, noise);
      const double expect = 1 - s.alpha_bar(t);
      CHECK(std::abs(xt.var().item<double>() / expect - 1) < 0.02);
      // With unit-variance data the marginal is ᾱ·1 + (1 − ᾱ) = 1.
      auto x0 = at::normal(0.0, 1.0, {10000}, gen, torch::kFloat64);
      auto xt2 = q_sample(s, x0, t, at::normal(0.0, 1.0, {10000}, gen, torch::kFloat64));
      CHECK(std::abs(xt2.var().item<double>() - 1.0) < 0.04);
    }
  }

  TEST_CASE("iddpm_loss zero cases") {
    auto s = DiffusionSchedule::iddpm_linear(1000);
    torch::manual_seed(1);
    auto x0 = torch::randn({3, 2, 4, 4}, torch::kFloat64);
    auto noise = torch::randn_like(x0);
    auto t = torch::tensor({1, 400, 1000}, torch::kInt64);
    auto xt = q_sample(s, x0, t, noise);
    auto L = iddpm_loss(s, {noise.clone(), torch::zeros_like(x0)}, x0, xt, t, noise);
    CHECK(L.l_simple.item<double>() == 0.0);
    // v = 0 selects β̃_t and a perfect ε gives the posterior mean: matched Gaussians.
    CHECK(std::abs(L.l_vlb.item<double>()) < 1e-12);
    CHECK(L.total.item<double>() == doctest::Approx(L.l_simple.item<double>() + 0.001 * L.l_vlb.item<double>()));
  }

  TEST_CASE("Gaussian KL matches the closed form") {
    torch::manual_seed(2);
    auto m1 = torch::randn({50}, torch::kFloat64), m2 = torch::randn({50}, torch::kFloat64);
    auto v1 = torch::rand({50}, torch::kFloat64) + 0.1, v2 = torch::rand({50}, torch::kFloat64) + 0.1;
    auto got = gaussian_kl(m1, v1.log(), m2, v2.log());
    auto a1 = m1.accessor<double, 1>(), a2 = m2.accessor<double, 1>();
    auto s1 = v1.accessor<double, 1>(), s2 = v2.accessor<double, 1>();
    for (int i = 0; i < 50; ++i) {
      const double oracle = 0.5 * (std::log(s2[i] / s1[i]) + (s1[i] + (a1[i] - a2[i]) * (a1[i] - a2[i])) / s2[i] - 1);
      CHECK(got[i].item<double>() == doctest::Approx(oracle).epsilon(1e-12));
    }
  }

  TEST_CASE("vlb term trains the variance head only") {
    auto s = DiffusionSchedule::iddpm_linear(100);
    torch::manual_seed(3);
    auto x0 = torch::randn({2, 8}, torch::kFloat64);
    auto noise = torch::randn_like(x0);
    auto t = torch::tensor({5, 60}, torch::kInt64);
    auto xt = q_sample(s, x0, t, noise);
    auto eps = torch::randn_like(x0).requires_grad_(true);
    auto v = torch::rand_like(x0).requires_grad_(true);
    auto L = iddpm_loss(s, {eps, v}, x0, xt, t, noise);
    auto g = torch::autograd::grad({L.l_vlb}, {eps, v}, {}, false, false, true);
    CHECK_FALSE(g[0].defined());
    CHECK(g[1].abs().sum().item<double>() > 0);
    // v interpolates log-variance between β̃_t (v=0) and β_t (v=1).
    auto lv = model_log_variance(s, torch::ones({2, 1}, torch::kFloat64), t);
    CHECK(lv[1][0].item<double>() == doctest::Approx(std::log(s.beta(60))));
  }

  TEST_CASE("cfg_combine identities and affinity") {
    torch::manual_seed(4);
    auto u = torch::randn({64}), c = torch::randn({64});
    CHECK(torch::equal(cfg_combine(u, c, 1.0), c));
    CHECK(torch::equal(cfg_combine(u, c, 0.0), u));
    CHECK(torch::equal(cfg_combine(torch::zeros({64}), c, 4.5), 4.5f * c));
    // Points for any s lie on the line u + s(c − u).
    auto a = cfg_combine(u, c, 2.0), b = cfg_combine(u, c, -1.5);
    CHECK(torch::allclose(a - u, 2.0 * (c - u), 1e-5, 1e-5));
    CHECK(torch::allclose(b - u, -1.5 * (c - u), 1e-5, 1e-5));
    CHECK_THROWS_AS(cfg_combine(u, torch::zeros({3}), 1.0), Error);
  }

  TEST_CASE("DPM-Solver recovers a Gaussian data distribution at 19 steps") {
    auto s = DiffusionSchedule::iddpm_linear(1000);
    const double m = 1.5, sd = 0.5;
    GaussianOracle oracle{s, m, sd};
    auto xT = at::normal(0.0, 1.0, {10000}, torch_generator(5), torch::kFloat64);
    auto x19 = dpm_solver_sample(std::cref(oracle), s, 19, 1.0, xT);
    auto x1 = dpm_solver_sample(std::cref(oracle), s, 1, 1.0, xT);
    const double mean19 = x19.mean().item<double>(), var19 = x19.var().item<double>();
    CHECK(std::abs(mean19 - m) < 0.05 * m);
    CHECK(std::abs(var19 - sd * sd) < 0.10 * sd * sd);
    const double w19 = w2_gaussian(mean19, var19, m, sd * sd);
    const double w1 = w2_gaussian(x1.mean().item<double>(), x1.var().item<double>(), m, sd * sd);
    CHECK(w19 < w1);
    CHECK(torch::equal(x19, dpm_solver_sample(std::cref(oracle), s, 19, 1.0, xT)));
  }

  TEST_CASE("DPM-Solver shows second-order convergence") {
    auto s = DiffusionSchedule::iddpm_linear(1000);
    for (int seed = 0; seed < 5; ++seed) {
      Rng rng(100 + seed);
      GaussianOracle oracle{s, rng.uniform(-2, 2), rng.uniform(0.2, 1.5)};
      auto xT = at::normal(0.0, 1.0, {1000}, torch_generator(seed), torch::kFloat64);
      auto exact = oracle.exact(xT);
      auto err = [&](int n) {
        return (dpm_solver_sample(std::cref(oracle), s, n, 1.0, xT) - exact).abs().mean().item<double>();
      };
      const double e10 = err(10), e20 = err(20);
      CAPTURE(e10);
      CAPTURE(e20);
      CHECK(e10 / e20 >= 3.0);
    }
  }

  TEST_CASE("guidance evaluates both branches and combines them") {
    auto s = DiffusionSchedule::iddpm_linear(100);
    int calls_c = 0, calls_u = 0;
    EpsModel model = [&](const torch::Tensor& x, double t, bool cond) {
      (cond ? calls_c : calls_u)++;
      return cond ? 0.1 * x : 0.05 * x + 0.01;
    };
    auto xT = torch::randn({16}, torch::kFloat64);
    auto g0 = dpm_solver_sample(model, s, 7, 0.0, xT);
    CHECK(calls_c == 7);
    CHECK(calls_u == 7);
    EpsModel uncond_only = [&](const torch::Tensor& x, double t, bool) { return 0.05 * x + 0.01; };
    CHECK(torch::equal(g0, dpm_solver_sample(uncond_only, s, 7, 1.0, xT)));
    CHECK(solver_timesteps(s, 19).size() == 20);
    CHECK(solver_timesteps(s, 19).front() == 100.0);
    CHECK(solver_timesteps(s, 19).back() == 1.0);
    CHECK_THROWS_AS(dpm_solver_sample(model, s, 0, 1.0, xT), Error);
  }
}
