#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "avatar/volume_renderer.hpp"

using namespace avatar;

namespace {

// Plane channel 0 holds a² + b² so the three-plane mean is 2r²/3.
torch::Tensor radial_planes(int H, int C, torch::Dtype dtype = torch::kFloat32) {
  auto coords = (torch::arange(H, torch::kFloat64) + 0.5) * (2.0 / H) - 1.0;
  auto a = coords.view({1, H}).expand({H, H});
  auto b = coords.view({H, 1}).expand({H, H});
  auto planes = torch::zeros({3, H, H, C}, torch::kFloat64);
  for (int p = 0; p < 3; ++p) planes[p].select(2, 0).copy_(a * a + b * b);
  return planes.to(dtype);
}

RenderHead make_head(int C, int F, std::uint64_t seed) {
  torch::manual_seed(static_cast<std::int64_t>(seed));
  RenderHead h{FeatureDecoder(C, F), Upsampler(F)};
  return h;
}

double ks_uniform(std::vector<double> xs, double lo, double hi) {
  std::sort(xs.begin(), xs.end());
  double d = 0;
  const double n = static_cast<double>(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double cdf = (xs[i] - lo) / (hi - lo);
    d = std::max({d, std::abs((i + 1) / n - cdf), std::abs(i / n - cdf)});
  }
  return d;
}

}  // namespace

TEST_SUITE("volume_renderer") {
  TEST_CASE("vacuum composites to nothing") {
    std::vector<double> sigma(10, 0.0), feats(30, 1.0), deltas(10, 0.1);
    auto r = composite(sigma, feats, deltas);
    CHECK(r.residual == 1.0);
    for (double w : r.weights) CHECK(w == 0.0);
    for (double f : r.feature) CHECK(f == 0.0);
  }

  TEST_CASE("homogeneous slab matches analytic transmittance") {
    std::vector<double> sigma(96, 2.0), feats(96, 0.0), deltas(96, 1.0 / 96);
    auto r = composite(sigma, feats, deltas);
    CHECK(std::abs(r.residual - std::exp(-2.0)) < 1e-3);
    CHECK(std::abs(r.residual - 0.135335) < 1e-3);
  }

  TEST_CASE("an opaque first sample takes all the weight") {
    std::vector<double> sigma{1e4, 1.0, 1.0}, feats{0.7, -0.2, 5, 5, 9, 9}, deltas{0.1, 0.1, 0.1};
    auto r = composite(sigma, feats, deltas);
    CHECK(r.weights[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.feature[0] == doctest::Approx(0.7).epsilon(1e-9));
    CHECK(r.feature[1] == doctest::Approx(-0.2).epsilon(1e-9));
  }

  TEST_CASE("composite rejects bad inputs") {
    std::vector<double> ok{1.0, 1.0}, feats{0, 0}, neg{-1.0, 1.0}, zero{0.1, 0.0};
    CHECK_THROWS_AS(composite(neg, feats, ok), Error);
    CHECK_THROWS_AS(composite(ok, feats, zero), Error);
    CHECK_THROWS_AS(composite(ok, feats, std::vector<double>{0.1}), Error);
  }

  TEST_CASE("weights plus residual conserve unit mass and opacity is monotone") {
    std::mt19937_64 g(11);
    std::exponential_distribution<double> E(0.5);
    std::uniform_real_distribution<double> U(0.001, 0.2);
    std::uniform_int_distribution<int> N(1, 128);
    for (int ray = 0; ray < 2000; ++ray) {
      const int n = N(g);
      std::vector<double> s(n), d(n), f(n, 0.0);
      for (int i = 0; i < n; ++i) s[i] = E(g), d[i] = U(g);
      auto r = composite(s, f, d);
      double sum = r.residual;
      for (double w : r.weights) sum += w;
      CHECK(std::abs(sum - 1.0) < 1e-6);
      // Monotonicity: bump one density.
      auto s2 = s;
      s2[static_cast<std::size_t>(g() % n)] += E(g);
      auto r2 = composite(s2, f, d);
      CHECK(r2.residual <= r.residual);
    }
  }

  TEST_CASE("importance sampling: point mass stays in its bin") {
    std::vector<double> w{0, 0, 2.5, 0, 0}, edges{0, 1, 2, 3, 4, 5};
    Rng rng(1);
    auto s = importance_sample(w, edges, 200, rng);
    REQUIRE(s.size() == 200);
    CHECK(std::is_sorted(s.begin(), s.end()));
    for (double x : s) CHECK((x >= 2.0 && x <= 3.0));
  }

  TEST_CASE("importance sampling: uniform weights pass a KS test") {
    std::vector<double> w(16, 1.0), edges(17);
    for (int i = 0; i <= 16; ++i) edges[i] = 2.0 + 0.25 * i;
    Rng rng(2);
    auto s = importance_sample(w, edges, 10000, rng);
    CHECK(ks_uniform(s, 2.0, 6.0) < 0.05);
    // All-zero weights fall back to uniform.
    std::vector<double> z(16, 0.0);
    auto s0 = importance_sample(z, edges, 10000, rng);
    CHECK(ks_uniform(s0, 2.0, 6.0) < 0.05);
  }

  TEST_CASE("importance sampling: [1,3] weights put three quarters in bin two") {
    std::vector<double> w{1, 3}, edges{0, 1, 2};
    Rng rng(3);
    auto s = importance_sample(w, edges, 100000, rng);
    const double frac = std::count_if(s.begin(), s.end(), [](double x) { return x > 1.0; }) / 100000.0;
    CHECK(std::abs(frac - 0.75) < 0.02);
  }

  TEST_CASE("empty scene renders the background") {
    auto head = make_head(4, 8, 0);
    {
      torch::NoGradGuard ng;
      head.decoder->out->weight.zero_();
      head.decoder->out->bias.fill_(-60.0);  // softplus(-60) underflows to ~1e-27
    }
    SamplingConfig cfg;
    cfg.render_resolution = 16;
    cfg.n_coarse = cfg.n_fine = 8;
    cfg.background = 0.3;
    auto out = render(torch::zeros({3, 8, 8, 4}), head, CameraPose{}, cfg, 0);
    CHECK(out.opacity.abs().max().item<double>() < 1e-20);
    CHECK((out.rgb - 1.0 / (1.0 + std::exp(-0.3))).abs().max().item<double>() < 1e-6);
    CHECK(out.rgb.size(0) == 32);
  }

  TEST_CASE("constant-density ball projects to the analytic disc") {
    const int R = 64;
    auto head = make_head(4, 3, 1);
    const double ball = 0.5;
    DensityReadout ro;
    ro.threshold = 2.0 / 3.0 * ball * ball;
    ro.gain = 2000.0;
    ro.output_gain = 4.0;
    install_density_readout(head.decoder, ro);
    SamplingConfig cfg;
    cfg.render_resolution = R;
    CameraPose pose;
    torch::NoGradGuard ng;
    auto out = render(radial_planes(128, 4), head, pose, cfg, 3);
    const double area = (out.opacity > 0.5).sum().item<double>();
    const double measured = std::sqrt(area / std::numbers::pi);
    const double analytic = std::tan(std::asin(ball / pose.radius)) / std::tan(pose.fov / 2) * (R / 2.0);
    CHECK(std::abs(measured - analytic) <= 1.0);
    // Depth on the centre pixel hits the near surface.
    CHECK(out.depth[R / 2][R / 2].item<double>() == doctest::Approx(pose.radius - ball).epsilon(0.02));
    auto o = out.opacity;
    CHECK(o.min().item<double>() >= 0.0);
    CHECK(o.max().item<double>() <= 1.0 + 1e-6);
    CHECK(((out.residual + out.opacity - 1.0).abs().max().item<double>()) < 1e-6);
  }

  TEST_CASE("render is deterministic per seed") {
    auto head = make_head(4, 8, 2);
    torch::manual_seed(5);
    auto planes = torch::randn({3, 16, 16, 4});
    SamplingConfig cfg;
    cfg.render_resolution = 12;
    torch::NoGradGuard ng;
    auto a = render(planes, head, CameraPose{}, cfg, 77);
    auto b = render(planes, head, CameraPose{}, cfg, 77);
    auto c = render(planes, head, CameraPose{}, cfg, 78);
    CHECK(torch::equal(a.rgb, b.rgb));
    CHECK(torch::equal(a.depth, b.depth));
    CHECK(torch::equal(a.depths, b.depths));
    CHECK_FALSE(torch::equal(a.depths, c.depths));
    // Depth stays inside the ray bounds wherever opacity is non-trivial.
    auto mask = a.opacity > 1e-3;
    auto d = a.depth.masked_select(mask);
    CHECK(d.min().item<double>() > 0.0);
  }

  TEST_CASE("upsampler is bilinear at initialisation") {
    torch::manual_seed(6);
    Upsampler up(5);
    auto c = torch::full({8, 8, 5}, 0.7f);
    auto uc = upsample(up, c);
    CHECK((uc - 0.7f).abs().max().item<double>() < 1e-6);

    const int R = 64;
    auto x = torch::randn({R, R, 5}, torch::kFloat64);
    auto y = upsample(up, x.to(torch::kFloat32)).to(torch::kFloat64);
    REQUIRE(y.size(0) == 128);
    // Scalar half-pixel bilinear oracle with edge clamping.
    auto xa = x.accessor<double, 3>();
    double max_err = 0;
    for (int j = 0; j < 2 * R; ++j)
      for (int i = 0; i < 2 * R; ++i) {
        const double sy = std::max((j + 0.5) / 2.0 - 0.5, 0.0), sx = std::max((i + 0.5) / 2.0 - 0.5, 0.0);
        const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
        const int y1 = std::min(y0 + 1, R - 1), x1 = std::min(x0 + 1, R - 1);
        const double fy = sy - y0, fx = sx - x0;
        for (int k = 0; k < 5; ++k) {
          const double v = (1 - fy) * ((1 - fx) * xa[y0][x0][k] + fx * xa[y0][x1][k]) +
                           fy * ((1 - fx) * xa[y1][x0][k] + fx * xa[y1][x1][k]);
          max_err = std::max(max_err, std::abs(v - y[j][i][k].item<double>()));
        }
      }
    CHECK(max_err < 1e-5);
  }

  TEST_CASE("pixel gradients w.r.t. decoder weights match central differences") {
    auto head = make_head(4, 3, 7);
    head.decoder->to(torch::kFloat64);
    head.upsampler->to(torch::kFloat64);
    torch::manual_seed(8);
    auto planes = torch::randn({3, 8, 8, 4}, torch::kFloat64) * 0.5;
    SamplingConfig cfg;
    cfg.render_resolution = 4;
    cfg.n_coarse = cfg.n_fine = 12;
    CameraPose pose;
    pose.yaw = 0.3;
    auto depths = render(planes, head, pose, cfg, 1).depths;
    auto pixel = [&]() {
      auto o = render_at_depths(planes, head, pose, cfg, 4, depths);
      return o.rgb[3][4][1] + o.depth[1][2] * 0.1;
    };
    auto params = head.decoder->parameters();
    for (auto& p : params) p.mutable_grad() = torch::Tensor();
    pixel().backward();
    std::mt19937_64 g(3);
    double worst = 0;
    for (auto& p : params) {
      auto flat = p.view(-1);
      auto grad = p.grad().view(-1);
      for (int trial = 0; trial < 6; ++trial) {
        const auto idx = static_cast<std::int64_t>(g() % static_cast<std::uint64_t>(flat.numel()));
        const double h = 1e-6;
        double plus, minus;
        {
          torch::NoGradGuard ng;
          const double orig = flat[idx].item<double>();
          flat[idx] = orig + h;
          plus = pixel().item<double>();
          flat[idx] = orig - h;
          minus = pixel().item<double>();
          flat[idx] = orig;
        }
        const double fd = (plus - minus) / (2 * h);
        const double an = grad[idx].item<double>();
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
        worst = std::max(worst, rel);
      }
    }
    CHECK(worst < 1e-3);
  }

  TEST_CASE("hierarchical 48+48 beats coarse-only 96 against a dense reference") {
    int wins = 0;
    double err_h_sum = 0, err_c_sum = 0;
    for (int field = 0; field < 10; ++field) {
      auto head = make_head(4, 3, 100 + field);
      DensityReadout ro;
      ro.threshold = 0.2;
      ro.gain = 200.0;
      ro.output_gain = 4.0;
      install_density_readout(head.decoder, ro);
      torch::manual_seed(200 + field);
      // Smooth field: coarse noise upsampled, plus the radial shape channel.
      auto coarse = torch::randn({3, 4, 4, 4}).permute({0, 3, 1, 2});
      auto smooth = torch::nn::functional::interpolate(
                        coarse, torch::nn::functional::InterpolateFuncOptions()
                                    .size(std::vector<std::int64_t>{32, 32})
                                    .mode(torch::kBilinear)
                                    .align_corners(false))
                        .permute({0, 2, 3, 1}) *
                    0.1;
      auto planes = radial_planes(32, 4) + smooth;
      CameraPose pose;
      pose.yaw = 0.2 * field - 0.9;
      torch::NoGradGuard ng;
      SamplingConfig ref_cfg;
      ref_cfg.render_resolution = 16;
      ref_cfg.n_coarse = 2048;
      ref_cfg.n_fine = 1;
      ref_cfg.stratified = false;
      // 2048 uniform samples; the single fine sample is negligible.
      auto ref = render(planes, head, pose, ref_cfg, 0);
      SamplingConfig hier = ref_cfg;
      hier.n_coarse = 48;
      hier.n_fine = 48;
      hier.stratified = true;
      SamplingConfig flat = hier;
      flat.n_coarse = 95;
      flat.n_fine = 1;
      auto h = render(planes, head, pose, hier, 1);
      auto c = render(planes, head, pose, flat, 1);
      const double eh = (h.feature_image - ref.feature_image).abs().mean().item<double>();
      const double ec = (c.feature_image - ref.feature_image).abs().mean().item<double>();
      err_h_sum += eh;
      err_c_sum += ec;
      if (eh < ec) ++wins;
    }
    CHECK(wins >= 8);
    CHECK(err_h_sum < err_c_sum);
  }
}
