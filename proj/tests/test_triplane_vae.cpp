#include <doctest.h>

#include "avatar/triplane_vae.hpp"

using namespace avatar;

namespace {

ExperimentConfig small() {
  auto c = ExperimentConfig::desk();
  c.triplane.resolution = 16;
  c.triplane.channels = 8;
  c.vae.latent_resolution = 4;
  c.vae.latent_channels = 2;
  c.vae.hidden_channels = 8;
  return c;
}

TriplaneLatent one_element(double mu, double logvar) {
  TriplaneLatent l;
  l.mean = torch::full({1, 1, 1, 1, 1}, mu, torch::kFloat64);
  l.logvar = torch::full({1, 1, 1, 1, 1}, logvar, torch::kFloat64);
  return l;
}

VaeRenderPairs renders(torch::Tensor img_gt, torch::Tensor img_rc, torch::Tensor dep_gt, torch::Tensor dep_rc) {
  return {std::move(img_gt), std::move(img_rc), std::move(dep_gt), std::move(dep_rc)};
}

}  // namespace

TEST_SUITE("triplane_vae") {
  TEST_CASE("zero-initialised moments give the prior") {
    torch::manual_seed(0);
    TriplaneVae vae(ExperimentConfig::desk());
    auto lat = vae->encode(torch::zeros({4, 64, 64, 16}));
    CHECK(lat.mean.abs().max().item<double>() == 0.0);
    CHECK(lat.logvar.abs().max().item<double>() == 0.0);
    CHECK(kl_divergence(lat).item<double>() == 0.0);
    CHECK(lat.mean.sizes() == torch::IntArrayRef({1, 4, 16, 16, 4}));
  }

  TEST_CASE("paper layout downsamples by four and maps 32 to 8 channels") {
    auto c = ExperimentConfig::paper();
    c.vae.hidden_channels = 4;
    torch::manual_seed(0);
    TriplaneVae vae(c);
    auto lat = vae->encode(torch::zeros({1, 4, 256, 256, 32}));
    CHECK(lat.mean.sizes() == torch::IntArrayRef({1, 4, 64, 64, 8}));
    CHECK(vae->decode(lat.sample).sizes() == torch::IntArrayRef({1, 4, 256, 256, 32}));
  }

  TEST_CASE("reparameterization and deterministic mode") {
    torch::manual_seed(1);
    TriplaneVae vae(small());
    torch::NoGradGuard ng;
    for (auto& p : vae->to_moments->parameters()) p.normal_(0, 0.1);
    auto x = torch::randn({2, 4, 16, 16, 8});
    auto det = vae->encode(x);
    CHECK(torch::equal(det.sample, det.mean));
    auto sto = vae->encode(x, torch_generator(3));
    CHECK(torch::allclose(sto.sample, sto.mean + torch::exp(0.5 * sto.logvar) * sto.eps));
    CHECK(sto.eps.abs().sum().item<double>() > 0);
    auto again = vae->encode(x, torch_generator(3));
    CHECK(torch::equal(again.sample, sto.sample));
    CHECK(sto.logvar.max().item<double>() <= 20.0);
  }

  TEST_CASE("decode contract") {
    torch::manual_seed(2);
    auto c = small();
    TriplaneVae vae(c);
    torch::NoGradGuard ng;
    auto z = torch::zeros({4, 4, 4, 2});
    auto a = vae->decode(z), b = vae->decode(z);
    CHECK(torch::equal(a, b));
    CHECK(a.sizes() == torch::IntArrayRef({4, 16, 16, 8}));
    CHECK(torch::isfinite(a).all().item<bool>());
    auto x = torch::randn({4, 16, 16, 8});
    CHECK(vae->decode(vae->encode(x).sample).squeeze(0).sizes() == x.sizes());
    CHECK_THROWS_AS(vae->encode(torch::zeros({4, 16, 16, 7})), Error);
    CHECK_THROWS_AS(vae->decode(torch::zeros({4, 8, 8, 2})), Error);
    auto bad = c;
    bad.vae.latent_resolution = 6;
    CHECK_THROWS_AS((void)TriplaneVae(bad), Error);
  }

  TEST_CASE("KL closed forms") {
    CHECK(kl_divergence(one_element(0.0, 0.0)).item<double>() == 0.0);
    CHECK(kl_divergence(one_element(1.0, 0.0)).item<double>() == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(std::abs(kl_divergence(one_element(0.0, 1.0)).item<double>() - (std::exp(1.0) - 2.0) / 2.0) < 1e-7);
    // Sum over elements, mean over batch.
    TriplaneLatent l;
    l.mean = torch::ones({2, 1, 1, 1, 3}, torch::kFloat64);
    l.logvar = torch::zeros({2, 1, 1, 1, 3}, torch::kFloat64);
    CHECK(kl_divergence(l).item<double>() == doctest::Approx(1.5));
  }

  TEST_CASE("KL gradients match central differences") {
    torch::manual_seed(4);
    auto mu = torch::randn({1, 2, 2, 2, 2}, torch::kFloat64).requires_grad_();
    auto lv = torch::randn({1, 2, 2, 2, 2}, torch::kFloat64).requires_grad_();
    TriplaneLatent lat{mu, lv, {}, {}};
    kl_divergence(lat).backward();
    CHECK(torch::allclose(mu.grad(), mu.detach(), 0, 1e-12));
    CHECK(torch::allclose(lv.grad(), 0.5 * (torch::exp(lv.detach()) - 1), 0, 1e-12));
    const double h = 1e-6;
    auto f = [&](const torch::Tensor& m, const torch::Tensor& v) {
      return kl_divergence(TriplaneLatent{m, v, {}, {}}).item<double>();
    };
    torch::NoGradGuard ng;
    double worst = 0.0;
    for (int64_t i = 0; i < mu.numel(); ++i) {
      auto mp = mu.detach().clone(), mm = mu.detach().clone();
      mp.view(-1)[i] += h;
      mm.view(-1)[i] -= h;
      worst = std::max(worst, std::abs((f(mp, lv) - f(mm, lv)) / (2 * h) - mu.grad().view(-1)[i].item<double>()));
      auto vp = lv.detach().clone(), vm = lv.detach().clone();
      vp.view(-1)[i] += h;
      vm.view(-1)[i] -= h;
      worst = std::max(worst, std::abs((f(mu, vp) - f(mu, vm)) / (2 * h) - lv.grad().view(-1)[i].item<double>()));
    }
    CHECK(worst < 1e-5);
  }

  TEST_CASE("loss weights and linearity") {
    torch::manual_seed(5);
    GradientPerceptual perc;
    auto tri = torch::randn({4, 8, 8, 4});
    auto img = torch::rand({2, 16, 16, 3});
    auto dep = torch::rand({2, 8, 8});
    TriplaneLatent lat{torch::ones({1, 4, 2, 2, 1}), torch::zeros({1, 4, 2, 2, 1}), {}, {}};
    auto perfect = vae_loss(tri, tri, renders(img, img, dep, dep), lat, perc);
    CHECK(perfect.total.item<double>() == doctest::Approx(1e-5 * perfect.kl.item<double>()).epsilon(1e-9));
    CHECK(perfect.kl.item<double>() == doctest::Approx(8.0));

    auto r1 = torch::randn_like(tri);
    auto img2 = torch::rand({2, 16, 16, 3}), dep2 = torch::rand({2, 8, 8});
    auto rep = vae_loss(tri, tri + r1, renders(img, img2, dep, dep2), lat, perc);
    const double expect = rep.l1_triplane.item<double>() + rep.l1_depth.item<double>() +
                          rep.perceptual_image.item<double>() + 1e-5 * rep.kl.item<double>();
    CHECK(rep.total.item<double>() == doctest::Approx(expect).epsilon(1e-6));
    CHECK(rep.l1_triplane.item<double>() == doctest::Approx(r1.abs().mean().item<double>()));
    auto doubled = vae_loss(tri, tri + 2 * r1, renders(img, img2, dep, dep2), lat, perc);
    CHECK(doubled.l1_triplane.item<double>() == doctest::Approx(2 * rep.l1_triplane.item<double>()).epsilon(1e-6));
    CHECK(doubled.total.item<double>() - rep.total.item<double>() ==
          doctest::Approx(rep.l1_triplane.item<double>()).epsilon(1e-5));

    CHECK_THROWS_AS(vae_loss(tri, tri, renders(img, {}, dep, dep), lat, perc), Error);
    CHECK_THROWS_AS(vae_loss(tri, tri.slice(0, 0, 3), renders(img, img, dep, dep), lat, perc), Error);
  }
}
