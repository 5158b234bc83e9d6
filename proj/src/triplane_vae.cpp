#include "avatar/triplane_vae.hpp"

#include <bit>

namespace avatar {

namespace {

namespace nn = torch::nn;

nn::Conv3dOptions conv(std::int64_t in, std::int64_t out, std::vector<std::int64_t> k, std::vector<std::int64_t> pad,
                       std::vector<std::int64_t> stride = {1, 1, 1}) {
  return nn::Conv3dOptions(in, out, k).padding(pad).stride(stride);
}

int halvings(std::int64_t full, std::int64_t latent) {
  if (latent <= 0 || full % latent != 0 || !std::has_single_bit(static_cast<std::uint64_t>(full / latent)))
    fail(ErrorKind::Config, "vae: latent resolution " + std::to_string(latent) +
                                " must divide the triplane resolution by a power of two");
  return std::countr_zero(static_cast<std::uint64_t>(full / latent));
}

// B×P×H×W×C ↔ B×C×P×H×W.
torch::Tensor to_ncdhw(const torch::Tensor& x) { return x.permute({0, 4, 1, 2, 3}); }
torch::Tensor from_ncdhw(const torch::Tensor& x) { return x.permute({0, 2, 3, 4, 1}).contiguous(); }

}  // namespace

TriplaneVaeImpl::TriplaneVaeImpl(const ExperimentConfig& cfg)
    : planes(cfg.triplane.planes),
      height(cfg.triplane.resolution),
      width(cfg.triplane.resolution),
      channels(cfg.triplane.channels),
      latent_res(cfg.vae.latent_resolution),
      latent_channels(cfg.vae.latent_channels) {
  const int n_down = halvings(height, latent_res);
  const std::int64_t hid = cfg.vae.hidden_channels;

  encoder = nn::Sequential();
  encoder->push_back(nn::Conv3d(conv(channels, hid, {1, 3, 3}, {0, 1, 1})));
  encoder->push_back(nn::SiLU());
  for (int i = 0; i < n_down; ++i) {
    encoder->push_back(nn::Conv3d(conv(hid, hid, {1, 4, 4}, {0, 1, 1}, {1, 2, 2})));
    encoder->push_back(nn::SiLU());
  }
  encoder->push_back(nn::Conv3d(conv(hid, hid, {3, 3, 3}, {1, 1, 1})));
  encoder_skip = nn::Conv3d(conv(channels, hid, {1, 1, 1}, {0, 0, 0}));
  to_moments = nn::Conv3d(conv(hid, 2 * latent_channels, {1, 3, 3}, {0, 1, 1}));
  decoder = nn::Sequential();
  decoder->push_back(nn::Conv3d(conv(latent_channels, hid, {1, 3, 3}, {0, 1, 1})));
  decoder->push_back(nn::SiLU());
  decoder->push_back(nn::Conv3d(conv(hid, hid, {3, 3, 3}, {1, 1, 1})));
  decoder->push_back(nn::SiLU());
  for (int i = 0; i < n_down; ++i) {
    decoder->push_back(nn::ConvTranspose3d(
        nn::ConvTranspose3dOptions(hid, hid, {1, 4, 4}).stride({1, 2, 2}).padding({0, 1, 1})));
    decoder->push_back(nn::SiLU());
  }
  decoder->push_back(nn::Conv3d(conv(hid, channels, {1, 3, 3}, {0, 1, 1})));
  decoder_skip = nn::Conv3d(conv(latent_channels, channels, {1, 1, 1}, {0, 0, 0}));

  register_module("encoder", encoder);
  register_module("encoder_skip", encoder_skip);
  register_module("to_moments", to_moments);
  register_module("decoder", decoder);
  register_module("decoder_skip", decoder_skip);
  bias_image = register_parameter("bias_image", torch::zeros({1, channels, planes, height, width}));

  // He-normal weights keep activations from shrinking through the SiLU
  // stacks; the moment head starts at zero (mean 0, logvar 0).
  torch::NoGradGuard ng;
  for (auto& m : encoder->modules(false))
    if (auto* c = m->as<nn::Conv3dImpl>()) {
      nn::init::kaiming_normal_(c->weight, 0.0, torch::kFanIn, torch::kReLU);
      c->bias.zero_();
    }
  for (auto& m : decoder->modules(false)) {
    if (auto* c = m->as<nn::Conv3dImpl>()) {
      nn::init::kaiming_normal_(c->weight, 0.0, torch::kFanIn, torch::kReLU);
      c->bias.zero_();
    } else if (auto* t = m->as<nn::ConvTranspose3dImpl>()) {
      nn::init::kaiming_normal_(t->weight, 0.0, torch::kFanOut, torch::kReLU);
      t->bias.zero_();
    }
  }
  to_moments->weight.zero_();
  to_moments->bias.zero_();
}

TriplaneLatent TriplaneVaeImpl::encode(const torch::Tensor& x, std::optional<at::Generator> gen) {
  auto in = x.dim() == 4 ? x.unsqueeze(0) : x;
  if (in.dim() != 5 || in.size(1) != planes || in.size(2) != height || in.size(3) != width || in.size(4) != channels)
    fail(ErrorKind::Shape, "vae encode: expected [B,]" + std::to_string(planes) + "×" + std::to_string(height) + "×" +
                               std::to_string(width) + "×" + std::to_string(channels) + ", got " + shape_string(x));
  const auto x5 = to_ncdhw(in.to(bias_image.dtype()));
  const auto pooled = torch::avg_pool3d(x5, {1, height / latent_res, width / latent_res});
  auto h = torch::silu(encoder->forward(x5) + encoder_skip->forward(pooled));
  auto moments = from_ncdhw(to_moments->forward(h));
  TriplaneLatent lat;
  lat.mean = moments.slice(-1, 0, latent_channels);
  lat.logvar = moments.slice(-1, latent_channels).clamp(-30.0, 20.0);
  lat.eps = gen ? torch::randn(lat.mean.sizes(), *gen, lat.mean.options()) : torch::zeros_like(lat.mean);
  lat.sample = lat.mean + torch::exp(0.5 * lat.logvar) * lat.eps;
  return lat;
}

torch::Tensor TriplaneVaeImpl::decode(const torch::Tensor& z) {
  const bool batched = z.dim() == 5;
  auto in = batched ? z : z.unsqueeze(0);
  if (in.dim() != 5 || in.size(1) != planes || in.size(2) != latent_res || in.size(3) != latent_res ||
      in.size(4) != latent_channels)
    fail(ErrorKind::Shape, "vae decode: expected [B,]" + std::to_string(planes) + "×" + std::to_string(latent_res) +
                               "×" + std::to_string(latent_res) + "×" + std::to_string(latent_channels) + ", got " +
                               shape_string(z));
  const auto z5 = to_ncdhw(in.to(bias_image.dtype()));
  const double f = static_cast<double>(height / latent_res);
  auto linear = torch::nn::functional::interpolate(
      decoder_skip->forward(z5),
      torch::nn::functional::InterpolateFuncOptions().scale_factor(std::vector<double>{1.0, f, f}).mode(torch::kTrilinear).align_corners(false));
  auto out = from_ncdhw(decoder->forward(z5) + linear + bias_image);
  return batched ? out : out.squeeze(0);
}

torch::Tensor kl_divergence(const TriplaneLatent& lat) {
  auto mu = lat.mean.dim() == 4 ? lat.mean.unsqueeze(0) : lat.mean;
  auto lv = lat.logvar.dim() == 4 ? lat.logvar.unsqueeze(0) : lat.logvar;
  auto per = 0.5 * (mu * mu + torch::exp(lv) - lv - 1.0);
  return per.flatten(1).sum(1).mean();
}

json VaeLossReport::to_json() const {
  return {{"l1_triplane", l1_triplane.item<double>()},
          {"l1_depth", l1_depth.item<double>()},
          {"perceptual_image", perceptual_image.item<double>()},
          {"kl", kl.item<double>()},
          {"total", total.item<double>()}};
}

VaeLossReport vae_loss(const torch::Tensor& tri, const torch::Tensor& recon, const VaeRenderPairs& r,
                       const TriplaneLatent& lat, const PerceptualMetric& perceptual, const VaeLossWeights& w) {
  if (!r.image_gt.defined() || !r.image_recon.defined() || !r.depth_gt.defined() || !r.depth_recon.defined())
    fail(ErrorKind::Validation, "vae_loss: missing render pair");
  if (tri.sizes() != recon.sizes())
    fail(ErrorKind::Shape, "vae_loss: triplane " + shape_string(tri) + " vs recon " + shape_string(recon));
  VaeLossReport rep;
  rep.l1_triplane = (recon - tri).abs().mean();
  rep.l1_depth = (r.depth_recon - r.depth_gt).abs().mean();
  rep.perceptual_image = perceptual.distance(r.image_recon, r.image_gt);
  rep.kl = kl_divergence(lat);
  rep.total = w.triplane * rep.l1_triplane + w.depth * rep.l1_depth + w.perceptual * rep.perceptual_image +
              w.kl * rep.kl;
  return rep;
}

}  // namespace avatar
