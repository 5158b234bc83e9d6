#pragma once

#include <optional>

#include "avatar/common.hpp"
#include "avatar/config.hpp"
#include "avatar/perceptual.hpp"

namespace avatar {

// Latents are B×P×h×w×c. `eps` is the noise used for `sample`.
struct TriplaneLatent {
  torch::Tensor mean, logvar, sample, eps;
};

// 3D convolutional autoencoder over the plane stack: the plane axis is the
// depth dimension of the convolutions, H and W are halved log2(H/h) times.
// Both halves add a linear path (average-pool plus 1×1×1 projection in the
// encoder, 1×1×1 projection plus trilinear upsampling in the decoder), and the
// decoder adds a learned bias image, its output for a zero latent.
struct TriplaneVaeImpl : torch::nn::Module {
  explicit TriplaneVaeImpl(const ExperimentConfig& cfg);

  // planes: [B,]P×H×W×C. Without a generator ε = 0 and sample = mean.
  TriplaneLatent encode(const torch::Tensor& planes, std::optional<at::Generator> gen = std::nullopt);
  // z: [B,]P×h×w×c → B×P×H×W×C (batch axis kept as given).
  torch::Tensor decode(const torch::Tensor& z);

  std::int64_t planes, height, width, channels, latent_res, latent_channels;
  torch::nn::Sequential encoder{nullptr}, decoder{nullptr};
  torch::nn::Conv3d encoder_skip{nullptr}, to_moments{nullptr}, decoder_skip{nullptr};
  torch::Tensor bias_image;  // 1×C×P×H×W
};
TORCH_MODULE(TriplaneVae);

// Σ over latent elements of ½(μ² + e^{logvar} − logvar − 1), mean over batch.
torch::Tensor kl_divergence(const TriplaneLatent& lat);

struct VaeRenderPairs {
  torch::Tensor image_gt, image_recon;  // B×H×W×3
  torch::Tensor depth_gt, depth_recon;  // B×R×R
};

struct VaeLossWeights {
  double triplane = 1.0, depth = 1.0, perceptual = 1.0, kl = 1e-5;
};

struct VaeLossReport {
  torch::Tensor l1_triplane, l1_depth, perceptual_image, kl, total;
  json to_json() const;
};

VaeLossReport vae_loss(const torch::Tensor& tri, const torch::Tensor& recon, const VaeRenderPairs& renders,
                       const TriplaneLatent& lat, const PerceptualMetric& perceptual, const VaeLossWeights& w = {});

}  // namespace avatar
