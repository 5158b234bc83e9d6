#pragma once

#include "avatar/common.hpp"
#include "avatar/config.hpp"
#include "avatar/dit.hpp"
#include "avatar/perceptual.hpp"
#include "avatar/volume_renderer.hpp"

namespace avatar {

// B×D motion vectors; construction rejects anything with spatial axes.
class MotionEmbedding {
 public:
  explicit MotionEmbedding(torch::Tensor v);
  const torch::Tensor& vector() const { return v_; }
  std::int64_t dim() const { return v_.size(1); }

 private:
  torch::Tensor v_;
};

// Transformer block over source tokens: self-attention with triplane tokens
// appended to the keys, then cross-attention to the motion tokens, then MLP.
struct MotionBlockImpl : torch::nn::Module {
  MotionBlockImpl(std::int64_t dim, std::int64_t heads);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& tri_tokens, const torch::Tensor& motion_tokens);

  torch::nn::LayerNorm norm1{nullptr}, norm_tri{nullptr}, norm2{nullptr}, norm3{nullptr};
  Attention self_attn{nullptr}, cross_attn{nullptr};
  torch::nn::Sequential mlp{nullptr};
};
TORCH_MODULE(MotionBlock);

struct MotionRendererImpl : torch::nn::Module {
  explicit MotionRendererImpl(const ExperimentConfig& cfg);

  // B×S×S×3 images in [0,1] → B×d×g×g.
  torch::Tensor encode_source(const torch::Tensor& images);
  // B×E expression vectors → B×D.
  MotionEmbedding motion(const torch::Tensor& expression);
  // Parametric planes B×P×H×W×C → B×(P·k²)×d average-pooled tokens.
  torch::Tensor triplane_tokens(const torch::Tensor& planes);
  // Source grid + triplane + motion → refined grid of the same shape.
  torch::Tensor motion_vit(const torch::Tensor& grid, const torch::Tensor& planes, const MotionEmbedding& m);
  // Refined grid → B×3×H×W×C plane residual.
  torch::Tensor decode(const torch::Tensor& grid);
  // Full forward: returns the B×3×H×W×C residual added to the fused planes.
  torch::Tensor refine(const torch::Tensor& source, const torch::Tensor& planes, const torch::Tensor& expression);

  std::int64_t width, grid, channels, plane_res, source_res, tri_pool, motion_tokens;
  torch::nn::Sequential source_encoder{nullptr}, motion_mlp{nullptr}, decoder{nullptr};
  torch::nn::Linear tri_proj{nullptr}, motion_to_tokens{nullptr};
  torch::Tensor source_pos;
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::LayerNorm out_norm{nullptr};
};
TORCH_MODULE(MotionRenderer);

// Renders fused + refined planes (refined may be undefined, meaning ≡ 0).
RenderOutput fuse_and_render(const torch::Tensor& refined, const torch::Tensor& fused, RenderHead& head,
                             const CameraPose& pose, const SamplingConfig& sampling, std::uint64_t seed);

// Three-layer convolutional patch discriminator on B×H×W×3 images.
struct PatchDiscriminatorImpl : torch::nn::Module {
  PatchDiscriminatorImpl();
  torch::Tensor forward(const torch::Tensor& images);
  torch::nn::Sequential net{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

struct RendererLossWeights {
  double re = 1.0, f = 1.0, tri = 0.1, depth = 1.0, opa = 1.0, adv = 0.01;
  static RendererLossWeights from_config(const ExperimentConfig& cfg);
};

struct RendererOutputs {
  torch::Tensor image, feature, planes, depth, opacity;  // batched
};

struct RendererLossReport {
  torch::Tensor l_re, l_f, l_tri, l_depth, l_opa, l_adv, total;
  json to_json() const;
};

// l_adv is the non-saturating generator loss on `fake_logits`, applied only
// when step >= adv_start; otherwise it is exactly zero.
RendererLossReport renderer_loss(const RendererOutputs& out, const RendererOutputs& target, int step, int adv_start,
                                 const torch::Tensor& fake_logits, const PerceptualMetric& perceptual,
                                 const RendererLossWeights& w = {});

bool adversarial_active(int step, int adv_start);

// Volume resolution in effect at `step` of `steps`.
int renderer_resolution(const ExperimentConfig& cfg, int step, int steps);

}  // namespace avatar
