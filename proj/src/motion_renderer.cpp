#include "avatar/motion_renderer.hpp"

#include <bit>

namespace avatar {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

MotionEmbedding::MotionEmbedding(torch::Tensor v) : v_(std::move(v)) {
  if (v_.dim() != 2) fail(ErrorKind::Shape, "motion embedding must be B×D, got " + shape_string(v_));
}

namespace {

nn::LayerNorm norm(std::int64_t d) { return nn::LayerNorm(nn::LayerNormOptions({d}).eps(1e-6)); }

int log2_exact(std::int64_t ratio, const std::string& what) {
  if (ratio < 1 || !std::has_single_bit(static_cast<std::uint64_t>(ratio)))
    fail(ErrorKind::Config, what + ": resolution ratio " + std::to_string(ratio) + " is not a power of two");
  return std::countr_zero(static_cast<std::uint64_t>(ratio));
}

}  // namespace

MotionBlockImpl::MotionBlockImpl(std::int64_t dim, std::int64_t heads) {
  norm1 = register_module("norm1", norm(dim));
  norm_tri = register_module("norm_tri", norm(dim));
  norm2 = register_module("norm2", norm(dim));
  norm3 = register_module("norm3", norm(dim));
  self_attn = register_module("self_attn", Attention(dim, heads));
  cross_attn = register_module("cross_attn", Attention(dim, heads));
  mlp = register_module("mlp", nn::Sequential(nn::Linear(dim, 4 * dim), nn::GELU(), nn::Linear(4 * dim, dim)));
}

torch::Tensor MotionBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& tri, const torch::Tensor& motion) {
  auto h = norm1->forward(x);
  // Triplane tokens join the keys only; their outputs are discarded.
  auto ctx = tri.size(1) > 0 ? torch::cat({h, norm_tri->forward(tri)}, 1) : h;
  auto y = x + self_attn->forward(h, ctx);
  y = y + cross_attn->forward(norm2->forward(y), motion);
  return y + mlp->forward(norm3->forward(y));
}

MotionRendererImpl::MotionRendererImpl(const ExperimentConfig& cfg)
    : width(cfg.motion_renderer.width),
      grid(cfg.motion_renderer.grid),
      channels(cfg.triplane.channels),
      plane_res(cfg.triplane.resolution),
      source_res(cfg.motion_renderer.source_resolution),
      tri_pool(std::max<std::int64_t>(1, cfg.motion_renderer.grid / 2)),
      motion_tokens(4) {
  const int n_down = log2_exact(source_res / grid, "motion renderer source encoder");
  const int n_up = log2_exact(plane_res / grid, "motion renderer decoder");
  if (source_res % grid != 0 || plane_res % grid != 0)
    fail(ErrorKind::Config, "motion renderer: grid must divide the source and plane resolutions");

  source_encoder = nn::Sequential();
  std::int64_t c = 3;
  for (int i = 0; i < n_down; ++i) {
    const std::int64_t out = i + 1 == n_down ? width : std::min<std::int64_t>(width, 32 << i);
    source_encoder->push_back(nn::Conv2d(nn::Conv2dOptions(c, out, 4).stride(2).padding(1)));
    if (i + 1 < n_down) source_encoder->push_back(nn::SiLU());
    c = out;
  }
  if (n_down == 0) source_encoder->push_back(nn::Conv2d(nn::Conv2dOptions(3, width, 3).padding(1)));
  register_module("source_encoder", source_encoder);
  source_pos = register_parameter("source_pos", torch::randn({grid * grid, width}) * 0.02);

  tri_proj = register_module("tri_proj", nn::Linear(channels, width));
  const auto E = cfg.geometry.expression_dim, D = cfg.motion_renderer.motion_dim;
  motion_mlp = register_module("motion_mlp", nn::Sequential(nn::Linear(E, 64), nn::SiLU(), nn::Linear(64, D)));
  motion_to_tokens = register_module("motion_to_tokens", nn::Linear(D, motion_tokens * width));

  blocks = register_module("blocks", nn::ModuleList());
  for (int i = 0; i < cfg.motion_renderer.depth; ++i) blocks->push_back(MotionBlock(width, cfg.motion_renderer.heads));
  out_norm = register_module("out_norm", norm(width));

  decoder = nn::Sequential();
  c = width;
  for (int i = 0; i < n_up; ++i) {
    const std::int64_t out = std::max<std::int64_t>(32, width >> (i + 1));
    decoder->push_back(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(c, out, 4).stride(2).padding(1)));
    decoder->push_back(nn::SiLU());
    c = out;
  }
  auto last = nn::Conv2d(nn::Conv2dOptions(c, 3 * channels, 3).padding(1));
  {
    torch::NoGradGuard ng;
    last->weight.zero_();
    last->bias.zero_();
  }
  decoder->push_back(last);
  register_module("decoder", decoder);
}

torch::Tensor MotionRendererImpl::encode_source(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != source_res || images.size(2) != source_res || images.size(3) != 3)
    fail(ErrorKind::Shape, "motion renderer: source images must be B×" + std::to_string(source_res) + "×" +
                               std::to_string(source_res) + "×3, got " + shape_string(images));
  return source_encoder->forward(images.permute({0, 3, 1, 2}).to(torch::kFloat32));
}

MotionEmbedding MotionRendererImpl::motion(const torch::Tensor& expression) {
  return MotionEmbedding(motion_mlp->forward(expression.to(torch::kFloat32)));
}

torch::Tensor MotionRendererImpl::triplane_tokens(const torch::Tensor& planes) {
  const auto B = planes.size(0), P = planes.size(1);
  auto x = planes.permute({0, 1, 4, 2, 3}).reshape({B * P, channels, planes.size(2), planes.size(3)});
  auto pooled = F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions({tri_pool, tri_pool}));
  auto tok = pooled.reshape({B, P, channels, tri_pool * tri_pool}).permute({0, 1, 3, 2}).reshape({B, -1, channels});
  return tri_proj->forward(tok);
}

torch::Tensor MotionRendererImpl::motion_vit(const torch::Tensor& g, const torch::Tensor& planes,
                                             const MotionEmbedding& m) {
  const auto B = g.size(0);
  if (g.dim() != 4 || g.size(1) != width || g.size(2) != grid || g.size(3) != grid)
    fail(ErrorKind::Shape, "motion vit: grid " + shape_string(g) + " does not match the configuration");
  if (planes.size(0) != B || m.vector().size(0) != B) fail(ErrorKind::Shape, "motion vit: batch mismatch");
  auto x = g.flatten(2).transpose(1, 2) + source_pos.unsqueeze(0);
  auto tri = triplane_tokens(planes);
  auto mt = motion_to_tokens->forward(m.vector()).view({B, motion_tokens, width});
  for (const auto& blk : *blocks) x = blk->as<MotionBlockImpl>()->forward(x, tri, mt);
  return out_norm->forward(x).transpose(1, 2).reshape({B, width, grid, grid});
}

torch::Tensor MotionRendererImpl::decode(const torch::Tensor& g) {
  const auto B = g.size(0);
  auto out = decoder->forward(g);  // B×3C×H×W
  return out.view({B, 3, channels, plane_res, plane_res}).permute({0, 1, 3, 4, 2});
}

torch::Tensor MotionRendererImpl::refine(const torch::Tensor& source, const torch::Tensor& planes,
                                         const torch::Tensor& expression) {
  return decode(motion_vit(encode_source(source), planes, motion(expression)));
}

RenderOutput fuse_and_render(const torch::Tensor& refined, const torch::Tensor& fused, RenderHead& head,
                             const CameraPose& pose, const SamplingConfig& sampling, std::uint64_t seed) {
  auto planes = refined.defined() ? fused + refined : fused;
  return render(planes, head, pose, sampling, seed);
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl() {
  net = register_module(
      "net", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(3, 32, 4).stride(2).padding(1)),
                            nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                            nn::Conv2d(nn::Conv2dOptions(32, 64, 4).stride(2).padding(1)),
                            nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                            nn::Conv2d(nn::Conv2dOptions(64, 1, 3).padding(1))));
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& images) {
  return net->forward(images.permute({0, 3, 1, 2}).to(torch::kFloat32));
}

RendererLossWeights RendererLossWeights::from_config(const ExperimentConfig& cfg) {
  const auto& m = cfg.motion_renderer;
  return {m.w_re, m.w_f, m.w_tri, m.w_depth, m.w_opa, m.w_adv};
}

json RendererLossReport::to_json() const {
  return {{"l_re", l_re.item<double>()},       {"l_f", l_f.item<double>()},     {"l_tri", l_tri.item<double>()},
          {"l_depth", l_depth.item<double>()}, {"l_opa", l_opa.item<double>()}, {"l_adv", l_adv.item<double>()},
          {"total", total.item<double>()}};
}

bool adversarial_active(int step, int adv_start) { return adv_start >= 0 && step >= adv_start; }

RendererLossReport renderer_loss(const RendererOutputs& out, const RendererOutputs& tgt, int step, int adv_start,
                                 const torch::Tensor& fake_logits, const PerceptualMetric& perceptual,
                                 const RendererLossWeights& w) {
  for (const auto* t : {&tgt.image, &tgt.feature, &tgt.planes, &tgt.depth, &tgt.opacity})
    if (!t->defined()) fail(ErrorKind::Validation, "renderer_loss: missing target");
  for (const auto* t : {&out.image, &out.feature, &out.planes, &out.depth, &out.opacity})
    if (!t->defined()) fail(ErrorKind::Validation, "renderer_loss: missing output");
  RendererLossReport r;
  r.l_re = (out.image - tgt.image).abs().mean() + perceptual.distance(out.image, tgt.image);
  r.l_f = (out.feature - tgt.feature).abs().mean();
  r.l_tri = (out.planes - tgt.planes).abs().mean();
  r.l_depth = (out.depth - tgt.depth).abs().mean();
  r.l_opa = (out.opacity - tgt.opacity).abs().mean();
  if (adversarial_active(step, adv_start)) {
    if (!fake_logits.defined()) fail(ErrorKind::Validation, "renderer_loss: adversarial phase needs logits");
    r.l_adv = F::softplus(-fake_logits).mean();
  } else {
    r.l_adv = torch::zeros({}, out.image.options());
  }
  r.total = w.re * r.l_re + w.f * r.l_f + w.tri * r.l_tri + w.depth * r.l_depth + w.opa * r.l_opa + w.adv * r.l_adv;
  return r;
}

int renderer_resolution(const ExperimentConfig& cfg, int step, int steps) {
  const auto& m = cfg.motion_renderer;
  return step <= static_cast<int>(std::floor(m.res_switch_fraction * steps)) ? m.res_start : m.res_final;
}

}  // namespace avatar
