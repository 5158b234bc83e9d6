#include "avatar/dit.hpp"

namespace avatar {

namespace nn = torch::nn;

void TokenLayout::validate() const {
  if (patch <= 0 || height % patch != 0 || width % patch != 0)
    fail(ErrorKind::Config, "dit: patch " + std::to_string(patch) + " must divide the latent size " +
                                std::to_string(height) + "×" + std::to_string(width));
}

TokenLayout TokenLayout::from_config(const ExperimentConfig& cfg) {
  TokenLayout l{cfg.triplane.planes, cfg.vae.latent_resolution, cfg.vae.latent_resolution,
                cfg.vae.latent_channels,  cfg.dit.patch,            cfg.dit.width};
  l.validate();
  return l;
}

torch::Tensor patchify(const torch::Tensor& latent, const TokenLayout& l) {
  if (latent.dim() != 5 || latent.size(1) != l.planes || latent.size(2) != l.height || latent.size(3) != l.width)
    fail(ErrorKind::Shape, "patchify: latent " + shape_string(latent) + " does not match the token layout");
  const auto B = latent.size(0), c = latent.size(4), s = l.patch;
  return latent.reshape({B, l.rows(), s, l.cols(), s, c})
      .permute({0, 1, 3, 2, 4, 5})
      .reshape({B, l.tokens(), s * s * c});
}

torch::Tensor unpatchify(const torch::Tensor& tokens, const TokenLayout& l, std::int64_t c) {
  const auto B = tokens.size(0), s = l.patch;
  if (tokens.dim() != 3 || tokens.size(1) != l.tokens() || tokens.size(2) != s * s * c)
    fail(ErrorKind::Shape, "unpatchify: tokens " + shape_string(tokens) + " do not match the token layout");
  return tokens.reshape({B, l.rows(), l.cols(), s, s, c})
      .permute({0, 1, 3, 2, 4, 5})
      .reshape({B, l.planes, l.height, l.width, c});
}

torch::Tensor timestep_embedding(const torch::Tensor& t, std::int64_t dim) {
  const auto half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, t.options()) / static_cast<double>(half));
  auto args = t.unsqueeze(-1) * freqs.unsqueeze(0);
  return torch::cat({torch::cos(args), torch::sin(args)}, -1);
}

torch::Tensor sample_drop_mask(Rng& rng, std::int64_t batch, double p) {
  auto m = torch::zeros({batch}, torch::kBool);
  for (std::int64_t i = 0; i < batch; ++i) m[i] = rng.bernoulli(p);
  return m;
}

ToyConditionEncoderImpl::ToyConditionEncoderImpl(std::int64_t resolution, std::int64_t w, std::int64_t s)
    : res(resolution), width(w), semantic_tokens(s) {
  if (res % 8 != 0) fail(ErrorKind::Config, "condition encoder: resolution must be a multiple of 8");
  auto c = [](std::int64_t in, std::int64_t out) { return nn::Conv2d(nn::Conv2dOptions(in, out, 4).stride(2).padding(1)); };
  convs = register_module("convs", nn::Sequential(c(3, 32), nn::SiLU(), c(32, 64), nn::SiLU(), c(64, width)));
  to_semantic = register_module("to_semantic", nn::Linear(width, semantic_tokens * width));
}

ConditionBundle ToyConditionEncoderImpl::encode(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != res || images.size(2) != res || images.size(3) != 3)
    fail(ErrorKind::Shape, "condition encoder: expected B×" + std::to_string(res) + "×" + std::to_string(res) +
                               "×3, got " + shape_string(images));
  const auto B = images.size(0);
  auto f = convs->forward(images.permute({0, 3, 1, 2}));  // B×d×g×g
  ConditionBundle b;
  b.patch = f.flatten(2).transpose(1, 2);
  b.semantic = to_semantic->forward(f.mean({2, 3})).reshape({B, semantic_tokens, width});
  b.null_mask = torch::zeros({B}, torch::kBool);
  return b;
}

std::shared_ptr<ConditionEncoderImpl> make_condition_encoder(const ExperimentConfig& cfg) {
  if (cfg.dit.condition_encoder == "toy")
    return std::make_shared<ToyConditionEncoderImpl>(cfg.dit.condition_resolution, cfg.dit.width,
                                                     cfg.dit.semantic_tokens);
  fail(ErrorKind::Config, "dit: condition encoder '" + cfg.dit.condition_encoder +
                              "' is not built in; register an external encoder instead");
}

AttentionImpl::AttentionImpl(std::int64_t dim, std::int64_t h) : heads(h) {
  if (dim % heads != 0) fail(ErrorKind::Config, "attention: width must be divisible by heads");
  q = register_module("q", nn::Linear(dim, dim));
  k = register_module("k", nn::Linear(dim, dim));
  v = register_module("v", nn::Linear(dim, dim));
  out = register_module("out", nn::Linear(dim, dim));
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& ctx) {
  const auto B = x.size(0), N = x.size(1), M = ctx.size(1), d = x.size(2), dh = d / heads;
  if (ctx.size(2) != d) fail(ErrorKind::Shape, "attention: width mismatch " + shape_string(x) + " / " + shape_string(ctx));
  auto qh = q->forward(x).view({B, N, heads, dh}).transpose(1, 2);
  auto kh = k->forward(ctx).view({B, M, heads, dh}).transpose(1, 2);
  auto vh = v->forward(ctx).view({B, M, heads, dh}).transpose(1, 2);
  auto w = torch::softmax(torch::matmul(qh, kh.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh)), -1);
  return out->forward(torch::matmul(w, vh).transpose(1, 2).reshape({B, N, d}));
}

namespace {
nn::LayerNorm plain_norm(std::int64_t d) {
  return nn::LayerNorm(nn::LayerNormOptions({d}).elementwise_affine(false).eps(1e-6));
}
}  // namespace

DitBlockImpl::DitBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t mlp_ratio) {
  modulation = register_parameter("modulation", torch::randn({6, dim}) / std::sqrt(static_cast<double>(dim)));
  norm1 = register_module("norm1", plain_norm(dim));
  norm_cond = register_module("norm_cond", plain_norm(dim));
  norm_cross = register_module("norm_cross", plain_norm(dim));
  norm2 = register_module("norm2", plain_norm(dim));
  self_attn = register_module("self_attn", Attention(dim, heads));
  cross_attn = register_module("cross_attn", Attention(dim, heads));
  mlp = register_module("mlp", nn::Sequential(nn::Linear(dim, dim * mlp_ratio), nn::GELU(nn::GELUOptions().approximate("tanh")),
                                              nn::Linear(dim * mlp_ratio, dim)));
}

torch::Tensor DitBlockImpl::forward(const torch::Tensor& x, const ConditionBundle& cond, const torch::Tensor& global) {
  auto p = global + modulation.unsqueeze(0);  // B×6×d
  auto gamma1 = p.select(1, 0).unsqueeze(1), beta1 = p.select(1, 1).unsqueeze(1), alpha1 = p.select(1, 2).unsqueeze(1);
  auto gamma2 = p.select(1, 3).unsqueeze(1), beta2 = p.select(1, 4).unsqueeze(1), alpha2 = p.select(1, 5).unsqueeze(1);

  auto h = norm1->forward(x) * (1 + gamma1) + beta1;
  // Queries only at the latent positions: the image-token outputs would be
  // discarded anyway.
  auto ctx = torch::cat({norm_cond->forward(cond.patch), h}, 1);
  auto y = x + alpha1 * self_attn->forward(h, ctx);
  y = y + cross_attn->forward(norm_cross->forward(y), cond.semantic);
  auto m = norm2->forward(y) * (1 + gamma2) + beta2;
  return y + alpha2 * mlp->forward(m);
}

DitImpl::DitImpl(const ExperimentConfig& cfg) : layout(TokenLayout::from_config(cfg)) {
  const auto d = layout.token_dim;
  semantic_tokens = cfg.dit.semantic_tokens;
  patch_tokens = (cfg.dit.condition_resolution / 8) * (cfg.dit.condition_resolution / 8);
  embed = register_module("embed", nn::Linear(layout.patch_dim(), d));
  pos_embed = register_parameter("pos_embed", torch::randn({layout.tokens(), d}) * 0.02);
  time_mlp = register_module("time_mlp", nn::Sequential(nn::Linear(256, d), nn::SiLU(), nn::Linear(d, d)));
  time_to_global = register_module("time_to_global", nn::Sequential(nn::SiLU(), nn::Linear(d, 6 * d)));
  blocks = register_module("blocks", nn::ModuleList());
  for (int i = 0; i < cfg.dit.depth; ++i) blocks->push_back(DitBlock(d, cfg.dit.heads, cfg.dit.mlp_ratio));
  final_modulation = register_parameter("final_modulation", torch::randn({2, d}) / std::sqrt(static_cast<double>(d)));
  final_norm = register_module("final_norm", plain_norm(d));
  final_linear = register_module("final_linear", nn::Linear(d, layout.patch * layout.patch * 2 * layout.channels));
  {
    torch::NoGradGuard ng;
    final_linear->weight.zero_();
    final_linear->bias.zero_();
  }
  encoder = make_condition_encoder(cfg);
  register_module("encoder", encoder);
  null_semantic = register_parameter("null_semantic", torch::randn({semantic_tokens, d}) * 0.02);
  null_patch = register_parameter("null_patch", torch::randn({patch_tokens, d}) * 0.02);
}

ConditionBundle DitImpl::encode_condition(const torch::Tensor& images) { return encoder->encode(images); }

ConditionBundle DitImpl::null_condition(std::int64_t batch) {
  ConditionBundle b;
  b.semantic = null_semantic.unsqueeze(0).expand({batch, -1, -1});
  b.patch = null_patch.unsqueeze(0).expand({batch, -1, -1});
  b.null_mask = torch::ones({batch}, torch::kBool);
  return b;
}

ConditionBundle DitImpl::apply_drop(const ConditionBundle& cond, const torch::Tensor& drop) {
  const auto B = cond.semantic.size(0);
  auto null = null_condition(B);
  auto m = drop.view({B, 1, 1});
  return {torch::where(m, null.semantic.to(cond.semantic.dtype()), cond.semantic),
          torch::where(m, null.patch.to(cond.patch.dtype()), cond.patch), drop.logical_or(cond.null_mask)};
}

std::vector<torch::Tensor> DitImpl::shared_modulation_parameters() { return time_to_global->parameters(); }

ModelPrediction DitImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t, const ConditionBundle& cond) {
  const auto B = z_t.size(0), d = layout.token_dim;
  if (t.numel() != B) fail(ErrorKind::Shape, "dit: timestep count does not match the batch");
  if (cond.semantic.size(0) != B || cond.patch.size(0) != B) fail(ErrorKind::Shape, "dit: condition batch mismatch");
  auto x = embed->forward(patchify(z_t, layout)) + pos_embed.unsqueeze(0);
  auto temb = time_mlp->forward(timestep_embedding(t.reshape({B}).to(z_t.dtype()), 256));
  auto global = time_to_global->forward(temb).view({B, 6, d});
  for (const auto& blk : *blocks) x = blk->as<DitBlockImpl>()->forward(x, cond, global);
  auto fm = final_modulation.unsqueeze(0) + temb.unsqueeze(1);  // B×2×d
  x = final_norm->forward(x) * (1 + fm.select(1, 1).unsqueeze(1)) + fm.select(1, 0).unsqueeze(1);
  auto out = unpatchify(final_linear->forward(x), layout, 2 * layout.channels);
  return {out.slice(-1, 0, layout.channels), torch::sigmoid(out.slice(-1, layout.channels))};
}

}  // namespace avatar
