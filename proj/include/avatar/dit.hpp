#pragma once

#include "avatar/common.hpp"
#include "avatar/config.hpp"
#include "avatar/diffusion.hpp"

namespace avatar {

// Latent p×h×w×c is viewed as (p·h)×w×c (plane index fused into rows) and cut
// into patch×patch tiles in row-major order.
struct TokenLayout {
  std::int64_t planes = 4, height = 16, width = 16, channels = 4, patch = 2, token_dim = 128;

  std::int64_t rows() const { return planes * height / patch; }
  std::int64_t cols() const { return width / patch; }
  std::int64_t tokens() const { return rows() * cols(); }
  std::int64_t patch_dim() const { return patch * patch * channels; }
  void validate() const;
  static TokenLayout from_config(const ExperimentConfig& cfg);
};

// B×P×h×w×c ↔ B×N×(patch²·c).
torch::Tensor patchify(const torch::Tensor& latent, const TokenLayout& layout);
torch::Tensor unpatchify(const torch::Tensor& tokens, const TokenLayout& layout, std::int64_t channels);

struct ConditionBundle {
  torch::Tensor semantic;  // B×S×d
  torch::Tensor patch;     // B×M×d
  torch::Tensor null_mask; // B bool, true where the null bundle was substituted
};

// Condition encoder interface: B×H×W×3 images in [0,1] → bundle.
struct ConditionEncoderImpl : torch::nn::Module {
  virtual ~ConditionEncoderImpl() = default;
  virtual ConditionBundle encode(const torch::Tensor& images) = 0;
  virtual std::int64_t resolution() const = 0;
};

// Trainable convolutional encoder: three stride-2 convolutions give an
// (res/8)² grid of patch tokens; the pooled grid is projected to S semantic
// tokens.
struct ToyConditionEncoderImpl : ConditionEncoderImpl {
  ToyConditionEncoderImpl(std::int64_t resolution, std::int64_t width, std::int64_t semantic_tokens);
  ConditionBundle encode(const torch::Tensor& images) override;
  std::int64_t resolution() const override { return res; }

  std::int64_t res, width, semantic_tokens;
  torch::nn::Sequential convs{nullptr};
  torch::nn::Linear to_semantic{nullptr};
};
TORCH_MODULE(ToyConditionEncoder);

std::shared_ptr<ConditionEncoderImpl> make_condition_encoder(const ExperimentConfig& cfg);

// Attention with queries from `x` and keys/values from `context`.
struct AttentionImpl : torch::nn::Module {
  AttentionImpl(std::int64_t dim, std::int64_t heads);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);
  std::int64_t heads;
  torch::nn::Linear q{nullptr}, k{nullptr}, v{nullptr}, out{nullptr};
};
TORCH_MODULE(Attention);

struct DitBlockImpl : torch::nn::Module {
  DitBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t mlp_ratio);
  // x: B×N×d, global: B×6×d from the shared time projection.
  torch::Tensor forward(const torch::Tensor& x, const ConditionBundle& cond, const torch::Tensor& global);

  torch::Tensor modulation;  // 6×d per-block additive table
  torch::nn::LayerNorm norm1{nullptr}, norm_cond{nullptr}, norm_cross{nullptr}, norm2{nullptr};
  Attention self_attn{nullptr}, cross_attn{nullptr};
  torch::nn::Sequential mlp{nullptr};
};
TORCH_MODULE(DitBlock);

struct DitImpl : torch::nn::Module {
  explicit DitImpl(const ExperimentConfig& cfg);

  ModelPrediction forward(const torch::Tensor& z_t, const torch::Tensor& t, const ConditionBundle& cond);
  ConditionBundle encode_condition(const torch::Tensor& images);
  // Learned null bundle broadcast to batch B.
  ConditionBundle null_condition(std::int64_t batch);
  // Replaces rows of `cond` where `drop` is true by the null bundle.
  ConditionBundle apply_drop(const ConditionBundle& cond, const torch::Tensor& drop);

  // Parameters of the shared time-to-modulation projection only.
  std::vector<torch::Tensor> shared_modulation_parameters();

  TokenLayout layout;
  std::int64_t semantic_tokens, patch_tokens;
  torch::nn::Linear embed{nullptr};
  torch::Tensor pos_embed;
  torch::nn::Sequential time_mlp{nullptr}, time_to_global{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  torch::Tensor final_modulation;  // 2×d
  torch::nn::LayerNorm final_norm{nullptr};
  torch::nn::Linear final_linear{nullptr};
  std::shared_ptr<ConditionEncoderImpl> encoder;
  torch::Tensor null_semantic, null_patch;
};
TORCH_MODULE(Dit);

// Sinusoidal embedding of (possibly fractional) timesteps: B → B×dim.
torch::Tensor timestep_embedding(const torch::Tensor& t, std::int64_t dim);

// Per-sample Bernoulli(p) drop decisions from a deterministic stream.
torch::Tensor sample_drop_mask(Rng& rng, std::int64_t batch, double p);

}  // namespace avatar
