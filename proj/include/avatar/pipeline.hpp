#pragma once

#include <optional>

#include "avatar/common.hpp"
#include "avatar/config.hpp"
#include "avatar/metrics.hpp"
#include "avatar/training.hpp"

namespace avatar {

// <dir>/vae.ckpt, <dir>/dit.ckpt, <dir>/renderer.ckpt.
struct CheckpointSet {
  fs::path vae, dit, renderer;
  static CheckpointSet in(const fs::path& dir);
  // Io error for a missing file, Validation error for a config-hash mismatch
  // or a broken parent link. Reads headers only.
  void verify(const ExperimentConfig& cfg) const;
};

struct InferRequest {
  fs::path source_image;
  std::vector<std::vector<double>> expressions;  // one per frame
  std::vector<CameraPose> cameras;               // one per frame
  std::optional<std::uint64_t> identity_seed;    // mesh identity; resolved from the dataset when absent
  int steps = 19;
  double guidance = 4.5;
  std::string guidance_text = "4.5";  // the flag exactly as given
  fs::path out;
};

// Default track: palette expressions in order, yaw swept across the range.
void default_track(const ExperimentConfig& cfg, int frames, InferRequest& req);
// Expression track: JSON list of vectors. Camera track: JSON list of poses.
std::vector<std::vector<double>> load_expression_track(const fs::path& path);
std::vector<CameraPose> load_camera_track(const fs::path& path);

// Looks for a manifest.json above `image` listing it; returns the identity
// seed of that record.
std::optional<std::uint64_t> identity_seed_of_image(const fs::path& image);

// Condition → sampled latent → VAE decode → per frame fuse + motion
// renderer. Writes frame_NNNN.png and run.json into req.out and returns the
// run record.
json pipeline_infer(const ExperimentConfig& cfg, const CheckpointSet& ckpts, const InferRequest& req);

// Renderer evaluation on validation identities of the dynamic split: PSNR and
// SSIM of the full renderer and of the refined ≡ 0 ablation. The expression
// probe regresses expressions from frontal renders (rgb + depth) of plane
// stacks, fitted on the ground-truth fused planes of training identities and
// applied to the renderer's output planes. The pose probe regresses the
// camera from images at the requested pose.
json evaluate_renderer(const ExperimentConfig& cfg, const fs::path& data_root, const CheckpointSet& ckpts);

// VAE evaluation on the pairs training identities (honouring train_limit):
// renders of reconstructed vs original triplanes at the record poses.
json evaluate_vae(const ExperimentConfig& cfg, const fs::path& data_root, const fs::path& vae_ckpt);

// Provenance of a frame, checkpoint, dataset directory or run directory.
// "verified" is true when every hash and config link checks out.
json inspect_artifact(const fs::path& path);

}  // namespace avatar
