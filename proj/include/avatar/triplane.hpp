#pragma once

#include <array>
#include <string>
#include <vector>

#include "avatar/common.hpp"
#include "avatar/geometry.hpp"

namespace avatar {

struct TriplaneLayout {
  std::int64_t planes = 4;
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::int64_t channels = 16;

  bool operator==(const TriplaneLayout&) const = default;
};

// Plane groups 0-2 hold the static XY, XZ and YZ planes; group 3 holds the
// UV-space neural texture that rasterization splats onto them.
constexpr std::int64_t kTextureGroup = 3;

struct ParametricTriplane {
  torch::Tensor planes;  // P×H×W×C float32
  json meta = json::object();

  TriplaneLayout layout() const;
  torch::Tensor static_planes() const { return planes.slice(0, 0, 3); }
  NeuralTexture texture() const;
  std::string id() const;
};

ParametricTriplane make_triplane(torch::Tensor planes, json meta = json::object());
void validate_triplane(const ParametricTriplane& tri, const TriplaneLayout& layout);

struct RenderableTriplane {
  torch::Tensor planes;  // 3×H×W×C float32 (XY, XZ, YZ)
  std::string source_id;
  std::vector<double> expression;
};

// Output equals the rasterized texture feature where the mesh covers a plane
// pixel and the static plane elsewhere.
RenderableTriplane fuse(const ParametricTriplane& tri, const HeadMesh& mesh, const NeuralTexture& texture);
RenderableTriplane fuse(const ParametricTriplane& tri, const HeadMesh& mesh);

// Per-plane rasterization products in the layout grid_sample consumes. Only
// depends on geometry, so it can be cached and reused across gradient steps.
struct MeshRaster {
  torch::Tensor grid;  // 3×R×R×2, texture coordinates mapped to [-1, 1]
  torch::Tensor mask;  // 3×R×R
};

MeshRaster rasterize_mesh(const HeadMesh& mesh, int resolution);

// Differentiable fuse on tensors. `static_planes` is [B,]3×H×W×C, `texture`
// [B,]U×U×C, `raster` fields carry a matching optional batch axis.
torch::Tensor fuse_planes(const torch::Tensor& static_planes, const torch::Tensor& texture, const torch::Tensor& grid,
                          const torch::Tensor& mask);

// Scalar triplane lookup: clamp to [-1,1]^3, bilinear on each plane, mean of
// the three plane features.
std::vector<float> sample_features(const RenderableTriplane& tri, const Vec3& point);
// N×3 points → N×C features; bit-identical to looping sample_features.
torch::Tensor batch_sample(const RenderableTriplane& tri, const torch::Tensor& points);

// Differentiable lookup used by the renderer. planes: [B,]3×H×W×C,
// points: [B,]N×3 → [B,]N×C. Any floating dtype.
torch::Tensor sample_planes(const torch::Tensor& planes, const torch::Tensor& points);

// TRIP1 container: magic, u32 P,H,W,C, f32 payload, u32 length + JSON meta.
void save_triplane(const fs::path& path, const ParametricTriplane& tri);
ParametricTriplane load_triplane(const fs::path& path);
void save_planes(const fs::path& path, const torch::Tensor& planes, const json& meta);

}  // namespace avatar
