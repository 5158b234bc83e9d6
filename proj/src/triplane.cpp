#include "avatar/triplane.hpp"

#include <algorithm>

namespace avatar {

namespace F = torch::nn::functional;

TriplaneLayout ParametricTriplane::layout() const {
  return {planes.size(0), planes.size(1), planes.size(2), planes.size(3)};
}

NeuralTexture ParametricTriplane::texture() const {
  if (planes.size(0) <= kTextureGroup) fail(ErrorKind::Shape, "triplane has no texture group");
  return NeuralTexture{planes[kTextureGroup]};
}

std::string ParametricTriplane::id() const {
  if (meta.contains("id")) return meta["id"].get<std::string>();
  if (meta.contains("identity_seed")) return "identity-" + std::to_string(meta["identity_seed"].get<std::uint64_t>());
  return "anonymous";
}

ParametricTriplane make_triplane(torch::Tensor planes, json meta) {
  if (planes.dim() != 4 || planes.size(0) != 4 || planes.size(1) != planes.size(2))
    fail(ErrorKind::Shape, "parametric triplane must be 4×H×H×C, got " + shape_string(planes));
  planes = planes.to(torch::kFloat32).contiguous();
  if (!torch::isfinite(planes).all().item<bool>()) fail(ErrorKind::Numeric, "parametric triplane has non-finite values");
  return ParametricTriplane{std::move(planes), std::move(meta)};
}

void validate_triplane(const ParametricTriplane& tri, const TriplaneLayout& layout) {
  if (!tri.planes.defined() || tri.layout() != layout) {
    fail(ErrorKind::Shape, "triplane shape " + shape_string(tri.planes) + " does not match configured [" +
                               std::to_string(layout.planes) + ", " + std::to_string(layout.height) + ", " +
                               std::to_string(layout.width) + ", " + std::to_string(layout.channels) + "]");
  }
}

RenderableTriplane fuse(const ParametricTriplane& tri, const HeadMesh& mesh, const NeuralTexture& texture) {
  const auto L = tri.layout();
  if (L.planes != 4 || L.height != L.width) fail(ErrorKind::Shape, "fuse: triplane must be 4×H×H×C");
  if (texture.channels() != L.channels)
    fail(ErrorKind::Shape, "fuse: texture has " + std::to_string(texture.channels()) + " channels, triplane " +
                               std::to_string(L.channels));
  RenderableTriplane out;
  out.planes = tri.static_planes().clone().contiguous();
  for (int a = 0; a < 3; ++a) {
    const auto r = rasterize_uv_texture(mesh, texture, kPlaneAxes[a], static_cast<int>(L.height));
    auto covered = r.mask.unsqueeze(-1) > 0.5f;
    out.planes[a] = torch::where(covered, r.features, out.planes[a]);
  }
  out.source_id = tri.id();
  out.expression = mesh.expression;
  return out;
}

RenderableTriplane fuse(const ParametricTriplane& tri, const HeadMesh& mesh) { return fuse(tri, mesh, tri.texture()); }

MeshRaster rasterize_mesh(const HeadMesh& mesh, int resolution) {
  MeshRaster out;
  std::vector<torch::Tensor> grids, masks;
  for (auto axis : kPlaneAxes) {
    auto r = rasterize_uv(mesh, axis, resolution);
    grids.push_back(r.uv * 2.0 - 1.0);
    masks.push_back(r.mask);
  }
  out.grid = torch::stack(grids);
  out.mask = torch::stack(masks);
  return out;
}

torch::Tensor fuse_planes(const torch::Tensor& static_planes, const torch::Tensor& texture, const torch::Tensor& grid,
                          const torch::Tensor& mask) {
  const bool batched = static_planes.dim() == 5;
  auto sp = batched ? static_planes : static_planes.unsqueeze(0);
  auto tex = batched ? texture : texture.unsqueeze(0);
  auto g = batched ? grid : grid.unsqueeze(0);
  auto m = batched ? mask : mask.unsqueeze(0);
  const auto B = sp.size(0), R = sp.size(2), C = sp.size(4), U = tex.size(1);
  if (sp.size(1) != 3 || sp.size(3) != R || tex.size(2) != U || tex.size(3) != C || g.size(2) != R)
    fail(ErrorKind::Shape, "fuse_planes: inconsistent shapes " + shape_string(sp) + " / " + shape_string(tex) + " / " +
                               shape_string(g));
  auto tex_chw = tex.permute({0, 3, 1, 2}).unsqueeze(1).expand({B, 3, C, U, U}).reshape({B * 3, C, U, U});
  auto sampled = F::grid_sample(tex_chw, g.reshape({B * 3, R, R, 2}).to(tex.dtype()),
                                F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kBorder).align_corners(false));
  sampled = sampled.reshape({B, 3, C, R, R}).permute({0, 1, 3, 4, 2});
  auto mm = m.to(sp.dtype()).unsqueeze(-1);
  auto out = mm * sampled + (1 - mm) * sp;
  return batched ? out : out.squeeze(0);
}

namespace {

inline void sample_point(const float* planes, std::int64_t H, std::int64_t W, std::int64_t C, const Vec3& p, float* out,
                         float* scratch) {
  const double x = std::clamp(p.x, -1.0, 1.0), y = std::clamp(p.y, -1.0, 1.0), z = std::clamp(p.z, -1.0, 1.0);
  const std::array<std::array<double, 2>, 3> coords{{{x, y}, {x, z}, {y, z}}};
  const std::int64_t plane_stride = H * W * C;
  for (int k = 0; k < C; ++k) out[k] = 0.0f;
  std::vector<double> acc(static_cast<std::size_t>(C), 0.0);
  for (int a = 0; a < 3; ++a) {
    const double tx = (coords[a][0] + 1.0) * 0.5 * W - 0.5;
    const double ty = (coords[a][1] + 1.0) * 0.5 * H - 0.5;
    bilinear_texel(planes + a * plane_stride, H, W, C, tx, ty, scratch);
    for (std::int64_t k = 0; k < C; ++k) acc[k] += scratch[k];
  }
  for (std::int64_t k = 0; k < C; ++k) out[k] = static_cast<float>(acc[k] / 3.0);
}

torch::Tensor contiguous_planes(const RenderableTriplane& tri) {
  if (!tri.planes.defined() || tri.planes.dim() != 4 || tri.planes.size(0) != 3)
    fail(ErrorKind::Shape, "renderable triplane must be 3×H×W×C, got " + shape_string(tri.planes));
  return tri.planes.to(torch::kFloat32).contiguous();
}

}  // namespace

std::vector<float> sample_features(const RenderableTriplane& tri, const Vec3& point) {
  auto planes = contiguous_planes(tri);
  const auto H = planes.size(1), W = planes.size(2), C = planes.size(3);
  std::vector<float> out(static_cast<std::size_t>(C)), scratch(static_cast<std::size_t>(C));
  sample_point(planes.data_ptr<float>(), H, W, C, point, out.data(), scratch.data());
  return out;
}

torch::Tensor batch_sample(const RenderableTriplane& tri, const torch::Tensor& points) {
  auto planes = contiguous_planes(tri);
  if (points.dim() != 2 || points.size(1) != 3) fail(ErrorKind::Shape, "batch_sample: points must be N×3");
  const auto H = planes.size(1), W = planes.size(2), C = planes.size(3), N = points.size(0);
  auto pts = points.to(torch::kFloat64).contiguous();
  auto out = torch::empty({N, C}, torch::kFloat32);
  std::vector<float> scratch(static_cast<std::size_t>(C));
  const double* pp = pts.data_ptr<double>();
  float* dst = out.data_ptr<float>();
  for (std::int64_t n = 0; n < N; ++n)
    sample_point(planes.data_ptr<float>(), H, W, C, Vec3{pp[3 * n], pp[3 * n + 1], pp[3 * n + 2]}, dst + n * C,
                 scratch.data());
  return out;
}

torch::Tensor sample_planes(const torch::Tensor& planes, const torch::Tensor& points) {
  const bool batched = planes.dim() == 5;
  auto pl = batched ? planes : planes.unsqueeze(0);
  auto pts = batched ? points : points.unsqueeze(0);
  const auto B = pl.size(0), H = pl.size(2), W = pl.size(3), C = pl.size(4), N = pts.size(1);
  if (pl.size(1) != 3 || pts.size(0) != B || pts.size(2) != 3)
    fail(ErrorKind::Shape, "sample_planes: planes " + shape_string(pl) + " vs points " + shape_string(pts));
  auto p = pts.clamp(-1.0, 1.0);
  auto x = p.select(2, 0), y = p.select(2, 1), z = p.select(2, 2);
  auto grid = torch::stack({torch::stack({x, y}, -1), torch::stack({x, z}, -1), torch::stack({y, z}, -1)}, 1);
  auto chw = pl.permute({0, 1, 4, 2, 3}).reshape({B * 3, C, H, W});
  auto feats = F::grid_sample(chw, grid.reshape({B * 3, 1, N, 2}).to(chw.dtype()),
                              F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kBorder).align_corners(false));
  auto out = feats.reshape({B, 3, C, N}).sum(1).transpose(1, 2) / 3.0;
  return batched ? out : out.squeeze(0);
}

void save_planes(const fs::path& path, const torch::Tensor& planes, const json& meta) {
  if (planes.dim() != 4) fail(ErrorKind::Shape, "TRIP1 expects P×H×W×C, got " + shape_string(planes));
  auto t = planes.detach().to(torch::kFloat32).contiguous();
  ByteWriter w;
  w.raw("TRIP1");
  for (int d = 0; d < 4; ++d) w.u32(static_cast<std::uint32_t>(t.size(d)));
  w.f32s({t.data_ptr<float>(), static_cast<std::size_t>(t.numel())});
  const std::string m = meta.dump();
  w.u32(static_cast<std::uint32_t>(m.size()));
  w.raw(m);
  write_atomic(path, w.bytes());
}

void save_triplane(const fs::path& path, const ParametricTriplane& tri) { save_planes(path, tri.planes, tri.meta); }

ParametricTriplane load_triplane(const fs::path& path) {
  const std::string bytes = read_file(path);
  ByteReader r(bytes, path.string());
  if (r.raw(5) != "TRIP1") fail(ErrorKind::Io, path.string() + ": bad TRIP1 magic");
  std::array<std::int64_t, 4> dims{};
  for (auto& d : dims) d = r.u32();
  auto planes = torch::empty({dims[0], dims[1], dims[2], dims[3]}, torch::kFloat32);
  r.f32s({planes.data_ptr<float>(), static_cast<std::size_t>(planes.numel())});
  const auto m = r.raw(r.u32());
  if (!r.done()) fail(ErrorKind::Io, path.string() + ": trailing bytes after TRIP1 meta");
  return ParametricTriplane{planes, json::parse(m)};
}

}  // namespace avatar
