#include "avatar/geometry.hpp"

#include <algorithm>
#include <limits>
#include <numbers>
#include <sstream>

namespace avatar {

namespace {

constexpr double kPi = std::numbers::pi;

Vec3 rotate_about(const Vec3& v, const Vec3& axis, double angle) {
  // Rodrigues; axis is unit.
  const double c = std::cos(angle), s = std::sin(angle);
  return v * c + cross(axis, v) * s + axis * (dot(axis, v) * (1.0 - c));
}

}  // namespace

Vec3 CameraPose::position() const {
  const Vec3 offset{std::sin(yaw) * std::cos(pitch), std::sin(pitch), std::cos(yaw) * std::cos(pitch)};
  return look_at + offset * radius;
}

json CameraPose::to_json() const {
  return json{{"pitch", pitch}, {"yaw", yaw}, {"roll", roll}, {"radius", radius}, {"fov", fov},
              {"look_at", {look_at.x, look_at.y, look_at.z}}};
}

CameraPose CameraPose::from_json(const json& j) {
  CameraPose p;
  p.pitch = j.at("pitch").get<double>();
  p.yaw = j.at("yaw").get<double>();
  p.roll = j.value("roll", 0.0);
  p.radius = j.value("radius", p.radius);
  p.fov = j.value("fov", p.fov);
  if (j.contains("look_at")) {
    const auto& l = j.at("look_at");
    p.look_at = {l.at(0).get<double>(), l.at(1).get<double>(), l.at(2).get<double>()};
  }
  if (!(p.radius > 0) || !(p.fov > 0 && p.fov < kPi)) fail(ErrorKind::Validation, "camera pose: radius/fov out of range");
  return p;
}

CameraPose sample_camera_pose(Rng& rng, const PoseRanges& r) {
  auto check = [](double lo, double hi, const char* what) {
    if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi)
      fail(ErrorKind::Config, std::string("pose sampler: invalid ") + what + " range");
  };
  check(r.pitch_min, r.pitch_max, "pitch");
  check(r.yaw_min, r.yaw_max, "yaw");
  check(r.roll_min, r.roll_max, "roll");
  CameraPose p;
  p.pitch = rng.uniform(r.pitch_min, r.pitch_max);
  p.yaw = rng.uniform(r.yaw_min, r.yaw_max);
  p.roll = rng.uniform(r.roll_min, r.roll_max);
  p.radius = r.radius;
  p.fov = r.fov;
  return p;
}

bool pose_in_ranges(const CameraPose& p, const PoseRanges& r) {
  return p.pitch >= r.pitch_min && p.pitch <= r.pitch_max && p.yaw >= r.yaw_min && p.yaw <= r.yaw_max &&
         p.roll >= r.roll_min && p.roll <= r.roll_max;
}

RayGrid generate_rays(const CameraPose& pose, int resolution, double bound) {
  if (resolution < 2) fail(ErrorKind::Validation, "generate_rays: resolution must be >= 2");
  if (!(pose.radius > 0) || !(pose.fov > 0 && pose.fov < kPi)) fail(ErrorKind::Validation, "generate_rays: bad pose");

  const Vec3 origin = pose.position();
  const Vec3 forward = normalized(pose.look_at - origin);
  Vec3 right = cross(forward, Vec3{0, 1, 0});
  if (norm(right) < 1e-12) right = Vec3{1, 0, 0};
  right = normalized(right);
  Vec3 up = cross(right, forward);
  right = rotate_about(right, forward, pose.roll);
  up = rotate_about(up, forward, pose.roll);

  const double half = std::tan(0.5 * pose.fov);
  RayGrid grid;
  grid.resolution = resolution;
  grid.rays.reserve(static_cast<std::size_t>(resolution) * resolution);
  for (int j = 0; j < resolution; ++j) {
    const double sy = (1.0 - (j + 0.5) * 2.0 / resolution) * half;
    for (int i = 0; i < resolution; ++i) {
      const double sx = ((i + 0.5) * 2.0 / resolution - 1.0) * half;
      Ray ray;
      ray.origin = origin;
      ray.direction = normalized(forward + right * sx + up * sy);
      // Slab intersection with the padded cube.
      double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
      for (int a = 0; a < 3; ++a) {
        const double o = origin[a], d = ray.direction[a];
        if (std::abs(d) < 1e-15) {
          if (o < -bound || o > bound) t0 = 1, t1 = 0;
          continue;
        }
        double ta = (-bound - o) / d, tb = (bound - o) / d;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
      }
      t0 = std::max(t0, 0.0);
      if (!(t0 < t1)) {
        t0 = std::max(pose.radius - 2 * bound, 1e-3);
        t1 = pose.radius + 2 * bound;
      }
      ray.t_near = t0;
      ray.t_far = t1;
      grid.rays.push_back(ray);
    }
  }
  return grid;
}

const std::vector<ExpressionRegion>& expression_regions() {
  static const std::vector<ExpressionRegion> regions{
      {"mouth_open", 2.10, 0.0},    {"smile_left", 1.90, 0.60},  {"smile_right", 1.90, -0.60},
      {"brow_raise", 1.05, 0.0},    {"cheek_left", 1.60, 1.00},  {"cheek_right", 1.60, -1.00},
      {"jaw_drop", 2.50, 0.0},      {"nose_wrinkle", 1.50, 0.0},
  };
  return regions;
}

namespace {

Vec3 sphere_dir(double polar, double azimuth) {
  return {std::sin(polar) * std::sin(azimuth), std::cos(polar), std::sin(polar) * std::cos(azimuth)};
}

struct IdentityShape {
  std::array<double, 3> a{}, pa{}, b{}, pb{};
  double rx = 0.55, ry = 0.68, rz = 0.60;

  explicit IdentityShape(std::uint64_t seed) {
    Rng rng(stream_seed(seed, 0x5eed'5a9e));
    for (int n = 0; n < 3; ++n) {
      a[n] = rng.uniform(-1, 1);
      pa[n] = rng.uniform(0, 2 * kPi);
      b[n] = rng.uniform(-1, 1);
      pb[n] = rng.uniform(0, 2 * kPi);
    }
    rx *= 1.0 + 0.08 * rng.uniform(-1, 1);
    ry *= 1.0 + 0.08 * rng.uniform(-1, 1);
    rz *= 1.0 + 0.08 * rng.uniform(-1, 1);
  }

  // Smooth radial scale; the azimuthal terms vanish at the poles.
  double scale(double polar, double azimuth) const {
    double s = 1.0;
    for (int n = 0; n < 3; ++n) {
      s += 0.06 * (a[n] * std::cos((n + 1) * azimuth + pa[n]) * std::sin(polar) + b[n] * std::cos((n + 1) * polar + pb[n])) /
           (n + 1);
    }
    return s;
  }
};

}  // namespace

HeadMesh mesh_from_params(std::uint64_t identity_seed, const std::vector<double>& expression, const MeshConfig& cfg) {
  if (static_cast<int>(expression.size()) != cfg.expression_dim)
    fail(ErrorKind::Validation, "mesh_from_params: expression has " + std::to_string(expression.size()) +
                                    " components, config expects " + std::to_string(cfg.expression_dim));
  if (cfg.rings < 3 || cfg.segments < 3) fail(ErrorKind::Config, "mesh_from_params: tessellation too coarse");

  const IdentityShape shape(identity_seed);
  const auto& regions = expression_regions();
  std::vector<Vec3> centres;
  for (int k = 0; k < cfg.expression_dim; ++k) {
    const auto& r = regions[k % regions.size()];
    centres.push_back(sphere_dir(r.polar, r.azimuth));
  }

  HeadMesh mesh;
  mesh.identity_seed = identity_seed;
  mesh.expression = expression;
  const int cols = cfg.segments + 1;
  for (int k = 0; k < cfg.rings; ++k) {
    const double polar = kPi * k / (cfg.rings - 1);
    for (int j = 0; j < cols; ++j) {
      const double azimuth = -kPi + 2 * kPi * j / cfg.segments;
      const Vec3 d = sphere_dir(polar, azimuth);
      const double s = shape.scale(polar, azimuth);
      Vec3 p{shape.rx * d.x * s, shape.ry * d.y * s, shape.rz * d.z * s};
      double disp = 0;
      for (int e = 0; e < cfg.expression_dim; ++e) {
        if (expression[e] == 0.0) continue;
        const double ang = std::acos(std::clamp(dot(d, centres[e]), -1.0, 1.0));
        disp += expression[e] * cfg.expression_amplitude * std::exp(-ang * ang / (2 * cfg.region_width * cfg.region_width));
      }
      mesh.vertices.push_back(p + d * disp);
      mesh.uv.push_back({static_cast<double>(j) / cfg.segments, static_cast<double>(k) / (cfg.rings - 1)});
    }
  }
  auto vid = [cols](int k, int j) { return k * cols + j; };
  for (int k = 0; k + 1 < cfg.rings; ++k) {
    for (int j = 0; j < cfg.segments; ++j) {
      const int a = vid(k, j), b = vid(k, j + 1), c = vid(k + 1, j), d = vid(k + 1, j + 1);
      if (k > 0) mesh.faces.push_back({a, c, b});
      if (k + 2 < cfg.rings) mesh.faces.push_back({b, c, d});
    }
  }
  return mesh;
}

HeadMesh empty_mesh(int expression_dim) {
  HeadMesh m;
  m.expression.assign(static_cast<std::size_t>(expression_dim), 0.0);
  return m;
}

void validate_mesh(const HeadMesh& mesh) {
  if (mesh.uv.size() != mesh.vertices.size()) fail(ErrorKind::Validation, "mesh: uv count differs from vertex count");
  const int n = static_cast<int>(mesh.vertices.size());
  for (const auto& f : mesh.faces)
    for (int i : f)
      if (i < 0 || i >= n) fail(ErrorKind::Validation, "mesh: face index out of range");
  for (const auto& t : mesh.uv)
    for (double c : t)
      if (!(c >= 0.0 && c <= 1.0)) fail(ErrorKind::Validation, "mesh: uv outside [0,1]");
}

std::string mesh_to_text(const HeadMesh& mesh) {
  std::ostringstream ss;
  ss.precision(17);
  ss << "HEADMESH v1 " << mesh.vertices.size() << ' ' << mesh.faces.size() << ' ' << mesh.expression.size() << '\n';
  ss << "# identity_seed " << mesh.identity_seed << '\n';
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const auto& v = mesh.vertices[i];
    ss << "v " << v.x << ' ' << v.y << ' ' << v.z << ' ' << mesh.uv[i][0] << ' ' << mesh.uv[i][1] << '\n';
  }
  for (const auto& f : mesh.faces) ss << "f " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
  ss << 'e';
  for (double e : mesh.expression) ss << ' ' << e;
  ss << '\n';
  return ss.str();
}

HeadMesh mesh_from_text(const std::string& text) {
  std::istringstream in(text);
  std::string magic, version;
  std::size_t nv = 0, nf = 0, ne = 0;
  in >> magic >> version >> nv >> nf >> ne;
  if (!in || magic != "HEADMESH" || version != "v1") fail(ErrorKind::Io, "mesh file: bad header");
  HeadMesh mesh;
  std::string tag;
  bool have_expr = false;
  while (in >> tag) {
    if (tag == "#") {
      std::string key;
      in >> key;
      if (key == "identity_seed") in >> mesh.identity_seed;
      std::getline(in, key);
    } else if (tag == "v") {
      Vec3 p;
      std::array<double, 2> t{};
      in >> p.x >> p.y >> p.z >> t[0] >> t[1];
      mesh.vertices.push_back(p);
      mesh.uv.push_back(t);
    } else if (tag == "f") {
      std::array<int, 3> f{};
      in >> f[0] >> f[1] >> f[2];
      mesh.faces.push_back(f);
    } else if (tag == "e") {
      mesh.expression.resize(ne);
      for (auto& e : mesh.expression) in >> e;
      have_expr = true;
    } else {
      fail(ErrorKind::Io, "mesh file: unknown record '" + tag + "'");
    }
    if (!in) fail(ErrorKind::Io, "mesh file: malformed '" + tag + "' record");
  }
  if (mesh.vertices.size() != nv || mesh.faces.size() != nf || (!have_expr && ne > 0))
    fail(ErrorKind::Io, "mesh file: record counts disagree with header");
  validate_mesh(mesh);
  return mesh;
}

std::array<double, 3> project_to_plane(const Vec3& p, PlaneAxis axis) {
  switch (axis) {
    case PlaneAxis::XY: return {p.x, p.y, -p.z};
    case PlaneAxis::XZ: return {p.x, p.z, -p.y};
    case PlaneAxis::YZ: return {p.y, p.z, -p.x};
  }
  return {};
}

UvRaster rasterize_uv(const HeadMesh& mesh, PlaneAxis axis, int resolution) {
  if (resolution < 1) fail(ErrorKind::Validation, "rasterize: resolution must be positive");
  validate_mesh(mesh);
  const int R = resolution;
  UvRaster out;
  out.uv = torch::zeros({R, R, 2}, torch::kFloat32);
  out.mask = torch::zeros({R, R}, torch::kFloat32);
  out.face = torch::full({R, R}, -1, torch::kInt64);
  std::vector<double> zbuf(static_cast<std::size_t>(R) * R, std::numeric_limits<double>::infinity());
  auto* uvp = out.uv.data_ptr<float>();
  auto* mp = out.mask.data_ptr<float>();
  auto* fp = out.face.data_ptr<std::int64_t>();

  const double pix = 2.0 / R;
  for (std::size_t fi = 0; fi < mesh.faces.size(); ++fi) {
    const auto& f = mesh.faces[fi];
    std::array<std::array<double, 3>, 3> q;
    for (int k = 0; k < 3; ++k) q[k] = project_to_plane(mesh.vertices[f[k]], axis);
    const double area = (q[1][0] - q[0][0]) * (q[2][1] - q[0][1]) - (q[2][0] - q[0][0]) * (q[1][1] - q[0][1]);
    if (area == 0.0) continue;
    // Double-sided: orient edge functions by the sign of the area.
    const double sgn = area > 0 ? 1.0 : -1.0;
    const double amin = std::min({q[0][0], q[1][0], q[2][0]}), amax = std::max({q[0][0], q[1][0], q[2][0]});
    const double bmin = std::min({q[0][1], q[1][1], q[2][1]}), bmax = std::max({q[0][1], q[1][1], q[2][1]});
    const int i0 = std::max(0, static_cast<int>(std::floor((amin + 1.0) / pix - 0.5)));
    const int i1 = std::min(R - 1, static_cast<int>(std::ceil((amax + 1.0) / pix - 0.5)));
    const int j0 = std::max(0, static_cast<int>(std::floor((bmin + 1.0) / pix - 0.5)));
    const int j1 = std::min(R - 1, static_cast<int>(std::ceil((bmax + 1.0) / pix - 0.5)));
    for (int j = j0; j <= j1; ++j) {
      const double b = -1.0 + (j + 0.5) * pix;
      for (int i = i0; i <= i1; ++i) {
        const double a = -1.0 + (i + 0.5) * pix;
        // w_k is the edge function opposite vertex k.
        const double w0 = sgn * ((q[2][0] - q[1][0]) * (b - q[1][1]) - (q[2][1] - q[1][1]) * (a - q[1][0]));
        const double w1 = sgn * ((q[0][0] - q[2][0]) * (b - q[2][1]) - (q[0][1] - q[2][1]) * (a - q[2][0]));
        const double w2 = sgn * ((q[1][0] - q[0][0]) * (b - q[0][1]) - (q[1][1] - q[0][1]) * (a - q[0][0]));
        if (w0 < 0 || w1 < 0 || w2 < 0) continue;
        const double s = w0 + w1 + w2;
        const double l0 = w0 / s, l1 = w1 / s, l2 = w2 / s;
        const double depth = l0 * q[0][2] + l1 * q[1][2] + l2 * q[2][2];
        const std::size_t px = static_cast<std::size_t>(j) * R + i;
        if (!(depth < zbuf[px])) continue;
        zbuf[px] = depth;
        const auto& t0 = mesh.uv[f[0]];
        const auto& t1 = mesh.uv[f[1]];
        const auto& t2 = mesh.uv[f[2]];
        uvp[2 * px] = static_cast<float>(l0 * t0[0] + l1 * t1[0] + l2 * t2[0]);
        uvp[2 * px + 1] = static_cast<float>(l0 * t0[1] + l1 * t1[1] + l2 * t2[1]);
        mp[px] = 1.0f;
        fp[px] = static_cast<std::int64_t>(fi);
      }
    }
  }
  return out;
}

void bilinear_texel(const float* data, std::int64_t h, std::int64_t w, std::int64_t c, double x, double y, float* out) {
  const double xf = std::floor(x), yf = std::floor(y);
  const double fx = x - xf, fy = y - yf;
  auto clampi = [](std::int64_t v, std::int64_t n) { return std::clamp<std::int64_t>(v, 0, n - 1); };
  const std::int64_t x0 = clampi(static_cast<std::int64_t>(xf), w), x1 = clampi(static_cast<std::int64_t>(xf) + 1, w);
  const std::int64_t y0 = clampi(static_cast<std::int64_t>(yf), h), y1 = clampi(static_cast<std::int64_t>(yf) + 1, h);
  const float* p00 = data + (y0 * w + x0) * c;
  const float* p01 = data + (y0 * w + x1) * c;
  const float* p10 = data + (y1 * w + x0) * c;
  const float* p11 = data + (y1 * w + x1) * c;
  const double w00 = (1 - fx) * (1 - fy), w01 = fx * (1 - fy), w10 = (1 - fx) * fy, w11 = fx * fy;
  for (std::int64_t k = 0; k < c; ++k)
    out[k] = static_cast<float>(w00 * p00[k] + w01 * p01[k] + w10 * p10[k] + w11 * p11[k]);
}

FeatureRaster rasterize_uv_texture(const HeadMesh& mesh, const NeuralTexture& texture, PlaneAxis axis, int resolution) {
  if (!texture.texels.defined() || texture.texels.dim() != 3 || texture.texels.size(0) != texture.texels.size(1))
    fail(ErrorKind::Shape, "rasterize: texture must be U×U×C, got " + shape_string(texture.texels));
  const auto raster = rasterize_uv(mesh, axis, resolution);
  const auto tex = texture.texels.to(torch::kFloat32).contiguous();
  const std::int64_t U = tex.size(0), C = tex.size(2);
  FeatureRaster out;
  out.mask = raster.mask;
  out.features = torch::zeros({resolution, resolution, C}, torch::kFloat32);
  const auto* uv = raster.uv.data_ptr<float>();
  const auto* m = raster.mask.data_ptr<float>();
  auto* dst = out.features.data_ptr<float>();
  for (std::int64_t px = 0; px < static_cast<std::int64_t>(resolution) * resolution; ++px) {
    if (m[px] == 0.0f) continue;
    bilinear_texel(tex.data_ptr<float>(), U, U, C, uv[2 * px] * static_cast<double>(U) - 0.5,
                   uv[2 * px + 1] * static_cast<double>(U) - 0.5, dst + px * C);
  }
  return out;
}

}  // namespace avatar
