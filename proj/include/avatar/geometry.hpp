#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "avatar/common.hpp"

namespace avatar {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  bool operator==(const Vec3&) const = default;
};

inline std::ostream& operator<<(std::ostream& os, const Vec3& v) {
  return os << '(' << v.x << ", " << v.y << ", " << v.z << ')';
}

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) { return a * (1.0 / norm(a)); }

// World frame: +y up, the head faces +z. Angles in radians.
struct CameraPose {
  double pitch = 0, yaw = 0, roll = 0;
  double radius = 2.7;
  double fov = 0.6;
  Vec3 look_at{};

  Vec3 position() const;
  json to_json() const;
  static CameraPose from_json(const json& j);
  bool operator==(const CameraPose&) const = default;
};

struct PoseRanges {
  double pitch_min = -0.25, pitch_max = 0.65;
  double yaw_min = -0.78, yaw_max = 0.78;
  double roll_min = -0.25, roll_max = 0.25;
  double radius = 2.7;
  double fov = 0.6;
};

// Rejects ranges that are inverted or not finite.
CameraPose sample_camera_pose(Rng& rng, const PoseRanges& ranges = {});
bool pose_in_ranges(const CameraPose& pose, const PoseRanges& ranges);

struct Ray {
  Vec3 origin;
  Vec3 direction;
  double t_near = 0;
  double t_far = 1;
};

// Row-major, row 0 at the top of the image.
struct RayGrid {
  int resolution = 0;
  std::vector<Ray> rays;
  const Ray& at(int row, int col) const { return rays[static_cast<std::size_t>(row) * resolution + col]; }
};

// Rays are clipped to the cube [-bound, bound]^3; rays that miss it get the
// interval [radius - 2 bound, radius + 2 bound] so t_near < t_far always holds.
RayGrid generate_rays(const CameraPose& pose, int resolution, double bound = 1.1);

// ---------------------------------------------------------------------------
// Synthetic head proxy.

struct MeshConfig {
  int rings = 20;            // latitude rings including both poles
  int segments = 25;         // longitude segments; the seam column is duplicated
  int expression_dim = 8;
  double expression_amplitude = 0.2;  // normal displacement per unit parameter at a region centre
  double region_width = 0.45;         // angular σ of a region, radians
};

struct ExpressionRegion {
  std::string name;
  double polar;    // angle from +y
  double azimuth;  // 0 faces +z, positive toward +x
};

// Fixed surface regions driven by each expression component (cycled if E > 8).
const std::vector<ExpressionRegion>& expression_regions();

struct HeadMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<double, 2>> uv;
  std::vector<std::array<int, 3>> faces;
  std::vector<double> expression;
  std::uint64_t identity_seed = 0;

  bool operator==(const HeadMesh&) const = default;
};

HeadMesh mesh_from_params(std::uint64_t identity_seed, const std::vector<double>& expression,
                          const MeshConfig& cfg = {});
HeadMesh empty_mesh(int expression_dim = 8);
// Throws Validation when any face index or uv is out of range.
void validate_mesh(const HeadMesh& mesh);

// Plain-text form: "HEADMESH v1 <nverts> <nfaces> <E>", "v x y z u w", "f i j k", "e ...".
std::string mesh_to_text(const HeadMesh& mesh);
HeadMesh mesh_from_text(const std::string& text);

// ---------------------------------------------------------------------------
// Orthographic UV rasterization onto the canonical triplane axes.
//
// Plane XY sees the head from +z, XZ from +y, YZ from +x; the surface nearest
// the viewer wins. Pixel (row j, col i) has centre (a, b) with
// a = -1 + (i + 0.5) * 2 / R on the first plane axis and b likewise on the
// second, matching the triplane sampling grid. A pixel is covered iff its
// centre lies inside or on the boundary of a non-degenerate triangle.

enum class PlaneAxis { XY = 0, XZ = 1, YZ = 2 };
constexpr std::array<PlaneAxis, 3> kPlaneAxes{PlaneAxis::XY, PlaneAxis::XZ, PlaneAxis::YZ};

// (first, second, depth-key) components of a world point for a plane; the
// depth key is smaller for surfaces nearer the viewer.
std::array<double, 3> project_to_plane(const Vec3& p, PlaneAxis axis);

struct UvRaster {
  torch::Tensor uv;    // R×R×2 float, zero where uncovered
  torch::Tensor mask;  // R×R float in {0, 1}
  torch::Tensor face;  // R×R int64 winning face index, -1 where uncovered
};

UvRaster rasterize_uv(const HeadMesh& mesh, PlaneAxis axis, int resolution);

struct NeuralTexture {
  torch::Tensor texels;  // U×U×C float

  std::int64_t size() const { return texels.size(0); }
  std::int64_t channels() const { return texels.size(2); }
};

struct FeatureRaster {
  torch::Tensor features;  // R×R×C
  torch::Tensor mask;      // R×R
};

FeatureRaster rasterize_uv_texture(const HeadMesh& mesh, const NeuralTexture& texture, PlaneAxis axis,
                                   int resolution);

// Scalar bilinear lookup at continuous texel coordinates (x along width, y
// along height, texel centres at integers), border-clamped. Writes C floats.
void bilinear_texel(const float* data, std::int64_t h, std::int64_t w, std::int64_t c, double x, double y,
                    float* out);

}  // namespace avatar
