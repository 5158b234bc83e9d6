#include <doctest.h>

#include <algorithm>
#include <random>

#include "avatar/geometry.hpp"

using namespace avatar;

namespace {

// Independent coverage oracle: the pixel centre is inside (or on) the triangle
// iff the three cross products p-v_k × v_{k+1}-v_k share a sign.
bool centre_in_triangle(double px, double py, const std::array<std::array<double, 2>, 3>& t) {
  double s[3];
  for (int k = 0; k < 3; ++k) {
    const auto& a = t[k];
    const auto& b = t[(k + 1) % 3];
    s[k] = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]);
  }
  const bool nonneg = s[0] >= 0 && s[1] >= 0 && s[2] >= 0;
  const bool nonpos = s[0] <= 0 && s[1] <= 0 && s[2] <= 0;
  return nonneg || nonpos;
}

HeadMesh single_triangle(const std::array<Vec3, 3>& v, const std::array<std::array<double, 2>, 3>& uv) {
  HeadMesh m = empty_mesh(8);
  for (int k = 0; k < 3; ++k) {
    m.vertices.push_back(v[k]);
    m.uv.push_back(uv[k]);
  }
  m.faces.push_back({0, 1, 2});
  return m;
}

}  // namespace

TEST_SUITE("geometry") {
  TEST_CASE("pose sampler stays inside the VAE pose ranges") {
    Rng rng(0);
    PoseRanges ranges;
    double lo = 1e9, hi = -1e9;
    for (int i = 0; i < 10000; ++i) {
      auto p = sample_camera_pose(rng, ranges);
      CHECK(pose_in_ranges(p, ranges));
      lo = std::min(lo, p.pitch);
      hi = std::max(hi, p.pitch);
    }
    CHECK(lo >= -0.25);
    CHECK(hi <= 0.65);
    // The draws actually span the range.
    CHECK(lo < -0.2);
    CHECK(hi > 0.6);
  }

  TEST_CASE("collapsed ranges give the frontal pose and samplers are deterministic") {
    PoseRanges r;
    r.pitch_min = r.pitch_max = r.yaw_min = r.yaw_max = r.roll_min = r.roll_max = 0.0;
    Rng rng(3);
    auto p = sample_camera_pose(rng, r);
    CHECK(p.pitch == 0.0);
    CHECK(p.yaw == 0.0);
    CHECK(p.roll == 0.0);

    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(sample_camera_pose(a) == sample_camera_pose(b));

    PoseRanges bad;
    bad.yaw_min = 1.0;
    bad.yaw_max = -1.0;
    CHECK_THROWS_AS(sample_camera_pose(rng, bad), Error);
  }

  TEST_CASE("frontal centre ray points back at the look-at target") {
    CameraPose pose;
    auto grid = generate_rays(pose, 65);
    const auto& c = grid.at(32, 32);
    const Vec3 expect = normalized(-c.origin);
    CHECK(std::abs(c.direction.x - expect.x) < 1e-12);
    CHECK(std::abs(c.direction.y - expect.y) < 1e-12);
    CHECK(std::abs(c.direction.z - expect.z) < 1e-12);

    // With a look-at offset and nonzero pitch/yaw the centre ray still hits it.
    pose.look_at = {0.1, -0.05, 0.2};
    pose.pitch = 0.3;
    pose.yaw = -0.5;
    grid = generate_rays(pose, 33);
    const auto& r = grid.at(16, 16);
    const Vec3 to = pose.look_at - r.origin;
    const double t = dot(to, r.direction);
    CHECK(norm(r.origin + r.direction * t - pose.look_at) < 1e-5);
  }

  TEST_CASE("ray grids mirror under yaw sign flip and are unit length") {
    CameraPose a, b;
    a.yaw = 0.4;
    b.yaw = -0.4;
    a.pitch = b.pitch = 0.2;
    const int R = 64;
    auto ga = generate_rays(a, R), gb = generate_rays(b, R);
    REQUIRE(ga.rays.size() == 4096);
    for (int j = 0; j < R; ++j)
      for (int i = 0; i < R; ++i) {
        const auto& ra = ga.at(j, i);
        const auto& rb = gb.at(j, R - 1 - i);
        CHECK(std::abs(ra.origin.x + rb.origin.x) < 1e-6);
        CHECK(std::abs(ra.direction.x + rb.direction.x) < 1e-6);
        CHECK(std::abs(ra.direction.y - rb.direction.y) < 1e-6);
        CHECK(std::abs(ra.direction.z - rb.direction.z) < 1e-6);
      }
    for (const auto& r : ga.rays) {
      CHECK(std::abs(norm(r.direction) - 1.0) < 1e-6);
      CHECK(r.t_near < r.t_far);
    }
    CHECK_THROWS_AS(generate_rays(a, 0), Error);
    CHECK_THROWS_AS(generate_rays(a, -4), Error);
  }

  TEST_CASE("mesh proxy: zero expression, determinism, monotone regions") {
    const std::vector<double> zero(8, 0.0);
    auto canon = mesh_from_params(7, zero);
    validate_mesh(canon);
    CHECK(canon.vertices.size() >= 400);
    CHECK(canon.vertices.size() <= 600);
    CHECK(mesh_from_params(7, zero) == canon);
    CHECK_FALSE(mesh_from_params(8, zero).vertices == canon.vertices);

    // Probe: the vertex nearest the mouth_open centre.
    const auto& reg = expression_regions()[0];
    const Vec3 dir{std::sin(reg.polar) * std::sin(reg.azimuth), std::cos(reg.polar),
                   std::sin(reg.polar) * std::cos(reg.azimuth)};
    std::size_t probe = 0;
    double best = -2;
    for (std::size_t i = 0; i < canon.vertices.size(); ++i) {
      const double c = dot(normalized(canon.vertices[i]), dir);
      if (c > best) best = c, probe = i;
    }
    auto disp = [&](double a) {
      std::vector<double> e = zero;
      e[0] = a;
      auto m = mesh_from_params(7, e);
      return norm(m.vertices[probe] - canon.vertices[probe]);
    };
    const double d1 = disp(0.5), d2 = disp(1.0), d4 = disp(2.0);
    CHECK(d1 > 0);
    CHECK(d2 > d1);
    CHECK(d4 > d2);
    CHECK(d2 == doctest::Approx(2 * d1).epsilon(1e-9));

    // A far-away vertex (back of the head) barely moves.
    std::vector<double> e = zero;
    e[0] = 1.0;
    auto m = mesh_from_params(7, e);
    std::size_t back = 0;
    best = 2;
    for (std::size_t i = 0; i < canon.vertices.size(); ++i) {
      const double c = dot(normalized(canon.vertices[i]), dir);
      if (c < best) best = c, back = i;
    }
    CHECK(norm(m.vertices[back] - canon.vertices[back]) < 1e-6);

    CHECK_THROWS_AS(mesh_from_params(7, std::vector<double>(5, 0.0)), Error);
  }

  TEST_CASE("mesh text format round-trips") {
    std::vector<double> e(8, 0.0);
    e[2] = 0.75;
    auto m = mesh_from_params(11, e);
    auto back = mesh_from_text(mesh_to_text(m));
    CHECK(back == m);
    CHECK(mesh_to_text(m).rfind("HEADMESH v1 ", 0) == 0);
    CHECK_THROWS_AS(mesh_from_text("HEADMESH v2 0 0 0\n"), Error);
    CHECK_THROWS_AS(mesh_from_text("HEADMESH v1 1 1 0\nv 0 0 0 0.5 0.5\nf 0 1 2\n"), Error);
  }

  TEST_CASE("empty mesh rasterizes to nothing") {
    NeuralTexture tex{torch::ones({8, 8, 4})};
    auto r = rasterize_uv_texture(empty_mesh(), tex, PlaneAxis::XY, 16);
    CHECK(r.features.abs().sum().item<double>() == 0.0);
    CHECK(r.mask.sum().item<double>() == 0.0);
  }

  TEST_CASE("single triangle coverage equals the point-in-triangle oracle") {
    std::mt19937_64 gen(5);
    std::uniform_real_distribution<double> U(-1.2, 1.2);
    const int R = 64;
    int mismatches = 0;
    for (int trial = 0; trial < 25; ++trial) {
      std::array<Vec3, 3> v;
      std::array<std::array<double, 2>, 3> q;
      for (int k = 0; k < 3; ++k) {
        v[k] = {U(gen), U(gen), U(gen)};
        q[k] = {v[k].x, v[k].y};
      }
      auto m = single_triangle(v, {{{0, 0}, {1, 0}, {0, 1}}});
      NeuralTexture tex{torch::full({4, 4, 2}, 0.25f)};
      auto r = rasterize_uv_texture(m, tex, PlaneAxis::XY, R);
      auto mask = r.mask.accessor<float, 2>();
      auto feat = r.features.accessor<float, 3>();
      for (int j = 0; j < R; ++j)
        for (int i = 0; i < R; ++i) {
          const bool want = centre_in_triangle(-1 + (i + 0.5) * 2.0 / R, -1 + (j + 0.5) * 2.0 / R, q);
          if (want != (mask[j][i] > 0.5f)) ++mismatches;
          if (want) CHECK(feat[j][i][1] == 0.25f);
        }
    }
    CHECK(mismatches == 0);
  }

  TEST_CASE("depth buffer keeps the nearest triangle regardless of face order") {
    // Two coplanar-in-projection triangles on XY: z = 0.5 (nearer to +z viewer) and z = -0.5.
    HeadMesh m = empty_mesh(8);
    for (double z : {-0.5, 0.5}) {
      m.vertices.insert(m.vertices.end(), {{-0.8, -0.8, z}, {0.8, -0.8, z}, {0.0, 0.8, z}});
      const double u = z > 0 ? 0.9 : 0.1;
      m.uv.insert(m.uv.end(), {{u, 0.5}, {u, 0.5}, {u, 0.5}});
    }
    m.faces = {{0, 1, 2}, {3, 4, 5}};
    auto tex = torch::zeros({8, 8, 1});
    for (int i = 0; i < 8; ++i) tex.index_put_({torch::indexing::Slice(), i, 0}, static_cast<float>(i));
    NeuralTexture t{tex};
    auto a = rasterize_uv_texture(m, t, PlaneAxis::XY, 32);
    std::swap(m.faces[0], m.faces[1]);
    auto b = rasterize_uv_texture(m, t, PlaneAxis::XY, 32);
    CHECK(torch::equal(a.mask, b.mask));
    CHECK(torch::equal(a.features, b.features));
    // u = 0.9 → texel coordinate 6.7 on an 8-wide texture.
    auto covered = a.mask > 0.5;
    auto vals = a.features.select(2, 0).masked_select(covered);
    CHECK(vals.min().item<float>() == doctest::Approx(6.7).epsilon(1e-6));
    CHECK(vals.max().item<float>() == doctest::Approx(6.7).epsilon(1e-6));
  }

  TEST_CASE("head coverage is order invariant and features stay in the texture hull") {
    std::vector<double> e(8, 0.0);
    e[0] = 1.0;
    auto m = mesh_from_params(3, e);
    auto tex = torch::rand({32, 32, 3});
    NeuralTexture t{tex};
    for (auto axis : kPlaneAxes) {
      auto a = rasterize_uv_texture(m, t, axis, 48);
      auto shuffled = m;
      std::mt19937 g(1);
      std::shuffle(shuffled.faces.begin(), shuffled.faces.end(), g);
      auto b = rasterize_uv_texture(shuffled, t, axis, 48);
      CHECK(torch::equal(a.mask, b.mask));
      CHECK(a.mask.sum().item<double>() > 100);
      auto covered = (a.mask > 0.5).unsqueeze(-1).expand_as(a.features);
      auto vals = a.features.masked_select(covered);
      CHECK(vals.min().item<float>() >= tex.min().item<float>());
      CHECK(vals.max().item<float>() <= tex.max().item<float>());
    }
  }
}
