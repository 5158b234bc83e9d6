#include <doctest.h>

#include <algorithm>
#include <set>

#include "avatar/synthetic_data.hpp"

using namespace avatar;

namespace {

ExperimentConfig tiny() {
  auto c = ExperimentConfig::desk();
  c.triplane.resolution = 16;
  c.triplane.channels = 8;
  c.renderer.features = 4;
  c.renderer.decoder_hidden = 16;
  c.renderer.render_resolution = 8;
  c.renderer.n_coarse = 8;
  c.renderer.n_fine = 8;
  c.geometry.rings = 8;
  c.geometry.segments = 10;
  c.data.domains = 1;
  c.data.pairs_per_domain = 1;
  c.data.n_dynamic = 2;
  c.data.n_static = 2;
  c.data.exprs_per_id = 2;
  c.data.views_per_expr = 2;
  c.data.static_views = 2;
  return c;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("avatar_data_" + name);
  fs::remove_all(p);
  return p;
}

double pearson(const torch::Tensor& a, const torch::Tensor& b) {
  auto x = a.flatten().to(torch::kFloat64), y = b.flatten().to(torch::kFloat64);
  x = x - x.mean();
  y = y - y.mean();
  return (x * y).sum().item<double>() / std::sqrt((x * x).sum().item<double>() * (y * y).sum().item<double>());
}

}  // namespace

TEST_SUITE("synthetic_data") {
  TEST_CASE("identities are deterministic in their inputs") {
    auto c = ExperimentConfig::desk();
    auto a = make_identity(42, 1, c), b = make_identity(42, 1, c);
    CHECK(torch::equal(a.static_planes, b.static_planes));
    CHECK(torch::equal(a.base_texture.texels, b.base_texture.texels));
    CHECK(a.static_planes.sizes() == torch::IntArrayRef({3, 64, 64, 16}));
    CHECK(a.base_texture.texels.sizes() == torch::IntArrayRef({64, 64, 16}));
    CHECK_THROWS_AS(make_identity(42, c.data.domains, c), Error);
  }

  TEST_CASE("identities of different seeds are weakly correlated") {
    auto c = ExperimentConfig::desk();
    double worst = 0.0, total = 0.0;
    for (std::uint64_t s = 0; s < 100; ++s) {
      auto a = make_identity(1000 + 2 * s, 0, c), b = make_identity(1001 + 2 * s, 0, c);
      const double r = std::abs(pearson(a.base_texture.texels, b.base_texture.texels));
      worst = std::max(worst, r);
      total += r;
    }
    MESSAGE("max |r| = " << worst << ", mean |r| = " << total / 100);
    CHECK(worst < 0.5);
  }

  TEST_CASE("domains are separable by a threshold on the mean texel") {
    auto c = ExperimentConfig::desk();
    std::vector<std::pair<double, int>> samples;
    for (int i = 0; i < 200; ++i) {
      const int d = i % c.data.domains;
      auto id = make_identity(5000 + i, d, c);
      samples.emplace_back(id.base_texture.texels.slice(-1, 1).mean().item<double>(), d);
    }
    // Fit thresholds between consecutive domain medians, then classify.
    std::vector<double> mid(c.data.domains);
    for (int d = 0; d < c.data.domains; ++d) {
      std::vector<double> v;
      for (auto& [x, dd] : samples)
        if (dd == d) v.push_back(x);
      std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
      mid[d] = v[v.size() / 2];
    }
    int correct = 0;
    for (auto& [x, d] : samples) {
      int best = 0;
      for (int k = 1; k < c.data.domains; ++k)
        if (std::abs(x - mid[k]) < std::abs(x - mid[best])) best = k;
      correct += best == d;
    }
    CHECK(correct >= 190);
  }

  TEST_CASE("palette and partition rules") {
    auto c = ExperimentConfig::desk();
    CHECK(palette_size(c) == c.geometry.expression_dim + 1);
    auto n = palette_expression(0, c);
    CHECK(std::all_of(n.begin(), n.end(), [](double x) { return x == 0.0; }));
    CHECK(palette_expression(3, c)[2] == c.data.expression_scale);
    CHECK_THROWS_AS(palette_expression(palette_size(c), c), Error);
    CHECK(partition_of(19, c) == "val");
    CHECK(partition_of(20, c) == "train");
    std::set<std::uint64_t> seeds;
    for (const char* split : {"pairs", "dynamic", "static"})
      for (int i = 0; i < 50; ++i) seeds.insert(identity_seed_for(c, split, i));
    CHECK(seeds.size() == 150);
  }

  TEST_CASE("pairs split with a single identity") {
    auto c = tiny();
    auto out = scratch("pairs1");
    auto m = generate_pairs_split(c, out);
    CHECK(m.records.size() == 1);
    CHECK(m.identities.size() == 1);
    int trip = 0, png = 0;
    for (auto& e : fs::recursive_directory_iterator(out / "pairs")) {
      trip += e.path().extension() == ".trip";
      png += e.path().extension() == ".png";
    }
    CHECK(trip == 1);
    CHECK(png == 1);
    CHECK(fs::exists(out / "pairs" / "manifest.json"));
    CHECK_FALSE(fs::exists(out / "pairs.partial"));
    auto loaded = DatasetManifest::load(out / "pairs");
    CHECK(loaded.to_json() == m.to_json());
    validate_manifest(loaded, c.data_hash());
    CHECK_THROWS_AS(validate_manifest(loaded, "0000"), Error);

    const auto first = read_file(out / "pairs" / "manifest.json");
    generate_pairs_split(c, out);
    CHECK(read_file(out / "pairs" / "manifest.json") == first);
    fs::remove_all(out);
  }

  TEST_CASE("pairs split counts scale with domains") {
    auto c = tiny();
    c.data.domains = 2;
    c.data.pairs_per_domain = 3;
    auto out = scratch("pairs6");
    auto m = generate_pairs_split(c, out);
    CHECK(m.records.size() == 6);
    CHECK(m.records[4].domain_tag == 1);
    fs::remove_all(out);
  }

  TEST_CASE("tampered files fail validation") {
    auto c = tiny();
    auto out = scratch("tamper");
    auto m = generate_pairs_split(c, out);
    const auto img = m.path(m.records[0].files.at("image"));
    auto bytes = read_file(img);
    bytes.back() ^= 1;
    write_atomic(img, bytes);
    CHECK_THROWS_AS(validate_manifest(DatasetManifest::load(out / "pairs")), Error);
    fs::remove(img);
    try {
      validate_manifest(DatasetManifest::load(out / "pairs"));
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Io);
    }
    fs::remove_all(out);
  }

  TEST_CASE("dynamic and static split structure") {
    auto c = tiny();
    auto out = scratch("dynstat");
    auto [dyn, sta] = generate_dynamic_static_split(c, out);
    const auto expected = c.data.n_dynamic * c.data.exprs_per_id * c.data.views_per_expr +
                          c.data.n_static * c.data.static_views;
    CHECK(dyn.records.size() + sta.records.size() == static_cast<std::size_t>(expected));

    // Same identity and expression, two views.
    const auto& r0 = dyn.records[0];
    const auto& r1 = dyn.records[1];
    REQUIRE(r0.identity == r1.identity);
    REQUIRE(r0.expression_index == r1.expression_index);
    CHECK(r0.view != r1.view);
    CHECK(r0.hashes.at("image") != r1.hashes.at("image"));
    CHECK(r0.hashes.at("fused") == r1.hashes.at("fused"));

    // Each dynamic identity carries distinct expressions; static carries one.
    std::set<int> exprs;
    for (const auto& r : dyn.records)
      if (r.identity == 0) exprs.insert(r.expression_index);
    CHECK(exprs.size() == static_cast<std::size_t>(c.data.exprs_per_id));
    exprs.clear();
    for (const auto& r : sta.records)
      if (r.identity == 0) exprs.insert(r.expression_index);
    CHECK(exprs.size() == 1);

    // Stored products round-trip and labels reproduce the fused planes.
    for (const auto& r : dyn.records) {
      CHECK(load_imgf(dyn.path(r.files.at("depth"))).size(0) == c.renderer.render_resolution);
      CHECK(load_png(dyn.path(r.files.at("image"))).size(0) == 2 * c.renderer.render_resolution);
    }
    auto tri = load_triplane(dyn.path(dyn.identities[r0.identity].triplane));
    auto ident = make_identity(r0.identity_seed, r0.domain_tag, c);
    CHECK(torch::equal(tri.planes, ident.triplane().planes));
    auto mesh = mesh_from_params(r0.identity_seed, r0.expression, c.mesh());
    auto fused = fuse(tri, mesh);
    auto stored = load_triplane(dyn.path(r0.files.at("fused")));
    CHECK(torch::equal(stored.planes, fused.planes));
    validate_manifest(dyn, c.data_hash());
    validate_manifest(sta, c.data_hash());

    std::set<std::uint64_t> train, val;
    for (const auto& id : dyn.identities) (id.partition == "val" ? val : train).insert(id.identity_seed);
    for (auto s : val) CHECK(train.count(s) == 0);
    fs::remove_all(out);
  }

  TEST_CASE("dynamic split requires two expressions") {
    auto c = tiny();
    c.data.exprs_per_id = 1;
    try {
      generate_dynamic_static_split(c, scratch("reject"));
      FAIL("expected rejection");
    } catch (const Error& e) {
      CHECK((e.kind() == ErrorKind::Validation || e.kind() == ErrorKind::Config));
    }
  }

  TEST_CASE("oracle head persists and reproduces renders") {
    auto c = tiny();
    auto head = make_oracle_head(c, 9);
    auto path = fs::temp_directory_path() / "avatar_oracle.ckpt";
    save_oracle(path, head, c, 9);
    auto back = load_oracle(path, c);
    auto id = make_identity(3, 0, c);
    auto fused = fuse(id.triplane(), mesh_from_params(3, palette_expression(1, c), c.mesh()));
    CameraPose pose;
    auto a = render(fused, head, pose, c.sampling(), 1);
    auto b = render(fused, back, pose, c.sampling(), 1);
    CHECK(torch::equal(a.rgb, b.rgb));
    CHECK(a.opacity.max().item<double>() > 0.5);
    CHECK(a.opacity.min().item<double>() < 0.5);
    fs::remove(path);
  }
}
