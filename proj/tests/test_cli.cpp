#include <doctest.h>

#include <cstdlib>

#include <sys/wait.h>

#include "avatar/training.hpp"

using namespace avatar;

namespace {

const char* kTiny =
    " --set data.pairs_per_domain=5 --set data.n_dynamic=8 --set data.n_static=8 --set vae.steps=10"
    " --set dit.steps=100 --set motion_renderer.steps=6 --set motion_renderer.adv_start_step=4";

ExperimentConfig tiny_config() {
  auto c = ExperimentConfig::desk();
  c.data.pairs_per_domain = 5;
  c.data.n_dynamic = 8;
  c.data.n_static = 8;
  c.vae.steps = 10;
  c.dit.steps = 100;
  c.motion_renderer.steps = 6;
  c.motion_renderer.adv_start_step = 4;
  return c;
}

fs::path cli_path() {
  const char* p = std::getenv("AVATAR_LAB");
  REQUIRE_MESSAGE(p != nullptr, "AVATAR_LAB must name the avatar_lab binary");
  return p;
}

const fs::path& work() {
  static const fs::path w = [] {
    auto p = fs::absolute("cli_work");
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return w;
}

int lab(const std::string& args, const std::string& log) {
  const std::string cmd =
      "'" + cli_path().string() + "' " + args + " > '" + (work() / log).string() + "' 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : 128;
}

std::string q(const fs::path& p) { return " '" + p.string() + "'"; }

// Data and a trained checkpoint set shared by the cases below.
const fs::path& trained() {
  static const fs::path run = [] {
    const auto data = work() / "data", run = work() / "run";
    REQUIRE(lab("generate-data --out" + q(data) + kTiny, "gen.log") == 0);
    const std::string d = " --data" + q(data) + " --out" + q(run) + kTiny;
    REQUIRE(lab("train-vae" + d, "vae.log") == 0);
    REQUIRE(lab("train-dit" + d, "dit.log") == 0);
    REQUIRE(lab("train-renderer" + d, "ren.log") == 0);
    return run;
  }();
  return run;
}

fs::path source_image() { return work() / "data" / "pairs" / "id00000" / "image.png"; }

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("generate-data is byte-deterministic") {
    trained();
    const auto again = work() / "data_again";
    REQUIRE(lab("generate-data --out" + q(again) + kTiny, "gen_again.log") == 0);
    for (const auto* split : {"pairs", "dynamic", "static"})
      CHECK(read_file(work() / "data" / split / "manifest.json") == read_file(again / split / "manifest.json"));
  }

  TEST_CASE("infer records the guidance flag verbatim and frames are deterministic") {
    const auto run = trained();
    const auto a = work() / "frames_a", b = work() / "frames_b";
    const std::string base = "infer --checkpoints" + q(run) + " --source" + q(source_image()) + " --frames 3" + kTiny;
    REQUIRE(lab(base + " --out" + q(a) + " --guidance 4.5", "infer_a.log") == 0);
    REQUIRE(lab(base + " --out" + q(b) + " --guidance 4.5", "infer_b.log") == 0);
    auto rec = json::parse(read_file(a / "run.json"));
    CHECK(rec.at("guidance_text") == "4.5");
    CHECK(rec.at("guidance").get<double>() == 4.5);
    CHECK(rec.at("frames").size() == 3);
    for (const auto* f : {"frame_0000.png", "frame_0001.png", "frame_0002.png"})
      CHECK(read_file(a / f) == read_file(b / f));

    const auto c = work() / "frames_c";
    REQUIRE(lab(base + " --out" + q(c) + " --guidance 4.50", "infer_c.log") == 0);
    CHECK(json::parse(read_file(c / "run.json")).at("guidance_text") == "4.50");
  }

  TEST_CASE("config-hash mismatch aborts infer before any output") {
    const auto run = trained();
    const auto out = work() / "frames_mismatch";
    const int rc = lab("infer --checkpoints" + q(run) + " --source" + q(source_image()) + " --out" + q(out) + kTiny +
                           " --set renderer.n_fine=40",
                       "mismatch.log");
    CHECK(rc == 65);
    CHECK_FALSE(fs::exists(out / "run.json"));
    CHECK_FALSE(fs::exists(out / "frame_0000.png"));
    const auto log = read_file(work() / "mismatch.log");
    CHECK(log.find("\"kind\":\"validation\"") != std::string::npos);
  }

  TEST_CASE("error exit codes") {
    CHECK(lab("no-such-command", "unknown.log") == 64);
    CHECK(lab("infer --checkpoints" + q(work() / "nowhere") + " --source" + q(source_image()) + " --out" +
                  q(work() / "f"),
              "missing.log") == 66);
  }

  TEST_CASE("trained DiT separates null and real conditions") {
    const auto run = trained();
    const auto cfg = tiny_config();
    auto dit = load_dit(run / "dit.ckpt", cfg);
    torch::NoGradGuard ng;
    dit.model->eval();
    const auto& L = dit.model->layout;
    auto z = at::normal(0.0, 1.0, {2, L.planes, cfg.vae.latent_resolution, cfg.vae.latent_resolution,
                                   cfg.vae.latent_channels},
                        torch_generator(3), torch::kFloat32);
    auto img = condition_images(load_png(source_image()).unsqueeze(0), cfg.dit.condition_resolution).repeat({2, 1, 1, 1});
    auto t = torch::tensor({200.0, 700.0});
    auto real = dit.model->forward(z, t, dit.model->encode_condition(img)).eps;
    auto null = dit.model->forward(z, t, dit.model->null_condition(2)).eps;
    const double gap = (real - null).abs().mean().item<double>();
    MESSAGE("mean |eps(real) - eps(null)| " << gap);
    CHECK(gap > 1e-4);
  }
}
