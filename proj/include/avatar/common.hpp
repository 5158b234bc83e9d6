#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace avatar {

using json = nlohmann::json;
namespace fs = std::filesystem;

// Error categories map 1:1 onto CLI exit codes (see tools/avatar_lab.cpp).
enum class ErrorKind { Usage, Config, Io, Numeric, Shape, Validation };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);
const char* to_string(ErrorKind kind);

// ---------------------------------------------------------------------------
// Deterministic random numbers.
//
// All samplers draw from SplitMix64 so sequences are identical across
// standard-library implementations. Streams for parallel work (per ray, per
// record) are derived by hashing (seed, counter), never by sharing state.

std::uint64_t mix64(std::uint64_t x);
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t counter);

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }
  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// torch generator seeded from our stream; used for tensor-valued noise.
at::Generator torch_generator(std::uint64_t seed);

// ---------------------------------------------------------------------------
// Filesystem helpers. Every writer goes through write_atomic so readers never
// observe partial files.

void write_atomic(const fs::path& path, std::string_view bytes);
std::string read_file(const fs::path& path);

// Hex BLAKE2b-256 digest.
std::string hash_bytes(std::string_view bytes);
std::string hash_file(const fs::path& path);

// Little-endian byte buffer helpers for the binary containers.
class ByteWriter {
 public:
  void raw(std::string_view s) { buf_.append(s); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32s(std::span<const float> v);
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}
  std::string_view raw(std::size_t n);
  std::uint32_t u32();
  std::uint64_t u64();
  void f32s(std::span<float> out);
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
  std::string what_;
};

// ---------------------------------------------------------------------------
// Raw float image container, magic "IMGF1": u32 H, W, C, f32 payload
// (row-major H×W×C), u32 length + UTF-8 JSON meta.

void save_imgf(const fs::path& path, const torch::Tensor& hwc, const json& meta = json::object());
torch::Tensor load_imgf(const fs::path& path, json* meta = nullptr);

// 8-bit sRGB-tagged PNG. `hwc` is float in [0,1] with C ∈ {1,3}. Text chunks
// are written in key order so output bytes are a pure function of inputs.
void save_png(const fs::path& path, const torch::Tensor& hwc,
              const std::vector<std::pair<std::string, std::string>>& text = {});
torch::Tensor load_png(const fs::path& path, std::vector<std::pair<std::string, std::string>>* text = nullptr);

// Shape check helper producing ErrorKind::Shape.
void expect_shape(const torch::Tensor& t, std::initializer_list<std::int64_t> shape, const char* what);
std::string shape_string(const torch::Tensor& t);

}  // namespace avatar
