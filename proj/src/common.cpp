#include "avatar/common.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <png.h>
#include <sodium.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <numbers>
#include <sstream>
#include <unistd.h>

static_assert(std::endian::native == std::endian::little, "binary containers assume a little-endian host");

namespace avatar {

void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage: return "usage";
    case ErrorKind::Config: return "config";
    case ErrorKind::Io: return "io";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Validation: return "validation";
  }
  return "unknown";
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t counter) {
  return mix64(mix64(seed) ^ (counter * 0xD1B54A32D192ED03ull + 0x8CB92BA72F3D8DD7ull));
}

std::uint64_t Rng::next_u64() {
  state_ += 0x9E3779B97F4A7C15ull;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller; u1 kept away from zero.
  double u1 = (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double th = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(th);
  has_spare_ = true;
  return r * std::cos(th);
}

at::Generator torch_generator(std::uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(mix64(seed));
}

void write_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) fail(ErrorKind::Io, "cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::Io, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    fail(ErrorKind::Io, "cannot rename into " + path.string());
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string hash_bytes(std::string_view bytes) {
  static const int init = sodium_init();
  (void)init;
  unsigned char out[32];
  crypto_generichash(out, sizeof out, reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), nullptr, 0);
  char hex[65];
  sodium_bin2hex(hex, sizeof hex, out, sizeof out);
  return std::string(hex);
}

std::string hash_file(const fs::path& path) { return hash_bytes(read_file(path)); }

void ByteWriter::u32(std::uint32_t v) { buf_.append(reinterpret_cast<const char*>(&v), 4); }
void ByteWriter::u64(std::uint64_t v) { buf_.append(reinterpret_cast<const char*>(&v), 8); }
void ByteWriter::f32s(std::span<const float> v) {
  buf_.append(reinterpret_cast<const char*>(v.data()), v.size_bytes());
}

std::string_view ByteReader::raw(std::size_t n) {
  if (pos_ + n > data_.size()) fail(ErrorKind::Io, what_ + ": truncated");
  auto s = data_.substr(pos_, n);
  pos_ += n;
  return s;
}

std::uint32_t ByteReader::u32() {
  std::uint32_t v;
  std::memcpy(&v, raw(4).data(), 4);
  return v;
}

std::uint64_t ByteReader::u64() {
  std::uint64_t v;
  std::memcpy(&v, raw(8).data(), 8);
  return v;
}

void ByteReader::f32s(std::span<float> out) {
  auto s = raw(out.size_bytes());
  std::memcpy(out.data(), s.data(), s.size());
}

namespace {

std::span<const float> float_span(const torch::Tensor& t) {
  return {t.data_ptr<float>(), static_cast<std::size_t>(t.numel())};
}

}  // namespace

void save_imgf(const fs::path& path, const torch::Tensor& hwc, const json& meta) {
  if (hwc.dim() != 3) fail(ErrorKind::Shape, "IMGF1 expects H×W×C, got " + shape_string(hwc));
  auto t = hwc.detach().to(torch::kFloat32).contiguous();
  ByteWriter w;
  w.raw("IMGF1");
  for (int d = 0; d < 3; ++d) w.u32(static_cast<std::uint32_t>(t.size(d)));
  w.f32s(float_span(t));
  std::string m = meta.dump();
  w.u32(static_cast<std::uint32_t>(m.size()));
  w.raw(m);
  write_atomic(path, w.bytes());
}

torch::Tensor load_imgf(const fs::path& path, json* meta) {
  std::string bytes = read_file(path);
  ByteReader r(bytes, path.string());
  if (r.raw(5) != "IMGF1") fail(ErrorKind::Io, path.string() + ": bad IMGF1 magic");
  std::int64_t h = r.u32(), w = r.u32(), c = r.u32();
  auto t = torch::empty({h, w, c}, torch::kFloat32);
  r.f32s({t.data_ptr<float>(), static_cast<std::size_t>(t.numel())});
  auto m = r.raw(r.u32());
  if (meta) *meta = json::parse(m);
  return t;
}

namespace {

struct PngWriteGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteGuard() { png_destroy_write_struct(&png, &info); }
};

struct PngReadGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadGuard() { png_destroy_read_struct(&png, &info, nullptr); }
};

void png_append(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), len);
}

void png_noop_flush(png_structp) {}

struct ReadCursor {
  std::string_view data;
  std::size_t pos = 0;
};

void png_consume(png_structp png, png_bytep out, png_size_t len) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + len > cur->data.size()) png_error(png, "truncated PNG");
  std::memcpy(out, cur->data.data() + cur->pos, len);
  cur->pos += len;
}

[[noreturn]] void png_throw(png_structp, png_const_charp msg) { throw Error(ErrorKind::Io, std::string("png: ") + msg); }

}  // namespace

void save_png(const fs::path& path, const torch::Tensor& hwc,
              const std::vector<std::pair<std::string, std::string>>& text) {
  if (hwc.dim() != 3 || (hwc.size(2) != 1 && hwc.size(2) != 3))
    fail(ErrorKind::Shape, "PNG expects H×W×{1,3}, got " + shape_string(hwc));
  auto bytes8 = (hwc.detach().to(torch::kFloat32).clamp(0.0, 1.0) * 255.0 + 0.5).floor().to(torch::kUInt8).contiguous();
  const int h = static_cast<int>(bytes8.size(0)), w = static_cast<int>(bytes8.size(1));
  const int c = static_cast<int>(bytes8.size(2));

  std::string out;
  PngWriteGuard g;
  g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_throw, nullptr);
  g.info = png_create_info_struct(g.png);
  png_set_write_fn(g.png, &out, png_append, png_noop_flush);
  png_set_IHDR(g.png, g.info, w, h, 8, c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_sRGB_gAMA_and_cHRM(g.png, g.info, PNG_sRGB_INTENT_PERCEPTUAL);
  std::vector<png_text> chunks;
  for (const auto& [k, v] : text) {
    png_text t{};
    t.compression = PNG_TEXT_COMPRESSION_NONE;
    t.key = const_cast<char*>(k.c_str());
    t.text = const_cast<char*>(v.c_str());
    t.text_length = v.size();
    chunks.push_back(t);
  }
  if (!chunks.empty()) png_set_text(g.png, g.info, chunks.data(), static_cast<int>(chunks.size()));
  png_write_info(g.png, g.info);
  const auto* base = bytes8.data_ptr<std::uint8_t>();
  for (int y = 0; y < h; ++y) png_write_row(g.png, const_cast<png_bytep>(base + static_cast<std::size_t>(y) * w * c));
  png_write_end(g.png, nullptr);
  write_atomic(path, out);
}

torch::Tensor load_png(const fs::path& path, std::vector<std::pair<std::string, std::string>>* text) {
  std::string bytes = read_file(path);
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0)
    fail(ErrorKind::Io, path.string() + ": not a PNG file");
  ReadCursor cur{bytes};
  PngReadGuard g;
  g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_throw, nullptr);
  g.info = png_create_info_struct(g.png);
  png_set_read_fn(g.png, &cur, png_consume);
  png_read_info(g.png, g.info);
  png_set_strip_16(g.png);
  png_set_strip_alpha(g.png);
  png_set_palette_to_rgb(g.png);
  png_set_expand_gray_1_2_4_to_8(g.png);
  png_read_update_info(g.png, g.info);
  const int h = static_cast<int>(png_get_image_height(g.png, g.info));
  const int w = static_cast<int>(png_get_image_width(g.png, g.info));
  const int c = png_get_channels(g.png, g.info);
  auto img = torch::empty({h, w, c}, torch::kUInt8);
  auto* base = img.data_ptr<std::uint8_t>();
  for (int y = 0; y < h; ++y) png_read_row(g.png, base + static_cast<std::size_t>(y) * w * c, nullptr);
  png_read_end(g.png, g.info);
  if (text) {
    png_textp chunks = nullptr;
    int n = 0;
    png_get_text(g.png, g.info, &chunks, &n);
    for (int i = 0; i < n; ++i) text->emplace_back(chunks[i].key, std::string(chunks[i].text, chunks[i].text_length));
  }
  return img.to(torch::kFloat32) / 255.0;
}

std::string shape_string(const torch::Tensor& t) {
  if (!t.defined()) return "[undefined]";
  std::ostringstream ss;
  ss << t.sizes();
  return ss.str();
}

void expect_shape(const torch::Tensor& t, std::initializer_list<std::int64_t> shape, const char* what) {
  if (!t.defined() || t.sizes() != c10::IntArrayRef(shape)) {
    std::ostringstream ss;
    ss << what << ": expected shape " << c10::IntArrayRef(shape) << ", got " << shape_string(t);
    fail(ErrorKind::Shape, ss.str());
  }
}

}  // namespace avatar
