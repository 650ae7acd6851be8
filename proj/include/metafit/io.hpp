#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <png.h>

#include "metafit/errors.hpp"
#include "metafit/nn.hpp"
#include "metafit/param.hpp"
#include "metafit/tensor.hpp"

// File formats:
//   .npt     raw tensor: magic "NPT1", u32 rank, u32 extents (LE),
//            float32 payload, row-major.
//   .ckpt    self-describing checkpoint container: magic "MFC1",
//            u32 format version, arch block, named tensor map with raw
//            little-endian payloads. The trainer appends optimizer and
//            rng state sections (see trainer.hpp).

namespace metafit::io {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path.string());
  return f;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for reading: " + path.string());
  return f;
}

template <typename U>
void write_raw(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_raw(std::istream& is, const std::string& what) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) throw DataError("truncated file while reading " + what);
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const std::string& what) {
  auto n = read_raw<std::uint32_t>(is, what);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw DataError("truncated file while reading " + what);
  return s;
}

inline void expect_magic(std::istream& is, const char* magic, const std::string& what) {
  char buf[4];
  is.read(buf, 4);
  if (!is || std::memcmp(buf, magic, 4) != 0)
    throw DataError("bad magic in " + what + " (expected " + magic + ")");
}

}  // namespace detail

// ---- .npt ----

template <typename T>
void write_npt(const std::filesystem::path& path, const Tensor<T>& t) {
  auto f = detail::open_out(path);
  f.write("NPT1", 4);
  detail::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(t.shape().size()));
  for (std::size_t e : t.shape()) detail::write_raw<std::uint32_t>(f, static_cast<std::uint32_t>(e));
  for (std::size_t i = 0; i < t.size(); ++i)
    detail::write_raw<float>(f, static_cast<float>(t[i]));
  if (!f) throw DataError("write failed: " + path.string());
}

template <typename T>
Tensor<T> read_npt(const std::filesystem::path& path) {
  auto f = detail::open_in(path);
  detail::expect_magic(f, "NPT1", path.string());
  auto rank = detail::read_raw<std::uint32_t>(f, path.string());
  Shape shape(rank);
  for (auto& e : shape) e = detail::read_raw<std::uint32_t>(f, path.string());
  std::size_t n = shape_numel(shape);
  std::vector<T> data(n);
  for (auto& v : data) v = static_cast<T>(detail::read_raw<float>(f, path.string()));
  return Tensor<T>(std::move(shape), std::move(data));
}

// ---- PNG (8-bit, 1 or 3 channels) ----

struct PngImage {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

inline PngImage read_png(const std::filesystem::path& path) {
  std::FILE* fp = std::fopen(path.string().c_str(), "rb");
  if (!fp) throw DataError("cannot open PNG: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    throw DataError("failed to decode PNG: " + path.string());
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);

  PngImage img;
  img.height = png_get_image_height(png, info);
  img.width = png_get_image_width(png, info);
  img.channels = png_get_channels(png, info);
  std::size_t rowbytes = png_get_rowbytes(png, info);
  img.pixels.resize(img.height * rowbytes);
  std::vector<png_bytep> rows(img.height);
  for (std::size_t r = 0; r < img.height; ++r) rows[r] = img.pixels.data() + r * rowbytes;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  if (img.channels != 1 && img.channels != 3)
    throw DataError("PNG with unsupported channel count " + std::to_string(img.channels) + ": " +
                    path.string());
  return img;
}

inline void write_png(const std::filesystem::path& path, const PngImage& img) {
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw DataError("cannot open PNG for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw DataError("failed to encode PNG: " + path.string());
  }
  png_init_io(png, fp);
  int color = img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8, color, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(img.height);
  for (std::size_t r = 0; r < img.height; ++r)
    rows[r] = const_cast<png_bytep>(img.pixels.data() + r * img.width * img.channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

// ---- tensor maps and checkpoints ----

template <typename T>
void write_tensor_map(std::ostream& os, const ParamSet<T>& p) {
  detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(p.size()));
  for (std::size_t i = 0; i < p.size(); ++i) {
    detail::write_string(os, p.name(i));
    const Tensor<T>& t = p.tensor(i);
    detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t e : t.shape()) detail::write_raw<std::uint64_t>(os, e);
    detail::write_raw<std::uint8_t>(os, static_cast<std::uint8_t>(sizeof(T)));
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * sizeof(T)));
  }
}

template <typename T>
ParamSet<T> read_tensor_map(std::istream& is, const std::string& what, bool as_leaves) {
  auto count = detail::read_raw<std::uint32_t>(is, what);
  ParamSet<T> p;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = detail::read_string(is, what);
    auto rank = detail::read_raw<std::uint32_t>(is, what);
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(detail::read_raw<std::uint64_t>(is, what));
    auto width = detail::read_raw<std::uint8_t>(is, what);
    if (width != sizeof(T))
      throw DataError(what + ": element width " + std::to_string(width) +
                      " does not match requested precision " + std::to_string(sizeof(T)));
    std::vector<T> data(shape_numel(shape));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(T)));
    if (!is) throw DataError("truncated tensor payload in " + what);
    p.add(std::move(name), Tensor<T>(std::move(shape), std::move(data), as_leaves));
  }
  return p;
}

inline void write_arch(std::ostream& os, const nn::ArchSpec& spec) {
  detail::write_string(os, nn::arch_name(spec.id));
  detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(spec.input_shape.size()));
  for (std::size_t e : spec.input_shape) detail::write_raw<std::uint64_t>(os, e);
  detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(spec.widths.size()));
  for (std::size_t w : spec.widths) detail::write_raw<std::uint64_t>(os, w);
  detail::write_raw<std::uint64_t>(os, spec.classes);
}

inline nn::ArchSpec read_arch(std::istream& is, const std::string& what) {
  nn::ArchSpec spec;
  spec.id = nn::arch_from_name(detail::read_string(is, what));
  auto rank = detail::read_raw<std::uint32_t>(is, what);
  spec.input_shape.resize(rank);
  for (auto& e : spec.input_shape)
    e = static_cast<std::size_t>(detail::read_raw<std::uint64_t>(is, what));
  auto nw = detail::read_raw<std::uint32_t>(is, what);
  spec.widths.resize(nw);
  for (auto& w : spec.widths) w = static_cast<std::size_t>(detail::read_raw<std::uint64_t>(is, what));
  spec.classes = static_cast<std::size_t>(detail::read_raw<std::uint64_t>(is, what));
  return spec;
}

// Model checkpoint: arch + parameters.
template <typename T>
void write_checkpoint(const std::filesystem::path& path, const nn::ArchSpec& spec,
                      const ParamSet<T>& params) {
  auto f = detail::open_out(path);
  f.write("MFC1", 4);
  detail::write_raw<std::uint32_t>(f, kCheckpointVersion);
  write_arch(f, spec);
  write_tensor_map(f, params);
  if (!f) throw DataError("write failed: " + path.string());
}

template <typename T>
std::pair<nn::ArchSpec, ParamSet<T>> read_checkpoint(const std::filesystem::path& path) {
  auto f = detail::open_in(path);
  detail::expect_magic(f, "MFC1", path.string());
  auto version = detail::read_raw<std::uint32_t>(f, path.string());
  if (version != kCheckpointVersion)
    throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  nn::ArchSpec spec = read_arch(f, path.string());
  ParamSet<T> params = read_tensor_map<T>(f, path.string(), /*as_leaves=*/true);
  return {spec, params};
}

}  // namespace metafit::io
