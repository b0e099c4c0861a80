#include "ov3d/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <memory>
#include <vector>

// jpeglib.h needs FILE and size_t declared first.
#include <jpeglib.h>

#include "ov3d/binary_io.hpp"
#include "ov3d/error.hpp"

namespace ov3d {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  if (mode[0] == 'w' && path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) fail(ErrorCode::Io, "cannot open " + path.string());
  return f;
}

std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

// --- PNG --------------------------------------------------------------------

struct PngRaw {
  int width = 0;
  int height = 0;
  int color_type = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;  // row-major, `channels` bytes per pixel
};

void png_error_fn(png_structp png, png_const_charp msg) {
  auto* buf = static_cast<std::string*>(png_get_error_ptr(png));
  if (buf) *buf = msg;
  png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

// Reads 8-bit samples; palettes stay as indices unless `expand_palette`.
PngRaw read_png_raw(const std::filesystem::path& path, bool expand_palette) {
  FilePtr file = open_file(path, "rb");
  std::string message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, png_error_fn, png_warning_fn);
  if (!png) fail(ErrorCode::Io, "png: out of memory");
  png_infop info = png_create_info_struct(png);
  PngRaw raw;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorCode::Format, "png: " + path.string() + ": " + message);
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  int color_type = png_get_color_type(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) {
    if (expand_palette) {
      png_set_palette_to_rgb(png);
    } else if (bit_depth < 8) {
      png_set_packing(png);
    }
  } else if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if (expand_palette && png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  raw.width = static_cast<int>(png_get_image_width(png, info));
  raw.height = static_cast<int>(png_get_image_height(png, info));
  raw.color_type = color_type;
  raw.channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  raw.pixels.resize(stride * static_cast<std::size_t>(raw.height));
  rows.resize(static_cast<std::size_t>(raw.height));
  for (int y = 0; y < raw.height; ++y) rows[static_cast<std::size_t>(y)] = raw.pixels.data() + stride * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return raw;
}

void write_png_raw(const std::filesystem::path& path, int width, int height, int color_type,
                   const std::vector<std::uint8_t>& pixels, int channels, const png_color* palette = nullptr,
                   int palette_size = 0) {
  FilePtr file = open_file(path, "wb");
  std::string message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, png_error_fn, png_warning_fn);
  if (!png) fail(ErrorCode::Io, "png: out of memory");
  png_infop info = png_create_info_struct(png);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorCode::Io, "png: " + path.string() + ": " + message);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  if (palette) png_set_PLTE(png, info, palette, palette_size);
  // No timestamps or text chunks: identical inputs give identical files.
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  for (int y = 0; y < height; ++y)
    rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(pixels.data() + stride * y);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image image_from_bytes(int width, int height, int channels, const std::uint8_t* data) {
  Image img(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::uint8_t* p = data + (static_cast<std::size_t>(y) * width + x) * channels;
      for (int c = 0; c < 3; ++c) {
        const std::uint8_t v = channels >= 3 ? p[c] : p[0];
        img.rgb[static_cast<std::size_t>(c)](y, x) = static_cast<float>(v) / 255.0f;
      }
    }
  }
  return img;
}

Image read_png_image(const std::filesystem::path& path) {
  PngRaw raw = read_png_raw(path, true);
  return image_from_bytes(raw.width, raw.height, raw.channels, raw.pixels.data());
}

// --- JPEG -------------------------------------------------------------------

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

Image read_jpeg_image(const std::filesystem::path& path) {
  FilePtr file = open_file(path, "rb");
  jpeg_decompress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  std::vector<std::uint8_t> pixels;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    fail(ErrorCode::Format, "jpeg: " + path.string() + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const int width = static_cast<int>(cinfo.output_width);
  const int height = static_cast<int>(cinfo.output_height);
  const int channels = cinfo.output_components;
  pixels.resize(static_cast<std::size_t>(width) * height * channels);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * width * channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return image_from_bytes(width, height, channels, pixels.data());
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  Image img;
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), "\x89PNG\r\n\x1a\n", 8) == 0) {
    img = read_png_image(path);
  } else if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) {
    img = read_jpeg_image(path);
  } else {
    fail(ErrorCode::Format, "unsupported image format: " + path.string());
  }
  img.path = path;
  img.id = path.stem().string();
  return img;
}

void write_png(const Image& image, const std::filesystem::path& path) {
  const int h = image.height(), w = image.width();
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        pixels[(static_cast<std::size_t>(y) * w + x) * 3 + c] = to_byte(image.rgb[static_cast<std::size_t>(c)](y, x));
  write_png_raw(path, w, h, PNG_COLOR_TYPE_RGB, pixels, 3);
}

Image downsample_image(const Image& image, int factor) {
  require(factor >= 1, ErrorCode::InvalidArgument, "downsample_image: factor must be >= 1");
  if (factor == 1) return image;
  const int h = image.height() / factor, w = image.width() / factor;
  require(h > 0 && w > 0, ErrorCode::InvalidArgument, "downsample_image: factor larger than image");
  Image out(h, w);
  out.id = image.id;
  out.path = image.path;
  const float norm = 1.0f / static_cast<float>(factor * factor);
  for (std::size_t c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.rgb[c](y, x) = image.rgb[c].block(y * factor, x * factor, factor, factor).sum() * norm;
  return out;
}

LabelMap read_indexed_png(const std::filesystem::path& path) {
  PngRaw raw = read_png_raw(path, false);
  if (raw.color_type != PNG_COLOR_TYPE_PALETTE && raw.color_type != PNG_COLOR_TYPE_GRAY) {
    fail(ErrorCode::Format, "mask is not an indexed PNG: " + path.string());
  }
  LabelMap labels(raw.height, raw.width);
  std::memcpy(labels.data(), raw.pixels.data(), static_cast<std::size_t>(raw.width) * raw.height);
  return labels;
}

const std::array<std::array<std::uint8_t, 3>, 256>& label_palette() {
  static const auto palette = [] {
    std::array<std::array<std::uint8_t, 3>, 256> p{};
    for (int i = 0; i < 256; ++i) {
      int r = 0, g = 0, b = 0, c = i;
      for (int j = 0; j < 8; ++j) {
        r |= ((c >> 0) & 1) << (7 - j);
        g |= ((c >> 1) & 1) << (7 - j);
        b |= ((c >> 2) & 1) << (7 - j);
        c >>= 3;
      }
      p[static_cast<std::size_t>(i)] = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g),
                                        static_cast<std::uint8_t>(b)};
    }
    p[255] = {255, 255, 255};
    return p;
  }();
  return palette;
}

void write_indexed_png(const LabelMap& labels, const std::filesystem::path& path) {
  const int h = static_cast<int>(labels.rows()), w = static_cast<int>(labels.cols());
  std::vector<std::uint8_t> pixels(labels.data(), labels.data() + labels.size());
  std::array<png_color, 256> palette{};
  for (std::size_t i = 0; i < 256; ++i) {
    const auto& c = label_palette()[i];
    palette[i] = {c[0], c[1], c[2]};
  }
  write_png_raw(path, w, h, PNG_COLOR_TYPE_PALETTE, pixels, 1, palette.data(), 256);
}

void write_gray_png(const Plane& values, const std::filesystem::path& path) {
  const int h = static_cast<int>(values.rows()), w = static_cast<int>(values.cols());
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(w) * h);
  for (Eigen::Index i = 0; i < values.size(); ++i) pixels[static_cast<std::size_t>(i)] = to_byte(values.data()[i]);
  write_png_raw(path, w, h, PNG_COLOR_TYPE_GRAY, pixels, 1);
}

Plane read_gray_png(const std::filesystem::path& path) {
  PngRaw raw = read_png_raw(path, true);
  Plane out(raw.height, raw.width);
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x)
      out(y, x) = raw.pixels[(static_cast<std::size_t>(y) * raw.width + x) * raw.channels] / 255.0f;
  return out;
}

}  // namespace ov3d
