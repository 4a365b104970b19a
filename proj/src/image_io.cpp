#include "stp/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

namespace stp {

namespace {

uint8_t quantize(float v) {
  const float c = std::min(1.0f, std::max(0.0f, v));
  return static_cast<uint8_t>(std::lround(c * 255.0f));
}

}  // namespace

Tensor<float> read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_ppm: cannot open '" + path + "'");
  std::string magic;
  f >> magic;
  if (magic != "P6") throw IoError("read_ppm: '" + path + "' is not a binary P6 file");
  auto next_int = [&f, &path]() {
    // skip whitespace and '#' comments
    int c = f.peek();
    while (c == '#' || std::isspace(c)) {
      if (c == '#') f.ignore(1 << 16, '\n');
      else f.ignore(1);
      c = f.peek();
    }
    int v;
    if (!(f >> v)) throw IoError("read_ppm: malformed header in '" + path + "'");
    return v;
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (maxval != 255) throw IoError("read_ppm: '" + path + "' maxval " + std::to_string(maxval) + " unsupported");
  f.ignore(1);  // single whitespace before payload
  std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!f) throw IoError("read_ppm: truncated pixel data in '" + path + "'");
  std::vector<float> img(raw.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img[(static_cast<size_t>(c) * h + y) * w + x] =
            static_cast<float>(raw[(static_cast<size_t>(y) * w + x) * 3 + c]) / 255.0f;
  return Tensor<float>::from_data({3, h, w}, std::move(img));
}

void write_ppm(const std::string& path, const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw IoError("write_ppm: expected 3 x H x W image, got " + shape_str(image.shape()));
  const int h = image.dim(1), w = image.dim(2);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_ppm: cannot open '" + path + "' for writing");
  f << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        raw[(static_cast<size_t>(y) * w + x) * 3 + c] =
            quantize(image.data()[(static_cast<size_t>(c) * h + y) * w + x]);
  f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!f) throw IoError("write_ppm: write failed for '" + path + "'");
}

Tensor<float> read_png(const std::string& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    throw IoError("read_png: cannot read '" + path + "': " + png.message);
  png.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> raw(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, raw.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError("read_png: decode failed for '" + path + "': " + msg);
  }
  const int w = static_cast<int>(png.width), h = static_cast<int>(png.height);
  std::vector<float> img(static_cast<size_t>(3) * h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img[(static_cast<size_t>(c) * h + y) * w + x] =
            static_cast<float>(raw[(static_cast<size_t>(y) * w + x) * 3 + c]) / 255.0f;
  return Tensor<float>::from_data({3, h, w}, std::move(img));
}

void write_png(const std::string& path, const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw IoError("write_png: expected 3 x H x W image, got " + shape_str(image.shape()));
  const int h = image.dim(1), w = image.dim(2);
  std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        raw[(static_cast<size_t>(y) * w + x) * 3 + c] =
            quantize(image.data()[(static_cast<size_t>(c) * h + y) * w + x]);
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(w);
  png.height = static_cast<png_uint_32>(h);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, raw.data(), 0, nullptr))
    throw IoError("write_png: write failed for '" + path + "': " + png.message);
}

Tensor<float> read_image(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".png") return read_png(path);
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".ppm") return read_ppm(path);
  throw IoError("read_image: unsupported extension on '" + path + "' (expected .png or .ppm)");
}

void write_image(const std::string& path, const Tensor<float>& image) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".png") return write_png(path, image);
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".ppm") return write_ppm(path, image);
  throw IoError("write_image: unsupported extension on '" + path + "' (expected .png or .ppm)");
}

Tensor<float> bilinear_resize(const Tensor<float>& image, int x0, int y0, int w, int h, int out_h,
                              int out_w) {
  if (image.rank() != 3) throw ShapeError("bilinear_resize: expected C x H x W");
  const int c = image.dim(0), ih = image.dim(1), iw = image.dim(2);
  if (x0 < 0 || y0 < 0 || x0 + w > iw || y0 + h > ih || w <= 0 || h <= 0)
    throw ShapeError("bilinear_resize: crop rectangle out of bounds");
  std::vector<float> out(static_cast<size_t>(c) * out_h * out_w);
  const double sx = static_cast<double>(w) / out_w;
  const double sy = static_cast<double>(h) / out_h;
  for (int oy = 0; oy < out_h; ++oy) {
    const double fy = (oy + 0.5) * sy - 0.5;
    int iy0 = static_cast<int>(std::floor(fy));
    const double wy = fy - iy0;
    int iy1 = std::min(iy0 + 1, h - 1);
    iy0 = std::max(iy0, 0);
    iy1 = std::max(iy1, 0);
    for (int ox = 0; ox < out_w; ++ox) {
      const double fx = (ox + 0.5) * sx - 0.5;
      int ix0 = static_cast<int>(std::floor(fx));
      const double wx = fx - ix0;
      int ix1 = std::min(ix0 + 1, w - 1);
      ix0 = std::max(ix0, 0);
      ix1 = std::max(ix1, 0);
      for (int ch = 0; ch < c; ++ch) {
        auto px = [&](int yy, int xx) {
          return static_cast<double>(
              image.data()[(static_cast<size_t>(ch) * ih + y0 + yy) * iw + x0 + xx]);
        };
        const double top = px(iy0, ix0) * (1.0 - wx) + px(iy0, ix1) * wx;
        const double bot = px(iy1, ix0) * (1.0 - wx) + px(iy1, ix1) * wx;
        out[(static_cast<size_t>(ch) * out_h + oy) * out_w + ox] =
            static_cast<float>(top * (1.0 - wy) + bot * wy);
      }
    }
  }
  return Tensor<float>::from_data({c, out_h, out_w}, std::move(out));
}

}  // namespace stp
