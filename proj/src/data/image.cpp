#include "bicap/image.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include "bicap/errors.hpp"

namespace bicap::image {

namespace {

struct Chw {
  std::size_t c, h, w;
};

Chw geometry(const Tensor& img, const char* op) {
  if (img.rank() == 2) return {1, img.dim(0), img.dim(1)};
  if (img.rank() != 3) throw DimensionError(std::string(op) + ": expected [C,H,W], got " + shape_str(img.shape()));
  return {img.dim(0), img.dim(1), img.dim(2)};
}

std::vector<float> as_floats(const Tensor& img) {
  if (img.dtype() == DType::f32) {
    auto d = img.data<float>();
    return {d.begin(), d.end()};
  }
  auto v = img.to_vector();
  return {v.begin(), v.end()};
}

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

double cubic(double x) {
  constexpr double a = -0.75;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2) * x - (a + 3)) * x * x + 1;
  if (x < 2.0) return ((a * x - 5 * a) * x + 8 * a) * x - 4 * a;
  return 0.0;
}

}  // namespace

Tensor load_png(const std::string& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IngestError("cannot decode PNG " + path + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&png);
    throw IngestError("cannot decode PNG " + path + ": " + png.message);
  }
  const std::size_t h = png.height, w = png.width;
  std::vector<float> chw(3 * h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) chw[(c * h + y) * w + x] = buffer[(y * w + x) * 3 + c] / 255.0f;
    }
  }
  return Tensor::from_buffer<float>({3, h, w}, std::move(chw));
}

void save_png(const std::string& path, const Tensor& img) {
  const auto [c, h, w] = geometry(img, "save_png");
  if (c != 1 && c != 3) throw DimensionError("save_png: need 1 or 3 channels, got " + std::to_string(c));
  const auto v = as_floats(img);
  std::vector<png_byte> buffer(c * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) buffer[(y * w + x) * c + k] = to_byte(v[(k * h + y) * w + x]);
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(w);
  png.height = static_cast<png_uint_32>(h);
  png.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw IngestError("cannot write PNG " + path + ": " + png.message);
  }
}

void save_ppm(const std::string& path, const Tensor& img) {
  const auto [c, h, w] = geometry(img, "save_ppm");
  if (c != 1 && c != 3) throw DimensionError("save_ppm: need 1 or 3 channels, got " + std::to_string(c));
  const auto v = as_floats(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IngestError("cannot open " + path + " for writing");
  f << (c == 3 ? "P6" : "P5") << '\n' << w << ' ' << h << "\n255\n";
  std::vector<char> buffer(c * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k)
        buffer[(y * w + x) * c + k] = static_cast<char>(to_byte(v[(k * h + y) * w + x]));
  f.write(buffer.data(), static_cast<std::streamsize>(buffer.size()));
  if (!f) throw IngestError("failed writing " + path);
}

Tensor load(const std::string& path) {
  auto ends_with = [&](std::string_view s) {
    return path.size() >= s.size() && std::equal(s.rbegin(), s.rend(), path.rbegin(),
                                                 [](char a, char b) { return a == std::tolower(b); });
  };
  if (ends_with(".png")) return load_png(path);
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IngestError("cannot open image " + path);
  Tensor t = read_tensor(f).to(DType::f32);
  if (t.rank() != 3) throw IngestError("raw image " + path + " has shape " + shape_str(t.shape()));
  return t;
}

Tensor resize_bilinear(const Tensor& img, std::size_t out_h, std::size_t out_w) {
  const auto [c, h, w] = geometry(img, "resize_bilinear");
  if (out_h == 0 || out_w == 0 || h == 0 || w == 0) throw DimensionError("resize_bilinear: empty size");
  const auto src = as_floats(img);
  std::vector<float> out(c * out_h * out_w);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const double fy = std::max(0.0, (static_cast<double>(oy) + 0.5) * sy - 0.5);
    const std::size_t y0 = std::min(static_cast<std::size_t>(fy), h - 1), y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const double fx = std::max(0.0, (static_cast<double>(ox) + 0.5) * sx - 0.5);
      const std::size_t x0 = std::min(static_cast<std::size_t>(fx), w - 1), x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t k = 0; k < c; ++k) {
        const float* p = src.data() + k * h * w;
        const double top = p[y0 * w + x0] * (1 - wx) + p[y0 * w + x1] * wx;
        const double bot = p[y1 * w + x0] * (1 - wx) + p[y1 * w + x1] * wx;
        out[(k * out_h + oy) * out_w + ox] = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  Shape shape = img.rank() == 2 ? Shape{out_h, out_w} : Shape{c, out_h, out_w};
  return Tensor::from_buffer<float>(shape, std::move(out));
}

Tensor resize_bicubic(const Tensor& img, std::size_t out_h, std::size_t out_w) {
  const auto [c, h, w] = geometry(img, "resize_bicubic");
  if (out_h == 0 || out_w == 0 || h == 0 || w == 0) throw DimensionError("resize_bicubic: empty size");
  const auto src = as_floats(img);
  auto taps = [](std::size_t out, std::size_t in, std::size_t o, std::array<std::size_t, 4>& idx,
                 std::array<double, 4>& wt) {
    const double f = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    const double base = std::floor(f);
    const double t = f - base;
    for (int k = 0; k < 4; ++k) {
      const auto i = static_cast<long>(base) - 1 + k;
      idx[static_cast<std::size_t>(k)] = static_cast<std::size_t>(std::clamp<long>(i, 0, static_cast<long>(in) - 1));
      wt[static_cast<std::size_t>(k)] = cubic(t - (k - 1));
    }
  };
  std::vector<float> out(c * out_h * out_w);
  std::array<std::size_t, 4> yi{}, xi{};
  std::array<double, 4> yw{}, xw{};
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    taps(out_h, h, oy, yi, yw);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      taps(out_w, w, ox, xi, xw);
      for (std::size_t k = 0; k < c; ++k) {
        const float* p = src.data() + k * h * w;
        double acc = 0.0;
        for (std::size_t a = 0; a < 4; ++a)
          for (std::size_t b = 0; b < 4; ++b) acc += yw[a] * xw[b] * p[yi[a] * w + xi[b]];
        out[(k * out_h + oy) * out_w + ox] = static_cast<float>(acc);
      }
    }
  }
  Shape shape = img.rank() == 2 ? Shape{out_h, out_w} : Shape{c, out_h, out_w};
  return Tensor::from_buffer<float>(shape, std::move(out));
}

Tensor crop(const Tensor& img, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  const auto [c, h, w] = geometry(img, "crop");
  if (height == 0 || width == 0 || top + height > h || left + width > w) {
    throw DimensionError("crop: window outside image " + shape_str(img.shape()));
  }
  const auto src = as_floats(img);
  std::vector<float> out(c * height * width);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t y = 0; y < height; ++y)
      std::copy_n(src.data() + (k * h + top + y) * w + left, width, out.data() + (k * height + y) * width);
  return Tensor::from_buffer<float>({c, height, width}, std::move(out));
}

Tensor hflip(const Tensor& img) {
  const auto [c, h, w] = geometry(img, "hflip");
  auto out = as_floats(img);
  for (std::size_t r = 0; r < c * h; ++r) std::reverse(out.begin() + static_cast<long>(r * w), out.begin() + static_cast<long>((r + 1) * w));
  return Tensor::from_buffer<float>(img.shape(), std::move(out));
}

Tensor clamp01(const Tensor& img) {
  auto v = as_floats(img);
  for (auto& x : v) x = std::clamp(x, 0.0f, 1.0f);
  return Tensor::from_buffer<float>(img.shape(), std::move(v));
}

}  // namespace bicap::image
