#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "ffecg/tensor.hpp"

namespace ffecg {

/// Interleaved 8-bit image, 1 (grey) or 3 (RGB) channels.
struct Image8 {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
};

inline Image8 read_png(const std::filesystem::path& path, int want_channels = 0) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw DecodeError("data", path.string(), img.message);
  const bool gray = want_channels == 1 || (want_channels == 0 && !(img.format & PNG_FORMAT_FLAG_COLOR));
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image8 out;
  out.width = static_cast<int>(img.width);
  out.height = static_cast<int>(img.height);
  out.channels = gray ? 1 : 3;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string why = img.message;
    png_image_free(&img);
    throw DecodeError("data", path.string(), why);
  }
  return out;
}

inline void write_png(const std::filesystem::path& path, const Image8& im) {
  if (im.channels != 1 && im.channels != 3) throw IoError("data", "PNG writer supports 1 or 3 channels");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = im.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, im.pixels.data(), 0, nullptr))
    throw IoError("data", "cannot write '" + path.string() + "': " + img.message);
}

inline std::uint8_t to_byte(double v01) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v01, 0.0, 1.0) * 255.0));
}

/// Image8 -> (1, 3, H, W) in [-1, 1]; grey images are replicated to 3 channels.
inline Tensor<float> image_to_tensor(const Image8& im) {
  Tensor<float> t(Shape{1, 3, im.height, im.width});
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const int src = im.channels == 1 ? 0 : c;
        const auto b = im.pixels[(static_cast<std::size_t>(y) * im.width + x) * im.channels + src];
        t.at(0, c, y, x) = static_cast<float>(b) / 255.0f * 2.0f - 1.0f;
      }
  return t;
}

/// Sample `n` of a [-1, 1] batch -> 8-bit image. With `gray` the channels are averaged.
template <class T>
Image8 tensor_to_image(const Tensor<T>& t, int n, bool gray) {
  Image8 im{t.w(), t.h(), gray ? 1 : 3, {}};
  im.pixels.resize(static_cast<std::size_t>(im.width) * im.height * im.channels);
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x) {
      const std::size_t o = (static_cast<std::size_t>(y) * im.width + x) * im.channels;
      if (gray) {
        double s = 0;
        for (int c = 0; c < t.c(); ++c) s += t.at(n, c, y, x);
        im.pixels[o] = to_byte((s / t.c() + 1.0) / 2.0);
      } else {
        for (int c = 0; c < 3; ++c) im.pixels[o + c] = to_byte((t.at(n, std::min(c, t.c() - 1), y, x) + 1.0) / 2.0);
      }
    }
  return im;
}

}  // namespace ffecg
