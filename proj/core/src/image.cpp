// Copyright 2026 The DSYM Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "dsym/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "dsym/errors.hpp"

namespace dsym {

ByteImage to_bytes(const Image& img) {
  ByteImage out{img.height, img.width, std::vector<std::uint8_t>(img.pixels.size())};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double v = std::clamp(img.pixels[i], 0.0, 1.0);
    out.bytes[i] = static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
  }
  return out;
}

Image from_bytes(const ByteImage& img) {
  Image out(img.height, img.width);
  for (std::size_t i = 0; i < img.bytes.size(); ++i) out.pixels[i] = img.bytes[i] / 255.0;
  return out;
}

void write_png(const std::string& path, const ByteImage& img) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, img.bytes.data(), img.width, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IoError(path, "PNG write failed: " + msg);
  }
}

ByteImage read_png(const std::string& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError(path, std::string("cannot read PNG: ") + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  ByteImage out{static_cast<int>(image.height), static_cast<int>(image.width), {}};
  out.bytes.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.bytes.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IoError(path, "corrupt PNG: " + msg);
  }
  return out;
}

Image resize_bilinear(const Image& src, int height, int width) {
  if (height <= 0 || width <= 0 || src.height <= 0 || src.width <= 0)
    throw InvalidArgument("resize_bilinear: empty image or target");
  Image out(height, width);
  const double sy = static_cast<double>(src.height) / height;
  const double sx = static_cast<double>(src.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      out.at(y, x) = (1 - wy) * ((1 - wx) * src.at(y0, x0) + wx * src.at(y0, x1)) +
                     wy * ((1 - wx) * src.at(y1, x0) + wx * src.at(y1, x1));
    }
  }
  return out;
}

Image crop(const Image& src, int x0, int y0, int x1, int y1) {
  if (x1 <= x0 || y1 <= y0) throw InvalidArgument("crop: empty window");
  Image out(y1 - y0, x1 - x0);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x)
      out.at(y - y0, x - x0) = src.at(std::clamp(y, 0, src.height - 1), std::clamp(x, 0, src.width - 1));
  return out;
}

}  // namespace dsym
