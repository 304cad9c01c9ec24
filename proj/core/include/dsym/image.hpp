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

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dsym {

/// Grayscale image, row-major, values nominally in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, double fill = 0.0) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  double& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  bool operator==(const Image&) const = default;
};

/// 8-bit grayscale raster, used for PNG storage and label masks.
struct ByteImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bytes;
};

/// Quantizes to bytes with round-half-up: v -> round(clamp(v,0,1) * 255).
ByteImage to_bytes(const Image& img);
Image from_bytes(const ByteImage& img);

void write_png(const std::string& path, const ByteImage& img);
ByteImage read_png(const std::string& path);

/// Bilinear resample (align-corners=false convention).
Image resize_bilinear(const Image& src, int height, int width);

/// Crops [x0,x1) x [y0,y1); outside the source the nearest edge pixel is replicated.
Image crop(const Image& src, int x0, int y0, int x1, int y1);

}  // namespace dsym
