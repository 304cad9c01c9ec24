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

// Procedural six-class steel-surface defect dataset.
//
// Every image carries defects of exactly one class (as in NEU-DET). Each
// defect is rasterized into a label mask first; its box is the tight
// bounding box of that mask, so mask support always lies inside the box.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dsym/image.hpp"

namespace dsym::synth {

enum class DefectClass : int {
  kCrazing = 0,
  kInclusion = 1,
  kPatches = 2,
  kPittedSurface = 3,
  kRolledInScale = 4,
  kScratches = 5,
};

inline constexpr int kNumClasses = 6;
inline constexpr int kDefaultImageSize = 64;

const std::array<DefectClass, kNumClasses>& all_classes();
std::string_view class_name(DefectClass c);
DefectClass class_from_id(int id);
DefectClass class_from_name(std::string_view name);
inline int class_id(DefectClass c) { return static_cast<int>(c); }

/// Box in normalized image coordinates (fractions of the image side).
struct BBox {
  double cx = 0.5, cy = 0.5, w = 0.0, h = 0.0;

  /// From pixel corners [x1,x2) x [y1,y2).
  static BBox from_corners(double x1, double y1, double x2, double y2, int width, int height);
  double x1(int width) const { return (cx - w / 2) * width; }
  double y1(int height) const { return (cy - h / 2) * height; }
  double x2(int width) const { return (cx + w / 2) * width; }
  double y2(int height) const { return (cy + h / 2) * height; }
  /// True if the box satisfies 0<=cx,cy<=1 and 0<w,h<=1.
  bool valid() const;
  bool operator==(const BBox&) const = default;
};

struct Annotation {
  DefectClass cls = DefectClass::kCrazing;
  BBox box;
  bool operator==(const Annotation&) const = default;
};

struct ImageSample {
  std::string id;
  Image image;
  std::vector<Annotation> annotations;
  /// Label map, H*W: 0 = background, k = pixel of annotation k-1. Empty when
  /// no mask is known (e.g. imported data without masks).
  std::vector<std::uint8_t> mask;

  bool has_mask() const { return !mask.empty(); }
  /// Binary H*W mask of a single annotation. Falls back to the filled box
  /// when no label map is present.
  std::vector<std::uint8_t> annotation_mask(std::size_t k) const;
};

/// One defect placement: binary mask (H*W) and its tight box.
struct DefectShape {
  std::vector<std::uint8_t> mask;
  BBox box;
};

/// Samples 1-3 non-overlapping defect shapes of class `cls` with the same
/// priors generate_sample() uses, without rendering any intensities.
std::vector<DefectShape> sample_layout(DefectClass cls, std::uint64_t seed, int size);

/// Textured background plus 1-3 rendered defects. Pure function of its
/// arguments. Throws InvalidArgument if size < 32.
ImageSample generate_sample(DefectClass cls, std::uint64_t seed, int size = kDefaultImageSize);

/// Textured defect-free background (what generate_sample() draws under its
/// defects).
Image generate_background(std::uint64_t seed, int size);

struct SplitCounts {
  int test = 10;
  int labeled = 20;
  int unlabeled = 80;
  int val = 4;
  bool operator==(const SplitCounts&) const = default;
};

struct DatasetSplit {
  std::vector<ImageSample> test;
  std::vector<ImageSample> labeled_train;
  std::vector<ImageSample> unlabeled_train;
  std::vector<ImageSample> val;
  double labeled_fraction = 0.0;
  SplitCounts per_class;
  std::uint64_t seed = 0;
  int image_size = kDefaultImageSize;
};

/// |labeled| / (|labeled| + |unlabeled|), with 0/0 reported as 0.
double labeled_fraction(std::size_t labeled, std::size_t unlabeled);

DatasetSplit build_splits(SplitCounts per_class, std::uint64_t seed, int size = kDefaultImageSize);

/// Moves whole per-class blocks from unlabeled to labeled until the labeled
/// share reaches `fraction` (rounded to a per-class count). Used by the
/// annotation-ratio sweep.
DatasetSplit with_labeled_fraction(const DatasetSplit& split, double fraction);

/// Split names used on disk: test, labeled, unlabeled, val.
inline constexpr std::array<std::string_view, 4> kSplitNames = {"test", "labeled", "unlabeled", "val"};
std::vector<ImageSample>& split_by_name(DatasetSplit& d, std::string_view name);
const std::vector<ImageSample>& split_by_name(const DatasetSplit& d, std::string_view name);

/// Label file line: "class_id cx cy w h".
std::string format_annotation(const Annotation& a);
Annotation parse_annotation(std::string_view line);

/// Writes images/{split}/{id}.png, labels/{split}/{id}.txt, masks/{split}/{id}.png
/// and manifest.json.
void save_dataset(const DatasetSplit& split, const std::filesystem::path& dir);
/// Reads the layout written by save_dataset(). Mask files are optional.
/// If `resize_to` > 0 images are resampled to that square size (boxes are
/// normalized and need no change; masks are dropped).
DatasetSplit load_dataset(const std::filesystem::path& dir, int resize_to = 0);

/// Writes a flat list of samples as a single split directory
/// (images/{name}/..., labels/{name}/...), used for synthesized sets.
void save_samples(const std::vector<ImageSample>& samples, const std::filesystem::path& dir, std::string_view name);
std::vector<ImageSample> load_samples(const std::filesystem::path& dir, std::string_view name, int resize_to = 0);

/// FNV-1a over quantized pixels; used for split-disjointness audits.
std::uint64_t content_hash(const ImageSample& s);

/// FNV-1a over every split's ids, pixels and labels, in split order.
std::uint64_t dataset_hash(const DatasetSplit& split);

/// 16 lowercase hex digits.
std::string hash_hex(std::uint64_t h);

}  // namespace dsym::synth
