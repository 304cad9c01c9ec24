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

#include "dsym/synthdata.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "dsym/errors.hpp"
#include "dsym/rng.hpp"

namespace dsym::synth {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::array<std::string_view, kNumClasses> kClassNames = {
    "crazing", "inclusion", "patches", "pitted_surface", "rolled_in_scale", "scratches"};

// Primitive shapes in pixel coordinates, relative to the defect origin.
struct Segment {
  double x0, y0, x1, y1, thickness;
};
struct Ellipse {
  double cx, cy, a, b, theta;
};
struct ShapeSpec {
  std::vector<Segment> segments;
  std::vector<Ellipse> ellipses;
};

struct Extent {
  double x0 = 1e9, y0 = 1e9, x1 = -1e9, y1 = -1e9;
  void add(double x, double y, double r) {
    x0 = std::min(x0, x - r);
    y0 = std::min(y0, y - r);
    x1 = std::max(x1, x + r);
    y1 = std::max(y1, y + r);
  }
};

Extent extent_of(const ShapeSpec& s) {
  Extent e;
  for (const auto& g : s.segments) {
    e.add(g.x0, g.y0, g.thickness);
    e.add(g.x1, g.y1, g.thickness);
  }
  for (const auto& el : s.ellipses) e.add(el.cx, el.cy, std::max(el.a, el.b));
  return e;
}

void stamp_disk(std::vector<std::uint8_t>& m, int size, double x, double y, double r) {
  const int xi0 = static_cast<int>(std::floor(x - r)), xi1 = static_cast<int>(std::ceil(x + r));
  const int yi0 = static_cast<int>(std::floor(y - r)), yi1 = static_cast<int>(std::ceil(y + r));
  for (int py = yi0; py <= yi1; ++py)
    for (int px = xi0; px <= xi1; ++px) {
      if (px < 0 || py < 0 || px >= size || py >= size) continue;
      const double dx = px + 0.5 - x, dy = py + 0.5 - y;
      if (dx * dx + dy * dy <= r * r) m[static_cast<std::size_t>(py) * size + px] = 1;
    }
}

void render_shape(const ShapeSpec& s, double ox, double oy, int size, std::vector<std::uint8_t>& m) {
  for (const auto& g : s.segments) {
    const double len = std::hypot(g.x1 - g.x0, g.y1 - g.y0);
    const int steps = std::max(1, static_cast<int>(std::ceil(len * 4)));
    // Thickness 1 means the pixel under the stroke center.
    const double r = std::max(0.5, g.thickness / 2.0) + 1e-9;
    for (int i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / steps;
      stamp_disk(m, size, ox + g.x0 + t * (g.x1 - g.x0), oy + g.y0 + t * (g.y1 - g.y0), r);
    }
  }
  for (const auto& el : s.ellipses) {
    const double c = std::cos(el.theta), sn = std::sin(el.theta);
    const double rr = std::max(el.a, el.b);
    const double ex = ox + el.cx, ey = oy + el.cy;
    for (int py = static_cast<int>(std::floor(ey - rr)); py <= static_cast<int>(std::ceil(ey + rr)); ++py)
      for (int px = static_cast<int>(std::floor(ex - rr)); px <= static_cast<int>(std::ceil(ex + rr)); ++px) {
        if (px < 0 || py < 0 || px >= size || py >= size) continue;
        const double dx = px + 0.5 - ex, dy = py + 0.5 - ey;
        const double u = (c * dx + sn * dy) / el.a, v = (-sn * dx + c * dy) / el.b;
        if (u * u + v * v <= 1.0) m[static_cast<std::size_t>(py) * size + px] = 1;
      }
  }
}

ShapeSpec sample_shape(DefectClass cls, Rng& rng, double s) {
  constexpr double kPi = std::numbers::pi;
  ShapeSpec spec;
  switch (cls) {
    case DefectClass::kCrazing: {
      // Random-walk crack with short side branches.
      double x = 0, y = 0, ang = uniform(rng, 0, 2 * kPi);
      const int segs = uniform_int(rng, 3, 5);
      for (int i = 0; i < segs; ++i) {
        ang += uniform(rng, -0.9, 0.9);
        const double len = uniform(rng, 4.0, 8.0) * s;
        const double nx = x + len * std::cos(ang), ny = y + len * std::sin(ang);
        spec.segments.push_back({x, y, nx, ny, 1.0});
        if (uniform(rng, 0, 1) < 0.5) {
          const double bang = ang + (uniform(rng, 0, 1) < 0.5 ? -1 : 1) * uniform(rng, 0.6, 1.4);
          const double blen = uniform(rng, 3.0, 6.0) * s;
          spec.segments.push_back({nx, ny, nx + blen * std::cos(bang), ny + blen * std::sin(bang), 1.0});
        }
        x = nx;
        y = ny;
      }
      break;
    }
    case DefectClass::kInclusion: {
      const double theta = uniform(rng, 0, kPi);
      const double a = uniform(rng, 3.0, 7.0) * s, b = uniform(rng, 1.2, 2.5) * s;
      spec.ellipses.push_back({0, 0, a, b, theta});
      if (uniform(rng, 0, 1) < 0.5) {
        const double off = a * uniform(rng, 0.8, 1.4);
        spec.ellipses.push_back({off * std::cos(theta), off * std::sin(theta), a * uniform(rng, 0.4, 0.8),
                                 b * uniform(rng, 0.6, 1.0), theta + uniform(rng, -0.3, 0.3)});
      }
      break;
    }
    case DefectClass::kPatches: {
      const int n = uniform_int(rng, 2, 4);
      for (int i = 0; i < n; ++i) {
        spec.ellipses.push_back({uniform(rng, -4, 4) * s, uniform(rng, -4, 4) * s, uniform(rng, 3.0, 7.0) * s,
                                 uniform(rng, 3.0, 6.0) * s, uniform(rng, 0, kPi)});
      }
      break;
    }
    case DefectClass::kPittedSurface: {
      const int n = uniform_int(rng, 5, 10);
      const double radius = uniform(rng, 4.0, 8.0) * s;
      for (int i = 0; i < n; ++i) {
        const double r = radius * std::sqrt(uniform(rng, 0, 1)), t = uniform(rng, 0, 2 * kPi);
        const double pr = uniform(rng, 0.8, 1.6) * s;
        spec.ellipses.push_back({r * std::cos(t), r * std::sin(t), pr, pr, 0.0});
      }
      break;
    }
    case DefectClass::kRolledInScale: {
      const int n = uniform_int(rng, 2, 4);
      double y = 0;
      for (int i = 0; i < n; ++i) {
        const double len = uniform(rng, 6.0, 14.0) * s;
        const double x0 = uniform(rng, -3.0, 3.0) * s - len / 2;
        spec.segments.push_back({x0, y, x0 + len, y, uniform(rng, 1.0, 2.0)});
        y += uniform(rng, 2.5, 4.0) * s;
      }
      break;
    }
    case DefectClass::kScratches: {
      // Steep or shallow, never near 45 degrees, so the box stays elongated.
      double deg = uniform(rng, 0, 1) < 0.5 ? uniform(rng, 8.0, 25.0) : uniform(rng, 65.0, 82.0);
      if (uniform(rng, 0, 1) < 0.5) deg = 180.0 - deg;
      const double ang = deg * kPi / 180.0;
      const double len = uniform(rng, 22.0, 38.0) * s;
      const double dx = len / 2 * std::cos(ang), dy = len / 2 * std::sin(ang);
      spec.segments.push_back({-dx, -dy, dx, dy, uniform(rng, 1.0, 2.0)});
      break;
    }
  }
  return spec;
}

struct PixelBox {
  int x0, y0, x1, y1;  // half-open
};

bool tight_box(const std::vector<std::uint8_t>& m, int size, PixelBox& out) {
  out = {size, size, -1, -1};
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      if (m[static_cast<std::size_t>(y) * size + x]) {
        out.x0 = std::min(out.x0, x);
        out.y0 = std::min(out.y0, y);
        out.x1 = std::max(out.x1, x + 1);
        out.y1 = std::max(out.y1, y + 1);
      }
  return out.x1 > 0;
}

bool overlaps(const PixelBox& a, const PixelBox& b, int margin) {
  return a.x0 < b.x1 + margin && b.x0 < a.x1 + margin && a.y0 < b.y1 + margin && b.y0 < a.y1 + margin;
}

double class_contrast(DefectClass c) {
  switch (c) {
    case DefectClass::kCrazing: return -0.28;
    case DefectClass::kInclusion: return -0.30;
    case DefectClass::kPatches: return 0.22;
    case DefectClass::kPittedSurface: return -0.30;
    case DefectClass::kRolledInScale: return -0.22;
    case DefectClass::kScratches: return 0.28;
  }
  return 0.0;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw InvalidArgument("cannot format number");
  return std::string(buf, ptr);
}

void check_size(int size) {
  if (size < 32) throw InvalidArgument("image size must be >= 32, got " + std::to_string(size));
}

}  // namespace

const std::array<DefectClass, kNumClasses>& all_classes() {
  static const std::array<DefectClass, kNumClasses> k = {DefectClass::kCrazing,       DefectClass::kInclusion,
                                                         DefectClass::kPatches,       DefectClass::kPittedSurface,
                                                         DefectClass::kRolledInScale, DefectClass::kScratches};
  return k;
}

std::string_view class_name(DefectClass c) { return kClassNames.at(static_cast<std::size_t>(c)); }

DefectClass class_from_id(int id) {
  if (id < 0 || id >= kNumClasses) throw InvalidArgument("defect class id out of range: " + std::to_string(id));
  return static_cast<DefectClass>(id);
}

DefectClass class_from_name(std::string_view name) {
  for (int i = 0; i < kNumClasses; ++i)
    if (kClassNames[static_cast<std::size_t>(i)] == name) return static_cast<DefectClass>(i);
  throw InvalidArgument("unknown defect class '" + std::string(name) + "'");
}

BBox BBox::from_corners(double x1, double y1, double x2, double y2, int width, int height) {
  return BBox{(x1 + x2) / 2 / width, (y1 + y2) / 2 / height, (x2 - x1) / width, (y2 - y1) / height};
}

bool BBox::valid() const {
  return cx >= 0 && cx <= 1 && cy >= 0 && cy <= 1 && w > 0 && w <= 1 && h > 0 && h <= 1;
}

std::vector<std::uint8_t> ImageSample::annotation_mask(std::size_t k) const {
  const int hgt = image.height, wid = image.width;
  std::vector<std::uint8_t> m(static_cast<std::size_t>(hgt) * wid, 0);
  if (has_mask()) {
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = mask[i] == k + 1 ? 1 : 0;
    return m;
  }
  const BBox& b = annotations.at(k).box;
  const int x0 = std::clamp(static_cast<int>(std::floor(b.x1(wid))), 0, wid);
  const int x1 = std::clamp(static_cast<int>(std::ceil(b.x2(wid))), 0, wid);
  const int y0 = std::clamp(static_cast<int>(std::floor(b.y1(hgt))), 0, hgt);
  const int y1 = std::clamp(static_cast<int>(std::ceil(b.y2(hgt))), 0, hgt);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m[static_cast<std::size_t>(y) * wid + x] = 1;
  return m;
}

std::vector<DefectShape> sample_layout(DefectClass cls, std::uint64_t seed, int size) {
  check_size(size);
  Rng rng(derive_seed(seed, {1}));
  const double s = size / 64.0;
  const int wanted = uniform_int(rng, 1, 3);
  std::vector<DefectShape> out;
  std::vector<PixelBox> taken;
  for (int attempt = 0; attempt < 40 && static_cast<int>(out.size()) < wanted; ++attempt) {
    const ShapeSpec spec = sample_shape(cls, rng, s);
    const Extent e = extent_of(spec);
    // Place the shape so its extent fits with a 1 px margin when possible.
    const double lo_x = 1 - e.x0, hi_x = size - 2 - e.x1;
    const double lo_y = 1 - e.y0, hi_y = size - 2 - e.y1;
    const double ox = lo_x <= hi_x ? uniform(rng, lo_x, hi_x) : size / 2.0 - (e.x0 + e.x1) / 2;
    const double oy = lo_y <= hi_y ? uniform(rng, lo_y, hi_y) : size / 2.0 - (e.y0 + e.y1) / 2;
    std::vector<std::uint8_t> m(static_cast<std::size_t>(size) * size, 0);
    render_shape(spec, ox, oy, size, m);
    PixelBox pb{};
    if (!tight_box(m, size, pb)) continue;
    bool clash = false;
    for (const auto& t : taken) clash = clash || overlaps(pb, t, 2);
    if (clash) continue;
    taken.push_back(pb);
    out.push_back({std::move(m), BBox::from_corners(pb.x0, pb.y0, pb.x1, pb.y1, size, size)});
  }
  return out;
}

Image generate_background(std::uint64_t seed, int size) {
  check_size(size);
  Rng rng(derive_seed(seed, {3}));
  Image img(size, size);
  const double base = uniform(rng, 0.42, 0.58);
  struct Grating {
    double amp, fx, fy, phase;
  };
  std::vector<Grating> gr;
  for (int i = 0; i < 3; ++i) {
    const double f = uniform(rng, 0.05, 0.25) * 64.0 / size, dir = uniform(rng, 0, std::numbers::pi);
    gr.push_back({uniform(rng, 0.01, 0.03), f * std::cos(dir), f * std::sin(dir), uniform(rng, 0, 6.3)});
  }
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double v = base + normal(rng, 0.0, 0.025);
      for (const auto& g : gr) v += g.amp * std::sin(g.fx * x + g.fy * y + g.phase);
      img.at(y, x) = std::clamp(v, 0.0, 1.0);
    }
  return img;
}

ImageSample generate_sample(DefectClass cls, std::uint64_t seed, int size) {
  check_size(size);
  ImageSample out;
  out.image = generate_background(seed, size);
  out.mask.assign(static_cast<std::size_t>(size) * size, 0);
  auto layout = sample_layout(cls, seed, size);
  Rng rng(derive_seed(seed, {2}));
  const double contrast = class_contrast(cls);
  for (std::size_t k = 0; k < layout.size(); ++k) {
    const double delta = contrast * uniform(rng, 0.8, 1.2);
    for (std::size_t i = 0; i < out.mask.size(); ++i) {
      if (!layout[k].mask[i]) continue;
      out.mask[i] = static_cast<std::uint8_t>(k + 1);
      out.image.pixels[i] = std::clamp(out.image.pixels[i] + delta * uniform(rng, 0.85, 1.0), 0.0, 1.0);
    }
    out.annotations.push_back({cls, layout[k].box});
  }
  out.id = std::string(class_name(cls)) + "_" + std::to_string(seed);
  return out;
}

double labeled_fraction(std::size_t labeled, std::size_t unlabeled) {
  const std::size_t total = labeled + unlabeled;
  return total == 0 ? 0.0 : static_cast<double>(labeled) / static_cast<double>(total);
}

DatasetSplit build_splits(SplitCounts per_class, std::uint64_t seed, int size) {
  check_size(size);
  if (per_class.test < 0 || per_class.labeled < 0 || per_class.unlabeled < 0 || per_class.val < 0)
    throw InvalidArgument("split counts must be non-negative");
  DatasetSplit d;
  d.per_class = per_class;
  d.seed = seed;
  d.image_size = size;
  const std::array<int, 4> counts = {per_class.test, per_class.labeled, per_class.unlabeled, per_class.val};
  for (std::size_t si = 0; si < kSplitNames.size(); ++si) {
    auto& dst = split_by_name(d, kSplitNames[si]);
    for (DefectClass c : all_classes()) {
      for (int i = 0; i < counts[si]; ++i) {
        const auto sample_seed = derive_seed(seed, {si, static_cast<std::uint64_t>(class_id(c)),
                                                    static_cast<std::uint64_t>(i)});
        ImageSample s = generate_sample(c, sample_seed, size);
        char idx[16];
        std::snprintf(idx, sizeof idx, "%04d", i);
        s.id = std::string(kSplitNames[si]) + "_" + std::string(class_name(c)) + "_" + idx;
        dst.push_back(std::move(s));
      }
    }
  }
  d.labeled_fraction = labeled_fraction(d.labeled_train.size(), d.unlabeled_train.size());
  return d;
}

DatasetSplit with_labeled_fraction(const DatasetSplit& split, double fraction) {
  if (fraction < 0.0 || fraction > 1.0) throw InvalidArgument("labeled fraction must be in [0,1]");
  DatasetSplit out = split;
  out.labeled_train.clear();
  out.unlabeled_train.clear();
  auto cls_of = [](const ImageSample& s) {
    return s.annotations.empty() ? -1 : class_id(s.annotations.front().cls);
  };
  for (int c = -1; c < kNumClasses; ++c) {
    std::vector<const ImageSample*> pool;
    for (const auto& s : split.labeled_train)
      if (cls_of(s) == c) pool.push_back(&s);
    for (const auto& s : split.unlabeled_train)
      if (cls_of(s) == c) pool.push_back(&s);
    const auto n_lab = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(pool.size())));
    for (std::size_t i = 0; i < pool.size(); ++i) (i < n_lab ? out.labeled_train : out.unlabeled_train).push_back(*pool[i]);
  }
  out.labeled_fraction = labeled_fraction(out.labeled_train.size(), out.unlabeled_train.size());
  return out;
}

std::vector<ImageSample>& split_by_name(DatasetSplit& d, std::string_view name) {
  if (name == "test") return d.test;
  if (name == "labeled") return d.labeled_train;
  if (name == "unlabeled") return d.unlabeled_train;
  if (name == "val") return d.val;
  throw InvalidArgument("unknown split '" + std::string(name) + "'");
}

const std::vector<ImageSample>& split_by_name(const DatasetSplit& d, std::string_view name) {
  return split_by_name(const_cast<DatasetSplit&>(d), name);
}

std::string format_annotation(const Annotation& a) {
  return std::to_string(class_id(a.cls)) + " " + format_double(a.box.cx) + " " + format_double(a.box.cy) + " " +
         format_double(a.box.w) + " " + format_double(a.box.h);
}

Annotation parse_annotation(std::string_view line) {
  std::istringstream is{std::string(line)};
  int cls = -1;
  double v[4];
  if (!(is >> cls >> v[0] >> v[1] >> v[2] >> v[3])) throw InvalidArgument("malformed annotation line '" + std::string(line) + "'");
  std::string rest;
  if (is >> rest) throw InvalidArgument("trailing data in annotation line '" + std::string(line) + "'");
  Annotation a{class_from_id(cls), BBox{v[0], v[1], v[2], v[3]}};
  if (!a.box.valid()) throw InvalidArgument("annotation box out of range in '" + std::string(line) + "'");
  return a;
}

namespace {

void write_sample(const ImageSample& s, const fs::path& dir, std::string_view split) {
  const std::string sp(split);
  write_png((dir / "images" / sp / (s.id + ".png")).string(), to_bytes(s.image));
  const fs::path label = dir / "labels" / sp / (s.id + ".txt");
  std::ofstream os(label);
  if (!os) throw IoError(label.string(), "cannot open for writing");
  for (const auto& a : s.annotations) os << format_annotation(a) << '\n';
  if (!os) throw IoError(label.string(), "write failed");
  if (s.has_mask()) {
    ByteImage m{s.image.height, s.image.width, s.mask};
    write_png((dir / "masks" / sp / (s.id + ".png")).string(), m);
  }
}

ImageSample read_sample(const fs::path& dir, std::string_view split, const std::string& id, int resize_to) {
  const std::string sp(split);
  ImageSample s;
  s.id = id;
  s.image = from_bytes(read_png((dir / "images" / sp / (id + ".png")).string()));
  const fs::path label = dir / "labels" / sp / (id + ".txt");
  std::ifstream is(label);
  if (!is) throw IoError(label.string(), "missing label file");
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      s.annotations.push_back(parse_annotation(line));
    } catch (const InvalidArgument& e) {
      throw IoError(label.string(), "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  const fs::path mask = dir / "masks" / sp / (id + ".png");
  if (fs::exists(mask)) {
    auto m = read_png(mask.string());
    if (m.height != s.image.height || m.width != s.image.width) throw IoError(mask.string(), "mask size mismatch");
    s.mask = std::move(m.bytes);
  }
  if (resize_to > 0 && (s.image.height != resize_to || s.image.width != resize_to)) {
    s.image = resize_bilinear(s.image, resize_to, resize_to);
    s.mask.clear();
  }
  return s;
}

std::vector<std::string> list_ids(const fs::path& image_dir) {
  std::vector<std::string> ids;
  if (!fs::is_directory(image_dir)) throw IoError(image_dir.string(), "missing image directory");
  for (const auto& e : fs::directory_iterator(image_dir))
    if (e.path().extension() == ".png") ids.push_back(e.path().stem().string());
  std::sort(ids.begin(), ids.end());
  return ids;
}

void make_split_dirs(const fs::path& dir, std::string_view split) {
  for (const char* kind : {"images", "labels", "masks"}) fs::create_directories(dir / kind / std::string(split));
}

}  // namespace

void save_dataset(const DatasetSplit& split, const fs::path& dir) {
  json splits = json::object();
  for (auto name : kSplitNames) {
    make_split_dirs(dir, name);
    const auto& samples = split_by_name(split, name);
    for (const auto& s : samples) write_sample(s, dir, name);
    splits[std::string(name)] = samples.size();
  }
  json classes = json::array();
  for (auto c : all_classes()) classes.push_back(std::string(class_name(c)));
  json manifest = {
      {"format", "dsym-dataset/1"},
      {"image_size", split.image_size},
      {"seed", split.seed},
      {"per_class_counts",
       {{"test", split.per_class.test},
        {"labeled", split.per_class.labeled},
        {"unlabeled", split.per_class.unlabeled},
        {"val", split.per_class.val}}},
      {"labeled_fraction", split.labeled_fraction},
      {"content_hash", hash_hex(dataset_hash(split))},
      {"splits", splits},
      {"classes", classes},
  };
  const fs::path mpath = dir / "manifest.json";
  std::ofstream os(mpath);
  if (!os) throw IoError(mpath.string(), "cannot open for writing");
  os << manifest.dump(2) << '\n';
}

DatasetSplit load_dataset(const fs::path& dir, int resize_to) {
  const fs::path mpath = dir / "manifest.json";
  std::ifstream is(mpath);
  if (!is) throw IoError(mpath.string(), "missing manifest");
  json manifest;
  try {
    is >> manifest;
  } catch (const json::exception& e) {
    throw IoError(mpath.string(), std::string("corrupt manifest: ") + e.what());
  }
  DatasetSplit d;
  try {
    d.image_size = manifest.at("image_size").get<int>();
    d.seed = manifest.at("seed").get<std::uint64_t>();
    const auto& pc = manifest.at("per_class_counts");
    d.per_class = {pc.at("test").get<int>(), pc.at("labeled").get<int>(), pc.at("unlabeled").get<int>(),
                   pc.at("val").get<int>()};
  } catch (const json::exception& e) {
    throw IoError(mpath.string(), std::string("manifest field error: ") + e.what());
  }
  if (resize_to > 0) d.image_size = resize_to;
  for (auto name : kSplitNames) {
    auto& dst = split_by_name(d, name);
    const fs::path idir = dir / "images" / std::string(name);
    if (!fs::exists(idir)) continue;
    for (const auto& id : list_ids(idir)) dst.push_back(read_sample(dir, name, id, resize_to));
  }
  d.labeled_fraction = labeled_fraction(d.labeled_train.size(), d.unlabeled_train.size());
  return d;
}

void save_samples(const std::vector<ImageSample>& samples, const fs::path& dir, std::string_view name) {
  make_split_dirs(dir, name);
  for (const auto& s : samples) write_sample(s, dir, name);
}

std::vector<ImageSample> load_samples(const fs::path& dir, std::string_view name, int resize_to) {
  std::vector<ImageSample> out;
  for (const auto& id : list_ids(dir / "images" / std::string(name))) out.push_back(read_sample(dir, name, id, resize_to));
  return out;
}

std::uint64_t content_hash(const ImageSample& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto b : to_bytes(s.image).bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t dataset_hash(const DatasetSplit& split) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::string_view bytes) {
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 1099511628211ULL;
    }
  };
  for (auto name : kSplitNames) {
    mix(name);
    for (const auto& s : split_by_name(split, name)) {
      mix(s.id);
      const std::uint64_t c = content_hash(s);
      mix(std::string_view(reinterpret_cast<const char*>(&c), sizeof c));
      for (const auto& a : s.annotations) mix(format_annotation(a));
    }
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dsym::synth
