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

#include "dsym/plot.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>

#include "dsym/errors.hpp"

namespace dsym::plot {

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 64, kRight = 170, kTop = 40, kBottom = 56;
constexpr std::array<const char*, 8> kPalette = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                                 "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (kWidth - kLeft - kRight); }
  double py(double y) const { return kHeight - kBottom - (y - y0) / (y1 - y0) * (kHeight - kTop - kBottom); }
};

void widen(double& lo, double& hi) {
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
}

std::string header(const Axes& axes) {
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kWidth) + "\" height=\"" + num(kHeight) +
                  "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + num(kWidth / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" +
       xml_escape(axes.title) + "</text>\n";
  s += "<text x=\"" + num(kLeft + (kWidth - kLeft - kRight) / 2) + "\" y=\"" + num(kHeight - 12) +
       "\" text-anchor=\"middle\">" + xml_escape(axes.x_label) + "</text>\n";
  s += "<text transform=\"translate(16," + num(kTop + (kHeight - kTop - kBottom) / 2) +
       ") rotate(-90)\" text-anchor=\"middle\">" + xml_escape(axes.y_label) + "</text>\n";
  return s;
}

std::string y_axis(const Frame& f) {
  std::string s;
  for (int i = 0; i <= 4; ++i) {
    const double v = f.y0 + (f.y1 - f.y0) * i / 4.0;
    const double y = f.py(v);
    s += "<line x1=\"" + num(kLeft) + "\" y1=\"" + num(y) + "\" x2=\"" + num(kWidth - kRight) + "\" y2=\"" + num(y) +
         "\" stroke=\"#ddd\"/>\n";
    s += "<text x=\"" + num(kLeft - 6) + "\" y=\"" + num(y + 4) + "\" text-anchor=\"end\">" + tick(v) + "</text>\n";
  }
  s += "<line x1=\"" + num(kLeft) + "\" y1=\"" + num(kTop) + "\" x2=\"" + num(kLeft) + "\" y2=\"" +
       num(kHeight - kBottom) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(kLeft) + "\" y1=\"" + num(kHeight - kBottom) + "\" x2=\"" + num(kWidth - kRight) +
       "\" y2=\"" + num(kHeight - kBottom) + "\" stroke=\"black\"/>\n";
  return s;
}

}  // namespace

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string line_chart(const Axes& axes, const std::vector<Series>& series) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw InvalidArgument("line_chart: series '" + s.label + "' has x/y mismatch");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (axes.y_min) y0 = *axes.y_min;
  if (axes.y_max) y1 = *axes.y_max;
  widen(x0, x1);
  widen(y0, y1);
  const Frame f{x0, x1, y0, y1};

  std::string s = header(axes) + y_axis(f);
  for (int i = 0; i <= 4; ++i) {
    const double v = x0 + (x1 - x0) * i / 4.0;
    s += "<text x=\"" + num(f.px(v)) + "\" y=\"" + num(kHeight - kBottom + 16) + "\" text-anchor=\"middle\">" +
         tick(v) + "</text>\n";
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* color = kPalette[k % kPalette.size()];
    s += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < series[k].x.size(); ++i) {
      if (i) s += ' ';
      s += num(f.px(series[k].x[i])) + "," + num(f.py(std::clamp(series[k].y[i], y0, y1)));
    }
    s += "\"/>\n";
    const double ly = kTop + 16.0 * static_cast<double>(k);
    s += "<rect x=\"" + num(kWidth - kRight + 12) + "\" y=\"" + num(ly) + "\" width=\"12\" height=\"3\" fill=\"" +
         color + "\"/>\n";
    s += "<text x=\"" + num(kWidth - kRight + 30) + "\" y=\"" + num(ly + 5) + "\">" + xml_escape(series[k].label) +
         "</text>\n";
  }
  return s + "</svg>\n";
}

std::string bar_chart(const Axes& axes, const std::vector<std::string>& labels,
                      const std::vector<std::optional<double>>& values) {
  if (labels.size() != values.size()) throw InvalidArgument("bar_chart: labels and values differ in length");
  double y0 = 0.0, y1 = 0.0;
  for (const auto& v : values)
    if (v) y1 = std::max(y1, *v);
  if (axes.y_min) y0 = *axes.y_min;
  if (axes.y_max) y1 = *axes.y_max;
  widen(y0, y1);
  const double n = std::max<double>(1.0, static_cast<double>(labels.size()));
  const Frame f{0.0, n, y0, y1};
  std::string s = header(axes) + y_axis(f);
  const double slot = (kWidth - kLeft - kRight) / n;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double cx = f.px(static_cast<double>(i) + 0.5);
    if (values[i]) {
      const double top = f.py(std::clamp(*values[i], y0, y1));
      s += "<rect x=\"" + num(cx - slot * 0.35) + "\" y=\"" + num(top) + "\" width=\"" + num(slot * 0.7) +
           "\" height=\"" + num(f.py(y0) - top) + "\" fill=\"" + kPalette[0] + "\"/>\n";
      s += "<text x=\"" + num(cx) + "\" y=\"" + num(top - 4) + "\" text-anchor=\"middle\">" + tick(*values[i]) +
           "</text>\n";
    } else {
      s += "<text x=\"" + num(cx) + "\" y=\"" + num(f.py(y0) - 4) + "\" text-anchor=\"middle\">n/a</text>\n";
    }
    s += "<text class=\"bar-label\" x=\"" + num(cx) + "\" y=\"" + num(kHeight - kBottom + 16) +
         "\" text-anchor=\"middle\">" + xml_escape(labels[i]) + "</text>\n";
  }
  return s + "</svg>\n";
}

}  // namespace dsym::plot
