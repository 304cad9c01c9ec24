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

// Static SVG charts for run reports. Output is a pure function of the
// inputs so reports diff cleanly between reruns.

#pragma once

#include <optional>
#include <string>
#include <vector>

namespace dsym::plot {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;  ///< same length as x
};

struct Axes {
  std::string title;
  std::string x_label;
  std::string y_label;
  /// Fixed y range; when unset the range covers the data.
  std::optional<double> y_min;
  std::optional<double> y_max;
};

/// One polyline per series plus a legend. Throws InvalidArgument when a
/// series has mismatched x/y lengths.
std::string line_chart(const Axes& axes, const std::vector<Series>& series);

/// Bars in the given order; missing values are drawn as an "n/a" label.
/// Throws InvalidArgument when labels and values differ in length.
std::string bar_chart(const Axes& axes, const std::vector<std::string>& labels,
                      const std::vector<std::optional<double>>& values);

/// Escapes &, <, >, " for SVG and HTML text.
std::string xml_escape(const std::string& s);

}  // namespace dsym::plot
