// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

namespace rbwp::cli {

struct Series {
  std::string label;
  std::vector<std::optional<double>> y;  // one value per step; gaps allowed
};

/// Standalone SVG line chart with x = 1..n, axis ticks and a legend.
std::string line_chart_svg(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series);

}  // namespace rbwp::cli
