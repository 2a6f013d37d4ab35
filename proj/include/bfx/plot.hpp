#pragma once

// Static line plots rendered with OpenCV drawing primitives.

#include <opencv2/core.hpp>

#include <string>
#include <vector>

namespace bfx {

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  cv::Size size{800, 500};
};

/// BGR CV_8UC3 chart with axes, tick labels and a legend. Non-finite points are skipped.
cv::Mat render_line_plot(const std::vector<PlotSeries>& series, const PlotSpec& spec);

}  // namespace bfx
