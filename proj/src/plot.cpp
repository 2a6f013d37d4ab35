#include "bfx/plot.hpp"

#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace bfx {

namespace {

const std::vector<cv::Scalar> kPalette = {{180, 119, 31}, {14, 127, 255}, {44, 160, 44},  {40, 39, 214},
                                          {189, 103, 148}, {75, 86, 140}, {194, 119, 227}, {127, 127, 127}};

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

}  // namespace

cv::Mat render_line_plot(const std::vector<PlotSeries>& series, const PlotSpec& spec) {
  cv::Mat img(spec.size, CV_8UC3, cv::Scalar::all(255));
  const int left = 80;
  const int right = 20;
  const int top = 40;
  const int bottom = 60;
  const cv::Rect area(left, top, spec.size.width - left - right, spec.size.height - top - bottom);

  double x0 = std::numeric_limits<double>::infinity();
  double x1 = -x0;
  double y0 = x0;
  double y1 = -x0;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) {
    x0 = 0;
    x1 = 1;
    y0 = 0;
    y1 = 1;
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  const double pad = (y1 - y0) * 0.05;
  y0 -= pad;
  y1 += pad;

  auto to_px = [&](double x, double y) {
    return cv::Point(area.x + static_cast<int>(std::lround((x - x0) / (x1 - x0) * area.width)),
                     area.y + area.height - static_cast<int>(std::lround((y - y0) / (y1 - y0) * area.height)));
  };

  const auto font = cv::FONT_HERSHEY_SIMPLEX;
  const cv::Scalar ink(40, 40, 40);
  const cv::Scalar grid(225, 225, 225);
  for (int k = 0; k <= 5; ++k) {
    const double fy = y0 + (y1 - y0) * k / 5.0;
    const double fx = x0 + (x1 - x0) * k / 5.0;
    const auto py = to_px(x0, fy).y;
    const auto px = to_px(fx, y0).x;
    cv::line(img, {area.x, py}, {area.x + area.width, py}, grid, 1);
    cv::line(img, {px, area.y}, {px, area.y + area.height}, grid, 1);
    cv::putText(img, tick_label(fy), {5, py + 4}, font, 0.4, ink, 1, cv::LINE_AA);
    cv::putText(img, tick_label(fx), {px - 12, area.y + area.height + 18}, font, 0.4, ink, 1, cv::LINE_AA);
  }
  cv::rectangle(img, area, ink, 1);
  cv::putText(img, spec.title, {area.x, 25}, font, 0.6, ink, 1, cv::LINE_AA);
  cv::putText(img, spec.x_label, {area.x + area.width / 2 - 30, spec.size.height - 15}, font, 0.5, ink, 1,
              cv::LINE_AA);
  cv::putText(img, spec.y_label, {5, top - 10}, font, 0.45, ink, 1, cv::LINE_AA);

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const auto color = kPalette[k % kPalette.size()];
    std::vector<cv::Point> pts;
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) pts.push_back(to_px(s.x[i], s.y[i]));
    }
    if (pts.size() > 1) cv::polylines(img, pts, false, color, 2, cv::LINE_AA);
    for (const auto& p : pts) cv::circle(img, p, 2, color, cv::FILLED, cv::LINE_AA);
    const cv::Point legend(area.x + area.width - 220, area.y + 18 + static_cast<int>(k) * 18);
    cv::line(img, legend, legend + cv::Point(20, 0), color, 2, cv::LINE_AA);
    cv::putText(img, s.label, legend + cv::Point(26, 4), font, 0.45, ink, 1, cv::LINE_AA);
  }
  return img;
}

}  // namespace bfx
