#include "bfx/fusion.hpp"

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <unordered_map>

#include "bfx/error.hpp"

namespace fs = std::filesystem;

namespace bfx {

// ---------------------------------------------------------------------------
// ProbabilityMask

ProbabilityMask::ProbabilityMask(cv::Mat probs, double tol) : probs_(std::move(probs)) {
  if (probs_.type() != CV_32FC2) throw InvalidArgument("probability mask must be CV_32FC2");
  for (int r = 0; r < probs_.rows; ++r) {
    const auto* row = probs_.ptr<cv::Vec2f>(r);
    for (int c = 0; c < probs_.cols; ++c) {
      const float p0 = row[c][0];
      const float p1 = row[c][1];
      if (!(p0 >= 0.F && p0 <= 1.F && p1 >= 0.F && p1 <= 1.F)) {
        throw InvalidArgument("probability mask: value outside [0, 1] at (" + std::to_string(r) + ", " +
                              std::to_string(c) + ")");
      }
      if (std::abs(static_cast<double>(p0) + p1 - 1.0) > tol) {
        throw InvalidArgument("probability mask: channels do not sum to 1 at (" + std::to_string(r) + ", " +
                              std::to_string(c) + ")");
      }
    }
  }
}

ProbabilityMask ProbabilityMask::from_building(const cv::Mat& building) {
  if (building.type() != CV_32FC1) throw InvalidArgument("building probability must be CV_32FC1");
  cv::Mat probs(building.size(), CV_32FC2);
  for (int r = 0; r < building.rows; ++r) {
    const auto* src = building.ptr<float>(r);
    auto* dst = probs.ptr<cv::Vec2f>(r);
    for (int c = 0; c < building.cols; ++c) dst[c] = {1.F - src[c], src[c]};
  }
  return ProbabilityMask(std::move(probs));
}

cv::Mat ProbabilityMask::building() const {
  cv::Mat out;
  cv::extractChannel(probs_, out, 1);
  return out;
}

// ---------------------------------------------------------------------------
// Ensemble

ProbabilityMask ensemble_merge(std::span<const ProbabilityMask> masks) {
  if (masks.empty()) throw InvalidArgument("ensemble_merge: no members");
  const auto size = masks.front().size();
  for (std::size_t m = 1; m < masks.size(); ++m) {
    if (masks[m].size() != size) {
      throw InvalidArgument("ensemble_merge: member " + std::to_string(m) + " has shape " +
                            std::to_string(masks[m].rows()) + "x" + std::to_string(masks[m].cols()) +
                            ", expected " + std::to_string(size.height) + "x" + std::to_string(size.width));
    }
  }
  cv::Mat out(size, CV_32FC2);
  for (int r = 0; r < size.height; ++r) {
    auto* dst = out.ptr<cv::Vec2f>(r);
    for (int c = 0; c < size.width; ++c) {
      const cv::Vec2f* best = &masks[0].probs().ptr<cv::Vec2f>(r)[c];
      float best_conf = std::max((*best)[0], (*best)[1]);
      for (std::size_t m = 1; m < masks.size(); ++m) {
        const cv::Vec2f* p = &masks[m].probs().ptr<cv::Vec2f>(r)[c];
        const float conf = std::max((*p)[0], (*p)[1]);
        if (conf > best_conf) {  // strict: ties keep the lower index
          best = p;
          best_conf = conf;
        }
      }
      dst[c] = *best;
    }
  }
  return ProbabilityMask(std::move(out), 1.0);
}

cv::Mat confidence_threshold(const ProbabilityMask& merged, double threshold) {
  if (!(threshold > 0.5 && threshold <= 1.0)) throw InvalidArgument("threshold must lie in (0.5, 1]");
  cv::Mat out(merged.size(), CV_8UC1);
  for (int r = 0; r < merged.rows(); ++r) {
    const auto* src = merged.probs().ptr<cv::Vec2f>(r);
    auto* dst = out.ptr<std::uint8_t>(r);
    for (int c = 0; c < merged.cols(); ++c) {
      dst[c] = static_cast<double>(src[c][1]) >= threshold ? 1 : 0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Classical segmentation

SegmentMethod segment_method_from_string(const std::string& name) {
  if (name == "otsu") return SegmentMethod::otsu;
  if (name == "watershed") return SegmentMethod::watershed;
  if (name == "slic") return SegmentMethod::slic;
  throw InvalidArgument("unknown segmentation method '" + name + "' (expected otsu, watershed or slic)");
}

cv::Mat to_gray(const cv::Mat& image) {
  if (image.type() == CV_8UC1) return image;
  if (image.type() != CV_8UC3) throw InvalidArgument("segmentation expects an 8-bit gray or RGB image");
  cv::Mat gray;
  cv::cvtColor(image, gray, cv::COLOR_RGB2GRAY);
  return gray;
}

int otsu_threshold(const cv::Mat& gray) {
  if (gray.type() != CV_8UC1 || gray.empty()) throw InvalidArgument("otsu_threshold expects non-empty CV_8UC1");
  std::array<double, 256> hist{};
  for (int r = 0; r < gray.rows; ++r) {
    const auto* row = gray.ptr<std::uint8_t>(r);
    for (int c = 0; c < gray.cols; ++c) hist[row[c]] += 1;
  }
  const double total = static_cast<double>(gray.total());
  double sum_all = 0;
  for (int i = 0; i < 256; ++i) sum_all += i * hist[static_cast<std::size_t>(i)];

  double w0 = 0;
  double sum0 = 0;
  double best_var = -1;
  int best_t = 0;
  for (int t = 0; t < 256; ++t) {
    w0 += hist[static_cast<std::size_t>(t)];
    sum0 += t * hist[static_cast<std::size_t>(t)];
    const double w1 = total - w0;
    double var = 0;
    if (w0 > 0 && w1 > 0) {
      const double mu0 = sum0 / w0;
      const double mu1 = (sum_all - sum0) / w1;
      var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
    }
    if (var > best_var) {
      best_var = var;
      best_t = t;
    }
  }
  return best_t;
}

namespace {

/// Relabels to consecutive ids 0..k-1 in raster order of first appearance.
int compact_labels(cv::Mat& labels) {
  std::unordered_map<int, int> remap;
  for (int r = 0; r < labels.rows; ++r) {
    auto* row = labels.ptr<int>(r);
    for (int c = 0; c < labels.cols; ++c) {
      auto [it, inserted] = remap.try_emplace(row[c], static_cast<int>(remap.size()));
      row[c] = it->second;
    }
  }
  return static_cast<int>(remap.size());
}

/// Merges each 4-connected piece smaller than `min_size` into an adjacent
/// segment, then makes every segment a single connected piece.
void enforce_connectivity(cv::Mat& labels, int min_size) {
  const int rows = labels.rows;
  const int cols = labels.cols;
  cv::Mat out(labels.size(), CV_32SC1, cv::Scalar(-1));
  const int dr[4] = {-1, 1, 0, 0};
  const int dc[4] = {0, 0, -1, 1};
  int next = 0;
  std::vector<cv::Point> piece;
  for (int r0 = 0; r0 < rows; ++r0) {
    for (int c0 = 0; c0 < cols; ++c0) {
      if (out.at<int>(r0, c0) >= 0) continue;
      const int original = labels.at<int>(r0, c0);
      // An already relabelled neighbour to absorb a small piece into.
      int adjacent = -1;
      for (int k = 0; k < 4; ++k) {
        const int r = r0 + dr[k];
        const int c = c0 + dc[k];
        if (r >= 0 && r < rows && c >= 0 && c < cols && out.at<int>(r, c) >= 0) adjacent = out.at<int>(r, c);
      }
      piece.clear();
      piece.emplace_back(c0, r0);
      out.at<int>(r0, c0) = next;
      for (std::size_t i = 0; i < piece.size(); ++i) {
        for (int k = 0; k < 4; ++k) {
          const int r = piece[i].y + dr[k];
          const int c = piece[i].x + dc[k];
          if (r < 0 || r >= rows || c < 0 || c >= cols) continue;
          if (out.at<int>(r, c) >= 0 || labels.at<int>(r, c) != original) continue;
          out.at<int>(r, c) = next;
          piece.emplace_back(c, r);
        }
      }
      if (static_cast<int>(piece.size()) < min_size && adjacent >= 0) {
        for (const auto& p : piece) out.at<int>(p.y, p.x) = adjacent;
      } else {
        ++next;
      }
    }
  }
  labels = out;
}

/// Merges 4-adjacent segments whose mean colours are indistinguishable, so a
/// uniform region is never split by the spatial term alone.
void merge_identical_neighbours(cv::Mat& labels, const cv::Mat& lab, double tolerance) {
  const int k = compact_labels(labels);
  std::vector<cv::Vec3d> sum(static_cast<std::size_t>(k));
  std::vector<double> count(static_cast<std::size_t>(k), 0);
  for (int r = 0; r < labels.rows; ++r) {
    for (int c = 0; c < labels.cols; ++c) {
      const auto l = static_cast<std::size_t>(labels.at<int>(r, c));
      const auto& v = lab.at<cv::Vec3f>(r, c);
      sum[l] += cv::Vec3d(v[0], v[1], v[2]);
      count[l] += 1;
    }
  }
  std::vector<int> parent(static_cast<std::size_t>(k));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      x = parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
    }
    return x;
  };
  auto mean = [&](int l) { return sum[static_cast<std::size_t>(l)] / count[static_cast<std::size_t>(l)]; };
  for (int r = 0; r < labels.rows; ++r) {
    for (int c = 0; c < labels.cols; ++c) {
      const int a = labels.at<int>(r, c);
      for (const auto& [nr, nc] : {std::pair{r + 1, c}, std::pair{r, c + 1}}) {
        if (nr >= labels.rows || nc >= labels.cols) continue;
        const int b = labels.at<int>(nr, nc);
        if (a == b) continue;
        if (cv::norm(mean(a) - mean(b)) <= tolerance) parent[static_cast<std::size_t>(find(a))] = find(b);
      }
    }
  }
  for (int r = 0; r < labels.rows; ++r) {
    for (int c = 0; c < labels.cols; ++c) labels.at<int>(r, c) = find(labels.at<int>(r, c));
  }
  compact_labels(labels);
}

}  // namespace

cv::Mat slic_superpixels(const cv::Mat& image, int n_segments, double compactness, int max_iterations) {
  if (n_segments < 1) throw InvalidArgument("slic: n_segments must be >= 1");
  if (compactness <= 0) throw InvalidArgument("slic: compactness must be > 0");
  cv::Mat rgb;
  if (image.type() == CV_8UC1) {
    cv::cvtColor(image, rgb, cv::COLOR_GRAY2RGB);
  } else if (image.type() == CV_8UC3) {
    rgb = image;
  } else {
    throw InvalidArgument("slic expects an 8-bit gray or RGB image");
  }
  cv::Mat rgbf;
  rgb.convertTo(rgbf, CV_32FC3, 1.0 / 255.0);
  cv::Mat lab;
  cv::cvtColor(rgbf, lab, cv::COLOR_RGB2Lab);

  const int rows = lab.rows;
  const int cols = lab.cols;
  const double step = std::sqrt(static_cast<double>(rows) * cols / n_segments);
  const int nx = std::max(1, static_cast<int>(std::lround(cols / step)));
  const int ny = std::max(1, static_cast<int>(std::lround(rows / step)));
  const double sx = static_cast<double>(cols) / nx;
  const double sy = static_cast<double>(rows) / ny;

  struct Center {
    double l, a, b, x, y;
  };
  std::vector<Center> centers;
  centers.reserve(static_cast<std::size_t>(nx * ny));
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      const int x = std::min(cols - 1, static_cast<int>((i + 0.5) * sx));
      const int y = std::min(rows - 1, static_cast<int>((j + 0.5) * sy));
      const auto& v = lab.at<cv::Vec3f>(y, x);
      centers.push_back({v[0], v[1], v[2], static_cast<double>(x), static_cast<double>(y)});
    }
  }

  const double s = std::max(sx, sy);
  const double spatial_weight = (compactness / s) * (compactness / s);
  const int radius = static_cast<int>(std::ceil(s));
  cv::Mat labels(lab.size(), CV_32SC1, cv::Scalar(-1));
  cv::Mat distance(lab.size(), CV_64FC1);

  for (int iter = 0; iter < std::max(1, max_iterations); ++iter) {
    distance.setTo(std::numeric_limits<double>::infinity());
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const auto& ctr = centers[k];
      const int y0 = std::max(0, static_cast<int>(ctr.y) - radius);
      const int y1 = std::min(rows - 1, static_cast<int>(ctr.y) + radius);
      const int x0 = std::max(0, static_cast<int>(ctr.x) - radius);
      const int x1 = std::min(cols - 1, static_cast<int>(ctr.x) + radius);
      for (int y = y0; y <= y1; ++y) {
        const auto* row = lab.ptr<cv::Vec3f>(y);
        auto* dist = distance.ptr<double>(y);
        auto* lbl = labels.ptr<int>(y);
        for (int x = x0; x <= x1; ++x) {
          const double dl = row[x][0] - ctr.l;
          const double da = row[x][1] - ctr.a;
          const double db = row[x][2] - ctr.b;
          const double dx = x - ctr.x;
          const double dy = y - ctr.y;
          const double d = dl * dl + da * da + db * db + spatial_weight * (dx * dx + dy * dy);
          if (d < dist[x]) {
            dist[x] = d;
            lbl[x] = static_cast<int>(k);
          }
        }
      }
    }
    std::vector<Center> acc(centers.size(), Center{0, 0, 0, 0, 0});
    std::vector<double> count(centers.size(), 0);
    for (int y = 0; y < rows; ++y) {
      const auto* row = lab.ptr<cv::Vec3f>(y);
      const auto* lbl = labels.ptr<int>(y);
      for (int x = 0; x < cols; ++x) {
        if (lbl[x] < 0) continue;
        auto& a = acc[static_cast<std::size_t>(lbl[x])];
        a.l += row[x][0];
        a.a += row[x][1];
        a.b += row[x][2];
        a.x += x;
        a.y += y;
        count[static_cast<std::size_t>(lbl[x])] += 1;
      }
    }
    for (std::size_t k = 0; k < centers.size(); ++k) {
      if (count[k] == 0) continue;
      const double n = count[k];
      centers[k] = {acc[k].l / n, acc[k].a / n, acc[k].b / n, acc[k].x / n, acc[k].y / n};
    }
  }
  // Pixels outside every search window (only possible for tiny radii).
  for (int y = 0; y < rows; ++y) {
    for (int x = 0; x < cols; ++x) {
      if (labels.at<int>(y, x) < 0) labels.at<int>(y, x) = 0;
    }
  }
  const int min_size = std::max(1, static_cast<int>((sx * sy) / 4));
  enforce_connectivity(labels, min_size);
  merge_identical_neighbours(labels, lab, 1e-3);
  return labels;
}

cv::Mat watershed_segments(const cv::Mat& image, const cv::Mat& marker_mask, double marker_fraction) {
  const cv::Mat gray = to_gray(image);
  cv::Mat markers(gray.size(), CV_32SC1, cv::Scalar(0));

  if (!marker_mask.empty()) {
    if (marker_mask.size() != gray.size() || marker_mask.type() != CV_8UC1) {
      throw InvalidArgument("watershed marker mask must be CV_8UC1 with the image's shape");
    }
    cv::Mat binary = marker_mask > 0;
    cv::Mat dist;
    cv::distanceTransform(binary, dist, cv::DIST_L2, 3);
    double max_dist = 0;
    cv::minMaxLoc(dist, nullptr, &max_dist);
    cv::Mat sure_fg = dist > marker_fraction * max_dist;
    cv::Mat sure_bg;
    cv::dilate(binary, sure_bg, cv::getStructuringElement(cv::MORPH_RECT, {3, 3}), {-1, -1}, 2);
    cv::Mat fg_labels;
    const int n = cv::connectedComponents(sure_fg, fg_labels, 8, CV_32S);
    for (int r = 0; r < gray.rows; ++r) {
      for (int c = 0; c < gray.cols; ++c) {
        if (sure_bg.at<std::uint8_t>(r, c) == 0) {
          markers.at<int>(r, c) = 1;
        } else if (fg_labels.at<int>(r, c) > 0) {
          markers.at<int>(r, c) = fg_labels.at<int>(r, c) + 1;
        }
      }
    }
    if (n <= 1 && cv::countNonZero(sure_bg == 0) == 0) markers.setTo(1);
  } else {
    // Seeds are the plateaus of the smoothed gradient that equal their 3x3 minimum.
    cv::Mat blurred;
    cv::GaussianBlur(gray, blurred, {3, 3}, 0);
    cv::Mat gx;
    cv::Mat gy;
    cv::Sobel(blurred, gx, CV_32F, 1, 0);
    cv::Sobel(blurred, gy, CV_32F, 0, 1);
    cv::Mat magnitude;
    cv::magnitude(gx, gy, magnitude);
    cv::Mat quantized;
    magnitude.convertTo(quantized, CV_16U);
    cv::Mat local_min;
    cv::erode(quantized, local_min, cv::getStructuringElement(cv::MORPH_RECT, {3, 3}));
    cv::Mat seeds = quantized == local_min;
    cv::connectedComponents(seeds, markers, 8, CV_32S);
  }

  cv::Mat bgr;
  cv::cvtColor(gray, bgr, cv::COLOR_GRAY2BGR);
  cv::watershed(bgr, markers);

  // Resolve boundary pixels (-1) from neighbouring basins.
  bool pending = true;
  while (pending) {
    pending = false;
    cv::Mat next = markers.clone();
    for (int r = 0; r < markers.rows; ++r) {
      for (int c = 0; c < markers.cols; ++c) {
        if (markers.at<int>(r, c) > 0) continue;
        int best = -1;
        for (int dr = -1; dr <= 1; ++dr) {
          for (int dc = -1; dc <= 1; ++dc) {
            const int rr = r + dr;
            const int cc = c + dc;
            if (rr < 0 || rr >= markers.rows || cc < 0 || cc >= markers.cols) continue;
            best = std::max(best, markers.at<int>(rr, cc));
          }
        }
        if (best > 0) {
          next.at<int>(r, c) = best;
        } else {
          pending = true;
        }
      }
    }
    if (pending && cv::countNonZero(next > 0) == cv::countNonZero(markers > 0)) {
      next.setTo(1, next <= 0);  // no basin anywhere
      pending = false;
    }
    markers = next;
  }
  compact_labels(markers);
  return markers;
}

cv::Mat classical_segment(const cv::Mat& image, SegmentMethod method, const SegmentParams& params) {
  switch (method) {
    case SegmentMethod::otsu: {
      const cv::Mat gray = to_gray(image);
      const int t = otsu_threshold(gray);
      cv::Mat labels;
      cv::Mat(gray > t).convertTo(labels, CV_32S, 1.0 / 255.0);
      return labels;
    }
    case SegmentMethod::watershed:
      return watershed_segments(image, params.marker_mask, params.marker_fraction);
    case SegmentMethod::slic:
      return slic_superpixels(image, params.n_segments, params.compactness, params.max_iterations);
  }
  throw InvalidArgument("unknown segmentation method");
}

cv::Mat superpixel_fuse(const cv::Mat& mask, const cv::Mat& labels, double overlap_tau) {
  if (mask.type() != CV_8UC1 || labels.type() != CV_32SC1) {
    throw InvalidArgument("superpixel_fuse expects a CV_8UC1 mask and CV_32SC1 labels");
  }
  if (mask.size() != labels.size()) throw InvalidArgument("superpixel_fuse: mask and labels differ in shape");
  std::map<int, std::pair<std::uint64_t, std::uint64_t>> counts;  // label -> (inside, total)
  for (int r = 0; r < mask.rows; ++r) {
    for (int c = 0; c < mask.cols; ++c) {
      auto& [inside, total] = counts[labels.at<int>(r, c)];
      inside += mask.at<std::uint8_t>(r, c) != 0 ? 1 : 0;
      total += 1;
    }
  }
  std::map<int, bool> keep;
  for (const auto& [label, ct] : counts) {
    keep[label] = static_cast<double>(ct.first) >= overlap_tau * static_cast<double>(ct.second);
  }
  cv::Mat out(mask.size(), CV_8UC1);
  for (int r = 0; r < mask.rows; ++r) {
    for (int c = 0; c < mask.cols; ++c) out.at<std::uint8_t>(r, c) = keep[labels.at<int>(r, c)] ? 1 : 0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Polygons

double signed_ring_area(const std::vector<cv::Point>& ring) {
  double twice = 0;
  for (std::size_t i = 0; i < ring.size(); ++i) {
    const auto& a = ring[i];
    const auto& b = ring[(i + 1) % ring.size()];
    twice += static_cast<double>(a.x) * b.y - static_cast<double>(b.x) * a.y;
  }
  return twice / 2.0;
}

namespace {

double point_segment_distance(const cv::Point& p, const cv::Point& a, const cv::Point& b) {
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  if (len2 == 0) return std::hypot(p.x - a.x, p.y - a.y);
  double t = ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}

void douglas_peucker(const std::vector<cv::Point>& pts, std::size_t first, std::size_t last, double tol,
                     std::vector<bool>& keep) {
  if (last <= first + 1) return;
  double best = -1;
  std::size_t index = first;
  for (std::size_t i = first + 1; i < last; ++i) {
    const double d = point_segment_distance(pts[i], pts[first], pts[last]);
    if (d > best) {
      best = d;
      index = i;
    }
  }
  if (best > tol) {
    keep[index] = true;
    douglas_peucker(pts, first, index, tol, keep);
    douglas_peucker(pts, index, last, tol, keep);
  }
}

std::vector<cv::Point> drop_collinear(const std::vector<cv::Point>& ring) {
  std::vector<cv::Point> out;
  const std::size_t n = ring.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& prev = ring[(i + n - 1) % n];
    const auto& cur = ring[i];
    const auto& next = ring[(i + 1) % n];
    const long long cross = static_cast<long long>(cur.x - prev.x) * (next.y - cur.y) -
                            static_cast<long long>(cur.y - prev.y) * (next.x - cur.x);
    if (cross != 0) out.push_back(cur);
  }
  return out;
}

struct DirectedEdge {
  cv::Point from;
  cv::Point to;
  int owner;  // pixel index r * cols + c
};

/// Boundary rings of one component traced along pixel edges. Interior lies
/// on the positive-area side; at a vertex shared by two diagonal pixels the
/// trace stays with the pixel it arrived along, which keeps 4-connected
/// pieces apart.
std::vector<std::vector<cv::Point>> trace_rings(const cv::Mat& labels, int label) {
  const int rows = labels.rows;
  const int cols = labels.cols;
  auto inside = [&](int r, int c) { return r >= 0 && r < rows && c >= 0 && c < cols && labels.at<int>(r, c) == label; };

  std::vector<DirectedEdge> edges;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (!inside(r, c)) continue;
      const int owner = r * cols + c;
      if (!inside(r - 1, c)) edges.push_back({{c, r}, {c + 1, r}, owner});
      if (!inside(r, c + 1)) edges.push_back({{c + 1, r}, {c + 1, r + 1}, owner});
      if (!inside(r + 1, c)) edges.push_back({{c + 1, r + 1}, {c, r + 1}, owner});
      if (!inside(r, c - 1)) edges.push_back({{c, r + 1}, {c, r}, owner});
    }
  }
  auto vertex_key = [cols](const cv::Point& p) { return static_cast<long long>(p.y) * (cols + 1) + p.x; };
  std::unordered_map<long long, std::vector<std::size_t>> outgoing;
  for (std::size_t i = 0; i < edges.size(); ++i) outgoing[vertex_key(edges[i].from)].push_back(i);

  std::vector<bool> used(edges.size(), false);
  std::vector<std::vector<cv::Point>> rings;
  for (std::size_t start = 0; start < edges.size(); ++start) {
    if (used[start]) continue;
    std::vector<cv::Point> ring;
    std::size_t e = start;
    while (!used[e]) {
      used[e] = true;
      ring.push_back(edges[e].from);
      const auto& candidates = outgoing[vertex_key(edges[e].to)];
      std::size_t next = edges.size();
      for (auto cand : candidates) {
        if (used[cand] && cand != start) continue;
        if (next == edges.size() || edges[cand].owner == edges[e].owner) next = cand;
      }
      if (next == edges.size()) break;
      e = next;
    }
    rings.push_back(drop_collinear(ring));
  }
  return rings;
}

}  // namespace

std::vector<cv::Point> douglas_peucker_ring(const std::vector<cv::Point>& ring, double tolerance) {
  if (tolerance <= 0 || ring.size() <= 4) return ring;
  // Split the closed ring at vertex 0 and the vertex farthest from it.
  std::size_t far = 0;
  double far_d = -1;
  for (std::size_t i = 1; i < ring.size(); ++i) {
    const double d = std::hypot(ring[i].x - ring[0].x, ring[i].y - ring[0].y);
    if (d > far_d) {
      far_d = d;
      far = i;
    }
  }
  std::vector<cv::Point> closed(ring);
  closed.push_back(ring[0]);
  std::vector<bool> keep(closed.size(), false);
  keep[0] = keep[far] = keep[closed.size() - 1] = true;
  douglas_peucker(closed, 0, far, tolerance, keep);
  douglas_peucker(closed, far, closed.size() - 1, tolerance, keep);
  std::vector<cv::Point> out;
  for (std::size_t i = 0; i + 1 < closed.size(); ++i) {
    if (keep[i]) out.push_back(closed[i]);
  }
  return out.size() >= 3 ? out : ring;
}

PolygonSet polygonize(const cv::Mat& mask, double simplify_tol, int min_area) {
  if (mask.type() != CV_8UC1) throw InvalidArgument("polygonize expects a CV_8UC1 mask");
  if (simplify_tol < 0) throw InvalidArgument("simplify_tol must be >= 0");
  cv::Mat labels;
  cv::Mat stats;
  cv::Mat centroids;
  const int n = cv::connectedComponentsWithStats(mask > 0, labels, stats, centroids, 4, CV_32S);

  PolygonSet out;
  for (int label = 1; label < n; ++label) {
    const int area = stats.at<int>(label, cv::CC_STAT_AREA);
    if (area < min_area) continue;
    // Trace on the bounding box only, offset back afterwards.
    const cv::Rect box(stats.at<int>(label, cv::CC_STAT_LEFT), stats.at<int>(label, cv::CC_STAT_TOP),
                       stats.at<int>(label, cv::CC_STAT_WIDTH), stats.at<int>(label, cv::CC_STAT_HEIGHT));
    const cv::Mat local = labels(box).clone();
    auto rings = trace_rings(local, label);

    Polygon poly;
    poly.component_id = label;
    poly.area = area;
    double best_outer = 0;
    for (auto& ring : rings) {
      for (auto& p : ring) p += box.tl();
      const double a = signed_ring_area(ring);
      auto simplified = douglas_peucker_ring(ring, simplify_tol);
      if (a > best_outer) {
        if (!poly.outer.empty()) poly.holes.push_back(std::move(poly.outer));
        best_outer = a;
        poly.outer = std::move(simplified);
      } else {
        poly.holes.push_back(std::move(simplified));
      }
    }
    out.push_back(std::move(poly));
  }
  return out;
}

cv::Mat rasterize(const PolygonSet& polygons, cv::Size size) {
  cv::Mat out(size, CV_8UC1, cv::Scalar(0));
  std::vector<double> crossings;
  for (const auto& poly : polygons) {
    std::vector<const std::vector<cv::Point>*> rings{&poly.outer};
    for (const auto& h : poly.holes) rings.push_back(&h);
    for (int r = 0; r < size.height; ++r) {
      const double y = r + 0.5;
      crossings.clear();
      for (const auto* ring : rings) {
        const std::size_t n = ring->size();
        for (std::size_t i = 0; i < n; ++i) {
          const auto& a = (*ring)[i];
          const auto& b = (*ring)[(i + 1) % n];
          if ((a.y <= y && b.y > y) || (b.y <= y && a.y > y)) {
            crossings.push_back(a.x + (y - a.y) * (b.x - a.x) / static_cast<double>(b.y - a.y));
          }
        }
      }
      std::sort(crossings.begin(), crossings.end());
      auto* row = out.ptr<std::uint8_t>(r);
      for (std::size_t i = 0; i + 1 < crossings.size(); i += 2) {
        // Pixel centres c + 0.5 in [x0, x1).
        const int c0 = std::max(0, static_cast<int>(std::ceil(crossings[i] - 0.5)));
        const int c1 = std::min(size.width, static_cast<int>(std::ceil(crossings[i + 1] - 0.5)));
        for (int c = c0; c < c1; ++c) row[c] = 1;
      }
    }
  }
  return out;
}

std::string polygons_to_geojson(const PolygonSet& polygons) {
  using nlohmann::json;
  json features = json::array();
  auto ring_json = [](const std::vector<cv::Point>& ring) {
    json coords = json::array();
    for (const auto& p : ring) coords.push_back({p.x, p.y});
    if (!ring.empty()) coords.push_back({ring.front().x, ring.front().y});
    return coords;
  };
  for (const auto& poly : polygons) {
    json rings = json::array();
    rings.push_back(ring_json(poly.outer));
    for (const auto& h : poly.holes) rings.push_back(ring_json(h));
    features.push_back({{"type", "Feature"},
                        {"properties", {{"id", poly.component_id}, {"area", poly.area}}},
                        {"geometry", {{"type", "Polygon"}, {"coordinates", rings}}}});
  }
  json doc = {{"type", "FeatureCollection"}, {"crs", {{"type", "pixel"}}}, {"features", features}};
  return doc.dump(2);
}

// ---------------------------------------------------------------------------
// Stitching

cv::Mat stitch_tiles(std::span<const TileRaster> tiles, const TileGrid& grid, cv::Size original_size) {
  if (grid.count() <= 0) throw InvalidArgument("stitch_tiles: empty grid");
  if (original_size.height > grid.padded_rows() || original_size.width > grid.padded_cols()) {
    throw InvalidArgument("stitch_tiles: original size exceeds the grid");
  }
  std::vector<const TileRaster*> by_index(static_cast<std::size_t>(grid.count()), nullptr);
  int type = -1;
  for (const auto& t : tiles) {
    if (t.index < 0 || t.index >= grid.count()) {
      throw InvalidArgument("stitch_tiles: tile index " + std::to_string(t.index) + " outside grid");
    }
    if (by_index[static_cast<std::size_t>(t.index)] != nullptr) {
      throw InvalidArgument("stitch_tiles: duplicate tile index " + std::to_string(t.index));
    }
    if (type >= 0 && t.raster.type() != type) throw InvalidArgument("stitch_tiles: mixed raster types");
    type = t.raster.type();
    by_index[static_cast<std::size_t>(t.index)] = &t;
  }
  for (int i = 0; i < grid.count(); ++i) {
    if (by_index[static_cast<std::size_t>(i)] == nullptr) {
      throw InvalidArgument("stitch_tiles: missing tile index " + std::to_string(i));
    }
  }
  cv::Mat canvas(grid.padded_rows(), grid.padded_cols(), type);
  const int interpolation = CV_MAT_DEPTH(type) == CV_8U ? cv::INTER_NEAREST_EXACT : cv::INTER_LINEAR;
  for (int i = 0; i < grid.count(); ++i) {
    const cv::Mat& src = by_index[static_cast<std::size_t>(i)]->raster;
    const auto rect = grid.footprint(i);
    if (src.rows == grid.tile_size && src.cols == grid.tile_size) {
      src.copyTo(canvas(rect));
    } else {
      cv::Mat resized;
      cv::resize(src, resized, rect.size(), 0, 0, interpolation);
      resized.copyTo(canvas(rect));
    }
  }
  return canvas(cv::Rect({0, 0}, original_size)).clone();
}

// ---------------------------------------------------------------------------
// Interchange

namespace {

fs::path sidecar_for(const fs::path& path) {
  auto p = path;
  if (p.extension() == ".json") return p;
  if (p.extension() == ".prob") return p.replace_extension(".json");
  p += ".json";
  return p;
}

}  // namespace

std::vector<fs::path> write_probability_mask(const fs::path& stem, const ProbabilityMask& mask,
                                             const ProbabilityMaskInfo& info) {
  auto raster_path = stem;
  raster_path += ".prob";
  auto sidecar_path = stem;
  sidecar_path += ".json";
  if (!stem.parent_path().empty()) fs::create_directories(stem.parent_path());

  const cv::Mat data = mask.probs().isContinuous() ? mask.probs() : mask.probs().clone();
  {
    std::ofstream out(raster_path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + raster_path.string());
    out.write(reinterpret_cast<const char*>(data.data), static_cast<std::streamsize>(data.total() * data.elemSize()));
  }
  nlohmann::json side = {{"format", "bfx-probability-mask"},
                         {"version", 1},
                         {"rows", mask.rows()},
                         {"cols", mask.cols()},
                         {"channels", 2},
                         {"channel_names", {"background", "building"}},
                         {"dtype", "float32"},
                         {"byte_order", "little"},
                         {"raster", raster_path.filename().string()},
                         {"model_id", info.model_id},
                         {"scene_id", info.scene_id}};
  std::ofstream(sidecar_path) << side.dump(2) << '\n';
  return {raster_path, sidecar_path};
}

LoadedProbabilityMask read_probability_mask(const fs::path& path) {
  const auto sidecar_path = sidecar_for(path);
  std::ifstream in(sidecar_path);
  if (!in) throw IoError("cannot open probability sidecar " + sidecar_path.string());
  nlohmann::json side;
  try {
    in >> side;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed sidecar " + sidecar_path.string() + ": " + e.what());
  }
  if (side.value("format", "") != "bfx-probability-mask" || side.value("dtype", "") != "float32" ||
      side.value("channels", 0) != 2) {
    throw IoError("unsupported probability raster described by " + sidecar_path.string());
  }
  const int rows = side.at("rows").get<int>();
  const int cols = side.at("cols").get<int>();
  const auto raster_path = sidecar_path.parent_path() / side.at("raster").get<std::string>();
  cv::Mat probs(rows, cols, CV_32FC2);
  std::ifstream raster(raster_path, std::ios::binary);
  if (!raster) throw IoError("cannot open probability raster " + raster_path.string());
  const auto n = static_cast<std::streamsize>(probs.total() * probs.elemSize());
  raster.read(reinterpret_cast<char*>(probs.data), n);
  if (raster.gcount() != n) throw IoError("probability raster " + raster_path.string() + " is truncated");
  return {ProbabilityMask(std::move(probs), 1e-4),
          {side.value("model_id", std::string{}), side.value("scene_id", std::string{})}};
}

void write_binary_png(const fs::path& path, const cv::Mat& mask) {
  if (mask.type() != CV_8UC1) throw InvalidArgument("write_binary_png expects CV_8UC1");
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  cv::Mat scaled = mask * 255;
  if (!cv::imwrite(path.string(), scaled)) throw IoError("cannot write " + path.string());
}

cv::Mat read_binary_png(const fs::path& path) {
  cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (gray.empty()) throw IoError("cannot read " + path.string());
  cv::Mat out;
  cv::threshold(gray, out, 127, 1, cv::THRESH_BINARY);
  return out;
}

}  // namespace bfx
