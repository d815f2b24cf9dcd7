// SPDX-License-Identifier: Apache-2.0
//
// Static SVG charts: a loss curve and mean loops per layer.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "versatile/metrics.hpp"

namespace versatile::chart {

struct Frame {
  double width = 640, height = 360;
  double left = 60, right = 20, top = 30, bottom = 40;
  double plot_w() const { return width - left - right; }
  double plot_h() const { return height - top - bottom; }
};

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline void open_svg(std::ostringstream& os, const Frame& f, const std::string& title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\"" << f.height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << f.width / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << title << "</text>\n";
  os << "<line x1=\"" << f.left << "\" y1=\"" << f.top + f.plot_h() << "\" x2=\"" << f.left + f.plot_w() << "\" y2=\""
     << f.top + f.plot_h() << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << f.left << "\" y1=\"" << f.top << "\" x2=\"" << f.left << "\" y2=\"" << f.top + f.plot_h()
     << "\" stroke=\"black\"/>\n";
}

/// Loss per step as a polyline.
inline std::string loss_curve(const std::vector<MetricsRecord>& records) {
  Frame f;
  std::ostringstream os;
  open_svg(os, f, "training loss");
  if (!records.empty()) {
    double lo = records[0].loss, hi = records[0].loss;
    for (const auto& r : records) {
      lo = std::min(lo, r.loss);
      hi = std::max(hi, r.loss);
    }
    if (hi == lo) hi = lo + 1;
    const double s0 = static_cast<double>(records.front().step), s1 = static_cast<double>(records.back().step);
    const double span = s1 > s0 ? s1 - s0 : 1;
    os << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
    for (const auto& r : records) {
      const double x = f.left + (static_cast<double>(r.step) - s0) / span * f.plot_w();
      const double y = f.top + (hi - r.loss) / (hi - lo) * f.plot_h();
      os << fmt(x) << ',' << fmt(y) << ' ';
    }
    os << "\"/>\n";
    os << "<text x=\"" << f.left - 4 << "\" y=\"" << f.top + 4 << "\" text-anchor=\"end\">" << fmt(hi) << "</text>\n";
    os << "<text x=\"" << f.left - 4 << "\" y=\"" << f.top + f.plot_h() << "\" text-anchor=\"end\">" << fmt(lo)
       << "</text>\n";
    os << "<text x=\"" << f.left << "\" y=\"" << f.height - 20 << "\">" << fmt(s0) << "</text>\n";
    os << "<text x=\"" << f.left + f.plot_w() << "\" y=\"" << f.height - 20 << "\" text-anchor=\"end\">" << fmt(s1)
       << "</text>\n";
  }
  os << "<text x=\"" << f.width / 2 << "\" y=\"" << f.height - 6 << "\" text-anchor=\"middle\">step</text>\n";
  os << "</svg>\n";
  return os.str();
}

/// One bar per layer, scaled to [0, max_loops].
inline std::string loops_per_layer(const std::vector<double>& mean_loops, std::size_t max_loops) {
  Frame f;
  std::ostringstream os;
  open_svg(os, f, "average loops per layer");
  const double n = static_cast<double>(std::max<std::size_t>(mean_loops.size(), 1));
  const double slot = f.plot_w() / n;
  const double top = static_cast<double>(std::max<std::size_t>(max_loops, 1));
  for (std::size_t i = 0; i < mean_loops.size(); ++i) {
    const double h = std::clamp(mean_loops[i] / top, 0.0, 1.0) * f.plot_h();
    const double x = f.left + slot * static_cast<double>(i) + slot * 0.15;
    os << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(f.top + f.plot_h() - h) << "\" width=\"" << fmt(slot * 0.7)
       << "\" height=\"" << fmt(h) << "\" fill=\"darkorange\"/>\n";
    os << "<text x=\"" << fmt(x + slot * 0.35) << "\" y=\"" << fmt(f.top + f.plot_h() - h - 4)
       << "\" text-anchor=\"middle\">" << fmt(mean_loops[i]) << "</text>\n";
    os << "<text x=\"" << fmt(x + slot * 0.35) << "\" y=\"" << f.height - 24 << "\" text-anchor=\"middle\">" << i
       << "</text>\n";
  }
  os << "<text x=\"" << f.width / 2 << "\" y=\"" << f.height - 6 << "\" text-anchor=\"middle\">layer</text>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace versatile::chart
