#ifndef LATENTVISION_PLOT_HPP
#define LATENTVISION_PLOT_HPP

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lvc {

struct PlotSeries {
  std::string name;
  std::vector<double> y;  // x is the 1-based index (epoch)
};

// Minimal deterministic SVG line plot: fixed canvas, one polyline per series,
// legend in the top-right corner.
inline void write_line_svg(const std::string& path, const std::string& title,
                           const std::string& ylabel,
                           const std::vector<PlotSeries>& series) {
  const int W = 640, H = 420;
  const double L = 70, R = 20, T = 40, B = 50;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};

  double ymin = 0, ymax = 1;
  size_t n = 0;
  bool any = false;
  for (const auto& s : series) {
    n = std::max(n, s.y.size());
    for (double v : s.y) {
      if (!std::isfinite(v)) continue;
      if (!any) { ymin = ymax = v; any = true; }
      ymin = std::min(ymin, v);
      ymax = std::max(ymax, v);
    }
  }
  if (ymax - ymin < 1e-12) { ymax += 1; ymin -= 1; }
  double pad = 0.05 * (ymax - ymin);
  ymin -= pad;
  ymax += pad;

  auto px = [&](double i) {
    return n > 1 ? L + (W - L - R) * (i - 1) / (static_cast<double>(n) - 1)
                 : (L + W - R) / 2;
  };
  auto py = [&](double v) { return H - B - (H - T - B) * (v - ymin) / (ymax - ymin); };

  std::ostringstream os;
  os.precision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
     << "\" height=\"" << H << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" "
        "font-family=\"sans-serif\" font-size=\"16\">" << title << "</text>\n"
     << "<text x=\"16\" y=\"" << (T + H - B) / 2
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
        "transform=\"rotate(-90 16 " << (T + H - B) / 2 << ")\">" << ylabel
     << "</text>\n"
     << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        "font-size=\"12\">epoch</text>\n";

  // Axes and y tick labels.
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\""
     << H - B << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R
     << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    double v = ymin + (ymax - ymin) * t / 4.0;
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(v) + 4
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
          "font-size=\"10\">" << v << "</text>\n";
  }
  for (size_t i = 1; i <= n; i += std::max<size_t>(1, n / 8))
    os << "<text x=\"" << px(static_cast<double>(i)) << "\" y=\"" << H - B + 16
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
          "font-size=\"10\">" << i << "</text>\n";

  for (size_t s = 0; s < series.size(); ++s) {
    const char* color = colors[s % 4];
    os << "<polyline fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"1.5\" points=\"";
    for (size_t i = 0; i < series[s].y.size(); ++i)
      os << px(static_cast<double>(i + 1)) << "," << py(series[s].y[i]) << " ";
    os << "\"/>\n"
       << "<text x=\"" << W - R - 6 << "\" y=\"" << T + 14 + 14 * s
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" "
          "fill=\"" << color << "\">" << series[s].name << "</text>\n";
  }
  os << "</svg>\n";

  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << os.str();
}

}  // namespace lvc

#endif  // LATENTVISION_PLOT_HPP
