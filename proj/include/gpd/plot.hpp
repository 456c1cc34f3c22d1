#pragma once

// SVG line chart of per-epoch student and teacher accuracy, with the gap
// drawn as a band between the two curves.

#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

#include "gpd/errors.hpp"
#include "gpd/trainer.hpp"

namespace gpd {

struct PlotStyle {
  double width = 640, height = 400;
  double left = 60, right = 20, top = 30, bottom = 50;
  std::string title = "student / teacher accuracy";
};

namespace detail {

inline std::string fmt(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string polyline(const std::vector<double>& xs, const std::vector<double>& ys, const char* cls,
                            const char* color) {
  std::string pts;
  for (std::size_t i = 0; i < xs.size(); ++i) pts += (i ? " " : "") + fmt(xs[i]) + "," + fmt(ys[i]);
  return "  <polyline class=\"" + std::string(cls) + "\" fill=\"none\" stroke=\"" + color +
         "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
}

}  // namespace detail

inline std::string render_svg(const std::vector<TrainRecord>& records, const PlotStyle& style = {}) {
  if (records.empty()) throw FormatError("plot: no records to draw");
  const double pw = style.width - style.left - style.right;
  const double ph = style.height - style.top - style.bottom;
  const std::size_t n = records.size();
  auto x_at = [&](std::size_t i) { return style.left + (n == 1 ? pw / 2 : pw * static_cast<double>(i) / (n - 1)); };
  auto y_at = [&](double acc) { return style.top + ph * (1.0 - std::clamp(acc, 0.0, 1.0)); };

  std::vector<double> xs, ys, yt;
  for (std::size_t i = 0; i < n; ++i) {
    xs.push_back(x_at(i));
    ys.push_back(y_at(records[i].acc_s));
    yt.push_back(y_at(records[i].acc_t));
  }

  using detail::fmt;
  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(style.width, 0) + "\" height=\"" +
       fmt(style.height, 0) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "  <text x=\"" + fmt(style.width / 2) + "\" y=\"18\" text-anchor=\"middle\">" + style.title + "</text>\n";

  // Gap band: student curve forward, teacher curve back.
  std::string band;
  for (std::size_t i = 0; i < n; ++i) band += fmt(xs[i]) + "," + fmt(ys[i]) + " ";
  for (std::size_t i = n; i-- > 0;) band += fmt(xs[i]) + "," + fmt(yt[i]) + (i ? " " : "");
  s += "  <polygon class=\"gap\" fill=\"#f4a261\" fill-opacity=\"0.35\" stroke=\"none\" points=\"" + band + "\"/>\n";

  // Axes, y grid at 0.2 steps.
  const double x0 = style.left, x1 = style.left + pw, y0 = style.top + ph;
  s += "  <line x1=\"" + fmt(x0) + "\" y1=\"" + fmt(y0) + "\" x2=\"" + fmt(x1) + "\" y2=\"" + fmt(y0) +
       "\" stroke=\"black\"/>\n";
  s += "  <line x1=\"" + fmt(x0) + "\" y1=\"" + fmt(style.top) + "\" x2=\"" + fmt(x0) + "\" y2=\"" + fmt(y0) +
       "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 5; ++k) {
    const double acc = k / 5.0, y = y_at(acc);
    s += "  <text class=\"ytick\" x=\"" + fmt(x0 - 6) + "\" y=\"" + fmt(y + 4) + "\" text-anchor=\"end\">" +
         fmt(acc, 1) + "</text>\n";
    if (k > 0)
      s += "  <line x1=\"" + fmt(x0) + "\" y1=\"" + fmt(y) + "\" x2=\"" + fmt(x1) + "\" y2=\"" + fmt(y) +
           "\" stroke=\"#ddd\"/>\n";
  }
  for (std::size_t i = 0; i < n; ++i) {
    s += "  <text class=\"xtick\" x=\"" + fmt(xs[i]) + "\" y=\"" + fmt(y0 + 16) + "\" text-anchor=\"middle\">" +
         std::to_string(records[i].epoch) + "</text>\n";
  }
  s += "  <text x=\"" + fmt(x0 + pw / 2) + "\" y=\"" + fmt(style.height - 8) + "\" text-anchor=\"middle\">epoch</text>\n";
  s += "  <text x=\"16\" y=\"" + fmt(style.top + ph / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
       fmt(style.top + ph / 2) + ")\">eval accuracy</text>\n";

  s += detail::polyline(xs, yt, "teacher", "#1d3557");
  s += detail::polyline(xs, ys, "student", "#e63946");

  // Legend.
  const double lx = x1 - 150, ly = style.top + 12;
  s += "  <line x1=\"" + fmt(lx) + "\" y1=\"" + fmt(ly) + "\" x2=\"" + fmt(lx + 20) + "\" y2=\"" + fmt(ly) +
       "\" stroke=\"#1d3557\" stroke-width=\"2\"/><text x=\"" + fmt(lx + 26) + "\" y=\"" + fmt(ly + 4) +
       "\">teacher</text>\n";
  s += "  <line x1=\"" + fmt(lx) + "\" y1=\"" + fmt(ly + 16) + "\" x2=\"" + fmt(lx + 20) + "\" y2=\"" +
       fmt(ly + 16) + "\" stroke=\"#e63946\" stroke-width=\"2\"/><text x=\"" + fmt(lx + 26) + "\" y=\"" +
       fmt(ly + 20) + "\">student</text>\n";
  s += "  <rect x=\"" + fmt(lx) + "\" y=\"" + fmt(ly + 26) + "\" width=\"20\" height=\"8\" fill=\"#f4a261\" "
       "fill-opacity=\"0.35\"/><text x=\"" + fmt(lx + 26) + "\" y=\"" + fmt(ly + 34) + "\">gap</text>\n";
  s += "</svg>\n";
  return s;
}

}  // namespace gpd
