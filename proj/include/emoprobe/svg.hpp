#pragma once

// Minimal SVG heatmaps for grids of values in [vmin, vmax].

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "emoprobe/errors.hpp"

namespace emoprobe {

struct Heatmap {
  std::string title;
  std::vector<std::string> rows, cols;
  std::vector<std::vector<double>> values;  // [row][col], NaN = empty cell
  double vmin = 0.0, vmax = 1.0;
};

namespace detail {

inline std::string xml_escape(const std::string& s) {
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

// White to dark blue.
inline std::string shade(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(247 - t * (247 - 8)));
  const int g = static_cast<int>(std::lround(251 - t * (251 - 48)));
  const int b = static_cast<int>(std::lround(255 - t * (255 - 107)));
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

}  // namespace detail

inline std::string render_heatmap(const Heatmap& h) {
  if (h.rows.empty() || h.cols.empty()) throw DataError("heatmap: nothing to render");
  if (h.values.size() != h.rows.size()) throw ShapeError("heatmap: row count mismatch");
  const int cell = 36, left = 90, top = 40;
  const int width = left + cell * static_cast<int>(h.cols.size()) + 20;
  const int height = top + cell * static_cast<int>(h.rows.size()) + 40;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<text x=\"" << left << "\" y=\"20\" font-size=\"13\">" << detail::xml_escape(h.title) << "</text>\n";
  const double span = h.vmax > h.vmin ? h.vmax - h.vmin : 1.0;
  for (std::size_t r = 0; r < h.rows.size(); ++r) {
    if (h.values[r].size() != h.cols.size()) throw ShapeError("heatmap: column count mismatch");
    const int y = top + cell * static_cast<int>(r);
    os << "<text x=\"" << left - 6 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"end\">"
       << detail::xml_escape(h.rows[r]) << "</text>\n";
    for (std::size_t c = 0; c < h.cols.size(); ++c) {
      const int x = left + cell * static_cast<int>(c);
      const double v = h.values[r][c];
      const bool empty = std::isnan(v);
      const double t = empty ? 0.0 : (v - h.vmin) / span;
      os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\""
         << (empty ? std::string("#dddddd") : detail::shade(t)) << "\" stroke=\"#ffffff\"/>\n";
      if (!empty) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%.2f", v);
        os << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"middle\" fill=\""
           << (t > 0.55 ? "#ffffff" : "#000000") << "\">" << buf << "</text>\n";
      }
    }
  }
  const int yl = top + cell * static_cast<int>(h.rows.size()) + 16;
  for (std::size_t c = 0; c < h.cols.size(); ++c)
    os << "<text x=\"" << left + cell * static_cast<int>(c) + cell / 2 << "\" y=\"" << yl
       << "\" text-anchor=\"middle\">" << detail::xml_escape(h.cols[c]) << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace emoprobe
