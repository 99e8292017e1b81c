#include "depthlens/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <string>

#include "depthlens/error.hpp"

namespace depthlens {

std::size_t ReportTable::column(std::string_view name) const {
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i] == name) return i;
  }
  throw ShapeError("report '" + kind + "' has no column '" + std::string(name) + "'");
}

void ReportTable::set_provenance(std::string key, std::string value) {
  for (auto& [k, v] : provenance) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  provenance.emplace_back(std::move(key), std::move(value));
}

std::string format_float(double value) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", value);
  return buf;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string cell_text(const Cell& cell) {
  struct Visitor {
    std::string operator()(std::monostate) const { return ""; }
    std::string operator()(std::int64_t v) const { return std::to_string(v); }
    std::string operator()(double v) const { return format_float(v); }
    std::string operator()(const std::string& v) const { return csv_field(v); }
  };
  return std::visit(Visitor{}, cell);
}

std::optional<double> numeric(const Cell& cell) {
  if (const auto* i = std::get_if<std::int64_t>(&cell)) return static_cast<double>(*i);
  if (const auto* d = std::get_if<double>(&cell)) return *d;
  return std::nullopt;
}

std::string label_of(const Cell& cell) {
  if (const auto* s = std::get_if<std::string>(&cell)) return *s;
  if (const auto* i = std::get_if<std::int64_t>(&cell)) return std::to_string(*i);
  if (const auto* d = std::get_if<double>(&cell)) return format_float(*d);
  return "";
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

const char* color(std::size_t i) { return kPalette[i % std::size(kPalette)]; }

struct Point {
  double x = 0.0;
  std::optional<double> y;  // absent = gap
};

struct Series {
  std::string name;
  std::vector<Point> points;
};

struct Chart {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool stacked = false;
  bool log_y = false;
  std::vector<Series> series;
};

// Groups rows into series keyed by `key(row)`, in order of first appearance.
template <typename KeyFn>
std::vector<Series> group(const ReportTable& t, KeyFn key, std::size_t x_col, std::size_t y_col) {
  std::vector<Series> out;
  std::map<std::string, std::size_t> index;
  for (const auto& row : t.rows) {
    const std::string k = key(row);
    auto [it, inserted] = index.emplace(k, out.size());
    if (inserted) out.push_back({k, {}});
    const auto x = numeric(row[x_col]);
    if (!x) continue;
    out[it->second].points.push_back({*x, numeric(row[y_col])});
  }
  return out;
}

Chart chart_for(const ReportTable& t) {
  Chart c;
  c.title = t.kind;
  if (t.kind == "buckets") {
    c.title = "Top-1 bucket composition by layer";
    c.x_label = "layer";
    c.y_label = "fraction of examples";
    c.stacked = true;
    const std::size_t b = t.column("bucket");
    c.series = group(t, [&](const auto& r) { return label_of(r[b]); }, t.column("layer"),
                     t.column("fraction"));
  } else if (t.kind == "flips") {
    c.title = "Decision flip rate by layer";
    c.x_label = "layer";
    c.y_label = "flip rate";
    const std::size_t b = t.column("bucket");
    c.series = group(t, [&](const auto& r) { return label_of(r[b]); }, t.column("layer"),
                     t.column("flip_rate"));
  } else if (t.kind == "meanrank") {
    c.title = "Mean option rank by layer";
    c.x_label = "layer";
    c.y_label = "mean rank";
    const std::size_t o = t.column("option");
    c.series = group(t, [&](const auto& r) { return label_of(r[o]); }, t.column("layer"),
                     t.column("mean_rank"));
  } else if (t.kind == "probmass") {
    c.title = "Mean token probability by frequency rank";
    c.x_label = "frequency rank";
    c.y_label = "mean probability";
    const std::size_t lens = t.column("lens");
    const std::size_t layer = t.column("layer");
    c.series = group(
        t,
        [&](const auto& r) {
          const std::string name = label_of(r[lens]);
          return name == "final" ? name : name + " L" + label_of(r[layer]);
        },
        t.column("freq_rank"), t.column("mean_prob"));
  } else if (t.kind == "onset") {
    c.title = "Earliest layer reaching each rank threshold";
    c.x_label = "mean first-crossing layer";
    c.y_label = "rank threshold";
    c.log_y = true;
    const std::size_t cat = t.column("category");
    const std::size_t mean = t.column("mean_layer");
    const std::size_t thr = t.column("threshold");
    // x = mean layer, y = threshold; rows without a mean become gaps.
    std::map<std::string, std::size_t> index;
    for (const auto& row : t.rows) {
      const std::string k = label_of(row[cat]);
      auto [it, inserted] = index.emplace(k, c.series.size());
      if (inserted) c.series.push_back({k, {}});
      const auto x = numeric(row[mean]);
      const auto y = numeric(row[thr]);
      if (x && y) {
        c.series[it->second].points.push_back({*x, *y});
      } else {
        c.series[it->second].points.push_back({0.0, std::nullopt});
      }
    }
  } else {
    throw DataError("no chart layout for report kind '" + t.kind + "'");
  }
  return c;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

}  // namespace

std::string to_csv(const ReportTable& table) {
  std::string out;
  for (const auto& [k, v] : table.provenance) out += "# " + k + "=" + v + "\n";
  for (std::size_t i = 0; i < table.columns.size(); ++i) {
    if (i) out += ",";
    out += csv_field(table.columns[i]);
  }
  out += "\n";
  for (const auto& row : table.rows) {
    if (row.size() != table.columns.size()) {
      throw ShapeError("report '" + table.kind + "' row has " + std::to_string(row.size()) +
                       " cells for " + std::to_string(table.columns.size()) + " columns");
    }
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ",";
      out += cell_text(row[i]);
    }
    out += "\n";
  }
  return out;
}

std::string render_svg(const ReportTable& table) {
  const Chart chart = chart_for(table);
  constexpr double kLeft = 80, kRight = 740, kTop = 50, kBottom = 470;

  // For stacked charts each series is drawn on top of the running total.
  std::vector<Series> drawn = chart.series;
  std::vector<Series> base;
  if (chart.stacked) {
    std::map<double, double> running;
    for (auto& s : drawn) {
      Series lower{s.name, {}};
      for (auto& p : s.points) {
        const double below = running[p.x];
        lower.points.push_back({p.x, below});
        const double value = p.y.value_or(0.0);
        p.y = below + value;
        running[p.x] = below + value;
      }
      base.push_back(std::move(lower));
    }
  }

  double x_min = std::numeric_limits<double>::infinity(), x_max = -x_min;
  double y_min = x_min, y_max = -x_min;
  for (const auto& s : drawn) {
    for (const auto& p : s.points) {
      if (!p.y) continue;
      x_min = std::min(x_min, p.x);
      x_max = std::max(x_max, p.x);
      const double y = chart.log_y ? std::log10(*p.y) : *p.y;
      y_min = std::min(y_min, y);
      y_max = std::max(y_max, y);
    }
  }
  if (!std::isfinite(x_min)) {
    x_min = 0;
    x_max = 1;
    y_min = 0;
    y_max = 1;
  }
  if (!chart.log_y) y_min = std::min(y_min, 0.0);
  if (x_max == x_min) x_max = x_min + 1;
  if (y_max == y_min) y_max = y_min + 1;

  auto sx = [&](double x) { return kLeft + (x - x_min) / (x_max - x_min) * (kRight - kLeft); };
  auto sy = [&](double y) {
    const double v = chart.log_y ? std::log10(y) : y;
    return kBottom - (v - y_min) / (y_max - y_min) * (kBottom - kTop);
  };

  std::string svg;
  svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 960 540\" width=\"960\" "
         "height=\"540\" font-family=\"sans-serif\" font-size=\"12\">\n";
  for (const auto& [k, v] : table.provenance) {
    std::string text = xml_escape(k + "=" + v);
    // "--" is not allowed inside XML comments.
    for (std::size_t pos; (pos = text.find("--")) != std::string::npos;) text.replace(pos, 2, "- -");
    svg += "<!-- " + text + " -->\n";
  }
  svg += "<rect x=\"0\" y=\"0\" width=\"960\" height=\"540\" fill=\"white\"/>\n";
  svg += "<text x=\"480\" y=\"28\" text-anchor=\"middle\" font-size=\"16\">" +
         xml_escape(chart.title) + "</text>\n";

  // Axes and ticks.
  svg += "<g class=\"axes\" stroke=\"black\" fill=\"none\">\n";
  svg += "<line x1=\"" + coord(kLeft) + "\" y1=\"" + coord(kBottom) + "\" x2=\"" + coord(kRight) +
         "\" y2=\"" + coord(kBottom) + "\"/>\n";
  svg += "<line x1=\"" + coord(kLeft) + "\" y1=\"" + coord(kTop) + "\" x2=\"" + coord(kLeft) +
         "\" y2=\"" + coord(kBottom) + "\"/>\n";
  svg += "</g>\n<g class=\"ticks\" fill=\"black\">\n";
  for (int i = 0; i <= 5; ++i) {
    const double xv = x_min + (x_max - x_min) * i / 5.0;
    svg += "<text x=\"" + coord(sx(xv)) + "\" y=\"" + coord(kBottom + 18) +
           "\" text-anchor=\"middle\">" + tick_label(xv) + "</text>\n";
    const double yv = y_min + (y_max - y_min) * i / 5.0;
    const double y_pos = kBottom - (yv - y_min) / (y_max - y_min) * (kBottom - kTop);
    svg += "<text x=\"" + coord(kLeft - 8) + "\" y=\"" + coord(y_pos + 4) +
           "\" text-anchor=\"end\">" + tick_label(chart.log_y ? std::pow(10.0, yv) : yv) +
           "</text>\n";
  }
  svg += "</g>\n";
  svg += "<text class=\"x-label\" x=\"" + coord((kLeft + kRight) / 2) + "\" y=\"" +
         coord(kBottom + 44) + "\" text-anchor=\"middle\">" + xml_escape(chart.x_label) +
         "</text>\n";
  svg += "<text class=\"y-label\" x=\"20\" y=\"" + coord((kTop + kBottom) / 2) +
         "\" text-anchor=\"middle\" transform=\"rotate(-90 20 " + coord((kTop + kBottom) / 2) +
         ")\">" + xml_escape(chart.y_label) + "</text>\n";

  for (std::size_t i = 0; i < drawn.size(); ++i) {
    const Series& s = drawn[i];
    svg += "<g class=\"series\" data-series=\"" + xml_escape(s.name) + "\">\n";
    if (chart.stacked) {
      std::string pts;
      for (const auto& p : s.points) pts += coord(sx(p.x)) + "," + coord(sy(*p.y)) + " ";
      const auto& lower = base[i].points;
      for (auto it = lower.rbegin(); it != lower.rend(); ++it) {
        pts += coord(sx(it->x)) + "," + coord(sy(*it->y)) + " ";
      }
      if (!pts.empty()) pts.pop_back();
      svg += "<polygon points=\"" + pts + "\" fill=\"" + color(i) +
             "\" fill-opacity=\"0.8\" stroke=\"none\"/>\n";
    } else {
      // Split at gaps so undefined cells are never interpolated over.
      std::string pts;
      auto flush = [&] {
        if (pts.empty()) return;
        pts.pop_back();
        svg += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color(i) +
               "\" stroke-width=\"2\"/>\n";
        pts.clear();
      };
      for (const auto& p : s.points) {
        if (!p.y || (chart.log_y && *p.y <= 0)) {
          flush();
          continue;
        }
        pts += coord(sx(p.x)) + "," + coord(sy(*p.y)) + " ";
      }
      flush();
    }
    svg += "</g>\n";
  }

  svg += "<g class=\"legend\">\n";
  const double row_height = std::min(18.0, (kBottom - kTop) / std::max<double>(1, drawn.size()));
  for (std::size_t i = 0; i < drawn.size(); ++i) {
    const double y = kTop + row_height * static_cast<double>(i);
    svg += "<rect x=\"760\" y=\"" + coord(y) + "\" width=\"12\" height=\"" +
           coord(std::max(2.0, row_height - 4)) + "\" fill=\"" + color(i) + "\"/>\n";
    svg += "<text x=\"778\" y=\"" + coord(y + std::max(2.0, row_height - 4)) + "\" font-size=\"" +
           coord(std::min(12.0, row_height)) + "\">" + xml_escape(drawn[i].name) + "</text>\n";
  }
  svg += "</g>\n</svg>\n";
  return svg;
}

}  // namespace depthlens
