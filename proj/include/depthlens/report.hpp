#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace depthlens {

// Empty cell (monostate) marks an undefined value, e.g. a rate with an empty
// denominator.
using Cell = std::variant<std::monostate, std::int64_t, double, std::string>;

struct ReportTable {
  std::string kind;  // buckets | flips | onset | meanrank | probmass
  std::vector<std::pair<std::string, std::string>> provenance;
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;

  std::size_t column(std::string_view name) const;
  void set_provenance(std::string key, std::string value);
};

// "# key=value" provenance lines, a header row, then one line per row.
// Floats use 9 significant digits.
std::string to_csv(const ReportTable& table);
std::string format_float(double value);

// Standalone SVG (960x540 viewBox) chosen by table.kind: stacked area for
// buckets, grouped lines for onset, plain lines otherwise.
std::string render_svg(const ReportTable& table);

}  // namespace depthlens
