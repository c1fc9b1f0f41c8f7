#include "aoe/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>

#include "json_convert.hpp"

namespace aoe {

namespace {

std::string_view column_prefix(Group g) {
  switch (g) {
    case Group::Attention: return "attention";
    case Group::RoutedExpertMLP: return "routed_experts";
    case Group::SharedExpertMLP: return "shared_experts";
    case Group::ExpertGate: return "router_gate";
    case Group::DenseMLP: return "dense_mlp";
    default: return "";
  }
}

std::string format_real(double v) { return fmt::format("{}", v); }

struct Cell {
  std::vector<double> values;

  double reduce(Aggregate agg) const {
    if (std::any_of(values.begin(), values.end(), [](double v) { return std::isnan(v); })) return NAN;
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    if (agg == Aggregate::Max || *lo == *hi) return *hi;
    double sum = 0.0;
    double c = 0.0;
    for (double v : values) {
      const double t = sum + v;
      c += std::fabs(sum) >= std::fabs(v) ? (sum - t) + v : (v - t) + sum;
      sum = t;
    }
    return (sum + c) / static_cast<double>(values.size());
  }
};

}  // namespace

HeatmapTable emit_heatmap(std::span<const DiffRecord> diffs, Aggregate aggregate) {
  using ColumnKey = std::pair<Group, std::string>;
  std::map<ColumnKey, std::map<std::uint32_t, Cell>> columns;
  std::optional<std::uint32_t> max_layer;
  for (const auto& d : diffs) {
    if (!d.category.layer || column_prefix(d.category.group).empty()) continue;
    const auto layer = *d.category.layer;
    max_layer = std::max(max_layer.value_or(0), layer);
    columns[{d.category.group, d.category.projection}][layer].values.push_back(d.max_diff);
  }
  HeatmapTable table;
  if (!max_layer) return table;
  for (std::uint32_t l = 0; l <= *max_layer; ++l) table.layers.push_back(l);
  for (const auto& [key, _] : columns) {
    const auto prefix = column_prefix(key.first);
    table.columns.push_back(key.second.empty() ? std::string(prefix) : fmt::format("{}.{}", prefix, key.second));
  }
  table.cells.assign(table.layers.size(), std::vector<std::optional<double>>(table.columns.size()));
  std::size_t col = 0;
  for (const auto& [_, per_layer] : columns) {
    for (const auto& [layer, cell] : per_layer) table.cells[layer][col] = cell.reduce(aggregate);
    ++col;
  }
  return table;
}

std::string HeatmapTable::to_csv() const {
  std::string out = "layer";
  for (const auto& c : columns) out += "," + c;
  out += "\n";
  for (std::size_t r = 0; r < layers.size(); ++r) {
    out += std::to_string(layers[r]);
    for (const auto& cell : cells[r]) {
      out += ",";
      if (cell) out += format_real(*cell);
    }
    out += "\n";
  }
  return out;
}

Histogram emit_histogram(std::span<const DiffRecord> diffs, const HistogramSpec& spec) {
  if (spec.edges.size() < 2) throw ValidationError("histogram: need at least two bin edges");
  for (std::size_t i = 1; i < spec.edges.size(); ++i) {
    if (!(spec.edges[i] > spec.edges[i - 1])) throw ValidationError("histogram: bin edges must be strictly increasing");
  }
  const std::size_t nbins = spec.edges.size() - 1;
  std::map<Group, std::vector<std::size_t>> counts;
  Histogram h;
  for (const auto& d : diffs) {
    auto& row = counts[d.category.group];
    row.resize(nbins, 0);
    const double v = d.max_diff;
    if (v < spec.cutoff) {
      ++h.excluded_below_cutoff;
      continue;
    }
    if (std::isnan(v) || v < spec.edges.front() || v > spec.edges.back()) {
      ++h.excluded_out_of_range;
      continue;
    }
    auto it = std::upper_bound(spec.edges.begin(), spec.edges.end(), v);
    auto bin = static_cast<std::size_t>(it - spec.edges.begin()) - 1;
    bin = std::min(bin, nbins - 1);  // v == last edge
    ++row[bin];
    ++h.included;
  }
  for (const auto& [g, row] : counts) {
    for (std::size_t b = 0; b < nbins; ++b) h.bins.push_back({g, spec.edges[b], spec.edges[b + 1], row[b]});
  }
  return h;
}

std::string Histogram::to_csv() const {
  std::string out = "category,bin_lo,bin_hi,count\n";
  for (const auto& b : bins) {
    out += fmt::format("{},{},{},{}\n", to_string(b.group), format_real(b.lo), format_real(b.hi), b.count);
  }
  return out;
}

std::optional<double> ReasoningStats::frequency() const noexcept {
  if (total == 0) return std::nullopt;
  return static_cast<double>(with_closing_tag) / static_cast<double>(total);
}

std::string ReasoningStats::to_json() const {
  detail::ordered_json j;
  j["total"] = total;
  j["with_closing_tag"] = with_closing_tag;
  const auto f = frequency();
  j["frequency"] = f ? detail::ordered_json(*f) : detail::ordered_json(nullptr);
  j["with_opening_tag"] = with_opening_tag;
  j["open_tag"] = open_tag;
  j["close_tag"] = close_tag;
  j["malformed"] = malformed;
  j["malformed_lines"] = malformed_lines;
  detail::ordered_json rs = detail::ordered_json::array();
  for (const auto& r : responses) {
    rs.push_back({{"id", r.id},
                  {"opened", r.opened},
                  {"closed", r.closed},
                  {"close_byte_offset", r.close_byte_offset ? detail::ordered_json(*r.close_byte_offset)
                                                             : detail::ordered_json(nullptr)}});
  }
  j["responses"] = std::move(rs);
  return j.dump(2) + "\n";
}

ReasoningStats reasoning_frequency(std::istream& in, std::string_view open_tag, std::string_view close_tag) {
  if (close_tag.empty()) throw ValidationError("think-freq: close tag must not be empty");
  ReasoningStats stats;
  stats.open_tag = open_tag;
  stats.close_tag = close_tag;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto bad = [&](std::string_view why) {
      ++stats.malformed;
      stats.malformed_lines.push_back(fmt::format("line {}: {}", lineno, why));
    };
    detail::json rec;
    try {
      rec = detail::json::parse(line);
    } catch (const detail::json::exception&) {
      bad("invalid JSON");
      continue;
    }
    if (!rec.is_object()) {
      bad("record is not an object");
      continue;
    }
    auto it = rec.find("response");
    if (it == rec.end() || !it->is_string()) {
      bad("missing string field 'response'");
      continue;
    }
    ResponseResult r;
    auto id = rec.find("id");
    if (id != rec.end() && id->is_string()) {
      r.id = id->get<std::string>();
    } else if (id != rec.end() && id->is_number()) {
      r.id = id->dump();
    } else {
      r.id = fmt::format("line{}", lineno);
    }
    const auto& text = it->get_ref<const std::string&>();
    r.opened = !open_tag.empty() && std::string_view(text).starts_with(open_tag);
    const auto pos = text.find(close_tag);
    if (pos != std::string::npos) {
      r.closed = true;
      r.close_byte_offset = pos;
    }
    ++stats.total;
    stats.with_closing_tag += r.closed ? 1 : 0;
    stats.with_opening_tag += r.opened ? 1 : 0;
    stats.responses.push_back(std::move(r));
  }
  return stats;
}

}  // namespace aoe
