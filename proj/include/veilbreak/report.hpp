// Copyright 2026 The Veilbreak Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <array>
#include <cfenv>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "veilbreak/errors.hpp"
#include "veilbreak/metrics.hpp"
#include "veilbreak/probe.hpp"
#include "veilbreak/prompt.hpp"
#include "veilbreak/response.hpp"

namespace veilbreak {

// ---------------------------------------------------------------------------
// Rounding

/// Exact 4-decimal rendering of a rational, ties to even.
inline std::string format_fixed4(const Rational& value) {
  std::int64_t num = value.numerator();
  const std::int64_t den = value.denominator();
  const bool negative = num < 0;
  if (negative) num = -num;
  const __int128 scaled = static_cast<__int128>(num) * 10000;
  __int128 q = scaled / den;
  const __int128 rem = scaled % den;
  if (2 * rem > den || (2 * rem == den && (q % 2) == 1)) ++q;
  const auto whole = static_cast<long long>(q / 10000);
  const auto frac = static_cast<int>(q % 10000);
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s%lld.%04d", (negative && q != 0) ? "-" : "",
                whole, frac);
  return buf;
}

/// 4-decimal rendering of a double; ties to even in the current FP mode.
inline std::string format_fixed4(double value) {
  const double scaled = std::nearbyint(value * 10000.0);
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.4f", scaled / 10000.0);
  std::string s = buf;
  if (s == "-0.0000") s = "0.0000";
  return s;
}

// ---------------------------------------------------------------------------
// Tables

inline constexpr std::array<const char*, 4> kTableKeyColumns{"model", "data",
                                                             "prompt", "n"};
inline constexpr std::array<const char*, 9> kTableMetricColumns{
    kColAcc,         kColAccAnswered,    kColFracAnswered,
    kColAccLogits,   kColAccLogitsRight, kColAccLogitsWrong,
    kColOutputScore, kColAdjusted,       kColSe};

/// A ScoreRow as printed: rounded cells, nullopt for undefined rates.
struct TableRow {
  std::string model;
  std::string dataset;
  std::string attack;
  std::int64_t n = 0;
  std::array<std::optional<std::string>, 9> cells;

  bool operator==(const TableRow&) const = default;
};

inline TableRow to_table_row(const ScoreRow& r) {
  auto opt = [](const std::optional<Rational>& v) -> std::optional<std::string> {
    if (!v) return std::nullopt;
    return format_fixed4(*v);
  };
  TableRow t{r.model, r.dataset, r.attack, r.n, {}};
  t.cells = {format_fixed4(r.acc),
             opt(r.acc_answered),
             format_fixed4(r.frac_answered),
             opt(r.acc_logits),
             opt(r.acc_logits_right),
             opt(r.acc_logits_wrong),
             format_fixed4(r.figure_output_score),
             format_fixed4(r.adjusted_acc),
             format_fixed4(r.se)};
  return t;
}

enum class TableFormat { kCsv, kMarkdown };

inline constexpr std::string_view kUndefinedMarkdown = "—";

namespace detail {

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline std::string md_field(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '|') out += '\\';
    out += c;
  }
  return out;
}

/// Splits one CSV line (no embedded newlines) into fields.
inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

}  // namespace detail

inline std::string emit_table(const std::vector<TableRow>& rows, TableFormat format) {
  if (rows.empty()) throw EmptyReport();
  std::vector<std::string> header(kTableKeyColumns.begin(), kTableKeyColumns.end());
  header.insert(header.end(), kTableMetricColumns.begin(), kTableMetricColumns.end());

  std::string out;
  if (format == TableFormat::kCsv) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      out += (i ? "," : "") + detail::csv_field(header[i]);
    }
    out += '\n';
    for (const auto& r : rows) {
      out += detail::csv_field(r.model) + "," + detail::csv_field(r.dataset) + "," +
             detail::csv_field(r.attack) + "," + std::to_string(r.n);
      for (const auto& cell : r.cells) out += "," + cell.value_or("");
      out += '\n';
    }
    return out;
  }

  out += "|";
  for (const auto& h : header) out += " " + h + " |";
  out += "\n|";
  for (std::size_t i = 0; i < header.size(); ++i) out += i < 3 ? " --- |" : " ---: |";
  out += '\n';
  for (const auto& r : rows) {
    out += "| " + detail::md_field(r.model) + " | " + detail::md_field(r.dataset) +
           " | " + detail::md_field(r.attack) + " | " + std::to_string(r.n) + " |";
    for (const auto& cell : r.cells) {
      out += " " + (cell ? *cell : std::string(kUndefinedMarkdown)) + " |";
    }
    out += '\n';
  }
  return out;
}

inline std::string emit_table(const std::vector<ScoreRow>& rows, TableFormat format) {
  std::vector<TableRow> table;
  table.reserve(rows.size());
  for (const auto& r : rows) table.push_back(to_table_row(r));
  return emit_table(table, format);
}

/// Reads a CSV table written by emit_table.
inline std::vector<TableRow> parse_table_csv(std::string_view text) {
  std::vector<TableRow> rows;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    const auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos
                                                                    : nl - pos);
    ++line_no;
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    if (line.empty()) continue;
    auto fields = detail::split_csv_line(line);
    if (fields.size() != kTableKeyColumns.size() + kTableMetricColumns.size()) {
      throw MalformedRecord(line_no, "table row has " + std::to_string(fields.size()) +
                                         " fields");
    }
    if (line_no == 1) {
      if (fields[0] != kTableKeyColumns[0]) throw MalformedRecord(1, "bad table header");
      continue;
    }
    TableRow r;
    r.model = fields[0];
    r.dataset = fields[1];
    r.attack = fields[2];
    try {
      r.n = std::stoll(fields[3]);
    } catch (const std::exception&) {
      throw MalformedRecord(line_no, "n is not an integer");
    }
    for (std::size_t i = 0; i < r.cells.size(); ++i) {
      const auto& f = fields[kTableKeyColumns.size() + i];
      if (!f.empty()) r.cells[i] = f;
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Charts

struct MetricView {
  std::optional<double> value;
  double se = 0.0;  // half-length of the error bar
};

inline const std::vector<std::string>& chart_metrics() {
  static const std::vector<std::string> kNames{
      "acc",        "acc_answered",     "frac_answered",    "acc_logits",
      "acc_logits_right", "acc_logits_wrong", "figure_output_score",
      "adjusted_acc"};
  return kNames;
}

/// Value and binomial standard error of `metric` on `row`.
inline MetricView metric_view(const ScoreRow& row, std::string_view metric) {
  auto binom = [](const std::optional<Rational>& r, std::int64_t n) -> MetricView {
    if (!r || n <= 0) return {std::nullopt, 0.0};
    const double p = to_double(*r);
    return {p, std_error(std::clamp(p, 0.0, 1.0), n)};
  };
  const ScoreCounts& c = row.counts;
  if (metric == "acc") return {to_double(row.acc), row.se};
  if (metric == "acc_answered") return binom(row.acc_answered, c.right);
  if (metric == "frac_answered") return binom(row.frac_answered, c.n);
  if (metric == "acc_logits") return binom(row.acc_logits, c.logit_n);
  if (metric == "acc_logits_right") return binom(row.acc_logits_right, c.logit_right);
  if (metric == "acc_logits_wrong") {
    return binom(row.acc_logits_wrong, c.logit_n - c.logit_right);
  }
  if (metric == "figure_output_score") {
    return binom(row.figure_output_score, c.n);
  }
  if (metric == "adjusted_acc") {
    return {to_double(row.adjusted_acc), row.se / (1.0 - kChanceScore)};
  }
  throw UnknownMetric(std::string(metric));
}

namespace detail {

inline std::string xml_escape(std::string_view s) {
  std::string out;
  out.reserve(s.size());
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

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  std::string s = buf;
  if (s == "-0.00") s = "0.00";
  return s;
}

inline constexpr std::array<const char*, 8> kPalette{
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
    "#9467bd", "#8c564b", "#e377c2", "#17becf"};

struct Frame {
  double width = 800, height = 420;
  double left = 64, right = 24, top = 40, bottom = 110;
  double lo = 0.0, hi = 1.0;

  double plot_w() const { return width - left - right; }
  double plot_h() const { return height - top - bottom; }
  double y(double v) const { return top + (hi - v) / (hi - lo) * plot_h(); }
};

inline std::string svg_open(const Frame& f, std::string_view title) {
  std::string out =
      "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" +
      num(f.width) + "\" height=\"" + num(f.height) + "\" viewBox=\"0 0 " +
      num(f.width) + " " + num(f.height) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out += "<title>" + xml_escape(title) + "</title>\n";
  out += "<text x=\"" + num(f.width / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" +
         xml_escape(title) + "</text>\n";
  // axes
  out += "<line class=\"axis\" x1=\"" + num(f.left) + "\" y1=\"" + num(f.top) + "\" x2=\"" +
         num(f.left) + "\" y2=\"" + num(f.top + f.plot_h()) + "\" stroke=\"#000\"/>\n";
  out += "<line class=\"axis\" x1=\"" + num(f.left) + "\" y1=\"" + num(f.y(std::max(f.lo, 0.0))) +
         "\" x2=\"" + num(f.left + f.plot_w()) + "\" y2=\"" + num(f.y(std::max(f.lo, 0.0))) +
         "\" stroke=\"#000\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = f.lo + (f.hi - f.lo) * t / 4.0;
    out += "<text class=\"tick\" x=\"" + num(f.left - 6) + "\" y=\"" + num(f.y(v) + 4) +
           "\" text-anchor=\"end\">" + num(v) + "</text>\n";
  }
  return out;
}

}  // namespace detail

/// One bar per row with a binomial error bar and a dashed baseline.
inline std::string emit_bar_chart(const std::vector<ScoreRow>& rows,
                                  std::string_view metric, double baseline = kChanceScore) {
  const auto& known = chart_metrics();
  if (std::find(known.begin(), known.end(), metric) == known.end()) {
    throw UnknownMetric(std::string(metric));
  }
  if (rows.empty()) throw EmptyReport();
  std::vector<MetricView> views;
  views.reserve(rows.size());
  for (const auto& r : rows) views.push_back(metric_view(r, metric));

  detail::Frame f;
  for (const auto& v : views) {
    if (!v.value) continue;
    f.lo = std::min(f.lo, *v.value - v.se);
    f.hi = std::max(f.hi, *v.value + v.se);
  }
  f.lo = std::min(f.lo, baseline);
  f.hi = std::max(f.hi, baseline);

  std::string out = detail::svg_open(f, std::string(metric));
  const double slot = f.plot_w() / static_cast<double>(rows.size());
  const double bar_w = slot * 0.6;
  const double zero_y = f.y(std::max(f.lo, 0.0));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double cx = f.left + slot * (static_cast<double>(i) + 0.5);
    const double v = views[i].value.value_or(0.0);
    const double y = f.y(v);
    out += "<rect class=\"bar\" x=\"" + detail::num(cx - bar_w / 2) + "\" y=\"" +
           detail::num(std::min(y, zero_y)) + "\" width=\"" + detail::num(bar_w) +
           "\" height=\"" + detail::num(std::abs(zero_y - y)) + "\" fill=\"" +
           detail::kPalette[0] + "\"" + (views[i].value ? "" : " data-undefined=\"true\"") +
           "/>\n";
    if (views[i].value && views[i].se > 0) {
      const double y1 = f.y(v + views[i].se);
      const double y2 = f.y(v - views[i].se);
      const double cap = bar_w / 6;
      out += "<path class=\"errorbar\" d=\"M" + detail::num(cx) + " " + detail::num(y1) +
             " V" + detail::num(y2) + " M" + detail::num(cx - cap) + " " + detail::num(y1) +
             " H" + detail::num(cx + cap) + " M" + detail::num(cx - cap) + " " +
             detail::num(y2) + " H" + detail::num(cx + cap) +
             "\" stroke=\"#000\" fill=\"none\"/>\n";
    }
    const std::string label = rows[i].model + " / " + rows[i].dataset + " / " + rows[i].attack;
    out += "<text class=\"label\" transform=\"translate(" + detail::num(cx) + "," +
           detail::num(f.top + f.plot_h() + 10) +
           ") rotate(45)\" text-anchor=\"start\">" + detail::xml_escape(label) + "</text>\n";
  }
  out += "<line class=\"baseline\" x1=\"" + detail::num(f.left) + "\" y1=\"" +
         detail::num(f.y(baseline)) + "\" x2=\"" + detail::num(f.left + f.plot_w()) +
         "\" y2=\"" + detail::num(f.y(baseline)) +
         "\" stroke=\"#555\" stroke-dasharray=\"2,3\"/>\n";
  out += "</svg>\n";
  return out;
}

/// Probe accuracy by layer for one (model, prompt attack) pair.
struct ProbeCurve {
  std::string name;
  std::string attack = "original";
  std::vector<CurvePoint> points;
};

/// One polyline per curve: solid for original prompts, dashed otherwise.
inline std::string emit_line_chart(const std::vector<ProbeCurve>& curves,
                                   std::string_view title = "probe accuracy by layer") {
  if (curves.empty()) throw EmptyReport();
  int min_layer = 0, max_layer = 0;
  bool first = true;
  for (const auto& c : curves) {
    for (const auto& p : c.points) {
      min_layer = first ? p.layer : std::min(min_layer, p.layer);
      max_layer = first ? p.layer : std::max(max_layer, p.layer);
      first = false;
    }
  }
  detail::Frame f;
  f.bottom = 60;
  const double span = std::max(1, max_layer - min_layer);
  auto x = [&](int layer) { return f.left + (layer - min_layer) / span * f.plot_w(); };

  std::string out = detail::svg_open(f, title);
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& c = curves[i];
    const char* color = detail::kPalette[i % detail::kPalette.size()];
    std::string points;
    for (const auto& p : c.points) {
      if (!points.empty()) points += ' ';
      points += detail::num(x(p.layer)) + "," + detail::num(f.y(p.accuracy));
    }
    const bool dashed = c.attack != "original";
    out += "<polyline class=\"curve\" fill=\"none\" stroke=\"" + std::string(color) +
           "\" stroke-width=\"2\"" + (dashed ? " stroke-dasharray=\"6,4\"" : "") +
           " points=\"" + points + "\"/>\n";
    out += "<text class=\"legend\" x=\"" + detail::num(f.left + 8) + "\" y=\"" +
           detail::num(f.height - f.bottom + 30 + 12.0 * static_cast<double>(i)) +
           "\" fill=\"" + color + "\">" + detail::xml_escape(c.name + " (" + c.attack + ")") +
           "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

// ---------------------------------------------------------------------------
// Bundle

/// Choices the harness made where the method leaves room; printed with
/// every report.
inline std::vector<std::string> default_footnotes(const PromptTemplate& tpl = {}) {
  std::string tpl_desc = tpl.question_header + "\\n" + tpl.choice_line_format +
                         " (x4)\\n" + tpl.answer_cue;
  return {
      "Right format: the single generated token, minus one optional leading "
      "space, is exactly A, B, C or D (case-sensitive).",
      "Logit pick: argmax over the option-letter log-probabilities (max over "
      "surface variants \"L\" and \" L\"); ties go to the lowest letter (A<B<C<D).",
      "Letters missing from the top-K log-probabilities count as -inf; items "
      "with all four missing are excluded from logit accuracy and counted.",
      "Output score imputes chance (0.25) for wrong-format answers: "
      "%-acc x acc(answered) + (1 - %-acc) x 0.25.",
      "Adjusted accuracy rescales chance to 0 and a perfect score to 1: "
      "(acc - 0.25) / 0.75.",
      "Standard error: binomial sqrt(p(1-p)/n).",
      "Rates print with 4 decimals, rounded half-to-even; undefined rates "
      "(zero denominator) print as —.",
      "Evaluation template: " + tpl_desc + "; shots joined by a blank line.",
      "Rephrase failures are dropped after 3 attempts and listed in the "
      "transform sidecar reports.",
  };
}

struct ReportBundle {
  std::vector<ScoreRow> rows;
  std::vector<ProbeCurve> curves;
  std::vector<RunManifest> manifests;
  std::vector<std::string> footnotes = default_footnotes();
};

inline std::string render_report_markdown(const ReportBundle& bundle) {
  if (bundle.rows.empty() && bundle.curves.empty()) throw EmptyReport();
  std::string out = "# Evaluation report\n\n";
  if (!bundle.rows.empty()) {
    out += "## Scores\n\n" + emit_table(bundle.rows, TableFormat::kMarkdown) + "\n";
  }
  for (const auto& c : bundle.curves) {
    out += "## Probe curve: " + c.name + " (" + c.attack + ")\n\n";
    out += "| layer | accuracy | n_train | n_test |\n| ---: | ---: | ---: | ---: |\n";
    for (const auto& p : c.points) {
      out += "| " + std::to_string(p.layer) + " | " + format_fixed4(p.accuracy) + " | " +
             std::to_string(p.n_train) + " | " + std::to_string(p.n_test) + " |\n";
    }
    out += "\n";
  }
  if (!bundle.manifests.empty()) {
    out += "## Runs\n\n| dataset | prompt | model | endpoint | shots | dataset sha256 |\n"
           "| --- | --- | --- | --- | ---: | --- |\n";
    for (const auto& m : bundle.manifests) {
      out += "| " + detail::md_field(m.dataset_name) + " | " + detail::md_field(m.attack) +
             " | " + detail::md_field(m.model) + " | " + detail::md_field(m.endpoint_url) +
             " | " + std::to_string(m.shots_k) + " | " + m.dataset_hash.substr(0, 12) +
             " |\n";
    }
    out += "\n";
  }
  out += "## Notes\n\n";
  for (std::size_t i = 0; i < bundle.footnotes.size(); ++i) {
    out += std::to_string(i + 1) + ". " + bundle.footnotes[i] + "\n";
  }
  return out;
}

}  // namespace veilbreak
