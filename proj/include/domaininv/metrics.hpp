#pragma once

// SQuAD-style answer scoring and EM / F1 report rendering.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace domaininv {

// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse whitespace.
inline std::string normalize_answer(const std::string& text) {
  std::string no_punct;
  for (unsigned char c : text)
    if (!std::ispunct(c)) no_punct += static_cast<char>(std::tolower(c));
  std::istringstream in(no_punct);
  std::string out;
  for (std::string w; in >> w;) {
    if (w == "a" || w == "an" || w == "the") continue;
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

struct PairScore {
  double em = 0.0;
  double f1 = 0.0;
};

inline PairScore score_pair(const std::string& prediction, const std::string& gold) {
  const std::string p = normalize_answer(prediction), g = normalize_answer(gold);
  PairScore s;
  s.em = p == g ? 1.0 : 0.0;
  std::istringstream ip(p), ig(g);
  std::vector<std::string> pt, gt;
  for (std::string w; ip >> w;) pt.push_back(w);
  for (std::string w; ig >> w;) gt.push_back(w);
  if (pt.empty() || gt.empty()) {
    s.f1 = pt.empty() && gt.empty() ? 1.0 : 0.0;
    return s;
  }
  std::map<std::string, int> counts;
  for (const auto& w : gt) ++counts[w];
  int common = 0;
  for (const auto& w : pt)
    if (auto it = counts.find(w); it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  if (common == 0) return s;
  const double precision = static_cast<double>(common) / static_cast<double>(pt.size());
  const double recall = static_cast<double>(common) / static_cast<double>(gt.size());
  s.f1 = 2.0 * precision * recall / (precision + recall);
  return s;
}

// Max over reference answers.
inline PairScore score_against(const std::string& prediction, const std::vector<std::string>& golds) {
  PairScore best;
  for (const auto& g : golds) {
    const PairScore s = score_pair(prediction, g);
    best.em = std::max(best.em, s.em);
    best.f1 = std::max(best.f1, s.f1);
  }
  return best;
}

struct Metrics {
  double em = 0.0;  // percentage
  double f1 = 0.0;  // percentage
  std::size_t n = 0;
};

inline void to_json(nlohmann::json& j, const Metrics& m) { j = {{"em", m.em}, {"f1", m.f1}, {"n", m.n}}; }
inline void from_json(const nlohmann::json& j, Metrics& m) {
  m.em = j.at("em").get<double>();
  m.f1 = j.at("f1").get<double>();
  m.n = j.at("n").get<std::size_t>();
}

class MetricsError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// predictions: id -> text; golds: id -> reference answers. Id sets must match.
inline Metrics evaluate_corpus(const std::unordered_map<std::string, std::string>& predictions,
                               const std::unordered_map<std::string, std::vector<std::string>>& golds) {
  std::vector<std::string> missing;
  for (const auto& [id, _] : golds)
    if (!predictions.count(id)) missing.push_back("prediction for " + id);
  for (const auto& [id, _] : predictions)
    if (!golds.count(id)) missing.push_back("gold for " + id);
  if (!missing.empty()) {
    std::sort(missing.begin(), missing.end());
    std::string msg = "evaluate_corpus: id mismatch; missing";
    for (const auto& m : missing) msg += " [" + m + "]";
    throw MetricsError(msg);
  }
  if (golds.empty()) throw MetricsError("evaluate_corpus: empty corpus");
  // Accumulate in sorted id order so the sum is independent of hash order.
  std::vector<std::string> ids;
  for (const auto& [id, _] : golds) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  double em = 0.0, f1 = 0.0;
  for (const auto& id : ids) {
    const PairScore s = score_against(predictions.at(id), golds.at(id));
    em += s.em;
    f1 += s.f1;
  }
  const double n = static_cast<double>(ids.size());
  return Metrics{100.0 * em / n, 100.0 * f1 / n, ids.size()};
}

inline std::string format_em_f1(const Metrics& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f/%.2f", m.em, m.f1);
  return buf;
}

struct ReportRow {
  std::string model;
  std::vector<Metrics> cells;  // one per column
};

// Plain-text table: a header of column names and an "EM / F1" subheader.
inline std::string render_table(const std::vector<std::string>& columns, const std::vector<ReportRow>& rows) {
  std::size_t w0 = 5;
  for (const auto& r : rows) w0 = std::max(w0, r.model.size());
  std::size_t wc = 11;
  for (const auto& c : columns) wc = std::max(wc, c.size());
  auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w > s.size() ? w - s.size() : 0, ' '); };
  std::string out = pad("Model", w0);
  for (const auto& c : columns) out += " | " + pad(c, wc);
  out += "\n" + pad("", w0);
  for (std::size_t i = 0; i < columns.size(); ++i) out += " | " + pad("EM / F1", wc);
  out += "\n" + std::string(w0, '-');
  for (std::size_t i = 0; i < columns.size(); ++i) out += "-+-" + std::string(wc, '-');
  out += "\n";
  for (const auto& r : rows) {
    out += pad(r.model, w0);
    for (const auto& m : r.cells) out += " | " + pad(format_em_f1(m), wc);
    out += "\n";
  }
  return out;
}

inline std::string render_csv(const std::vector<std::string>& columns, const std::vector<ReportRow>& rows) {
  std::string out = "model";
  for (const auto& c : columns) out += "," + c;
  out += "\n";
  for (const auto& r : rows) {
    out += r.model;
    for (const auto& m : r.cells) out += "," + format_em_f1(m);
    out += "\n";
  }
  return out;
}

// Two runs and their difference, column by column.
inline std::string render_delta(const std::vector<std::string>& columns, const ReportRow& a, const ReportRow& b) {
  ReportRow delta{"delta (" + b.model + " - " + a.model + ")", {}};
  for (std::size_t i = 0; i < a.cells.size() && i < b.cells.size(); ++i)
    delta.cells.push_back({b.cells[i].em - a.cells[i].em, b.cells[i].f1 - a.cells[i].f1, b.cells[i].n});
  return render_table(columns, {a, b, delta});
}

inline std::string render_delta(const std::string& column, const ReportRow& a, const ReportRow& b) {
  return render_delta(std::vector<std::string>{column}, a, b);
}

}  // namespace domaininv
