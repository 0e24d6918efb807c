#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "poisonlab/errors.hpp"
#include "poisonlab/io.hpp"
#include "poisonlab/train.hpp"

namespace poisonlab {

// ---- catastrophic-overfitting flag -------------------------------------------
//
// Robust accuracy sometimes collapses late in training; a model picked by its
// final epoch then looks far more damaged than the best checkpoint really
// was. The flag fires when the robust-accuracy curve falls more than 30
// points (0.30) below its best, and carries the epoch of that best so the
// collapse can be located.

struct OverfitFlag {
  bool raised = false;
  int best_epoch = -1;
  double best = 0;
  double worst_after = 0;  // lowest robust accuracy seen after the best epoch
};

inline OverfitFlag detect_robust_collapse(const std::vector<double>& rob_curve,
                                          double threshold = 0.30) {
  OverfitFlag f;
  if (rob_curve.empty()) return f;
  std::size_t best_at = 0;
  for (std::size_t e = 1; e < rob_curve.size(); ++e)
    if (rob_curve[e] > rob_curve[best_at]) best_at = e;
  f.best_epoch = static_cast<int>(best_at);
  f.best = rob_curve[best_at];
  f.worst_after = f.best;
  for (std::size_t e = best_at + 1; e < rob_curve.size(); ++e)
    f.worst_after = std::min(f.worst_after, rob_curve[e]);
  f.raised = (f.best - f.worst_after) > threshold;
  return f;
}

// ---- number formatting --------------------------------------------------------

// Shortest representation that still round-trips a double; keeps CSV and SVG
// output deterministic across runs.
inline std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  double back = std::strtod(buf, nullptr);
  for (int prec = 1; prec < 17; ++prec) {
    char trial[64];
    std::snprintf(trial, sizeof trial, "%.*g", prec, v);
    if (std::strtod(trial, nullptr) == back) return trial;
  }
  return buf;
}

// ---- CSV ----------------------------------------------------------------------

inline std::string csv_quote(const std::string& s) {
  bool needs = s.find_first_of(",\"\n") != std::string::npos;
  if (!needs) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

// Per-epoch training history in the standard column layout.
inline void write_curves_csv(const std::filesystem::path& path, const EvalReport& r) {
  std::string out = "epoch,nat_acc,rob_acc,train_loss\n";
  for (std::size_t e = 0; e < r.nat_curve.size(); ++e) {
    out += std::to_string(e) + ',' + fmt_real(r.nat_curve[e]) + ',' +
           fmt_real(r.rob_curve[e]) + ',' + fmt_real(r.loss_curve[e]) + '\n';
  }
  write_text(path, out);
}

// Per-epoch logit-difference history for a tracked target example.
inline void write_ld_csv(const std::filesystem::path& path, const EvalReport& r) {
  std::string out = "epoch,nat_ld,adv_ld\n";
  for (std::size_t e = 0; e < r.nat_ld_curve.size(); ++e) {
    out += std::to_string(e) + ',' + fmt_real(r.nat_ld_curve[e]) + ',' +
           fmt_real(r.adv_ld_curve[e]) + '\n';
  }
  write_text(path, out);
}

// ---- SVG line charts ----------------------------------------------------------
//
// Self-contained vector plots, no external renderer. One polyline per series
// over a shared x axis (epochs), y range either pinned (accuracies) or fitted
// (logit differences).

struct PlotSeries {
  std::string label;
  std::string color;  // SVG color
  const std::vector<double>* values = nullptr;
  bool dashed = false;
};

inline std::string svg_line_chart(const std::string& title,
                                  const std::vector<PlotSeries>& series, double y_min,
                                  double y_max, const std::string& y_label) {
  const int w = 640, h = 400, ml = 56, mr = 16, mt = 40, mb = 44;
  const int pw = w - ml - mr, ph = h - mt - mb;
  std::size_t n = 0;
  for (const auto& s : series)
    if (s.values) n = std::max(n, s.values->size());
  if (n < 2) n = 2;
  if (!(y_max > y_min)) y_max = y_min + 1;

  auto xs = [&](std::size_t i) {
    return double(ml) + double(pw) * double(i) / double(n - 1);
  };
  auto ys = [&](double v) {
    double t = (v - y_min) / (y_max - y_min);
    t = std::clamp(t, 0.0, 1.0);
    return double(mt) + double(ph) * (1.0 - t);
  };

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) +
         "\" height=\"" + std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) +
         ' ' + std::to_string(h) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + std::to_string(w / 2) +
         "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">" +
         title + "</text>\n";

  // Axes and horizontal gridlines at quarters.
  svg += "<g stroke=\"#888\" stroke-width=\"1\">\n";
  svg += "<line x1=\"" + std::to_string(ml) + "\" y1=\"" + std::to_string(mt) +
         "\" x2=\"" + std::to_string(ml) + "\" y2=\"" + std::to_string(mt + ph) + "\"/>\n";
  svg += "<line x1=\"" + std::to_string(ml) + "\" y1=\"" + std::to_string(mt + ph) +
         "\" x2=\"" + std::to_string(ml + pw) + "\" y2=\"" + std::to_string(mt + ph) +
         "\"/>\n</g>\n";
  for (int q = 0; q <= 4; ++q) {
    double v = y_min + (y_max - y_min) * q / 4.0;
    int y = int(std::lround(ys(v)));
    if (q > 0)
      svg += "<line x1=\"" + std::to_string(ml) + "\" y1=\"" + std::to_string(y) +
             "\" x2=\"" + std::to_string(ml + pw) + "\" y2=\"" + std::to_string(y) +
             "\" stroke=\"#ddd\" stroke-width=\"1\"/>\n";
    svg += "<text x=\"" + std::to_string(ml - 6) + "\" y=\"" + std::to_string(y + 4) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
           fmt_real(v) + "</text>\n";
  }
  svg += "<text x=\"14\" y=\"" + std::to_string(mt + ph / 2) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
         "transform=\"rotate(-90 14 " +
         std::to_string(mt + ph / 2) + ")\">" + y_label + "</text>\n";
  svg += "<text x=\"" + std::to_string(ml + pw / 2) + "\" y=\"" +
         std::to_string(h - 10) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">epoch"
         "</text>\n";

  // Series polylines.
  for (const auto& s : series) {
    if (!s.values || s.values->empty()) continue;
    std::string pts;
    for (std::size_t i = 0; i < s.values->size(); ++i) {
      pts += fmt_real(xs(i)) + ',' + fmt_real(ys((*s.values)[i]));
      if (i + 1 < s.values->size()) pts += ' ';
    }
    svg += "<polyline fill=\"none\" stroke=\"" + s.color + "\" stroke-width=\"2\"";
    if (s.dashed) svg += " stroke-dasharray=\"6 4\"";
    svg += " points=\"" + pts + "\"/>\n";
  }

  // Legend, top-right corner.
  int ly = mt + 8;
  for (const auto& s : series) {
    if (!s.values) continue;
    int lx = ml + pw - 170;
    svg += "<line x1=\"" + std::to_string(lx) + "\" y1=\"" + std::to_string(ly) +
           "\" x2=\"" + std::to_string(lx + 22) + "\" y2=\"" + std::to_string(ly) +
           "\" stroke=\"" + s.color + "\" stroke-width=\"2\"" +
           (s.dashed ? " stroke-dasharray=\"6 4\"" : "") + "/>\n";
    svg += "<text x=\"" + std::to_string(lx + 28) + "\" y=\"" + std::to_string(ly + 4) +
           "\" font-family=\"sans-serif\" font-size=\"11\">" + s.label + "</text>\n";
    ly += 16;
  }
  svg += "</svg>\n";
  return svg;
}

inline void write_accuracy_plot(const std::filesystem::path& path,
                                const std::string& title, const EvalReport& clean,
                                const EvalReport& poisoned) {
  std::vector<PlotSeries> series{
      {"clean nat", "#1f77b4", &clean.nat_curve, false},
      {"clean rob", "#1f77b4", &clean.rob_curve, true},
      {"poisoned nat", "#d62728", &poisoned.nat_curve, false},
      {"poisoned rob", "#d62728", &poisoned.rob_curve, true},
  };
  write_text(path, svg_line_chart(title, series, 0.0, 1.0, "accuracy"));
}

inline void write_ld_plot(const std::filesystem::path& path, const std::string& title,
                          const EvalReport& poisoned) {
  double lo = 0, hi = 0;
  for (const auto* c : {&poisoned.nat_ld_curve, &poisoned.adv_ld_curve})
    for (double v : *c) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!(hi > lo)) hi = lo + 1;
  std::vector<PlotSeries> series{
      {"nat LD", "#2ca02c", &poisoned.nat_ld_curve, false},
      {"adv LD", "#9467bd", &poisoned.adv_ld_curve, false},
  };
  write_text(path, svg_line_chart(title, series, lo, hi, "logit difference"));
}

}  // namespace poisonlab
