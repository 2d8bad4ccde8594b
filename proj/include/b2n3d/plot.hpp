#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "b2n3d/training.hpp"

// Static SVG figures and a CSV summary for evaluation reports and training curves.
namespace b2n {

struct SplitValue {
  std::string split;
  double accuracy = 0.0;
  int count = 0;
};

inline std::vector<SplitValue> report_splits(const EvalReport& r) {
  return {{"overall", r.overall_acc, r.total},
          {"hard", r.hard_acc, r.hard_count},
          {"easy", r.easy_acc, r.easy_count},
          {"rn_ge2", r.rn_ge2_acc, r.rn_ge2_count},
          {"rn_le1", r.rn_le1_acc, r.rn_le1_count}};
}

/// Distinct labels for reports: the ablation name, suffixed when repeated.
inline std::vector<std::string> report_labels(const std::vector<EvalReport>& reports) {
  std::map<std::string, int> seen;
  std::vector<std::string> out;
  for (const auto& r : reports) {
    const int k = ++seen[r.ablation];
    out.push_back(k == 1 ? r.ablation : r.ablation + "#" + std::to_string(k));
  }
  return out;
}

namespace detail {

inline std::string fmt(double v, int precision = 3) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}

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

inline const char* palette(int i) {
  static const char* kColors[] = {"#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb"};
  return kColors[i % 7];
}

class Svg {
 public:
  Svg(int w, int h) : w_(w), h_(h) {}
  void rect(double x, double y, double w, double h, const std::string& fill, const std::string& title = "") {
    body_ << "<rect x=\"" << fmt(x, 1) << "\" y=\"" << fmt(y, 1) << "\" width=\"" << fmt(w, 1) << "\" height=\""
          << fmt(h, 1) << "\" fill=\"" << fill << "\">";
    if (!title.empty()) body_ << "<title>" << xml_escape(title) << "</title>";
    body_ << "</rect>\n";
  }
  void line(double x1, double y1, double x2, double y2, const std::string& stroke, double width = 1.0) {
    body_ << "<line x1=\"" << fmt(x1, 1) << "\" y1=\"" << fmt(y1, 1) << "\" x2=\"" << fmt(x2, 1) << "\" y2=\""
          << fmt(y2, 1) << "\" stroke=\"" << stroke << "\" stroke-width=\"" << width << "\"/>\n";
  }
  void text(double x, double y, const std::string& s, const std::string& anchor = "middle", int size = 12) {
    body_ << "<text x=\"" << fmt(x, 1) << "\" y=\"" << fmt(y, 1) << "\" font-size=\"" << size
          << "\" font-family=\"sans-serif\" text-anchor=\"" << anchor << "\">" << xml_escape(s) << "</text>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
    body_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) body_ << fmt(x, 1) << "," << fmt(y, 1) << " ";
    body_ << "\"/>\n";
  }
  void save(const std::filesystem::path& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write figure: " + path.string());
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w_ << "\" height=\"" << h_ << "\" viewBox=\"0 0 "
      << w_ << " " << h_ << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << body_.str() << "</svg>\n";
    if (!f) throw std::runtime_error("write failed: " + path.string());
  }

 private:
  int w_, h_;
  std::ostringstream body_;
};

/// Grouped bars: one group per category, one bar per series, values in [0, 1].
inline void grouped_bars(const std::filesystem::path& path, const std::string& title,
                         const std::vector<std::string>& groups, const std::vector<std::string>& series,
                         const std::vector<std::vector<double>>& values) {
  const double left = 60, top = 40, plot_h = 260, group_w = std::max(80.0, 30.0 * static_cast<double>(series.size()) + 30);
  const double width = left + group_w * static_cast<double>(groups.size()) + 160;
  Svg svg(static_cast<int>(width), static_cast<int>(top + plot_h + 60));
  svg.text(width / 2, 22, title, "middle", 14);
  for (int k = 0; k <= 4; ++k) {
    const double y = top + plot_h * (1.0 - k / 4.0);
    svg.line(left, y, left + group_w * static_cast<double>(groups.size()), y, "#dddddd");
    svg.text(left - 6, y + 4, fmt(k / 4.0, 2), "end", 10);
  }
  const double bar_w = (group_w - 20) / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = left + group_w * static_cast<double>(g) + 10;
    for (std::size_t s = 0; s < series.size(); ++s) {
      const double v = std::clamp(values[s][g], 0.0, 1.0);
      svg.rect(gx + bar_w * static_cast<double>(s), top + plot_h * (1.0 - v), bar_w - 2, plot_h * v,
               palette(static_cast<int>(s)), series[s] + " " + groups[g] + ": " + fmt(values[s][g], 4));
    }
    svg.text(gx + (group_w - 20) / 2, top + plot_h + 18, groups[g]);
  }
  const double lx = left + group_w * static_cast<double>(groups.size()) + 20;
  for (std::size_t s = 0; s < series.size(); ++s) {
    const double ly = top + 18.0 * static_cast<double>(s);
    svg.rect(lx, ly, 12, 12, palette(static_cast<int>(s)));
    svg.text(lx + 18, ly + 10, series[s], "start", 11);
  }
  svg.line(left, top + plot_h, left + group_w * static_cast<double>(groups.size()), top + plot_h, "black");
  svg.save(path);
}

}  // namespace detail

struct TrainingCurve {
  std::string label;
  std::vector<double> loss;
  std::vector<double> val_acc;
};

inline TrainingCurve curve_from_json(const std::string& label, const nlohmann::json& j) {
  TrainingCurve c;
  c.label = label;
  for (const auto& e : j) {
    c.loss.push_back(e.at("loss").get<double>());
    c.val_acc.push_back(e.at("val_acc").get<double>());
  }
  return c;
}

struct PlotOutput {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> labels;
};

inline void write_summary_table(const std::filesystem::path& path, const std::vector<EvalReport>& reports) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write summary: " + path.string());
  f << "label,split,accuracy,count\n";
  f.precision(17);
  const auto labels = report_labels(reports);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    for (const auto& s : report_splits(reports[i])) f << labels[i] << "," << s.split << "," << s.accuracy << "," << s.count << "\n";
  }
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

/// Writes accuracy_by_split.svg, ablation_comparison.svg, summary.csv and, when curves
/// are given, loss_curves.svg into `dir`.
inline PlotOutput plot_reports(const std::vector<EvalReport>& reports, const std::filesystem::path& dir,
                               const std::vector<TrainingCurve>& curves = {}) {
  if (reports.empty()) throw InputError("plot_reports: no reports");
  std::filesystem::create_directories(dir);
  PlotOutput out;
  out.labels = report_labels(reports);
  std::vector<std::string> splits;
  for (const auto& s : report_splits(reports[0])) splits.push_back(s.split);
  std::vector<std::vector<double>> values;
  for (const auto& r : reports) {
    std::vector<double> v;
    for (const auto& s : report_splits(r)) v.push_back(s.accuracy);
    values.push_back(std::move(v));
  }
  out.files.push_back(dir / "accuracy_by_split.svg");
  detail::grouped_bars(out.files.back(), "Accuracy by split", splits, out.labels, values);

  std::vector<std::vector<double>> rn_values;
  for (const auto& r : reports) rn_values.push_back({r.overall_acc, r.rn_ge2_acc, r.rn_le1_acc});
  out.files.push_back(dir / "ablation_comparison.svg");
  detail::grouped_bars(out.files.back(), "Ablation comparison", {"overall", "rn_ge2", "rn_le1"}, out.labels, rn_values);

  if (!curves.empty()) {
    const double left = 60, top = 40, w = 520, h = 260;
    detail::Svg svg(static_cast<int>(left + w + 180), static_cast<int>(top + h + 60));
    svg.text((left + w) / 2, 22, "Training loss", "middle", 14);
    double max_loss = 0.0;
    std::size_t max_len = 1;
    for (const auto& c : curves) {
      for (double l : c.loss) max_loss = std::max(max_loss, l);
      max_len = std::max(max_len, c.loss.size());
    }
    if (max_loss <= 0.0) max_loss = 1.0;
    for (int k = 0; k <= 4; ++k) {
      const double y = top + h * (1.0 - k / 4.0);
      svg.line(left, y, left + w, y, "#dddddd");
      svg.text(left - 6, y + 4, detail::fmt(max_loss * k / 4.0, 2), "end", 10);
    }
    for (std::size_t i = 0; i < curves.size(); ++i) {
      std::vector<std::pair<double, double>> pts;
      for (std::size_t e = 0; e < curves[i].loss.size(); ++e) {
        const double x = left + w * (max_len == 1 ? 0.0 : static_cast<double>(e) / static_cast<double>(max_len - 1));
        pts.emplace_back(x, top + h * (1.0 - curves[i].loss[e] / max_loss));
      }
      svg.polyline(pts, detail::palette(static_cast<int>(i)));
      svg.rect(left + w + 20, top + 18.0 * static_cast<double>(i), 12, 12, detail::palette(static_cast<int>(i)));
      svg.text(left + w + 38, top + 18.0 * static_cast<double>(i) + 10, curves[i].label, "start", 11);
    }
    svg.text(left + w / 2, top + h + 30, "epoch");
    out.files.push_back(dir / "loss_curves.svg");
    svg.save(out.files.back());
  }

  out.files.push_back(dir / "summary.csv");
  write_summary_table(out.files.back(), reports);
  return out;
}

}  // namespace b2n
