#include "dvd/report.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

namespace dvd {

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 64, kRight = 170, kTop = 44, kBottom = 56;
const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

const char* color(std::size_t i) { return kPalette[i % (sizeof kPalette / sizeof kPalette[0])]; }

class Canvas {
 public:
  Canvas(const std::string& title) {
    os_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(kWidth) << "\" height=\"" << num(kHeight)
        << "\" viewBox=\"0 0 " << num(kWidth) << ' ' << num(kHeight) << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os_ << "<rect x=\"0\" y=\"0\" width=\"" << num(kWidth) << "\" height=\"" << num(kHeight) << "\" fill=\"white\"/>\n";
    text(kWidth / 2 - kRight / 2 + kLeft / 2, 24, title, "middle", 14);
  }

  void line(double x1, double y1, double x2, double y2, const std::string& stroke, double w = 1.0) {
    os_ << "<line x1=\"" << num(x1) << "\" y1=\"" << num(y1) << "\" x2=\"" << num(x2) << "\" y2=\"" << num(y2)
        << "\" stroke=\"" << stroke << "\" stroke-width=\"" << num(w) << "\"/>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
    os_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"2.00\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) os_ << (i ? " " : "") << num(pts[i].first) << ',' << num(pts[i].second);
    os_ << "\"/>\n";
  }
  void circle(double x, double y, double r, const std::string& fill) {
    os_ << "<circle cx=\"" << num(x) << "\" cy=\"" << num(y) << "\" r=\"" << num(r) << "\" fill=\"" << fill << "\"/>\n";
  }
  void rect(double x, double y, double w, double h, const std::string& fill) {
    os_ << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << num(w) << "\" height=\"" << num(h)
        << "\" fill=\"" << fill << "\"/>\n";
  }
  void text(double x, double y, const std::string& s, const char* anchor = "start", int size = 12,
            double rotate = 0.0) {
    os_ << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\" text-anchor=\"" << anchor << "\" font-size=\"" << size
        << '"';
    if (rotate != 0.0) os_ << " transform=\"rotate(" << num(rotate) << ' ' << num(x) << ' ' << num(y) << ")\"";
    os_ << '>' << escape(s) << "</text>\n";
  }
  void legend(const std::vector<std::string>& labels) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const double y = kTop + 10 + 18 * static_cast<double>(i);
      rect(kWidth - kRight + 16, y - 9, 12, 12, color(i));
      text(kWidth - kRight + 34, y + 1, labels[i]);
    }
  }
  std::string str() {
    os_ << "</svg>\n";
    return os_.str();
  }

 private:
  std::ostringstream os_;
};

struct Frame {
  double x0, x1;  // data range on x
  double px(double x) const {
    return kLeft + (x1 > x0 ? (x - x0) / (x1 - x0) : 0.5) * (kWidth - kLeft - kRight);
  }
  static double py(double y) { return kHeight - kBottom - std::clamp(y, 0.0, 1.0) * (kHeight - kTop - kBottom); }
};

void draw_axes(Canvas& c, const Frame& f, const std::vector<double>& x_ticks, const std::string& x_label,
               const std::string& y_label) {
  const double bottom = kHeight - kBottom, right = kWidth - kRight;
  for (int i = 0; i <= 4; ++i) {
    const double y = Frame::py(i / 4.0);
    c.line(kLeft, y, right, y, "#dddddd");
    c.text(kLeft - 6, y + 4, num(i / 4.0), "end");
  }
  c.line(kLeft, bottom, right, bottom, "black");
  c.line(kLeft, kTop, kLeft, bottom, "black");
  for (double t : x_ticks) {
    const double x = f.px(t);
    c.line(x, bottom, x, bottom + 4, "black");
    c.text(x, bottom + 18, num(t), "middle");
  }
  c.text((kLeft + right) / 2, kHeight - 14, x_label, "middle");
  c.text(18, (kTop + bottom) / 2, y_label, "middle", 12, -90.0);
}

Frame frame_for(const std::vector<Series>& series, std::vector<double>* ticks) {
  std::vector<double> xs;
  for (const auto& s : series) xs.insert(xs.end(), s.x.begin(), s.x.end());
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  if (ticks) *ticks = xs;
  if (xs.empty()) return {0.0, 1.0};
  return {xs.front(), xs.back()};
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char ch : s) out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_') ? ch : '_';
  return out;
}

// Last aggregate row per epsilon: the full attack pipeline for robust rows.
std::map<double, double> by_eps(const EvalReport& r, const std::string& metric, bool skip_clean) {
  std::map<double, double> out;
  for (const auto& row : r.rows) {
    if (row.metric != metric || !row.detail.empty()) continue;
    if (skip_clean && row.attack == "none") continue;
    out[row.epsilon] = row.value;
  }
  return out;
}

std::optional<double> clean_value(const EvalReport& r, const std::string& metric) {
  for (const auto& row : r.rows) {
    if (row.metric == metric && row.attack == "none" && row.detail.empty()) return row.value;
  }
  return std::nullopt;
}

Series to_series(const std::string& label, const std::map<double, double>& m) {
  Series s{label, {}, {}};
  for (const auto& [e, v] : m) {
    s.x.push_back(e * 255.0);
    s.y.push_back(v);
  }
  return s;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw ReportError("cannot write " + path.string());
}

}  // namespace

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series) {
  Canvas c(title);
  std::vector<double> ticks;
  const auto f = frame_for(series, &ticks);
  draw_axes(c, f, ticks, x_label, y_label);
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < series.size(); ++i) {
    std::vector<std::pair<double, double>> pts;
    for (std::size_t j = 0; j < series[i].x.size(); ++j) pts.emplace_back(f.px(series[i].x[j]), Frame::py(series[i].y[j]));
    if (pts.size() > 1) c.polyline(pts, color(i));
    for (const auto& [x, y] : pts) c.circle(x, y, 3.0, color(i));
    labels.push_back(series[i].label);
  }
  c.legend(labels);
  return c.str();
}

std::string bar_chart_svg(const std::string& title, const std::string& y_label,
                          const std::vector<std::string>& groups, const std::vector<Series>& series) {
  Canvas c(title);
  const double bottom = kHeight - kBottom, right = kWidth - kRight;
  for (int i = 0; i <= 4; ++i) {
    const double y = Frame::py(i / 4.0);
    c.line(kLeft, y, right, y, "#dddddd");
    c.text(kLeft - 6, y + 4, num(i / 4.0), "end");
  }
  c.line(kLeft, bottom, right, bottom, "black");
  c.line(kLeft, kTop, kLeft, bottom, "black");
  c.text(18, (kTop + bottom) / 2, y_label, "middle", 12, -90.0);
  const double group_w = groups.empty() ? 0.0 : (right - kLeft) / static_cast<double>(groups.size());
  const double bar_w = series.empty() ? 0.0 : group_w * 0.8 / static_cast<double>(series.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = kLeft + group_w * static_cast<double>(g);
    c.text(gx + group_w / 2, bottom + 18, groups[g], "middle");
    for (std::size_t s = 0; s < series.size(); ++s) {
      if (g >= series[s].y.size()) continue;
      const double y = Frame::py(series[s].y[g]);
      c.rect(gx + group_w * 0.1 + bar_w * static_cast<double>(s), y, bar_w, bottom - y, color(s));
    }
  }
  std::vector<std::string> labels;
  for (const auto& s : series) labels.push_back(s.label);
  c.legend(labels);
  return c.str();
}

std::string scatter_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                        const std::vector<Series>& points) {
  Canvas c(title);
  const Frame f{0.0, 1.0};
  draw_axes(c, f, {0.0, 0.25, 0.5, 0.75, 1.0}, x_label, y_label);
  c.line(f.px(0.0), Frame::py(0.0), f.px(1.0), Frame::py(1.0), "#bbbbbb");
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t j = 0; j < points[i].x.size(); ++j) {
      c.circle(f.px(std::clamp(points[i].x[j], 0.0, 1.0)), Frame::py(points[i].y[j]), 5.0, color(i));
    }
    labels.push_back(points[i].label);
  }
  c.legend(labels);
  return c.str();
}

std::vector<NamedReport> collect_reports(const std::vector<std::filesystem::path>& runs) {
  namespace fs = std::filesystem;
  if (runs.empty()) throw ReportError("no run directories given");
  std::vector<NamedReport> out;
  for (const auto& run : runs) {
    const auto dir = run / "reports";
    if (!fs::is_directory(dir)) throw ReportError("missing report directory: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().extension() == ".json") files.push_back(e.path());
    }
    if (files.empty()) throw ReportError("missing report file: " + (dir / "*.json").string());
    std::sort(files.begin(), files.end());
    const auto name = fs::absolute(run).lexically_normal().filename().string();
    for (const auto& p : files) {
      try {
        out.push_back({name.empty() ? run.string() : name, load_report(p)});
      } catch (const EvalError& e) {
        throw ReportError(p.string() + ": " + e.what());
      }
    }
  }
  return out;
}

std::vector<std::filesystem::path> emit_report(const std::vector<std::filesystem::path>& runs,
                                               const std::filesystem::path& out) {
  const auto reports = collect_reports(runs);
  std::filesystem::create_directories(out);
  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(out / name, text);
    written.push_back(out / name);
  };
  const bool many_runs = runs.size() > 1;
  auto label_of = [&](const NamedReport& r) { return many_runs ? r.run + "/" + r.report.model : r.report.model; };

  std::vector<Series> zero_shot, caption, scatter;
  std::vector<std::string> asr_groups;
  std::map<double, Series> asr_by_eps;
  for (const auto& nr : reports) {
    const auto& r = nr.report;
    auto robust = by_eps(r, "robust_accuracy", false);
    if (!robust.empty()) {
      zero_shot.push_back(to_series(label_of(nr), robust));
      if (auto clean = clean_value(r, "clean_accuracy")) {
        scatter.push_back({label_of(nr), {*clean}, {robust.rbegin()->second}});
      }
    }
    auto cap = by_eps(r, "caption_token_accuracy", true);
    if (!cap.empty()) {
      caption.push_back(to_series(label_of(nr), cap));
      if (auto clean = clean_value(r, "caption_token_accuracy")) {
        scatter.push_back({label_of(nr), {*clean}, {cap.rbegin()->second}});
      }
    }
    auto asr = by_eps(r, "asr", false);
    if (!asr.empty()) {
      asr_groups.push_back(label_of(nr));
      for (auto& [e, s] : asr_by_eps) s.y.push_back(asr.count(e) ? asr.at(e) : 0.0);
      for (const auto& [e, v] : asr) {
        if (!asr_by_eps.count(e)) {
          Series s{"eps " + num(e * 255.0) + "/255", {}, std::vector<double>(asr_groups.size() - 1, 0.0)};
          s.y.push_back(v);
          asr_by_eps.emplace(e, std::move(s));
        }
      }
    }
    std::string csv_name = sanitize(nr.run) + "_" + sanitize(r.model) + ".csv";
    emit(csv_name, report_to_csv(r));
  }
  std::vector<Series> asr_series;
  for (auto& [e, s] : asr_by_eps) asr_series.push_back(std::move(s));

  emit("accuracy_vs_eps.svg", line_chart_svg("Zero-shot robust accuracy", "epsilon (x/255)", "accuracy", zero_shot));
  emit("caption_vs_eps.svg",
       line_chart_svg("Caption token accuracy under attack", "epsilon (x/255)", "token accuracy", caption));
  emit("asr.svg", bar_chart_svg("Targeted attack success rate", "mean ASR", asr_groups, asr_series));
  emit("clean_vs_robust.svg", scatter_svg("Clean vs robust at the largest radius", "clean", "robust", scatter));
  return written;
}

}  // namespace dvd
