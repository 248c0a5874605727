#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvd/eval.hpp"

namespace dvd {

class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

/// Minimal SVG plots. Output depends only on the inputs.
std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series);
std::string bar_chart_svg(const std::string& title, const std::string& y_label,
                          const std::vector<std::string>& groups, const std::vector<Series>& series);
std::string scatter_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                        const std::vector<Series>& points);

/// One loaded report with the run it came from.
struct NamedReport {
  std::string run;
  EvalReport report;
};

/// Every reports/*.json of each run directory, sorted by file name.
std::vector<NamedReport> collect_reports(const std::vector<std::filesystem::path>& runs);

/// Figures and CSV tables written under `out`; returns the files written.
/// accuracy_vs_eps.svg: robust zero-shot accuracy per encoder.
/// caption_vs_eps.svg: adversarial caption token accuracy per captioner.
/// asr.svg: mean targeted ASR per captioner and radius.
/// clean_vs_robust.svg: clean against robust numbers at the largest radius.
/// <run>_<model>.csv: aggregate rows of each report.
std::vector<std::filesystem::path> emit_report(const std::vector<std::filesystem::path>& runs,
                                               const std::filesystem::path& out);

}  // namespace dvd
