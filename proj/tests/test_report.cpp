#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dvd/report.hpp"

using namespace dvd;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

class ReportDir : public ::testing::Test {
 protected:
  fs::path root = fs::temp_directory_path() / ("dvd_test_report_" + std::string(
                                                   ::testing::UnitTest::GetInstance()->current_test_info()->name()));

  void SetUp() override {
    fs::remove_all(root);
    fs::create_directories(root / "run" / "reports");
  }
  void TearDown() override { fs::remove_all(root); }

  void write_clip_report() const {
    EvalReport r;
    r.model = "clip_clean";
    r.samples = 10;
    r.seeds = {0};
    for (double eps : {0.0, 2.0 / 255.0, 4.0 / 255.0}) {
      RobustEval e;
      e.clean_accuracy = 0.8;
      e.robust_accuracy = eps == 0.0 ? 0.8 : 0.1;
      e.accuracy_after_stage = {e.robust_accuracy + (eps == 0.0 ? 0.0 : 0.1), e.robust_accuracy};
      e.stage_names = {"apgd-ce", "apgd-dlr"};
      RobustEvalOptions o;
      o.eps = eps;
      r.add_robust(e, o, eps == 0.0);
    }
    save_report(root / "run" / "reports" / "clip_clean.json", r);
  }

  void write_captioner_report() const {
    EvalReport r;
    r.model = "captioner_llava";
    r.samples = 8;
    for (double eps : {0.0, 8.0 / 255.0}) {
      CaptionEval e;
      e.clean_token_accuracy = 0.9;
      e.adv_token_accuracy = eps == 0.0 ? 0.9 : 0.2;
      CaptionEvalOptions o;
      o.eps = eps;
      r.add_caption(e, o, eps == 0.0);
    }
    TargetEval t;
    t.target = "a red circle";
    t.asr = 1.0;
    TargetedEvalOptions o;
    r.add_targeted({t}, o);
    save_report(root / "run" / "reports" / "captioner_llava.json", r);
  }
};

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Svg, ChartsAreDeterministicWellFormedDocuments) {
  const std::vector<Series> s{{"a", {0, 1, 2}, {0.5, 0.25, 0.0}}, {"b & c", {0, 2}, {1.0, 0.75}}};
  const auto line = line_chart_svg("t", "x", "y", s);
  EXPECT_EQ(line, line_chart_svg("t", "x", "y", s));
  EXPECT_EQ(line.rfind("<svg", 0), 0u);
  EXPECT_NE(line.find("</svg>"), std::string::npos);
  EXPECT_NE(line.find("b &amp; c"), std::string::npos);
  EXPECT_EQ(std::count(line.begin(), line.end(), '&'), 1);
  const auto bar = bar_chart_svg("t", "y", {"g1", "g2"}, {{"s", {}, {0.5, 1.0}}});
  EXPECT_NE(bar.find("<rect"), std::string::npos);
  const auto sc = scatter_svg("t", "x", "y", {{"p", {0.5}, {0.25}}});
  EXPECT_NE(sc.find("<circle"), std::string::npos);
}

TEST_F(ReportDir, OneRunGivesOneCurvePerModelAndAlignedCsv) {
  write_clip_report();
  write_captioner_report();
  const auto out = root / "out";
  const auto files = emit_report({root / "run"}, out);
  EXPECT_EQ(files.size(), 6u);
  for (const char* f : {"accuracy_vs_eps.svg", "caption_vs_eps.svg", "asr.svg", "clean_vs_robust.svg",
                        "run_clip_clean.csv", "run_captioner_llava.csv"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  const auto acc = slurp(out / "accuracy_vs_eps.svg");
  EXPECT_NE(acc.find("clip_clean"), std::string::npos);
  // clean row plus (apgd-ce, apgd-ce+apgd-dlr) at three radii
  const auto csv = slurp(out / "run_clip_clean.csv");
  EXPECT_EQ(lines(csv), 1u + 1u + 2u * 3u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "metric,attack,epsilon,steps,value,seed");
}

TEST_F(ReportDir, RegenerationIsBitwiseIdentical) {
  write_clip_report();
  write_captioner_report();
  emit_report({root / "run"}, root / "a");
  emit_report({root / "run"}, root / "b");
  for (const auto& e : fs::directory_iterator(root / "a")) {
    EXPECT_EQ(slurp(e.path()), slurp(root / "b" / e.path().filename())) << e.path();
  }
}

TEST_F(ReportDir, Errors) {
  EXPECT_THROW(emit_report({}, root / "out"), ReportError);
  try {
    emit_report({root / "run"}, root / "out");
    FAIL() << "expected ReportError";
  } catch (const ReportError& e) {
    EXPECT_NE(std::string(e.what()).find("reports"), std::string::npos);
  }
  EXPECT_THROW(emit_report({root / "absent"}, root / "out"), ReportError);
  std::ofstream(root / "run" / "reports" / "bad.json") << "{";
  EXPECT_THROW(emit_report({root / "run"}, root / "out"), ReportError);
}
