#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "b2n3d/plot.hpp"

using namespace b2n;
namespace fs = std::filesystem;

namespace {

EvalReport make_report(const std::string& ablation, int seed) {
  std::vector<EvalRecord> recs;
  for (int i = 0; i < 37; ++i) {
    const int target = i % 3;
    const int predicted = (i * 7 + seed) % 5 < 3 ? target : target + 1;
    recs.push_back({i, predicted, target, 1 + (i + seed) % 3, (i * 5) % 4, true});
  }
  return summarize(recs, 2, ablation);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int count_matches(const std::string& s, const std::string& pattern) {
  const std::regex re(pattern);
  return static_cast<int>(std::distance(std::sregex_iterator(s.begin(), s.end(), re), std::sregex_iterator()));
}

class PlotTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("b2n3d_plot_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  fs::path dir;
};

}  // namespace

TEST_F(PlotTest, OneReportGivesOneBarPerSplit) {
  const PlotOutput out = plot_reports({make_report("full", 0)}, dir);
  const std::string svg = slurp(dir / "accuracy_by_split.svg");
  EXPECT_EQ(count_matches(svg, "<rect[^>]*><title>full "), 5);
  for (const char* split : {"overall", "hard", "easy", "rn_ge2", "rn_le1"}) {
    EXPECT_NE(svg.find(std::string("full ") + split + ":"), std::string::npos) << split;
  }
  EXPECT_TRUE(fs::exists(dir / "ablation_comparison.svg"));
  EXPECT_TRUE(fs::exists(dir / "summary.csv"));
  EXPECT_FALSE(fs::exists(dir / "loss_curves.svg"));
}

TEST_F(PlotTest, TwoAblationsGiveGroupedLabeledBars) {
  const PlotOutput out = plot_reports({make_report("full", 0), make_report("no_graph", 1)}, dir);
  EXPECT_EQ(out.labels, (std::vector<std::string>{"full", "no_graph"}));
  const std::string svg = slurp(dir / "ablation_comparison.svg");
  EXPECT_EQ(count_matches(svg, "<title>full "), 3);
  EXPECT_EQ(count_matches(svg, "<title>no_graph "), 3);
  EXPECT_NE(svg.find(">full</text>"), std::string::npos);
  EXPECT_NE(svg.find(">no_graph</text>"), std::string::npos);
}

TEST_F(PlotTest, RepeatedAblationLabelsAreDistinct) {
  const auto labels = report_labels({make_report("full", 0), make_report("full", 1), make_report("no_graph", 2)});
  EXPECT_EQ(labels, (std::vector<std::string>{"full", "full#2", "no_graph"}));
}

TEST_F(PlotTest, SummaryTableEqualsReportFields) {
  const std::vector<EvalReport> reports{make_report("full", 0), make_report("binary_only", 3)};
  plot_reports(reports, dir);
  std::ifstream f(dir / "summary.csv");
  std::string line;
  std::getline(f, line);
  EXPECT_EQ(line, "label,split,accuracy,count");
  int rows = 0;
  while (std::getline(f, line)) {
    std::istringstream row(line);
    std::string label, split, acc, count;
    std::getline(row, label, ',');
    std::getline(row, split, ',');
    std::getline(row, acc, ',');
    std::getline(row, count, ',');
    const EvalReport& r = reports[label == "full" ? 0 : 1];
    bool found = false;
    for (const auto& s : report_splits(r)) {
      if (s.split != split) continue;
      found = true;
      EXPECT_EQ(std::stod(acc), s.accuracy) << line;
      EXPECT_EQ(std::stoi(count), s.count) << line;
    }
    EXPECT_TRUE(found) << line;
    ++rows;
  }
  EXPECT_EQ(rows, 10);
}

TEST_F(PlotTest, LossCurvesWhenGiven) {
  nlohmann::json curve = nlohmann::json::array();
  for (int e = 0; e < 4; ++e) curve.push_back({{"loss", 3.0 - e}, {"val_acc", 0.2 * e}});
  const TrainingCurve c = curve_from_json("full", curve);
  EXPECT_EQ(c.loss.size(), 4u);
  plot_reports({make_report("full", 0)}, dir, {c});
  const std::string svg = slurp(dir / "loss_curves.svg");
  EXPECT_EQ(count_matches(svg, "<polyline"), 1);
}

TEST_F(PlotTest, NoReportsThrows) { EXPECT_THROW(plot_reports({}, dir), InputError); }

TEST_F(PlotTest, UnwritableDirectorySurfacesError) {
  std::ofstream(dir.string() + "_file") << "x";
  EXPECT_ANY_THROW(plot_reports({make_report("full", 0)}, dir.string() + "_file"));
  fs::remove(dir.string() + "_file");
}
