#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "support.hpp"

#include "budbreak/error.hpp"
#include "budbreak/evaluation.hpp"

using namespace budbreak;

namespace {

std::optional<int> brute_force_crossing(const std::vector<double>& p) {
  std::optional<int> found;
  for (int t = static_cast<int>(p.size()); t >= 1; --t) {
    if (p[t - 1] > 0.5) found = t;
  }
  return found;
}

std::vector<DayPrediction> from_diffs(const std::vector<std::optional<int>>& diffs) {
  std::vector<DayPrediction> out;
  for (const auto& d : diffs) {
    DayPrediction p;
    p.true_doy = 100;
    if (d) p.predicted_doy = 100 + *d;
    out.push_back(p);
  }
  return out;
}

SeasonEval season(Variant v, int trial, const std::string& cultivar, int year, double bce,
                  std::optional<int> predicted = 100) {
  SeasonEval e;
  e.variant = v;
  e.trial = trial;
  e.cultivar = cultivar;
  e.year = year;
  e.bce = bce;
  e.probs = Vector::Constant(3, 0.5);
  e.labels = {0, 1, 1};
  e.predicted_doy = predicted;
  e.true_doy = 100;
  return e;
}

}  // namespace

TEST_CASE("crossing day examples") {
  CHECK(predict_budbreak_day(std::vector<double>{0.1, 0.4, 0.6, 0.9}) == 3);
  CHECK(predict_budbreak_day(std::vector<double>{0.6, 0.7, 0.2}) == 1);
  CHECK_FALSE(predict_budbreak_day(std::vector<double>{0.5, 0.5, 0.1}).has_value());
  CHECK_FALSE(predict_budbreak_day(std::vector<double>{}).has_value());
}

TEST_CASE("crossing day matches a brute-force scan") {
  budbreak::Rng rng(21);
  for (int i = 0; i < 1000; ++i) {
    const int n = 1 + static_cast<int>(rng.index(400));
    const double bias = rng.uniform() * 0.6;
    std::vector<double> p(n);
    for (auto& x : p) {
      x = rng.uniform() * (0.5 + bias);
      if (rng.uniform() < 0.05) x = 0.5;
    }
    CHECK(predict_budbreak_day(p) == brute_force_crossing(p));
  }
}

TEST_CASE("hand-computed three-day bce") {
  SeasonEval e;
  e.probs = Vector{{0.2, 0.6, 0.9}};
  const Vector y{{0.0, 1.0, 1.0}};
  const double expected = (-std::log(0.8) - std::log(0.6) - std::log(0.9)) / 3.0;
  CHECK(bce_loss(e.probs, y, Vector::Ones(3)).loss == doctest::Approx(expected).epsilon(1e-14));
  CHECK(expected == doctest::Approx(0.2797).epsilon(1e-4));
}

TEST_CASE("per-cultivar bce averages seasons within a trial, then trials") {
  std::vector<SeasonEval> evals = {
      season(Variant::STL, 0, "A", 2001, 1.0), season(Variant::STL, 0, "A", 2002, 3.0),
      season(Variant::STL, 1, "A", 2003, 6.0), season(Variant::STL, 2, "B", 2003, 0.5)};
  const auto bce = eval_bce(evals);
  CHECK(bce.at("A").bce == doctest::Approx((2.0 + 6.0) / 2.0));
  CHECK(bce.at("B").bce == 0.5);
  CHECK(bce.at("A").split == std::vector<std::pair<int, int>>{{0, 2001}, {0, 2002}, {1, 2003}});
  CHECK(eval_bce(evals).at("A").bce == bce.at("A").bce);
}

TEST_CASE("bce delta sign and antisymmetry") {
  std::map<std::string, CultivarBce> stl = {{"A", {0.9, {{0, 1}}}}, {"B", {0.3, {{0, 2}}}}};
  std::map<std::string, CultivarBce> mtl = {{"A", {0.4, {{0, 1}}}}, {"B", {0.3, {{0, 2}}}}};
  const auto d = bce_delta(stl, mtl);
  CHECK(d.at("A") == doctest::Approx(0.5));
  CHECK(d.at("B") == 0.0);
  const auto r = bce_delta(mtl, stl);
  for (const auto& [k, v] : d) CHECK(r.at(k) == -v);

  mtl["B"].split = {{1, 2}};
  CHECK_THROWS_AS(bce_delta(stl, mtl), DataError);
  mtl.erase("B");
  CHECK_THROWS_AS(bce_delta(stl, mtl), DataError);
}

TEST_CASE("day error summary") {
  const auto s = day_error_summary(from_diffs({0, -2, 5, 20, 40}));
  CHECK(s.median_abs == 5.0);
  CHECK(s.within_3 == 2);
  CHECK(s.over_3 == 1);
  CHECK(s.over_7 == 0);
  CHECK(s.over_14 == 1);
  CHECK(s.over_30 == 1);

  const auto zeros = day_error_summary(from_diffs({0, 0, 0}));
  CHECK(zeros.median_abs == 0.0);
  CHECK(zeros.over_3 + zeros.over_7 + zeros.over_14 + zeros.over_30 == 0);

  const auto edges = day_error_summary(from_diffs({3, -7, 14, 30, 31, std::nullopt, 8, -4}));
  CHECK(edges.within_3 == 1);
  CHECK(edges.over_3 == 2);
  CHECK(edges.over_7 == 2);
  CHECK(edges.over_14 == 1);
  CHECK(edges.over_30 == 1);
  CHECK(edges.no_crossing == 1);
  CHECK(edges.defined == 7);
  CHECK(edges.median_abs == 8.0);
  CHECK(day_error_summary(from_diffs({1, 4})).median_abs == 2.5);

  CHECK_THROWS_AS(day_error_summary(std::vector<DayPrediction>{}), DataError);
  CHECK_THROWS_AS(day_error_summary(from_diffs({std::nullopt})), DataError);
}

TEST_CASE("summary buckets partition the defined diffs") {
  budbreak::Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    std::vector<std::optional<int>> diffs;
    const int n = 1 + static_cast<int>(rng.index(50));
    for (int k = 0; k < n; ++k) {
      if (rng.uniform() < 0.1) diffs.push_back(std::nullopt);
      else diffs.push_back(static_cast<int>(rng.index(121)) - 60);
    }
    diffs.push_back(0);
    const auto s = day_error_summary(from_diffs(diffs));
    CHECK(s.within_3 + s.over_3 + s.over_7 + s.over_14 + s.over_30 == s.defined);
    CHECK(s.defined + s.no_crossing == static_cast<int>(diffs.size()));
  }
}

TEST_CASE("histogram export") {
  const std::vector<int> d = {1, 1, 2};
  CHECK(export_histogram(d, 1) == "bin_lo,bin_hi,count\n0.5,1.5,2\n1.5,2.5,1\n");
  CHECK(export_histogram(std::vector<int>{}, 5) == "bin_lo,bin_hi,count\n");
  CHECK(export_histogram(std::vector<int>{-3, 4}, 5) ==
        "bin_lo,bin_hi,count\n-7.5,-2.5,1\n-2.5,2.5,0\n2.5,7.5,1\n");
  CHECK_THROWS_AS(export_histogram(d, 0), DataError);

  budbreak::Rng rng(8);
  for (int i = 0; i < 100; ++i) {
    std::vector<int> diffs(1 + rng.index(40));
    for (auto& x : diffs) x = static_cast<int>(rng.index(301)) - 150;
    const int width = 1 + static_cast<int>(rng.index(10));
    std::istringstream in(export_histogram(diffs, width));
    std::string line;
    std::getline(in, line);
    int total = 0;
    while (std::getline(in, line)) {
      double lo = 0;
      double hi = 0;
      int count = 0;
      char c1 = 0;
      char c2 = 0;
      std::istringstream row(line);
      row >> lo >> c1 >> hi >> c2 >> count;
      CHECK(hi - lo == doctest::Approx(width));
      int inside = 0;
      for (int x : diffs) inside += (x > lo && x <= hi) ? 1 : 0;
      CHECK(count == inside);
      total += count;
    }
    CHECK(total == static_cast<int>(diffs.size()));
  }
}

TEST_CASE("probability curve export") {
  const std::vector<double> labels = {0, 1};
  CHECK(export_prob_curve(Vector{{0.25, 0.75}}, labels) == "doy,prob,label\n1,0.25,0\n2,0.75,1\n");
  CHECK_THROWS_AS(export_prob_curve(Vector{{0.25}}, labels), ShapeError);
}

TEST_CASE("delta table fixture with the published row shape") {
  DeltaTable t;
  for (Variant v : kDeltaColumns) t.columns.emplace_back(variant_name(v));
  t.rows = {{"Barbera", {1.69, 1.91, 1.85, 1.91}},
            {"Cabernet Sauvignon", {-0.05, -0.05, -0.05, -0.07}},
            {"Sangiovese", {18.38, 18.55, 18.61, 18.57}}};
  const std::string text = format_delta_table(t, 2);
  CHECK(text ==
        "cultivar,MultE,ConcatE,AddE,MultiH\n"
        "Barbera,1.69,1.91,1.85,1.91\n"
        "Cabernet Sauvignon,-0.05,-0.05,-0.05,-0.07\n"
        "Sangiovese,18.38,18.55,18.61,18.57\n");
  CHECK(format_delta_table(t).find("Sangiovese,18.38,18.55,18.61,18.57\n") != std::string::npos);
  t.rows.push_back({"Short", {1.0}});
  CHECK_THROWS_AS(format_delta_table(t), ShapeError);
}

TEST_CASE("summary row fixture with the published row shape") {
  DaySummary single;
  single.median_abs = 7;
  single.over_3 = 32;
  single.over_7 = 19;
  single.over_14 = 13;
  single.over_30 = 25;
  CHECK(format_summary_header().rfind("model,median,>3days,>1week,>2weeks,>1month,", 0) == 0);
  CHECK(format_summary_row("Single", single).rfind("Single,7,32,19,13,25,", 0) == 0);
  DaySummary concat;
  concat.median_abs = 3.5;
  concat.over_3 = 34;
  concat.over_7 = 24;
  concat.over_14 = 1;
  concat.over_30 = 1;
  CHECK(format_summary_row("ConcatE", concat).rfind("ConcatE,3.5,34,24,1,1,", 0) == 0);
}

TEST_CASE("summarize without a single-task baseline warns") {
  std::vector<SeasonEval> evals = {season(Variant::MultiH, 0, "A", 2001, 0.2)};
  const auto r = summarize(evals);
  REQUIRE(r.warnings.size() == 1);
  CHECK(r.warnings[0].find("no STL baseline") != std::string::npos);
  CHECK(r.deltas.empty());
}

TEST_CASE("reports are complete and byte-identical across runs") {
  std::vector<SeasonEval> evals;
  for (Variant v : {Variant::STL, Variant::MultiH, Variant::AddE}) {
    for (int trial = 0; trial < 3; ++trial) {
      evals.push_back(season(v, trial, "Pinot Gris", 2000 + trial, 0.1 * (trial + 1),
                             trial == 1 ? std::optional<int>{} : std::optional<int>{95 + trial}));
      evals.push_back(season(v, trial, "Syrah", 2010 + trial, 0.2, 120));
    }
  }
  testing_support::TempDir a("rep_a");
  testing_support::TempDir b("rep_b");
  const auto ra = write_reports(a.path(), evals);
  const auto rb = write_reports(b.path(), evals);
  REQUIRE(ra.files.size() == rb.files.size());
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
  };
  for (std::size_t i = 0; i < ra.files.size(); ++i) {
    CHECK(slurp(ra.files[i]) == slurp(rb.files[i]));
  }
  CHECK(std::filesystem::exists(a.path() / "bce_delta.csv"));
  CHECK(std::filesystem::exists(a.path() / "day_summary.csv"));
  CHECK(std::filesystem::exists(a.path() / "curves" / "STL_trial0_Pinot_Gris_2000.csv"));
  CHECK(ra.deltas.at(Variant::MultiH).at("Syrah") == 0.0);
  CHECK(ra.day_summaries.at(Variant::STL).no_crossing == 1);

  // Every (variant, trial, cultivar, year) appears exactly once in the prediction list.
  const std::string preds = slurp(a.path() / "day_predictions.csv");
  CHECK(std::count(preds.begin(), preds.end(), '\n') == 1 + static_cast<long>(evals.size()));
}
