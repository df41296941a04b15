// SPDX-License-Identifier: Apache-2.0
//
// Held-out scoring: per-cultivar BCE and STL-minus-MTL deltas, first-crossing
// budbreak day predictions, difference-in-days summaries, histograms and
// per-season probability curves.
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "budbreak/datasets.hpp"
#include "budbreak/models.hpp"

namespace budbreak {

inline constexpr double kCrossingThreshold = 0.5;

/// First 1-based day with prob > 0.5, or nothing.
std::optional<int> predict_budbreak_day(std::span<const double> probs);
std::optional<int> predict_budbreak_day(const Vector& probs);

struct DayPrediction {
  int cultivar_id = 0;
  int year = 0;
  std::optional<int> predicted_doy;
  int true_doy = 0;

  /// predicted - true; negative means predicted early.
  std::optional<int> diff_days() const {
    if (!predicted_doy) return std::nullopt;
    return *predicted_doy - true_doy;
  }
};

/// Absolute-error buckets are disjoint: (3,7], (7,14], (14,30], (30,inf).
struct DaySummary {
  double median_abs = 0.0;
  int within_3 = 0;
  int over_3 = 0;
  int over_7 = 0;
  int over_14 = 0;
  int over_30 = 0;
  int no_crossing = 0;
  int defined = 0;
};

DaySummary day_error_summary(std::span<const DayPrediction> predictions);

/// CSV "bin_lo,bin_hi,count"; bin k covers ((k - 1/2) w, (k + 1/2) w] and
/// every bin between the smallest and largest diff is emitted.
std::string export_histogram(std::span<const int> diffs, int bin_width);
/// CSV "doy,prob,label".
std::string export_prob_curve(const Vector& probs, std::span<const double> labels);

// ---------------------------------------------------------------------------

struct SeasonEval {
  Variant variant = Variant::STL;
  int trial = 0;
  int cultivar_id = 0;
  std::string cultivar;
  int year = 0;
  double bce = 0.0;
  Vector probs;
  std::vector<double> labels;
  std::optional<int> predicted_doy;
  int true_doy = 0;

  DayPrediction day_prediction() const { return {cultivar_id, year, predicted_doy, true_doy}; }
};

/// Scores one labeled, already-normalized season. `model_cultivar` is the
/// cultivar index inside the model (0 for STL).
SeasonEval evaluate_season(const ParamSet& params, const ModelSpec& spec,
                           const SeasonSeries& normalized, int model_cultivar);

/// Scores every labeled held-out season recorded in the checkpoint metadata.
/// Cultivars without a labeled held-out season are skipped and appended to
/// `warnings`.
std::vector<SeasonEval> evaluate_checkpoint(const Checkpoint& ckpt, const Corpus& corpus,
                                            std::vector<std::string>* warnings = nullptr);

struct CultivarBce {
  double bce = 0.0;
  std::vector<std::pair<int, int>> split;  // (trial, year), sorted
};

/// Mean season BCE per (cultivar, trial), averaged over trials. Expects the
/// evaluations of a single variant.
std::map<std::string, CultivarBce> eval_bce(std::span<const SeasonEval> evals);

/// STL - MTL per cultivar; positive means the multi-task model is better.
/// Throws DataError when the two were scored on different held-out seasons.
std::map<std::string, double> bce_delta(const std::map<std::string, CultivarBce>& stl,
                                        const std::map<std::string, CultivarBce>& mtl);

// ---------------------------------------------------------------------------
// Report tables

struct DeltaTable {
  std::vector<std::string> columns;
  std::vector<std::pair<std::string, std::vector<double>>> rows;
};

/// "cultivar,<columns...>" with fixed `precision` decimals (negative = shortest
/// round-trip form).
std::string format_delta_table(const DeltaTable& table, int precision = -1);

std::string format_summary_header();
/// "model,median,>3days,>1week,>2weeks,>1month,within3,no_crossing,n" row.
std::string format_summary_row(const std::string& label, const DaySummary& summary);

/// Column order of the delta table.
inline constexpr std::array<Variant, 4> kDeltaColumns = {Variant::MultE, Variant::ConcatE,
                                                         Variant::AddE, Variant::MultiH};

struct ReportOptions {
  int histogram_bin_width = 5;
  bool write_curves = true;
};

struct ReportResult {
  std::vector<std::filesystem::path> files;
  std::vector<std::string> warnings;
  std::map<Variant, std::map<std::string, CultivarBce>> bce;
  std::map<Variant, std::map<std::string, double>> deltas;
  std::map<Variant, DaySummary> day_summaries;
};

/// Computes every table from the evaluations without touching the disk.
ReportResult summarize(std::span<const SeasonEval> evals);

/// Writes bce_by_cultivar.csv, bce_delta.csv (when STL is present),
/// day_summary.csv, day_predictions.csv, histogram_<variant>.csv,
/// curves/<variant>_trial<k>_<cultivar>_<year>.csv and summary.txt.
ReportResult write_reports(const std::filesystem::path& dir, std::span<const SeasonEval> evals,
                           const ReportOptions& options = {});

std::string safe_file_component(const std::string& name);

}  // namespace budbreak
