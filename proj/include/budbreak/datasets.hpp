// SPDX-License-Identifier: Apache-2.0
//
// Weather/phenology ingestion, gap repair, step labels, z-score normalization,
// trial splits, and epoch batching.
//
// Weather CSV:   cultivar,year,doy,<feature columns...>   (empty cell = missing)
// Phenology CSV: cultivar,year,budbreak_doy                (absent row = unlabeled)
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "budbreak/tensorcore.hpp"

namespace budbreak {

/// Default daily feature schema.
const std::vector<std::string>& default_feature_names();

bool is_leap_year(int year);
int days_in_year(int year);

struct WeatherDay {
  int doy = 0;
  std::vector<std::optional<double>> features;
};

struct Gap {
  int doy = 0;
  std::size_t feature = 0;
};

struct WeatherSeason {
  std::string cultivar;
  int year = 0;
  std::vector<WeatherDay> days;  // sorted by doy
  std::vector<Gap> gaps;
};

struct WeatherTable {
  std::vector<std::string> feature_names;
  std::vector<WeatherSeason> seasons;  // sorted by (cultivar, year)
};

/// Parses a weather CSV. When `schema` is non-empty the feature columns must
/// be exactly that set (any order).
WeatherTable parse_weather_csv(const std::filesystem::path& path,
                               std::span<const std::string> schema = {});
WeatherTable parse_weather_csv_text(const std::string& text, std::span<const std::string> schema = {},
                                    const std::string& source = "<memory>");

struct PhenologyRecord {
  std::string cultivar;
  int year = 0;
  int budbreak_doy = 0;
};

std::vector<PhenologyRecord> parse_phenology_csv(const std::filesystem::path& path);
std::vector<PhenologyRecord> parse_phenology_csv_text(const std::string& text,
                                                      const std::string& source = "<memory>");

/// Fills interior gaps linearly and edge gaps with the nearest known value.
std::vector<double> interpolate_missing(std::span<const std::optional<double>> series);

struct StepLabels {
  std::vector<double> labels;
  std::vector<double> mask;
};

/// labels[t] = 1 iff doy t >= budbreak_doy (1-based); mask all ones when
/// labeled, all zeros otherwise.
StepLabels build_labels(std::optional<int> budbreak_doy, int length);

struct SeasonSeries {
  int cultivar_id = 0;
  int year = 0;
  Matrix features;  // F × H, column t-1 is doy t
  std::optional<int> budbreak_doy;
  std::vector<double> labels;
  std::vector<double> label_mask;

  int length() const { return static_cast<int>(features.cols()); }
  bool labeled() const { return budbreak_doy.has_value(); }
};

struct CultivarDataset {
  int cultivar_id = 0;
  std::string name;
  std::vector<SeasonSeries> seasons;  // sorted by year

  std::vector<int> labeled_years() const;
};

struct Corpus {
  std::vector<std::string> feature_names;
  std::vector<CultivarDataset> cultivars;  // cultivar_id == index

  std::vector<std::string> cultivar_names() const;
  const CultivarDataset& by_name(const std::string& name) const;
};

/// Builds interpolated, labeled seasons. Cultivar ids follow sorted names.
/// With `full_years` each season must fit its calendar year and days missing
/// from the file become gaps; otherwise a season spans doy 1..max doy present.
Corpus assemble_corpus(const WeatherTable& weather, std::span<const PhenologyRecord> phenology,
                       bool full_years = true);

Corpus load_corpus(const std::filesystem::path& weather_csv,
                   const std::filesystem::path& phenology_csv);

/// Writes the corpus back to the two CSV formats. Values are printed in
/// shortest round-trip form.
std::string weather_csv_text(const Corpus& corpus);
std::string phenology_csv_text(const Corpus& corpus);
/// Raw table form; missing values become empty cells.
std::string weather_csv_text(const WeatherTable& table);
std::string phenology_csv_text(std::span<const PhenologyRecord> records);
/// Creates parent directories; throws Error when the file cannot be written.
void write_text_file(const std::filesystem::path& path, const std::string& text);
void write_corpus(const Corpus& corpus, const std::filesystem::path& weather_csv,
                  const std::filesystem::path& phenology_csv);

// ---------------------------------------------------------------------------

struct NormStats {
  Vector mean;
  Vector stddev;
};

NormStats fit_normalization(std::span<const SeasonSeries* const> seasons);
/// (x - mean) / std per feature; zero-variance features map to 0.
Matrix apply_normalization(const NormStats& stats, const Matrix& features);
SeasonSeries apply_normalization(const NormStats& stats, const SeasonSeries& season);

// ---------------------------------------------------------------------------

inline constexpr int kNumTrials = 3;
inline constexpr int kTestSeasonsPerTrial = 2;

struct TrialPlan {
  std::uint64_t seed = 0;
  // trials[k][cultivar_id] = two held-out years
  std::vector<std::vector<std::vector<int>>> trials;

  const std::vector<int>& test_years(int trial, int cultivar_id) const;
  bool is_test(int trial, int cultivar_id, int year) const;
};

/// Holds out 2 labeled years per cultivar per trial. Cultivars with at least
/// 6 labeled years get disjoint pairs across trials.
TrialPlan make_trial_plan(std::span<const CultivarDataset> cultivars, std::uint64_t seed);

/// Seeded shuffle of [0, count) cut into batches of at most batch_size.
std::vector<std::vector<std::size_t>> make_batches(std::size_t count, std::size_t batch_size,
                                                   std::uint64_t epoch_seed);

/// Draws `count` indices by picking a group uniformly and then a member of that
/// group uniformly, so small groups are seen as often as large ones.
std::vector<std::vector<std::size_t>> make_balanced_batches(std::span<const int> group_of,
                                                            std::size_t batch_size,
                                                            std::uint64_t epoch_seed);

}  // namespace budbreak
