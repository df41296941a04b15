// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-cultivar benchmark: seeded daily weather plus a forcing
// (degree-day) oracle that fixes each season's budbreak day.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "budbreak/datasets.hpp"

namespace budbreak {

struct SynthWeatherParams {
  double temp_mean = 14.5;      // °C
  double temp_amplitude = 12.0;  // °C
  int temp_peak_doy = 200;
  double year_offset_std = 1.5;  // per-year shift of the whole sinusoid
  double noise_std = 2.5;        // stationary std of the AR(1) daily anomaly
  double noise_ar = 0.7;
  double diurnal_range = 12.0;
  double humidity_mean = 65.0;
  double precip_prob = 0.25;
  double precip_mean_mm = 4.0;
  double wind_mean_ms = 3.0;
  double gap_rate = 0.0;  // fraction of feature cells left missing

  void validate() const;
};

/// Per-cultivar (T_b, F*) are drawn uniformly from center ± spread.
struct SynthPrior {
  double base_temp_center = 6.0;
  double base_temp_spread = 2.0;
  double forcing_center = 200.0;
  double forcing_spread = 50.0;

  void validate() const;
};

struct SynthCultivarParams {
  std::string name;
  double base_temperature = 6.0;
  double forcing_requirement = 200.0;
};

/// One season of the default feature schema, doy 1..days_in_year(year).
/// Deterministic per (seed, year); all cultivars of a benchmark share it.
WeatherSeason gen_weather(const SynthWeatherParams& params, int year, std::uint64_t seed,
                          const std::string& cultivar = "");

/// First doy whose forcing sum from doy 1 of max(0, T - T_b) reaches F*.
std::optional<int> oracle_budbreak(std::span<const double> temp_mean, double base_temperature,
                                   double forcing_requirement);

std::vector<SynthCultivarParams> draw_cultivars(const SynthPrior& prior, int n_cultivars,
                                                std::uint64_t seed);

struct SynthConfig {
  std::vector<int> seasons_per_cultivar = {4, 4, 8, 16, 24, 30};
  int last_year = 2022;
  std::uint64_t seed = 0;
  SynthWeatherParams weather;
  SynthPrior prior;

  void validate() const;
};

struct SynthBenchmark {
  SynthConfig config;
  std::vector<SynthCultivarParams> cultivars;
  WeatherTable weather;
  std::vector<PhenologyRecord> phenology;  // seasons where the oracle fired

  Corpus corpus() const;
  std::string provenance_json() const;
};

/// Cultivar i gets the last seasons_per_cultivar[i] years ending at last_year.
SynthBenchmark gen_benchmark(const SynthConfig& config);

/// weather.csv, phenology.csv and synth_provenance.json under `dir`.
std::vector<std::filesystem::path> write_benchmark(const SynthBenchmark& bench,
                                                   const std::filesystem::path& dir);

}  // namespace budbreak
