// SPDX-License-Identifier: Apache-2.0
#include "budbreak/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include <fmt/format.h>

#include "json.hpp"

#include "budbreak/error.hpp"
#include "budbreak/rng.hpp"

namespace budbreak {

namespace {

constexpr std::uint64_t kWeatherStream = 0x7ea7;
constexpr std::uint64_t kGapStream = 0x9a95;
constexpr std::uint64_t kPriorStream = 0x9e10;

double round2(double x) { return std::round(x * 100.0) / 100.0; }

// Magnus formula.
double dew_point(double temp_c, double rh_pct) {
  constexpr double a = 17.62;
  constexpr double b = 243.12;
  const double gamma = std::log(rh_pct / 100.0) + a * temp_c / (b + temp_c);
  return b * gamma / (a - gamma);
}

}  // namespace

void SynthWeatherParams::validate() const {
  const bool ok = std::isfinite(temp_mean) && std::isfinite(temp_amplitude) && temp_amplitude >= 0 &&
                  noise_std >= 0 && year_offset_std >= 0 && noise_ar >= 0 && noise_ar < 1 &&
                  diurnal_range >= 0 && humidity_mean > 0 && humidity_mean <= 100 &&
                  precip_prob >= 0 && precip_prob <= 1 && precip_mean_mm >= 0 &&
                  wind_mean_ms >= 0 && gap_rate >= 0 && gap_rate < 1;
  if (!ok) throw DataError("invalid synthetic weather parameters");
}

void SynthPrior::validate() const {
  if (base_temp_spread < 0 || forcing_spread < 0 || base_temp_center - base_temp_spread < 0 ||
      base_temp_center + base_temp_spread > 15 || forcing_center - forcing_spread <= 0) {
    throw DataError(fmt::format("invalid prior: T_b {}±{} must lie in [0, 15], F* {}±{} must be > 0",
                                base_temp_center, base_temp_spread, forcing_center,
                                forcing_spread));
  }
}

void SynthConfig::validate() const {
  if (seasons_per_cultivar.empty()) throw DataError("synth: no cultivars requested");
  for (int n : seasons_per_cultivar) {
    if (n < 1) throw DataError(fmt::format("synth: season count {} must be positive", n));
  }
  weather.validate();
  prior.validate();
}

WeatherSeason gen_weather(const SynthWeatherParams& params, int year, std::uint64_t seed,
                          const std::string& cultivar) {
  params.validate();
  Rng rng({seed, kWeatherStream, static_cast<std::uint64_t>(year)});
  Rng gaps({seed, kGapStream, static_cast<std::uint64_t>(year)});
  const int length = days_in_year(year);
  const double offset = params.year_offset_std * rng.normal();
  const double innovation = params.noise_std * std::sqrt(1.0 - params.noise_ar * params.noise_ar);
  double anomaly = params.noise_std * rng.normal();

  WeatherSeason season;
  season.cultivar = cultivar;
  season.year = year;
  season.days.reserve(static_cast<std::size_t>(length));
  for (int doy = 1; doy <= length; ++doy) {
    if (doy > 1) anomaly = params.noise_ar * anomaly + innovation * rng.normal();
    const double phase = 2.0 * std::numbers::pi * (doy - params.temp_peak_doy) / length;
    const double climate = params.temp_mean + params.temp_amplitude * std::cos(phase) + offset;
    const double tmean = climate + anomaly;
    const double half_range = 0.5 * params.diurnal_range * (0.8 + 0.4 * rng.uniform());
    const double rh = std::clamp(params.humidity_mean - 1.5 * anomaly + 8.0 * rng.normal(), 15.0, 100.0);
    const double precip = rng.uniform() < params.precip_prob
                              ? -params.precip_mean_mm * std::log(1.0 - rng.uniform())
                              : 0.0;
    const double wind = std::max(0.0, params.wind_mean_ms + 1.2 * rng.normal());

    WeatherDay day;
    day.doy = doy;
    day.features = {round2(tmean),        round2(tmean - half_range), round2(tmean + half_range),
                    round2(rh),           round2(dew_point(tmean, rh)), round2(precip),
                    round2(wind)};
    if (params.gap_rate > 0) {
      for (std::size_t f = 0; f < day.features.size(); ++f) {
        if (gaps.uniform() < params.gap_rate) {
          day.features[f].reset();
          season.gaps.push_back({doy, f});
        }
      }
    }
    season.days.push_back(std::move(day));
  }
  return season;
}

std::optional<int> oracle_budbreak(std::span<const double> temp_mean, double base_temperature,
                                   double forcing_requirement) {
  double total = 0.0;
  for (std::size_t t = 0; t < temp_mean.size(); ++t) {
    total += std::max(0.0, temp_mean[t] - base_temperature);
    if (total >= forcing_requirement) return static_cast<int>(t) + 1;
  }
  return std::nullopt;
}

std::vector<SynthCultivarParams> draw_cultivars(const SynthPrior& prior, int n_cultivars,
                                                std::uint64_t seed) {
  prior.validate();
  std::vector<SynthCultivarParams> out;
  for (int i = 0; i < n_cultivars; ++i) {
    Rng rng({seed, kPriorStream, static_cast<std::uint64_t>(i)});
    SynthCultivarParams c;
    c.name = fmt::format("cultivar_{:02d}", i);
    c.base_temperature = prior.base_temp_center + prior.base_temp_spread * (2.0 * rng.uniform() - 1.0);
    c.forcing_requirement = prior.forcing_center + prior.forcing_spread * (2.0 * rng.uniform() - 1.0);
    out.push_back(std::move(c));
  }
  return out;
}

SynthBenchmark gen_benchmark(const SynthConfig& config) {
  config.validate();
  SynthBenchmark bench;
  bench.config = config;
  bench.cultivars = draw_cultivars(config.prior, static_cast<int>(config.seasons_per_cultivar.size()),
                                   config.seed);
  bench.weather.feature_names = default_feature_names();

  const int max_seasons =
      *std::max_element(config.seasons_per_cultivar.begin(), config.seasons_per_cultivar.end());
  std::map<int, WeatherSeason> by_year;
  for (int year = config.last_year - max_seasons + 1; year <= config.last_year; ++year) {
    by_year.emplace(year, gen_weather(config.weather, year, config.seed));
  }

  for (std::size_t i = 0; i < bench.cultivars.size(); ++i) {
    const auto& c = bench.cultivars[i];
    for (int year = config.last_year - config.seasons_per_cultivar[i] + 1; year <= config.last_year;
         ++year) {
      WeatherSeason season = by_year.at(year);
      season.cultivar = c.name;
      // Labels come from the temperatures a reader of the files reconstructs.
      std::vector<std::optional<double>> raw;
      raw.reserve(season.days.size());
      for (const auto& day : season.days) raw.push_back(day.features[0]);
      const auto temps = interpolate_missing(raw);
      if (const auto doy = oracle_budbreak(temps, c.base_temperature, c.forcing_requirement)) {
        bench.phenology.push_back({c.name, year, *doy});
      }
      bench.weather.seasons.push_back(std::move(season));
    }
  }
  return bench;
}

Corpus SynthBenchmark::corpus() const { return assemble_corpus(weather, phenology); }

std::string SynthBenchmark::provenance_json() const {
  using nlohmann::json;
  const auto& w = config.weather;
  const auto& p = config.prior;
  json cultivars_json = json::array();
  for (std::size_t i = 0; i < cultivars.size(); ++i) {
    const auto& c = cultivars[i];
    json labeled = json::array();
    for (const auto& r : phenology) {
      if (r.cultivar == c.name) labeled.push_back(json{{"year", r.year}, {"budbreak_doy", r.budbreak_doy}});
    }
    cultivars_json.push_back(json{{"name", c.name},
                                  {"base_temperature", c.base_temperature},
                                  {"forcing_requirement", c.forcing_requirement},
                                  {"seasons", config.seasons_per_cultivar[i]},
                                  {"budbreak", labeled}});
  }
  const json out = {
      {"generator", "budbreak synthgen"},
      {"seed", config.seed},
      {"last_year", config.last_year},
      {"seasons_per_cultivar", config.seasons_per_cultivar},
      {"oracle", "first doy with sum_{t<=doy} max(0, temp_mean_c - T_b) >= F*, from doy 1"},
      {"weather",
       {{"temp_mean", w.temp_mean},
        {"temp_amplitude", w.temp_amplitude},
        {"temp_peak_doy", w.temp_peak_doy},
        {"year_offset_std", w.year_offset_std},
        {"noise_std", w.noise_std},
        {"noise_ar", w.noise_ar},
        {"diurnal_range", w.diurnal_range},
        {"humidity_mean", w.humidity_mean},
        {"precip_prob", w.precip_prob},
        {"precip_mean_mm", w.precip_mean_mm},
        {"wind_mean_ms", w.wind_mean_ms},
        {"gap_rate", w.gap_rate}}},
      {"prior",
       {{"base_temp_center", p.base_temp_center},
        {"base_temp_spread", p.base_temp_spread},
        {"forcing_center", p.forcing_center},
        {"forcing_spread", p.forcing_spread}}},
      {"cultivars", cultivars_json}};
  return out.dump(2) + "\n";
}

std::vector<std::filesystem::path> write_benchmark(const SynthBenchmark& bench,
                                                   const std::filesystem::path& dir) {
  const std::vector<std::filesystem::path> files = {dir / "weather.csv", dir / "phenology.csv",
                                                    dir / "synth_provenance.json"};
  write_text_file(files[0], weather_csv_text(bench.weather));
  write_text_file(files[1], phenology_csv_text(bench.phenology));
  write_text_file(files[2], bench.provenance_json());
  return files;
}

}  // namespace budbreak
