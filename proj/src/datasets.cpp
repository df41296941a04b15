// SPDX-License-Identifier: Apache-2.0
#include "budbreak/datasets.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include <fmt/format.h>

#include "budbreak/error.hpp"
#include "budbreak/rng.hpp"

namespace budbreak {

const std::vector<std::string>& default_feature_names() {
  static const std::vector<std::string> names = {
      "temp_mean_c", "temp_min_c",  "temp_max_c",   "rel_humidity_pct",
      "dew_point_c", "precip_mm",   "wind_speed_ms"};
  return names;
}

bool is_leap_year(int year) {
  return (year % 4 == 0 && year % 100 != 0) || year % 400 == 0;
}

int days_in_year(int year) { return is_leap_year(year) ? 366 : 365; }

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::string line;
  std::istringstream in(text);
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    auto field = line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    const auto first = field.find_first_not_of(" \t");
    const auto last = field.find_last_not_of(" \t");
    fields.push_back(first == std::string::npos ? std::string() : field.substr(first, last - first + 1));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return fields;
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

std::string location(const std::string& source, std::size_t line) {
  return fmt::format("{}:{}", source, line);
}

}  // namespace

WeatherTable parse_weather_csv(const std::filesystem::path& path,
                               std::span<const std::string> schema) {
  return parse_weather_csv_text(read_file(path), schema, path.string());
}

WeatherTable parse_weather_csv_text(const std::string& text, std::span<const std::string> schema,
                                    const std::string& source) {
  const auto lines = split_lines(text);
  if (lines.empty()) throw DataError(fmt::format("{}: empty weather file", source));
  const auto header = split_fields(lines[0]);
  if (header.size() < 4 || header[0] != "cultivar" || header[1] != "year" || header[2] != "doy") {
    throw DataError(fmt::format("{}: weather header must start with cultivar,year,doy and name "
                                "at least one feature",
                                location(source, 1)));
  }
  WeatherTable table;
  table.feature_names.assign(header.begin() + 3, header.end());
  {
    std::set<std::string> seen;
    for (const auto& name : table.feature_names) {
      if (name.empty() || !seen.insert(name).second) {
        throw DataError(fmt::format("{}: empty or duplicate column '{}'", location(source, 1), name));
      }
    }
  }
  if (!schema.empty()) {
    const std::set<std::string> expected(schema.begin(), schema.end());
    for (const auto& name : table.feature_names) {
      if (!expected.count(name)) {
        throw DataError(fmt::format("{}: unknown column '{}'", location(source, 1), name));
      }
    }
    for (const auto& name : expected) {
      if (std::find(table.feature_names.begin(), table.feature_names.end(), name) ==
          table.feature_names.end()) {
        throw DataError(fmt::format("{}: missing column '{}'", location(source, 1), name));
      }
    }
  }

  const std::size_t nf = table.feature_names.size();
  std::map<std::pair<std::string, int>, WeatherSeason> grouped;
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    if (lines[ln].empty()) continue;
    const auto fields = split_fields(lines[ln]);
    if (fields.size() != nf + 3) {
      throw DataError(fmt::format("{}: expected {} fields, found {}", location(source, ln + 1),
                                  nf + 3, fields.size()));
    }
    int year = 0;
    int doy = 0;
    if (fields[0].empty()) {
      throw DataError(fmt::format("{}: empty cultivar", location(source, ln + 1)));
    }
    if (!parse_number(fields[1], year) || !parse_number(fields[2], doy) || doy < 1 || doy > 366) {
      throw DataError(fmt::format("{}: bad year/doy '{}','{}'", location(source, ln + 1),
                                  fields[1], fields[2]));
    }
    auto& season = grouped[{fields[0], year}];
    season.cultivar = fields[0];
    season.year = year;
    WeatherDay day;
    day.doy = doy;
    day.features.resize(nf);
    for (std::size_t f = 0; f < nf; ++f) {
      const auto& cell = fields[f + 3];
      if (cell.empty()) {
        season.gaps.push_back({doy, f});
        continue;
      }
      double v = 0.0;
      if (!parse_number(cell, v) || !std::isfinite(v)) {
        throw DataError(fmt::format("{}: bad value '{}' in column {}", location(source, ln + 1),
                                    cell, table.feature_names[f]));
      }
      day.features[f] = v;
    }
    for (const auto& existing : season.days) {
      if (existing.doy == doy) {
        throw DataError(fmt::format("{}: duplicate (cultivar={}, year={}, doy={})",
                                    location(source, ln + 1), fields[0], year, doy));
      }
    }
    season.days.push_back(std::move(day));
  }
  for (auto& [key, season] : grouped) {
    std::sort(season.days.begin(), season.days.end(),
              [](const WeatherDay& a, const WeatherDay& b) { return a.doy < b.doy; });
    table.seasons.push_back(std::move(season));
  }
  return table;
}

std::vector<PhenologyRecord> parse_phenology_csv(const std::filesystem::path& path) {
  return parse_phenology_csv_text(read_file(path), path.string());
}

std::vector<PhenologyRecord> parse_phenology_csv_text(const std::string& text,
                                                      const std::string& source) {
  const auto lines = split_lines(text);
  if (lines.empty() || split_fields(lines[0]) !=
                           std::vector<std::string>{"cultivar", "year", "budbreak_doy"}) {
    throw DataError(fmt::format("{}: phenology header must be cultivar,year,budbreak_doy",
                                location(source, 1)));
  }
  std::vector<PhenologyRecord> records;
  std::set<std::pair<std::string, int>> seen;
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    if (lines[ln].empty()) continue;
    const auto fields = split_fields(lines[ln]);
    PhenologyRecord rec;
    if (fields.size() != 3 || fields[0].empty() || !parse_number(fields[1], rec.year) ||
        !parse_number(fields[2], rec.budbreak_doy)) {
      throw DataError(fmt::format("{}: malformed phenology row", location(source, ln + 1)));
    }
    rec.cultivar = fields[0];
    if (!seen.insert({rec.cultivar, rec.year}).second) {
      throw DataError(fmt::format("{}: duplicate (cultivar={}, year={})", location(source, ln + 1),
                                  rec.cultivar, rec.year));
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<double> interpolate_missing(std::span<const std::optional<double>> series) {
  std::vector<std::size_t> known;
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (series[i]) known.push_back(i);
  }
  if (known.empty()) throw DataError("interpolate_missing: series has no known values");
  std::vector<double> out(series.size());
  for (std::size_t i = 0; i <= known.front(); ++i) out[i] = *series[known.front()];
  for (std::size_t i = known.back(); i < series.size(); ++i) out[i] = *series[known.back()];
  for (std::size_t k = 0; k + 1 < known.size(); ++k) {
    const std::size_t a = known[k];
    const std::size_t b = known[k + 1];
    const double va = *series[a];
    const double vb = *series[b];
    out[a] = va;
    for (std::size_t i = a + 1; i < b; ++i) {
      const double w = static_cast<double>(i - a) / static_cast<double>(b - a);
      out[i] = va + w * (vb - va);
    }
  }
  return out;
}

StepLabels build_labels(std::optional<int> budbreak_doy, int length) {
  if (length < 1) throw DataError(fmt::format("build_labels: season length {}", length));
  StepLabels out;
  out.labels.assign(length, 0.0);
  out.mask.assign(length, 0.0);
  if (!budbreak_doy) return out;
  if (*budbreak_doy < 1 || *budbreak_doy > length) {
    throw DataError(fmt::format("budbreak doy {} outside 1..{}", *budbreak_doy, length));
  }
  std::fill(out.mask.begin(), out.mask.end(), 1.0);
  std::fill(out.labels.begin() + (*budbreak_doy - 1), out.labels.end(), 1.0);
  return out;
}

std::vector<int> CultivarDataset::labeled_years() const {
  std::vector<int> years;
  for (const auto& s : seasons) {
    if (s.labeled()) years.push_back(s.year);
  }
  return years;
}

std::vector<std::string> Corpus::cultivar_names() const {
  std::vector<std::string> names;
  for (const auto& c : cultivars) names.push_back(c.name);
  return names;
}

const CultivarDataset& Corpus::by_name(const std::string& name) const {
  for (const auto& c : cultivars) {
    if (c.name == name) return c;
  }
  throw DataError(fmt::format("unknown cultivar '{}'", name));
}

Corpus assemble_corpus(const WeatherTable& weather, std::span<const PhenologyRecord> phenology,
                       bool full_years) {
  Corpus corpus;
  corpus.feature_names = weather.feature_names;
  const std::size_t nf = weather.feature_names.size();

  std::map<std::pair<std::string, int>, int> budbreak;
  for (const auto& rec : phenology) budbreak[{rec.cultivar, rec.year}] = rec.budbreak_doy;

  std::map<std::string, std::vector<const WeatherSeason*>> by_cultivar;
  for (const auto& s : weather.seasons) by_cultivar[s.cultivar].push_back(&s);
  for (const auto& [key, doy] : budbreak) {
    const auto it = by_cultivar.find(key.first);
    const bool found = it != by_cultivar.end() &&
                       std::any_of(it->second.begin(), it->second.end(),
                                   [&](const WeatherSeason* s) { return s->year == key.second; });
    if (!found) {
      throw DataError(fmt::format("phenology for (cultivar={}, year={}) has no weather",
                                  key.first, key.second));
    }
  }

  int next_id = 0;
  for (const auto& [name, seasons] : by_cultivar) {
    CultivarDataset ds;
    ds.cultivar_id = next_id++;
    ds.name = name;
    for (const WeatherSeason* ws : seasons) {
      const int length = full_years ? days_in_year(ws->year) : ws->days.back().doy;
      std::vector<std::vector<std::optional<double>>> columns(
          nf, std::vector<std::optional<double>>(length));
      for (const auto& day : ws->days) {
        if (day.doy > length) {
          throw DataError(fmt::format("(cultivar={}, year={}): doy {} beyond {}", name, ws->year,
                                      day.doy, length));
        }
        for (std::size_t f = 0; f < nf; ++f) columns[f][day.doy - 1] = day.features[f];
      }
      SeasonSeries season;
      season.cultivar_id = ds.cultivar_id;
      season.year = ws->year;
      season.features.resize(static_cast<Eigen::Index>(nf), length);
      for (std::size_t f = 0; f < nf; ++f) {
        std::vector<double> filled;
        try {
          filled = interpolate_missing(columns[f]);
        } catch (const DataError&) {
          throw DataError(fmt::format("(cultivar={}, year={}): feature {} has no values", name,
                                      ws->year, weather.feature_names[f]));
        }
        for (int t = 0; t < length; ++t) season.features(static_cast<Eigen::Index>(f), t) = filled[t];
      }
      if (const auto it = budbreak.find({name, ws->year}); it != budbreak.end()) {
        season.budbreak_doy = it->second;
      }
      try {
        auto labels = build_labels(season.budbreak_doy, length);
        season.labels = std::move(labels.labels);
        season.label_mask = std::move(labels.mask);
      } catch (const DataError& e) {
        throw DataError(fmt::format("(cultivar={}, year={}): {}", name, ws->year, e.what()));
      }
      ds.seasons.push_back(std::move(season));
    }
    corpus.cultivars.push_back(std::move(ds));
  }
  return corpus;
}

Corpus load_corpus(const std::filesystem::path& weather_csv,
                   const std::filesystem::path& phenology_csv) {
  const auto weather = parse_weather_csv(weather_csv);
  const auto phenology = parse_phenology_csv(phenology_csv);
  return assemble_corpus(weather, phenology);
}

std::string weather_csv_text(const Corpus& corpus) {
  std::string out = "cultivar,year,doy";
  for (const auto& name : corpus.feature_names) out += "," + name;
  out += "\n";
  for (const auto& c : corpus.cultivars) {
    for (const auto& s : c.seasons) {
      for (int t = 0; t < s.length(); ++t) {
        out += fmt::format("{},{},{}", c.name, s.year, t + 1);
        for (Eigen::Index f = 0; f < s.features.rows(); ++f) {
          out += fmt::format(",{}", s.features(f, t));
        }
        out += "\n";
      }
    }
  }
  return out;
}

std::string phenology_csv_text(const Corpus& corpus) {
  std::string out = "cultivar,year,budbreak_doy\n";
  for (const auto& c : corpus.cultivars) {
    for (const auto& s : c.seasons) {
      if (s.budbreak_doy) out += fmt::format("{},{},{}\n", c.name, s.year, *s.budbreak_doy);
    }
  }
  return out;
}

std::string weather_csv_text(const WeatherTable& table) {
  std::string out = "cultivar,year,doy";
  for (const auto& name : table.feature_names) out += "," + name;
  out += "\n";
  for (const auto& s : table.seasons) {
    for (const auto& day : s.days) {
      out += fmt::format("{},{},{}", s.cultivar, s.year, day.doy);
      for (const auto& v : day.features) {
        out += v ? fmt::format(",{}", *v) : std::string(",");
      }
      out += "\n";
    }
  }
  return out;
}

std::string phenology_csv_text(std::span<const PhenologyRecord> records) {
  std::string out = "cultivar,year,budbreak_doy\n";
  for (const auto& r : records) out += fmt::format("{},{},{}\n", r.cultivar, r.year, r.budbreak_doy);
  return out;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(fmt::format("cannot write {}", path.string()));
  out << text;
  if (!out) throw Error(fmt::format("write failed for {}", path.string()));
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& weather_csv,
                  const std::filesystem::path& phenology_csv) {
  write_text_file(weather_csv, weather_csv_text(corpus));
  write_text_file(phenology_csv, phenology_csv_text(corpus));
}

// ---------------------------------------------------------------------------

NormStats fit_normalization(std::span<const SeasonSeries* const> seasons) {
  if (seasons.empty()) throw DataError("fit_normalization: no training seasons");
  const Eigen::Index nf = seasons.front()->features.rows();
  NormStats stats;
  stats.mean = Vector::Zero(nf);
  double count = 0.0;
  for (const SeasonSeries* s : seasons) {
    if (s->features.rows() != nf) throw ShapeError("fit_normalization: feature count differs");
    stats.mean += s->features.rowwise().sum();
    count += static_cast<double>(s->features.cols());
  }
  stats.mean /= count;
  Vector sq = Vector::Zero(nf);
  for (const SeasonSeries* s : seasons) {
    sq += (s->features.colwise() - stats.mean).array().square().matrix().rowwise().sum();
  }
  stats.stddev = (sq / count).cwiseSqrt();
  return stats;
}

Matrix apply_normalization(const NormStats& stats, const Matrix& features) {
  if (features.rows() != stats.mean.size()) {
    throw ShapeError(fmt::format("normalization fitted on {} features, season has {}",
                                 stats.mean.size(), features.rows()));
  }
  Matrix out(features.rows(), features.cols());
  for (Eigen::Index f = 0; f < features.rows(); ++f) {
    if (stats.stddev[f] > 0.0) {
      out.row(f) = (features.row(f).array() - stats.mean[f]) / stats.stddev[f];
    } else {
      out.row(f).setZero();
    }
  }
  return out;
}

SeasonSeries apply_normalization(const NormStats& stats, const SeasonSeries& season) {
  SeasonSeries out = season;
  out.features = apply_normalization(stats, season.features);
  return out;
}

// ---------------------------------------------------------------------------

const std::vector<int>& TrialPlan::test_years(int trial, int cultivar_id) const {
  if (trial < 0 || trial >= static_cast<int>(trials.size()) || cultivar_id < 0 ||
      cultivar_id >= static_cast<int>(trials[trial].size())) {
    throw DataError(fmt::format("trial plan has no entry for trial {} cultivar {}", trial,
                                cultivar_id));
  }
  return trials[trial][cultivar_id];
}

bool TrialPlan::is_test(int trial, int cultivar_id, int year) const {
  const auto& years = test_years(trial, cultivar_id);
  return std::find(years.begin(), years.end(), year) != years.end();
}

TrialPlan make_trial_plan(std::span<const CultivarDataset> cultivars, std::uint64_t seed) {
  std::vector<const CultivarDataset*> sorted;
  for (const auto& c : cultivars) sorted.push_back(&c);
  std::sort(sorted.begin(), sorted.end(), [](const auto* a, const auto* b) {
    return a->cultivar_id < b->cultivar_id;
  });
  const int max_id = sorted.empty() ? -1 : sorted.back()->cultivar_id;

  TrialPlan plan;
  plan.seed = seed;
  plan.trials.assign(kNumTrials, std::vector<std::vector<int>>(max_id + 1));
  for (const CultivarDataset* c : sorted) {
    auto years = c->labeled_years();
    if (years.size() < 3) {
      throw DataError(fmt::format("cultivar '{}' has {} labeled seasons; at least 3 are needed "
                                  "to hold out 2 test seasons",
                                  c->name, years.size()));
    }
    Rng rng({seed, static_cast<std::uint64_t>(c->cultivar_id)});
    const bool disjoint = years.size() >= static_cast<std::size_t>(kNumTrials * kTestSeasonsPerTrial);
    if (disjoint) rng.shuffle(std::span<int>(years));
    for (int k = 0; k < kNumTrials; ++k) {
      std::vector<int> picked;
      if (disjoint) {
        picked.assign(years.begin() + k * kTestSeasonsPerTrial,
                      years.begin() + (k + 1) * kTestSeasonsPerTrial);
      } else {
        auto pool = c->labeled_years();
        rng.shuffle(std::span<int>(pool));
        picked.assign(pool.begin(), pool.begin() + kTestSeasonsPerTrial);
      }
      std::sort(picked.begin(), picked.end());
      plan.trials[k][c->cultivar_id] = std::move(picked);
    }
  }
  return plan;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t count, std::size_t batch_size,
                                                   std::uint64_t epoch_seed) {
  if (batch_size == 0) throw Error("make_batches: batch size must be positive");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(epoch_seed);
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < count; start += batch_size) {
    const std::size_t end = std::min(count, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

std::vector<std::vector<std::size_t>> make_balanced_batches(std::span<const int> group_of,
                                                            std::size_t batch_size,
                                                            std::uint64_t epoch_seed) {
  if (batch_size == 0) throw Error("make_balanced_batches: batch size must be positive");
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < group_of.size(); ++i) members[group_of[i]].push_back(i);
  std::vector<const std::vector<std::size_t>*> groups;
  for (const auto& [g, m] : members) groups.push_back(&m);
  Rng rng(epoch_seed);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t drawn = 0; drawn < group_of.size(); ++drawn) {
    if (drawn % batch_size == 0) batches.emplace_back();
    const auto& pool = *groups[rng.index(groups.size())];
    batches.back().push_back(pool[rng.index(pool.size())]);
  }
  return batches;
}

}  // namespace budbreak
