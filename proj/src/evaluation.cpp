// SPDX-License-Identifier: Apache-2.0
#include "budbreak/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ranges>
#include <set>
#include <tuple>

#include <fmt/format.h>

#include "budbreak/error.hpp"

namespace budbreak {

std::optional<int> predict_budbreak_day(std::span<const double> probs) {
  for (std::size_t t = 0; t < probs.size(); ++t) {
    if (probs[t] > kCrossingThreshold) return static_cast<int>(t) + 1;
  }
  return std::nullopt;
}

std::optional<int> predict_budbreak_day(const Vector& probs) {
  return predict_budbreak_day(std::span<const double>(probs.data(), static_cast<std::size_t>(probs.size())));
}

DaySummary day_error_summary(std::span<const DayPrediction> predictions) {
  if (predictions.empty()) throw DataError("day_error_summary: no predictions");
  DaySummary s;
  std::vector<int> abs_diffs;
  for (const auto& p : predictions) {
    const auto diff = p.diff_days();
    if (!diff) {
      ++s.no_crossing;
      continue;
    }
    const int a = std::abs(*diff);
    abs_diffs.push_back(a);
    if (a <= 3) {
      ++s.within_3;
    } else if (a <= 7) {
      ++s.over_3;
    } else if (a <= 14) {
      ++s.over_7;
    } else if (a <= 30) {
      ++s.over_14;
    } else {
      ++s.over_30;
    }
  }
  s.defined = static_cast<int>(abs_diffs.size());
  if (abs_diffs.empty()) {
    throw DataError(fmt::format("day_error_summary: none of {} predictions crossed 0.5",
                                predictions.size()));
  }
  std::sort(abs_diffs.begin(), abs_diffs.end());
  const std::size_t n = abs_diffs.size();
  s.median_abs = n % 2 == 1 ? abs_diffs[n / 2]
                            : 0.5 * (abs_diffs[n / 2 - 1] + abs_diffs[n / 2]);
  return s;
}

namespace {

// Smallest integer >= num / den for den > 0.
long long ceil_div(long long num, long long den) {
  const long long q = num / den;
  return (num % den != 0 && num > 0) ? q + 1 : q;
}

}  // namespace

std::string export_histogram(std::span<const int> diffs, int bin_width) {
  if (bin_width < 1) throw DataError("histogram bin width must be >= 1");
  std::string out = "bin_lo,bin_hi,count\n";
  if (diffs.empty()) return out;
  std::map<long long, int> counts;
  for (int d : diffs) ++counts[ceil_div(2LL * d - bin_width, 2LL * bin_width)];
  const long long first = counts.begin()->first;
  const long long last = counts.rbegin()->first;
  for (long long k = first; k <= last; ++k) {
    const auto it = counts.find(k);
    const double lo = (static_cast<double>(k) - 0.5) * bin_width;
    const double hi = (static_cast<double>(k) + 0.5) * bin_width;
    out += fmt::format("{},{},{}\n", lo, hi, it == counts.end() ? 0 : it->second);
  }
  return out;
}

std::string export_prob_curve(const Vector& probs, std::span<const double> labels) {
  if (static_cast<std::size_t>(probs.size()) != labels.size()) {
    throw ShapeError(fmt::format("prob curve: {} probabilities, {} labels", probs.size(),
                                 labels.size()));
  }
  std::string out = "doy,prob,label\n";
  for (Eigen::Index t = 0; t < probs.size(); ++t) {
    out += fmt::format("{},{},{}\n", t + 1, probs[t], static_cast<int>(labels[t]));
  }
  return out;
}

// ---------------------------------------------------------------------------

SeasonEval evaluate_season(const ParamSet& params, const ModelSpec& spec,
                           const SeasonSeries& normalized, int model_cultivar) {
  if (!normalized.labeled()) {
    throw DataError(fmt::format("season {} is unlabeled and cannot be scored", normalized.year));
  }
  SeasonEval e;
  e.variant = spec.variant;
  e.cultivar_id = normalized.cultivar_id;
  e.year = normalized.year;
  e.probs = predict_probs(params, normalized.features, model_cultivar, spec);
  e.labels = normalized.labels;
  const Vector y = Eigen::Map<const Vector>(normalized.labels.data(), normalized.length());
  const Vector mask = Eigen::Map<const Vector>(normalized.label_mask.data(), normalized.length());
  e.bce = bce_loss(e.probs, y, mask).loss;
  e.predicted_doy = predict_budbreak_day(e.probs);
  e.true_doy = *normalized.budbreak_doy;
  return e;
}

std::vector<SeasonEval> evaluate_checkpoint(const Checkpoint& ckpt, const Corpus& corpus,
                                            std::vector<std::string>* warnings) {
  if (corpus.feature_names != ckpt.meta.feature_names) {
    throw DataError(fmt::format("feature columns [{}] do not match checkpoint [{}]",
                                fmt::join(corpus.feature_names, ","),
                                fmt::join(ckpt.meta.feature_names, ",")));
  }
  std::vector<SeasonEval> out;
  for (const auto& [name, years] : ckpt.meta.test_years) {
    const auto pos = std::find(ckpt.meta.cultivars.begin(), ckpt.meta.cultivars.end(), name);
    if (pos == ckpt.meta.cultivars.end()) {
      throw FormatError(fmt::format("checkpoint tests cultivar '{}' it was not trained on", name));
    }
    const int model_cultivar = static_cast<int>(pos - ckpt.meta.cultivars.begin());
    const CultivarDataset& data = corpus.by_name(name);
    std::size_t scored = 0;
    for (int year : years) {
      const auto season = std::find_if(data.seasons.begin(), data.seasons.end(),
                                       [&](const SeasonSeries& s) { return s.year == year; });
      if (season == data.seasons.end()) {
        throw DataError(fmt::format("cultivar '{}' has no season {}", name, year));
      }
      if (!season->labeled()) continue;
      SeasonEval e = evaluate_season(ckpt.params, ckpt.spec, apply_normalization(ckpt.norm, *season),
                                     model_cultivar);
      e.cultivar = name;
      e.cultivar_id = data.cultivar_id;
      e.trial = ckpt.meta.trial;
      out.push_back(std::move(e));
      ++scored;
    }
    if (scored == 0 && warnings) {
      warnings->push_back(fmt::format("{} trial {}: no labeled test season for '{}', omitted",
                                      variant_name(ckpt.spec.variant), ckpt.meta.trial, name));
    }
  }
  return out;
}

std::map<std::string, CultivarBce> eval_bce(std::span<const SeasonEval> evals) {
  std::map<std::string, std::map<int, std::pair<double, int>>> sums;
  std::map<std::string, CultivarBce> out;
  for (const auto& e : evals) {
    auto& cell = sums[e.cultivar][e.trial];
    cell.first += e.bce;
    cell.second += 1;
    out[e.cultivar].split.emplace_back(e.trial, e.year);
  }
  for (auto& [name, result] : out) {
    double total = 0.0;
    for (const auto& [trial, cell] : sums[name]) total += cell.first / cell.second;
    result.bce = total / static_cast<double>(sums[name].size());
    std::sort(result.split.begin(), result.split.end());
  }
  return out;
}

std::map<std::string, double> bce_delta(const std::map<std::string, CultivarBce>& stl,
                                        const std::map<std::string, CultivarBce>& mtl) {
  std::map<std::string, double> out;
  if (stl.size() != mtl.size()) {
    throw DataError(fmt::format("bce_delta: split mismatch ({} vs {} cultivars)", stl.size(),
                                mtl.size()));
  }
  for (const auto& [name, base] : stl) {
    const auto it = mtl.find(name);
    if (it == mtl.end() || it->second.split != base.split) {
      throw DataError(fmt::format("bce_delta: split mismatch for cultivar '{}'", name));
    }
    out[name] = base.bce - it->second.bce;
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string format_value(double v, int precision) {
  if (precision < 0) return fmt::format("{}", v);
  return fmt::format("{:.{}f}", v, precision);
}

}  // namespace

std::string format_delta_table(const DeltaTable& table, int precision) {
  std::string out = "cultivar";
  for (const auto& c : table.columns) out += "," + c;
  out += "\n";
  for (const auto& [name, values] : table.rows) {
    if (values.size() != table.columns.size()) {
      throw ShapeError(fmt::format("delta table row '{}' has {} values for {} columns", name,
                                   values.size(), table.columns.size()));
    }
    out += name;
    for (double v : values) out += "," + format_value(v, precision);
    out += "\n";
  }
  return out;
}

std::string format_summary_header() {
  return "model,median,>3days,>1week,>2weeks,>1month,within3,no_crossing,n\n";
}

std::string format_summary_row(const std::string& label, const DaySummary& s) {
  return fmt::format("{},{},{},{},{},{},{},{},{}\n", label, s.median_abs, s.over_3, s.over_7,
                     s.over_14, s.over_30, s.within_3, s.no_crossing, s.defined + s.no_crossing);
}

std::string safe_file_component(const std::string& name) {
  std::string out;
  for (char ch : name) {
    const bool keep = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') ||
                      (ch >= '0' && ch <= '9') || ch == '-' || ch == '_' || ch == '.';
    out += keep ? ch : '_';
  }
  return out;
}

ReportResult summarize(std::span<const SeasonEval> evals) {
  ReportResult r;
  std::map<Variant, std::vector<SeasonEval>> by_variant;
  for (const auto& e : evals) by_variant[e.variant].push_back(e);
  for (const auto& [variant, list] : by_variant) {
    r.bce[variant] = eval_bce(list);
    std::vector<DayPrediction> days;
    for (const auto& e : list) days.push_back(e.day_prediction());
    try {
      r.day_summaries[variant] = day_error_summary(days);
    } catch (const DataError& e) {
      r.warnings.push_back(fmt::format("{}: {}", variant_name(variant), e.what()));
    }
  }
  const auto stl = r.bce.find(Variant::STL);
  if (stl == r.bce.end()) {
    if (!r.bce.empty()) r.warnings.push_back("no STL baseline evaluated; BCE delta table skipped");
  } else {
    for (Variant v : kDeltaColumns) {
      const auto it = r.bce.find(v);
      if (it != r.bce.end()) r.deltas[v] = bce_delta(stl->second, it->second);
    }
  }
  return r;
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& text,
                std::vector<std::filesystem::path>& written) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(fmt::format("cannot write {}", path.string()));
  out << text;
  written.push_back(path);
}

}  // namespace

ReportResult write_reports(const std::filesystem::path& dir, std::span<const SeasonEval> evals,
                           const ReportOptions& options) {
  ReportResult r = summarize(evals);

  std::set<std::string> cultivars;
  for (const auto& e : evals) cultivars.insert(e.cultivar);

  {
    std::string text = "cultivar";
    for (const auto& [v, table] : r.bce) text += fmt::format(",{}", variant_name(v));
    text += "\n";
    for (const auto& name : cultivars) {
      text += name;
      for (const auto& [v, table] : r.bce) {
        const auto it = table.find(name);
        text += it == table.end() ? std::string(",") : fmt::format(",{}", it->second.bce);
      }
      text += "\n";
    }
    write_file(dir / "bce_by_cultivar.csv", text, r.files);
  }

  if (!r.deltas.empty()) {
    DeltaTable table;
    std::vector<Variant> present;
    for (Variant v : kDeltaColumns) {
      if (r.deltas.count(v)) {
        present.push_back(v);
        table.columns.emplace_back(variant_name(v));
      }
    }
    for (const auto& name : r.bce.at(Variant::STL) | std::views::keys) {
      std::vector<double> row;
      for (Variant v : present) row.push_back(r.deltas.at(v).at(name));
      table.rows.emplace_back(name, std::move(row));
    }
    write_file(dir / "bce_delta.csv", format_delta_table(table), r.files);
  }

  {
    std::string text = format_summary_header();
    for (const auto& [v, s] : r.day_summaries) text += format_summary_row(std::string(variant_name(v)), s);
    write_file(dir / "day_summary.csv", text, r.files);
  }

  {
    std::vector<const SeasonEval*> sorted;
    for (const auto& e : evals) sorted.push_back(&e);
    std::sort(sorted.begin(), sorted.end(), [](const SeasonEval* a, const SeasonEval* b) {
      return std::tie(a->variant, a->trial, a->cultivar, a->year) <
             std::tie(b->variant, b->trial, b->cultivar, b->year);
    });
    std::string text = "variant,trial,cultivar,year,true_doy,predicted_doy,diff_days,bce\n";
    std::map<Variant, std::vector<int>> diffs;
    for (const SeasonEval* e : sorted) {
      const auto diff = e->day_prediction().diff_days();
      text += fmt::format("{},{},{},{},{},{},{},{}\n", variant_name(e->variant), e->trial,
                          e->cultivar, e->year, e->true_doy,
                          e->predicted_doy ? fmt::format("{}", *e->predicted_doy) : "",
                          diff ? fmt::format("{}", *diff) : "", e->bce);
      diffs[e->variant];
      if (diff) diffs[e->variant].push_back(*diff);
      if (options.write_curves) {
        write_file(dir / "curves" /
                       fmt::format("{}_trial{}_{}_{}.csv", variant_name(e->variant), e->trial,
                                   safe_file_component(e->cultivar), e->year),
                   export_prob_curve(e->probs, e->labels), r.files);
      }
    }
    write_file(dir / "day_predictions.csv", text, r.files);
    for (const auto& [v, d] : diffs) {
      write_file(dir / fmt::format("histogram_{}.csv", variant_name(v)),
                 export_histogram(d, options.histogram_bin_width), r.files);
    }
  }

  {
    std::string text = "Budbreak evaluation summary\n\n";
    text += "Mean held-out BCE per cultivar (averaged over trials)\n";
    for (const auto& [v, table] : r.bce) {
      text += fmt::format("  {}:", variant_name(v));
      for (const auto& [name, c] : table) text += fmt::format(" {}={:.4f}", name, c.bce);
      text += "\n";
    }
    if (!r.deltas.empty()) {
      text += "\nBCE delta (STL - variant, positive = multi-task better)\n";
      for (const auto& [v, d] : r.deltas) {
        double mean = 0.0;
        for (const auto& [name, x] : d) mean += x;
        mean /= static_cast<double>(d.size());
        int better = 0;
        for (const auto& [name, x] : d) better += x > 0.0 ? 1 : 0;
        text += fmt::format("  {}: mean {:+.4f}, improves {}/{} cultivars\n", variant_name(v), mean,
                            better, d.size());
      }
    }
    text += "\nDifference in days (predicted - observed), pooled over cultivars and trials\n";
    for (const auto& [v, s] : r.day_summaries) {
      text += fmt::format(
          "  {}: median |diff| {} ; >3d {} ; >1w {} ; >2w {} ; >1m {} ; no crossing {}\n",
          variant_name(v), s.median_abs, s.over_3, s.over_7, s.over_14, s.over_30, s.no_crossing);
    }
    if (!r.warnings.empty()) {
      text += "\nWarnings\n";
      for (const auto& w : r.warnings) text += "  " + w + "\n";
    }
    write_file(dir / "summary.txt", text, r.files);
  }
  return r;
}

}  // namespace budbreak
