// SPDX-License-Identifier: Apache-2.0
#include "budbreak/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <iterator>
#include <memory>
#include <sstream>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "json.hpp"

#include "budbreak/datasets.hpp"
#include "budbreak/error.hpp"
#include "budbreak/evaluation.hpp"
#include "budbreak/models.hpp"
#include "budbreak/synthgen.hpp"
#include "budbreak/training.hpp"

namespace budbreak {

namespace {

namespace fs = std::filesystem;

struct GlobalOptions {
  std::uint64_t seed = 0;
  std::string out;
  int jobs = 1;
  bool verbose = false;
  std::vector<int> dims;  // fc1,fc2,fc3,gru
};

struct SynthOptions {
  std::vector<int> seasons = {4, 4, 8, 16, 24, 30};
  int last_year = 2022;
  double gap_rate = 0.0;
  double prior_scale = 1.0;
};

struct DataOptions {
  std::string data_dir;
  std::string weather;
  std::string phenology;

  fs::path weather_path() const {
    return weather.empty() ? fs::path(data_dir.empty() ? "." : data_dir) / "weather.csv"
                           : fs::path(weather);
  }
  fs::path phenology_path() const {
    return phenology.empty() ? fs::path(data_dir.empty() ? "." : data_dir) / "phenology.csv"
                             : fs::path(phenology);
  }
};

struct TrainOptions {
  DataOptions data;
  std::vector<std::string> variants;
  int epochs = 400;
  double lr = 1e-3;
  int batch_size = 12;
  int concat_dim = kDefaultConcatEmbedding;
  std::string embed_at = "gru_input";
  bool balanced = false;
};

struct EvalOptions {
  DataOptions data;
  std::string run_dir;
  std::vector<std::string> checkpoints;
  int bin_width = 5;
  bool no_curves = false;
};

struct PredictOptions {
  std::string checkpoint;
  std::string weather;
  std::string cultivar;
  int year = 0;
};

struct GradcheckOptions {
  std::vector<std::string> variants;
  int features = 3;
  int cultivars = 3;
  int seq_len = 10;
  int concat_dim = 4;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::string fault;
};

std::vector<std::string> variant_names() {
  std::vector<std::string> names;
  for (Variant v : kAllVariants) names.emplace_back(variant_name(v));
  return names;
}

std::vector<Variant> parse_variants(const std::vector<std::string>& names) {
  std::vector<Variant> out;
  for (const auto& n : names) {
    const Variant v = parse_variant(n);
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
  }
  if (out.empty()) out.assign(kAllVariants.begin(), kAllVariants.end());
  return out;
}

std::array<int, 3> fc_dims_of(const GlobalOptions& g, std::array<int, 3> fallback) {
  return g.dims.empty() ? fallback : std::array<int, 3>{g.dims[0], g.dims[1], g.dims[2]};
}

int gru_of(const GlobalOptions& g, int fallback) { return g.dims.empty() ? fallback : g.dims[3]; }

void add_data_options(CLI::App* cmd, DataOptions& d) {
  cmd->add_option("--data", d.data_dir, "Directory holding weather.csv and phenology.csv");
  cmd->add_option("--weather", d.weather, "Weather CSV (overrides --data)");
  cmd->add_option("--phenology", d.phenology, "Phenology CSV (overrides --data)");
}

int cmd_synth(const GlobalOptions& g, const SynthOptions& o, std::ostream& out) {
  SynthConfig config;
  config.seasons_per_cultivar = o.seasons;
  config.last_year = o.last_year;
  config.seed = g.seed;
  config.weather.gap_rate = o.gap_rate;
  config.prior.base_temp_spread *= o.prior_scale;
  config.prior.forcing_spread *= o.prior_scale;
  const SynthBenchmark bench = gen_benchmark(config);
  const fs::path dir = g.out.empty() ? fs::path("data") : fs::path(g.out);
  for (const auto& f : write_benchmark(bench, dir)) out << "wrote " << f.string() << "\n";
  out << fmt::format("{} cultivars, {} seasons, {} labeled\n", bench.cultivars.size(),
                     bench.weather.seasons.size(), bench.phenology.size());
  return kExitOk;
}

int cmd_train(const GlobalOptions& g, const TrainOptions& o, std::ostream& out,
              std::ostream& err) {
  const Corpus corpus = load_corpus(o.data.weather_path(), o.data.phenology_path());
  ExperimentConfig config;
  config.variants = parse_variants(o.variants);
  config.fc_dims = fc_dims_of(g, config.fc_dims);
  config.gru_hidden = gru_of(g, config.gru_hidden);
  config.concat_dim = o.concat_dim;
  config.embed_at = parse_embed_at(o.embed_at);
  config.train.epochs = o.epochs;
  config.train.lr = o.lr;
  config.train.batch_size = o.batch_size;
  config.train.balanced_batches = o.balanced;
  config.seed = g.seed;
  config.jobs = g.jobs;
  config.verbose = g.verbose;
  config.output_dir = g.out.empty() ? fs::path("runs") : fs::path(g.out);
  const ExperimentResult result = run_experiment(corpus, config);
  for (const auto& run : result.runs) {
    out << fmt::format("{} final train bce {:.5f} -> {}\n", run.record.run_id,
                       run.record.epoch_loss.back(),
                       (*config.output_dir / run.checkpoint_file).string());
  }
  if (g.verbose) err << fmt::format("{} runs written to {}\n", result.runs.size(),
                                    config.output_dir->string());
  return kExitOk;
}

int cmd_eval(const GlobalOptions& g, const EvalOptions& o, std::ostream& out, std::ostream& err) {
  std::vector<fs::path> paths;
  for (const auto& c : o.checkpoints) paths.emplace_back(c);
  if (!o.run_dir.empty()) {
    const fs::path manifest_path = fs::path(o.run_dir) / "experiment.json";
    std::ifstream in(manifest_path);
    if (!in) throw DataError(fmt::format("missing run manifest: expected {}", manifest_path.string()));
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(in);
      for (const auto& run : manifest.at("runs")) {
        paths.push_back(fs::path(o.run_dir) / run.at("checkpoint").get<std::string>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(fmt::format("{}: {}", manifest_path.string(), e.what()));
    }
  }
  if (paths.empty()) throw CLI::ValidationError("eval", "give --run or at least one --checkpoint");
  for (const auto& p : paths) {
    if (!fs::exists(p)) throw DataError(fmt::format("missing checkpoint: expected {}", p.string()));
  }

  const Corpus corpus = load_corpus(o.data.weather_path(), o.data.phenology_path());
  std::vector<SeasonEval> evals;
  std::vector<std::string> warnings;
  for (const auto& p : paths) {
    const Checkpoint ckpt = load_checkpoint(p);
    auto e = evaluate_checkpoint(ckpt, corpus, &warnings);
    evals.insert(evals.end(), std::make_move_iterator(e.begin()), std::make_move_iterator(e.end()));
  }
  const fs::path dir = !g.out.empty()        ? fs::path(g.out)
                       : !o.run_dir.empty() ? fs::path(o.run_dir) / "reports"
                                            : fs::path("reports");
  ReportOptions options;
  options.histogram_bin_width = o.bin_width;
  options.write_curves = !o.no_curves;
  const ReportResult report = write_reports(dir, evals, options);
  for (const auto& w : warnings) err << "warning: " << w << "\n";
  for (const auto& w : report.warnings) err << "warning: " << w << "\n";
  std::ifstream summary(dir / "summary.txt");
  out << summary.rdbuf();
  if (g.verbose) {
    for (const auto& f : report.files) err << "wrote " << f.string() << "\n";
  }
  return kExitOk;
}

int cmd_predict(const GlobalOptions& g, const PredictOptions& o, std::ostream& out,
                std::ostream& err) {
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  const auto known = std::find(ckpt.meta.cultivars.begin(), ckpt.meta.cultivars.end(), o.cultivar);
  if (known == ckpt.meta.cultivars.end()) {
    throw DataError(fmt::format("cultivar '{}' is not in checkpoint; known cultivars: {}",
                                o.cultivar, fmt::join(ckpt.meta.cultivars, ", ")));
  }
  const int model_cultivar = static_cast<int>(known - ckpt.meta.cultivars.begin());

  WeatherTable table = parse_weather_csv(o.weather, ckpt.meta.feature_names);
  // Reorder columns to the checkpoint's feature order.
  std::vector<std::size_t> perm;
  for (const auto& name : ckpt.meta.feature_names) {
    perm.push_back(static_cast<std::size_t>(
        std::find(table.feature_names.begin(), table.feature_names.end(), name) -
        table.feature_names.begin()));
  }
  std::vector<WeatherSeason> chosen;
  for (auto& s : table.seasons) {
    if (s.cultivar != o.cultivar || (o.year != 0 && s.year != o.year)) continue;
    for (auto& day : s.days) {
      std::vector<std::optional<double>> reordered;
      for (std::size_t p : perm) reordered.push_back(day.features[p]);
      day.features = std::move(reordered);
    }
    chosen.push_back(std::move(s));
  }
  if (chosen.empty()) {
    throw DataError(fmt::format("{}: no rows for cultivar '{}'{}", o.weather, o.cultivar,
                                o.year ? fmt::format(" in {}", o.year) : ""));
  }
  if (chosen.size() > 1) {
    throw DataError(fmt::format("{}: several seasons for '{}'; pick one with --year", o.weather,
                                o.cultivar));
  }
  table.feature_names = ckpt.meta.feature_names;
  table.seasons = std::move(chosen);
  const Corpus corpus = assemble_corpus(table, {}, /*full_years=*/false);
  const SeasonSeries& season = corpus.cultivars.front().seasons.front();
  const Vector probs = predict_probs(ckpt.params, apply_normalization(ckpt.norm, season.features),
                                     model_cultivar, ckpt.spec);

  std::string csv = "doy,prob\n";
  for (Eigen::Index t = 0; t < probs.size(); ++t) csv += fmt::format("{},{}\n", t + 1, probs[t]);
  const auto doy = predict_budbreak_day(probs);
  const std::string verdict =
      doy ? fmt::format("predicted budbreak doy: {}", *doy) : std::string("no budbreak predicted");
  if (g.out.empty()) {
    out << csv;
    err << verdict << "\n";
  } else {
    write_text_file(g.out, csv);
    out << verdict << "\n";
  }
  return kExitOk;
}

int cmd_gradcheck(const GlobalOptions& g, const GradcheckOptions& o, std::ostream& out) {
  const std::array<int, 3> fc = fc_dims_of(g, {4, 6, 4});
  const int gru = gru_of(g, 5);
  out << fmt::format("gradcheck dims fc=[{}] gru={} features={} cultivars={} H={} h={} tol={}\n",
                     fmt::join(fc, ","), gru, o.features, o.cultivars, o.seq_len, o.step,
                     o.tolerance);
  bool all_pass = true;
  for (Variant v : parse_variants(o.variants)) {
    const ModelSpec spec = ModelSpec::make(v, o.features, fc, gru, o.cultivars, o.concat_dim);
    GradCheckOptions opts;
    opts.seq_len = o.seq_len;
    opts.seed = g.seed;
    opts.step = o.step;
    opts.tolerance = o.tolerance;
    if (!o.fault.empty()) opts.fault_group = o.fault;
    const GradCheckReport report = gradcheck_model(spec, opts);
    all_pass = all_pass && report.passed;
    out << fmt::format("{:<8} {} max_rel_error={:.3e} worst={}\n", variant_name(v),
                       report.passed ? "PASS" : "FAIL", report.max_rel_error, report.worst_group);
    if (!report.passed || g.verbose) {
      for (const auto& grp : report.groups) {
        out << fmt::format("  {:<18} n={:<5} max_rel_error={:.3e}{}\n", grp.name, grp.count,
                           grp.max_rel_error, grp.max_rel_error < o.tolerance ? "" : "  FAIL");
      }
    }
  }
  return all_pass ? kExitOk : kExitCheckFailed;
}

// JSON objects map to option names, nested objects to subcommands; anything
// else is handed to the TOML/INI reader.
class JsonOrTomlConfig : public CLI::ConfigTOML {
 public:
  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    std::string text((std::istreambuf_iterator<char>(input)), {});
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first == std::string::npos || text[first] != '{') {
      std::istringstream in(text);
      return CLI::ConfigTOML::from_config(in);
    }
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw CLI::ConversionError("config", fmt::format("invalid JSON config: {}", e.what()));
    }
    std::vector<CLI::ConfigItem> items;
    flatten(doc, {}, items);
    return items;
  }

 private:
  static std::string scalar(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number()) return v.dump();
    throw CLI::ConversionError("config", fmt::format("unsupported JSON value {}", v.dump()));
  }

  static void flatten(const nlohmann::json& obj, const std::vector<std::string>& parents,
                      std::vector<CLI::ConfigItem>& items) {
    for (const auto& [key, value] : obj.items()) {
      if (value.is_object()) {
        auto next = parents;
        next.push_back(key);
        flatten(value, next, items);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar(v));
      } else {
        item.inputs.push_back(scalar(value));
      }
      items.push_back(std::move(item));
    }
  }
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Budbreak prediction: synthetic data, training, evaluation, prediction."};
  app.name("budbreak");
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.config_formatter(std::make_shared<JsonOrTomlConfig>());
  app.set_config("--config", "", "Read options from a JSON or TOML/INI file; flags take precedence");

  GlobalOptions g;
  app.add_option("--seed", g.seed, "Master seed")->capture_default_str();
  app.add_option("--out", g.out, "Output directory (predict: output CSV file)");
  app.add_option("--jobs", g.jobs, "Parallel training runs")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_flag("--verbose,-v", g.verbose, "Progress on stderr");
  app.add_option("--dims", g.dims, "Model dims fc1,fc2,fc3,gru")
      ->delimiter(',')
      ->expected(4)
      ->check(CLI::PositiveNumber);

  const auto variant_check = CLI::IsMember(variant_names());

  SynthOptions so;
  auto* synth = app.add_subcommand("synth", "Generate the synthetic benchmark");
  synth->add_option("--seasons", so.seasons, "Seasons per cultivar")->delimiter(',')->capture_default_str();
  synth->add_option("--last-year", so.last_year, "Last season year")->capture_default_str();
  synth->add_option("--gap-rate", so.gap_rate, "Fraction of weather cells left empty")
      ->check(CLI::Range(0.0, 0.99));
  synth->add_option("--prior-scale", so.prior_scale, "Multiplier on the (T_b, F*) prior spread")
      ->check(CLI::NonNegativeNumber);

  TrainOptions to;
  auto* train = app.add_subcommand("train", "Train variants over the three trials");
  add_data_options(train, to.data);
  train->add_option("--variant", to.variants, "Variants to train (default: all)")
      ->delimiter(',')
      ->check(variant_check);
  train->add_option("--epochs", to.epochs, "Epochs per run")->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--lr", to.lr, "Adam learning rate")->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--batch-size", to.batch_size, "Seasons per batch")->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--concat-dim", to.concat_dim, "ConcatE embedding size")->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--embed-at", to.embed_at, "Where embeddings join")
      ->check(CLI::IsMember({"gru_input", "raw_input"}))
      ->capture_default_str();
  train->add_flag("--balanced", to.balanced, "Sample cultivars uniformly per batch");

  EvalOptions eo;
  auto* eval = app.add_subcommand("eval", "Score checkpoints on their held-out seasons");
  add_data_options(eval, eo.data);
  eval->add_option("--run", eo.run_dir, "Training output directory (reads experiment.json)");
  eval->add_option("--checkpoint", eo.checkpoints, "Checkpoint file(s)");
  eval->add_option("--bin-width", eo.bin_width, "Histogram bin width in days")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  eval->add_flag("--no-curves", eo.no_curves, "Skip per-season probability curves");

  PredictOptions po;
  auto* predict = app.add_subcommand("predict", "Daily budbreak probabilities for one season");
  predict->add_option("--checkpoint", po.checkpoint, "Checkpoint file")->required();
  predict->add_option("--weather", po.weather, "Weather CSV covering doy 1..t")->required();
  predict->add_option("--cultivar", po.cultivar, "Cultivar name")->required();
  predict->add_option("--year", po.year, "Season year when the CSV holds several");

  GradcheckOptions go;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  gradcheck->add_option("--variant", go.variants, "Variants (default: all)")
      ->delimiter(',')
      ->check(variant_check);
  gradcheck->add_option("--features", go.features, "Input features")->check(CLI::PositiveNumber)->capture_default_str();
  gradcheck->add_option("--cultivars", go.cultivars, "Cultivars")->check(CLI::PositiveNumber)->capture_default_str();
  gradcheck->add_option("--length", go.seq_len, "Sequence length")->check(CLI::Range(2, 10000))->capture_default_str();
  gradcheck->add_option("--step", go.step, "Finite-difference step")->check(CLI::PositiveNumber)->capture_default_str();
  gradcheck->add_option("--tol", go.tolerance, "Relative error tolerance")->check(CLI::PositiveNumber)->capture_default_str();
  gradcheck->add_option("--concat-dim", go.concat_dim, "ConcatE embedding size")->check(CLI::PositiveNumber)->capture_default_str();
  gradcheck->add_option("--inject-fault", go.fault, "Corrupt one parameter group's gradient");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(g, so, out);
    if (*train) return cmd_train(g, to, out, err);
    if (*eval) return cmd_eval(g, eo, out, err);
    if (*predict) return cmd_predict(g, po, out, err);
    if (*gradcheck) return cmd_gradcheck(g, go, out);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kExitData;
  } catch (const SpecMismatchError& e) {
    err << "format error: " << e.what() << "\n";
    return kExitData;
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace budbreak
