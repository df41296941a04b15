// SPDX-License-Identifier: Apache-2.0
#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "budbreak/cli.hpp"
#include "budbreak/datasets.hpp"
#include "budbreak/error.hpp"
#include "budbreak/evaluation.hpp"
#include "budbreak/models.hpp"
#include "budbreak/synthgen.hpp"
#include "budbreak/training.hpp"

namespace py = pybind11;
using namespace budbreak;

namespace {

py::dict summary_dict(const DaySummary& s) {
  py::dict d;
  d["median_abs"] = s.median_abs;
  d["within_3"] = s.within_3;
  d["over_3"] = s.over_3;
  d["over_7"] = s.over_7;
  d["over_14"] = s.over_14;
  d["over_30"] = s.over_30;
  d["no_crossing"] = s.no_crossing;
  d["defined"] = s.defined;
  return d;
}

// Rows are days, columns are features.
Vector predict_days(const Checkpoint& c, const Matrix& days_by_features, const std::string& cultivar) {
  const auto it = std::find(c.meta.cultivars.begin(), c.meta.cultivars.end(), cultivar);
  if (it == c.meta.cultivars.end()) throw DataError("cultivar '" + cultivar + "' is not in checkpoint");
  const Matrix features = days_by_features.transpose();
  return predict_probs(c.params, apply_normalization(c.norm, features),
                       static_cast<int>(it - c.meta.cultivars.begin()), c.spec);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Budbreak prediction core";

  py::register_exception<Error>(m, "BudbreakError", PyExc_RuntimeError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);

  m.attr("VARIANTS") = [] {
    std::vector<std::string> names;
    for (Variant v : kAllVariants) names.emplace_back(variant_name(v));
    return names;
  }();

  m.def("oracle_budbreak", [](const std::vector<double>& temps, double tb, double fstar) {
    return oracle_budbreak(temps, tb, fstar);
  }, py::arg("temp_mean"), py::arg("base_temperature"), py::arg("forcing_requirement"));

  m.def("predict_budbreak_day", [](const std::vector<double>& probs) { return predict_budbreak_day(probs); },
        py::arg("probs"));

  m.def("build_labels", [](std::optional<int> doy, int length) {
    const StepLabels l = build_labels(doy, length);
    return py::make_tuple(l.labels, l.mask);
  }, py::arg("budbreak_doy"), py::arg("length"));

  m.def("day_error_summary", [](const std::vector<std::optional<int>>& diffs) {
    std::vector<DayPrediction> preds;
    for (const auto& d : diffs) {
      DayPrediction p;
      if (d) p.predicted_doy = *d;
      preds.push_back(p);
    }
    return summary_dict(day_error_summary(preds));
  }, py::arg("diffs"), "Summary of signed day differences; None marks a season that never crossed 0.5.");

  m.def("gradcheck", [](const std::string& variant, int features, int cultivars, int length,
                        std::uint64_t seed) {
    const Variant v = parse_variant(variant);
    const ModelSpec spec = ModelSpec::make(v, features, {4, 6, 4}, 5, v == Variant::STL ? 1 : cultivars);
    GradCheckOptions opts;
    opts.seq_len = length;
    opts.seed = seed;
    const auto r = gradcheck_model(spec, opts);
    py::dict d;
    d["passed"] = r.passed;
    d["max_rel_error"] = r.max_rel_error;
    d["worst_group"] = r.worst_group;
    return d;
  }, py::arg("variant"), py::arg("features") = 3, py::arg("cultivars") = 3, py::arg("length") = 10,
     py::arg("seed") = 0);

  m.def("write_synthetic", [](const std::filesystem::path& out, std::vector<int> seasons,
                              std::uint64_t seed, int last_year, double gap_rate) {
    SynthConfig cfg;
    cfg.seasons_per_cultivar = std::move(seasons);
    cfg.seed = seed;
    cfg.last_year = last_year;
    cfg.weather.gap_rate = gap_rate;
    return write_benchmark(gen_benchmark(cfg), out);
  }, py::arg("out"), py::arg("seasons") = std::vector<int>{4, 4, 8, 16, 24, 30}, py::arg("seed") = 0,
     py::arg("last_year") = 2022, py::arg("gap_rate") = 0.0);

  py::class_<SeasonSeries>(m, "Season")
      .def_readonly("cultivar_id", &SeasonSeries::cultivar_id)
      .def_readonly("year", &SeasonSeries::year)
      .def_readonly("budbreak_doy", &SeasonSeries::budbreak_doy)
      .def_readonly("labels", &SeasonSeries::labels)
      .def_property_readonly("features", [](const SeasonSeries& s) -> Matrix { return s.features.transpose(); },
                             "Days × features.");

  py::class_<Corpus>(m, "Corpus")
      .def_readonly("feature_names", &Corpus::feature_names)
      .def_property_readonly("cultivars", &Corpus::cultivar_names)
      .def("seasons", [](const Corpus& c, const std::string& name) { return c.by_name(name).seasons; },
           py::arg("cultivar"));

  m.def("load_corpus", &load_corpus, py::arg("weather_csv"), py::arg("phenology_csv"));

  py::class_<Checkpoint>(m, "Checkpoint")
      .def_property_readonly("variant", [](const Checkpoint& c) { return std::string(variant_name(c.spec.variant)); })
      .def_property_readonly("cultivars", [](const Checkpoint& c) { return c.meta.cultivars; })
      .def_property_readonly("feature_names", [](const Checkpoint& c) { return c.meta.feature_names; })
      .def_property_readonly("trial", [](const Checkpoint& c) { return c.meta.trial; })
      .def_property_readonly("test_years", [](const Checkpoint& c) { return c.meta.test_years; })
      .def("predict", &predict_days, py::arg("features"), py::arg("cultivar"),
           "Daily budbreak probabilities for raw (un-normalized) days × features.")
      .def("save", [](const Checkpoint& c, const std::filesystem::path& p) { save_checkpoint(p, c); });

  m.def("load_checkpoint", [](const std::filesystem::path& p) { return load_checkpoint(p); }, py::arg("path"));

  m.def("cli", [](const std::vector<std::string>& args) {
    std::ostringstream out;
    std::ostringstream err;
    int code = 0;
    {
      py::gil_scoped_release release;
      code = run_cli(args, out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
  }, py::arg("args"), "Run a budbreak subcommand; returns (exit_code, stdout, stderr).");
}
