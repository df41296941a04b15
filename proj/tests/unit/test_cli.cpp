#include <fstream>
#include <sstream>

#include "doctest.h"
#include "support.hpp"

#include "budbreak/cli.hpp"
#include "budbreak/datasets.hpp"
#include "budbreak/models.hpp"

using namespace budbreak;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out;
  std::ostringstream err;
  Result r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t count_files(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

std::size_t count_lines(const std::string& s) {
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

const std::vector<std::string> kToyDims = {"--dims", "4,6,4,5"};

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// Small synthetic data set plus one STL and one ConcatE training run, shared by several cases.
struct TrainedFixture {
  testing_support::TempDir dir{"cli_fixture"};
  fs::path data = dir.path() / "data";
  fs::path runs = dir.path() / "runs";

  TrainedFixture() {
    REQUIRE(cli({"synth", "--seed", "3", "--seasons", "3,4", "--out", data.string()}).code == 0);
    const auto r = cli(concat({"train", "--data", data.string(), "--variant", "STL", "--variant",
                               "ConcatE", "--epochs", "2", "--out", runs.string()},
                              kToyDims));
    REQUIRE(r.code == 0);
  }
};

}  // namespace

TEST_CASE("help documents every flag") {
  const auto top = cli({"--help"});
  CHECK(top.code == 0);
  for (const char* flag : {"--config", "--seed", "--out", "--jobs", "--verbose", "--dims", "synth",
                           "train", "eval", "predict", "gradcheck"}) {
    CHECK_MESSAGE(top.out.find(flag) != std::string::npos, flag);
  }
  const auto train = cli({"train", "--help"});
  CHECK(train.code == 0);
  for (const char* flag : {"--data", "--weather", "--phenology", "--variant", "--epochs", "--lr",
                           "--batch-size", "--concat-dim", "--embed-at", "--balanced"}) {
    CHECK_MESSAGE(train.out.find(flag) != std::string::npos, flag);
  }
  const auto predict = cli({"predict", "--help"});
  for (const char* flag : {"--checkpoint", "--weather", "--cultivar", "--year"}) {
    CHECK_MESSAGE(predict.out.find(flag) != std::string::npos, flag);
  }
}

TEST_CASE("usage errors") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"frobnicate"}).code == kExitUsage);
  CHECK(cli({"train", "--variant", "Bogus"}).code == kExitUsage);
  CHECK(cli({"gradcheck", "--dims", "1,2"}).code == kExitUsage);
  CHECK(cli({"synth", "gradcheck"}).code == kExitUsage);
  CHECK(cli({"eval"}).code == kExitUsage);
}

TEST_CASE("synth defaults, determinism and directory creation") {
  testing_support::TempDir dir("cli_synth");
  const fs::path a = dir.path() / "nested" / "a";
  const fs::path b = dir.path() / "b";
  const auto r = cli({"synth", "--seed", "7", "--out", a.string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("6 cultivars, 86 seasons") != std::string::npos);
  REQUIRE(cli({"synth", "--seed", "7", "--out", b.string()}).code == 0);
  for (const char* f : {"weather.csv", "phenology.csv", "synth_provenance.json"}) {
    CHECK(slurp(a / f) == slurp(b / f));
  }
  const Corpus corpus = load_corpus(a / "weather.csv", a / "phenology.csv");
  std::vector<std::size_t> counts;
  for (const auto& c : corpus.cultivars) counts.push_back(c.seasons.size());
  CHECK(counts == std::vector<std::size_t>{4, 4, 8, 16, 24, 30});
}

TEST_CASE("config file matches flags") {
  testing_support::TempDir dir("cli_config");
  const fs::path flags = dir.path() / "flags";
  const fs::path json = dir.path() / "json";
  const fs::path toml = dir.path() / "toml";
  REQUIRE(cli({"synth", "--seed", "5", "--seasons", "2,3", "--gap-rate", "0.05", "--out",
               flags.string()})
              .code == 0);

  std::ofstream(dir.path() / "c.json")
      << "{\"seed\": 5, \"out\": \"" << json.string()
      << "\", \"synth\": {\"seasons\": [2, 3], \"gap-rate\": 0.05}}";
  REQUIRE(cli({"--config", (dir.path() / "c.json").string(), "synth"}).code == 0);

  std::ofstream(dir.path() / "c.toml") << "seed = 1\nout = \"" << toml.string()
                                       << "\"\n[synth]\nseasons = [2, 3]\ngap-rate = 0.05\n";
  REQUIRE(cli({"--config", (dir.path() / "c.toml").string(), "--seed", "5", "synth"}).code == 0);

  for (const char* f : {"weather.csv", "phenology.csv"}) {
    CHECK(slurp(flags / f) == slurp(json / f));
    CHECK(slurp(flags / f) == slurp(toml / f));
  }

  std::ofstream(dir.path() / "bad.json") << "{\"seed\": ";
  CHECK(cli({"--config", (dir.path() / "bad.json").string(), "synth"}).code == kExitUsage);
}

TEST_CASE("train, eval and predict end to end") {
  TrainedFixture fx;
  CHECK(count_files(fx.runs / "checkpoints", ".ckpt") == 3 * 2 + 3);
  CHECK(fs::exists(fx.runs / "experiment.json"));
  CHECK(count_lines(slurp(fx.runs / "train_log.jsonl")) == 3 * 2 + 3);

  SUBCASE("eval writes a one-column delta table and is reproducible") {
    const auto a = cli({"eval", "--data", fx.data.string(), "--run", fx.runs.string()});
    REQUIRE(a.code == 0);
    const fs::path reports = fx.runs / "reports";
    const std::string delta = slurp(reports / "bce_delta.csv");
    CHECK(delta.rfind("cultivar,ConcatE\n", 0) == 0);
    CHECK(count_lines(delta) == 3);
    const std::string first = slurp(reports / "day_summary.csv");
    const fs::path again = fx.dir.path() / "again";
    REQUIRE(cli({"eval", "--data", fx.data.string(), "--run", fx.runs.string(), "--out",
                 again.string()})
                .code == 0);
    CHECK(slurp(again / "day_summary.csv") == first);
    CHECK(slurp(again / "bce_delta.csv") == delta);
    CHECK(slurp(again / "summary.txt") == slurp(reports / "summary.txt"));
  }

  SUBCASE("eval without a single-task baseline warns and skips deltas") {
    const fs::path out = fx.dir.path() / "mtl_only";
    const auto r = cli({"eval", "--data", fx.data.string(), "--checkpoint",
                        (fx.runs / "checkpoints" / "ConcatE_trial0.ckpt").string(), "--out",
                        out.string()});
    REQUIRE(r.code == 0);
    CHECK(r.err.find("no STL baseline") != std::string::npos);
    CHECK(fs::exists(out / "bce_by_cultivar.csv"));
    CHECK_FALSE(fs::exists(out / "bce_delta.csv"));
  }

  SUBCASE("missing checkpoint names the expected path") {
    const std::string missing = (fx.runs / "checkpoints" / "MultE_trial0.ckpt").string();
    const auto r = cli({"eval", "--data", fx.data.string(), "--checkpoint", missing});
    CHECK(r.code == kExitData);
    CHECK(r.err.find(missing) != std::string::npos);
  }

  SUBCASE("predict on a truncated season") {
    const WeatherTable table = parse_weather_csv(fx.data / "weather.csv");
    WeatherTable cut;
    cut.feature_names = table.feature_names;
    for (const auto& s : table.seasons) {
      if (s.cultivar == "cultivar_01" && s.year == 2022) {
        WeatherSeason t = s;
        t.days.resize(180);
        cut.seasons.push_back(t);
      }
    }
    REQUIRE(cut.seasons.size() == 1);
    const fs::path csv = fx.dir.path() / "cut.csv";
    write_text_file(csv, weather_csv_text(cut));
    const std::string ckpt = (fx.runs / "checkpoints" / "ConcatE_trial1.ckpt").string();

    const auto r = cli({"predict", "--checkpoint", ckpt, "--weather", csv.string(), "--cultivar",
                        "cultivar_01"});
    REQUIRE(r.code == 0);
    CHECK(count_lines(r.out) == 181);
    CHECK(r.out.rfind("doy,prob\n1,", 0) == 0);
    CHECK((r.err.find("predicted budbreak doy") != std::string::npos ||
           r.err.find("no budbreak predicted") != std::string::npos));

    const fs::path out = fx.dir.path() / "pred.csv";
    REQUIRE(cli({"predict", "--checkpoint", ckpt, "--weather", csv.string(), "--cultivar",
                 "cultivar_01", "--out", out.string()})
                .code == 0);
    CHECK(slurp(out) == r.out);

    const auto unknown = cli({"predict", "--checkpoint", ckpt, "--weather", csv.string(),
                              "--cultivar", "Nebbiolo"});
    CHECK(unknown.code == kExitData);
    CHECK(unknown.err.find("cultivar_00, cultivar_01") != std::string::npos);

    const auto stl = cli({"predict", "--checkpoint",
                          (fx.runs / "checkpoints" / "STL_cultivar_00_trial0.ckpt").string(),
                          "--weather", csv.string(), "--cultivar", "cultivar_01"});
    CHECK(stl.code == kExitData);
  }
}

TEST_CASE("train reports data errors with file context") {
  testing_support::TempDir dir("cli_bad");
  write_text_file(dir.path() / "weather.csv", "cultivar,year,doy,temp\nA,2001,1,abc\n");
  write_text_file(dir.path() / "phenology.csv", "cultivar,year,budbreak_doy\nA,2001,50\n");
  const auto r = cli({"train", "--data", dir.path().string(), "--epochs", "1"});
  CHECK(r.code == kExitData);
  CHECK(r.err.find("weather.csv") != std::string::npos);
  CHECK(r.err.find("weather.csv:2") != std::string::npos);
}

TEST_CASE("gradcheck subcommand") {
  const auto ok = cli({"gradcheck"});
  CHECK(ok.code == 0);
  CHECK(count_lines(ok.out) == 1 + 5);
  CHECK(ok.out.find("FAIL") == std::string::npos);

  const auto dims = cli({"gradcheck", "--variant", "MultiH", "--dims", "3,5,3,4"});
  CHECK(dims.code == 0);
  CHECK(dims.out.rfind("gradcheck dims fc=[3,5,3] gru=4", 0) == 0);

  const auto fault = cli({"gradcheck", "--variant", "AddE", "--inject-fault", "embedding"});
  CHECK(fault.code == kExitCheckFailed);
  CHECK(fault.out.find("AddE     FAIL") != std::string::npos);
  CHECK(fault.out.find("embedding") != std::string::npos);
}
