#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "support.hpp"

#include "budbreak/error.hpp"
#include "budbreak/synthgen.hpp"
#include "budbreak/training.hpp"

using namespace budbreak;

namespace {

constexpr std::array<int, 3> kToyFc = {4, 6, 4};
constexpr int kToyGru = 5;

Corpus small_corpus(std::vector<int> seasons, std::uint64_t seed = 0) {
  SynthConfig cfg;
  cfg.seasons_per_cultivar = std::move(seasons);
  cfg.seed = seed;
  return gen_benchmark(cfg).corpus();
}

// All seasons of the corpus normalized together; cultivar index kept unless `stl`.
std::vector<TrainSeason> train_seasons(const Corpus& corpus, bool stl = false) {
  std::vector<const SeasonSeries*> all;
  for (const auto& c : corpus.cultivars)
    for (const auto& s : c.seasons) all.push_back(&s);
  const NormStats stats = fit_normalization(all);
  std::vector<TrainSeason> out;
  for (const auto* s : all) {
    out.push_back(make_train_season(apply_normalization(stats, *s), stl ? 0 : s->cultivar_id));
  }
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double max_abs_diff(const ParamSet& a, const ParamSet& b) {
  double m = 0.0;
  auto ea = a.entries();
  auto eb = b.entries();
  for (std::size_t i = 0; i < ea.size(); ++i) {
    m = std::max(m, (*ea[i].tensor - *eb[i].tensor).cwiseAbs().maxCoeff());
  }
  return m;
}

}  // namespace

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK(c.lr == 1e-3);
  CHECK(c.batch_size == 12);
  CHECK(c.epochs == 400);
  CHECK_NOTHROW(c.validate());
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.lr = -1.0;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("constant one-half model has loss ln 2") {
  const Corpus corpus = small_corpus({2});
  const auto seasons = train_seasons(corpus);
  const ModelSpec spec = ModelSpec::make(Variant::STL, 7, kToyFc, kToyGru, 1);
  ParamSet p = init_params(spec, 1);
  p.head_weight.setZero();
  p.head_bias.setZero();
  for (const auto& s : seasons) CHECK(season_loss(p, spec, s).loss == doctest::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("season loss is the bce of the predicted probabilities") {
  const Corpus corpus = small_corpus({3, 2});
  const auto seasons = train_seasons(corpus);
  const ModelSpec spec = ModelSpec::make(Variant::ConcatE, 7, kToyFc, kToyGru, 2, 3);
  const ParamSet p = init_params(spec, 2);
  for (const auto& s : seasons) {
    const Vector probs = predict_probs(p, s.features, s.cultivar, spec);
    CHECK(season_loss(p, spec, s).loss == doctest::Approx(bce_loss(probs, s.labels, s.mask).loss).epsilon(1e-13));
  }
}

TEST_CASE("batch gradient is the mean of per-season gradients") {
  const Corpus corpus = small_corpus({3, 3, 2});
  auto seasons = train_seasons(corpus);
  seasons[1].features.conservativeResize(Eigen::NoChange, 200);
  seasons[1].labels.conservativeResize(200);
  seasons[1].mask.conservativeResize(200);
  for (Variant v : kAllVariants) {
    const ModelSpec spec = ModelSpec::make(v, 7, kToyFc, kToyGru, v == Variant::STL ? 1 : 3, 3);
    std::vector<TrainSeason> use = seasons;
    if (v == Variant::STL) for (auto& s : use) s.cultivar = 0;
    const ParamSet p = init_params(spec, 3);
    std::vector<const TrainSeason*> batch;
    for (const auto& s : use) batch.push_back(&s);
    const LossGrad whole = batch_loss(p, spec, batch);

    ParamSet mean = ParamSet::zeros(spec);
    double loss = 0.0;
    for (const auto* s : batch) {
      const LossGrad one = season_loss(p, spec, *s);
      loss += one.loss / static_cast<double>(batch.size());
      auto dst = mean.entries();
      auto src = one.grads.entries();
      for (std::size_t i = 0; i < dst.size(); ++i) {
        *dst[i].tensor += *src[i].tensor / static_cast<double>(batch.size());
      }
    }
    CHECK(whole.loss == doctest::Approx(loss).epsilon(1e-12));
    CHECK(max_abs_diff(whole.grads, mean) < 1e-12);
  }
}

TEST_CASE("a batch of k copies takes the same Adam step as one season") {
  const Corpus corpus = small_corpus({1});
  const auto seasons = train_seasons(corpus);
  const ModelSpec spec = ModelSpec::make(Variant::STL, 7, kToyFc, kToyGru, 1);
  const ParamSet start = init_params(spec, 4);

  auto step = [&](int copies) {
    ParamSet p = start;
    std::vector<const TrainSeason*> batch(copies, &seasons[0]);
    const LossGrad lg = batch_loss(p, spec, batch);
    AdamState adam;
    std::vector<Tensor2*> params;
    std::vector<const Tensor2*> grads;
    for (auto& e : p.entries()) params.push_back(e.tensor);
    for (const auto& e : lg.grads.entries()) grads.push_back(e.tensor);
    adam_step(adam, params, grads);
    return p;
  };
  const ParamSet one = step(1);
  for (int k : {2, 5, 12}) CHECK(max_abs_diff(one, step(k)) < 1e-12);
}

TEST_CASE("unlabeled seasons") {
  const Corpus corpus = small_corpus({3});
  auto seasons = train_seasons(corpus);
  const ModelSpec spec = ModelSpec::make(Variant::STL, 7, kToyFc, kToyGru, 1);
  seasons[1].labels.setZero();
  seasons[1].mask.setZero();
  CHECK_THROWS_AS(season_loss(init_params(spec, 0), spec, seasons[1]), DataError);

  TrainConfig cfg;
  cfg.epochs = 2;
  const auto trained = train_model(cfg, spec, seasons);
  CHECK(trained.record.skipped_unlabeled == 1);
  CHECK(trained.record.epoch_loss.size() == 2);
  CHECK(trained.record.adam_steps == 2);

  std::vector<TrainSeason> none = {seasons[1]};
  CHECK_THROWS_AS(train_model(cfg, spec, none), DataError);
}

TEST_CASE("non-finite loss aborts with context") {
  const Corpus corpus = small_corpus({2});
  auto seasons = train_seasons(corpus);
  seasons[1].features(0, 3) = std::numeric_limits<double>::quiet_NaN();
  const ModelSpec spec = ModelSpec::make(Variant::STL, 7, kToyFc, kToyGru, 1);
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_WITH_AS(train_model(cfg, spec, seasons), doctest::Contains("epoch 1"),
                       DivergenceError);
}

TEST_CASE("training is deterministic in the seed") {
  const Corpus corpus = small_corpus({4, 3});
  const auto seasons = train_seasons(corpus);
  const ModelSpec spec = ModelSpec::make(Variant::MultE, 7, kToyFc, kToyGru, 2);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 3;
  cfg.seed = 11;
  const auto a = train_model(cfg, spec, seasons);
  const auto b = train_model(cfg, spec, seasons);
  CHECK(a.params == b.params);
  CHECK(a.record.epoch_loss == b.record.epoch_loss);
  CHECK(a.record.adam_steps == 5 * 3);
  cfg.seed = 12;
  CHECK_FALSE(train_model(cfg, spec, seasons).params == a.params);
}

TEST_CASE("single-season overfit at toy dims") {
  const Corpus corpus = small_corpus({1}, 3);
  const auto seasons = train_seasons(corpus, true);
  const ModelSpec spec = ModelSpec::make(Variant::STL, 7, kToyFc, kToyGru, 1);
  TrainConfig cfg;
  const auto trained = train_model(cfg, spec, seasons);
  INFO("final bce ", trained.record.epoch_loss.back());
  CHECK(trained.record.epoch_loss.back() < 0.05);
  const Vector probs = predict_probs(trained.params, seasons[0].features, 0, spec);
  const auto pred = predict_budbreak_day(probs);
  REQUIRE(pred.has_value());
  CHECK(std::abs(*pred - *corpus.cultivars[0].seasons[0].budbreak_doy) <= 1);
}

TEST_CASE("multi-task loss falls over the first ten epochs") {
  int monotone = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Corpus corpus = small_corpus({4, 4, 4}, seed);
    const auto seasons = train_seasons(corpus);
    const ModelSpec spec = ModelSpec::make(Variant::MultiH, 7, {16, 32, 16}, 32, 3);
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.seed = seed;
    const auto loss = train_model(cfg, spec, seasons).record.epoch_loss;
    bool ok = true;
    for (std::size_t i = 1; i < loss.size(); ++i) ok = ok && loss[i] < loss[i - 1];
    monotone += ok ? 1 : 0;
  }
  CHECK(monotone >= 8);
}

// ---------------------------------------------------------------------------

namespace {

ExperimentConfig tiny_experiment(std::vector<Variant> variants) {
  ExperimentConfig cfg;
  cfg.variants = std::move(variants);
  cfg.fc_dims = kToyFc;
  cfg.gru_hidden = kToyGru;
  cfg.concat_dim = 3;
  cfg.train.epochs = 3;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_CASE("experiment bookkeeping") {
  const Corpus corpus = small_corpus({4, 4, 6});
  const auto result = run_experiment(corpus, tiny_experiment({Variant::STL, Variant::AddE}));
  int stl = 0;
  int adde = 0;
  for (const auto& run : result.runs) {
    if (run.variant == Variant::STL) {
      ++stl;
      REQUIRE(run.cultivar.has_value());
      CHECK(run.checkpoint.spec.num_cultivars == 1);
      CHECK(run.test.size() == result.plan.test_years(run.trial, corpus.by_name(*run.cultivar).cultivar_id).size());
    } else {
      ++adde;
      CHECK_FALSE(run.cultivar.has_value());
      CHECK(run.checkpoint.spec.num_cultivars == 3);
    }
    CHECK(run.record.epoch_loss.size() == 3);
    for (double l : run.record.epoch_loss) CHECK(std::isfinite(l));
  }
  CHECK(stl == 9);
  CHECK(adde == 3);
  CHECK(checkpoint_filename(Variant::STL, 1, std::string("Merlot")) == "STL_Merlot_trial1.ckpt");
  CHECK(checkpoint_filename(Variant::MultiH, 0, std::nullopt) == "MultiH_trial0.ckpt");
}

TEST_CASE("experiment outputs are reproducible and independent of worker count") {
  const Corpus corpus = small_corpus({4, 5});
  testing_support::TempDir a("exp_a");
  testing_support::TempDir b("exp_b");
  auto cfg = tiny_experiment({Variant::STL, Variant::MultiH, Variant::ConcatE});
  cfg.output_dir = a.path();
  run_experiment(corpus, cfg);
  cfg.output_dir = b.path();
  cfg.jobs = 3;
  run_experiment(corpus, cfg);
  std::size_t files = 0;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(a.path())) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), a.path());
    INFO(rel.string());
    if (rel == "train_log.jsonl") continue;  // contains wall-clock timings
    CHECK(slurp(entry.path()) == slurp(b.path() / rel));
    ++files;
  }
  CHECK(files == 2 * 3 + 3 + 3 + 1);
}

TEST_CASE("held-out seasons never influence training") {
  const Corpus corpus = small_corpus({4, 6});
  const auto cfg = tiny_experiment({Variant::STL, Variant::AddE});
  const auto clean = run_experiment(corpus, cfg);

  // Every season is held out in some trial, so compare trial by trial.
  for (int trial = 0; trial < 3; ++trial) {
    Corpus per_trial = corpus;
    for (auto& c : per_trial.cultivars)
      for (auto& s : c.seasons)
        if (clean.plan.is_test(trial, c.cultivar_id, s.year)) s.features.setConstant(-1e6);
    const auto dirty = run_experiment(per_trial, cfg);
    REQUIRE(dirty.runs.size() == clean.runs.size());
    for (std::size_t i = 0; i < clean.runs.size(); ++i) {
      if (clean.runs[i].trial != trial) continue;
      CHECK(serialize_checkpoint(dirty.runs[i].checkpoint) ==
            serialize_checkpoint(clean.runs[i].checkpoint));
    }
  }
}
