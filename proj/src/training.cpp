// SPDX-License-Identifier: Apache-2.0
#include "budbreak/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include <fmt/format.h>

#include "json.hpp"

#include "budbreak/error.hpp"
#include "budbreak/rng.hpp"

namespace budbreak {

void TrainConfig::validate() const {
  if (!(lr > 0.0) || batch_size < 1 || epochs < 1) {
    throw Error(fmt::format("invalid training config: lr={} batch_size={} epochs={}", lr,
                            batch_size, epochs));
  }
}

TrainSeason make_train_season(const SeasonSeries& normalized, int model_cultivar) {
  TrainSeason s;
  s.features = normalized.features;
  s.labels = Eigen::Map<const Vector>(normalized.labels.data(), normalized.length());
  s.mask = Eigen::Map<const Vector>(normalized.label_mask.data(), normalized.length());
  s.cultivar = model_cultivar;
  s.year = normalized.year;
  return s;
}

LossGrad season_loss(const ParamSet& params, const ModelSpec& spec, const TrainSeason& season) {
  const TrainSeason* one = &season;
  return batch_loss(params, spec, std::span<const TrainSeason* const>(&one, 1));
}

LossGrad batch_loss(const ParamSet& params, const ModelSpec& spec,
                    std::span<const TrainSeason* const> batch) {
  std::vector<SequenceRef> refs;
  refs.reserve(batch.size());
  for (const TrainSeason* s : batch) {
    if (!s->labeled()) {
      throw DataError(fmt::format("season {} has no labeled steps", s->year));
    }
    refs.push_back({&s->features, s->cultivar});
  }
  BatchOutput fwd = forward_batch(params, spec, refs);
  const double scale = 1.0 / static_cast<double>(batch.size());
  std::vector<Vector> grad_probs(batch.size());
  LossGrad out;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    BceResult bce = bce_loss(fwd.probs[i], batch[i]->labels, batch[i]->mask);
    out.loss += bce.loss;
    grad_probs[i] = bce.grad_p * scale;
  }
  out.loss *= scale;
  out.grads = backward_batch(params, fwd.cache, grad_probs);
  return out;
}

TrainedModel train_model(const TrainConfig& config, const ModelSpec& spec,
                         std::span<const TrainSeason> seasons, const EpochCallback& on_epoch) {
  config.validate();
  spec.validate();
  const auto start = std::chrono::steady_clock::now();
  TrainedModel out;
  out.record.seed = config.seed;

  std::vector<const TrainSeason*> labeled;
  std::vector<int> groups;
  for (const auto& s : seasons) {
    if (s.labeled()) {
      labeled.push_back(&s);
      groups.push_back(s.cultivar);
    } else {
      ++out.record.skipped_unlabeled;
    }
  }
  if (labeled.empty()) throw DataError("train_model: no labeled training seasons");

  out.params = init_params(spec, config.seed);
  AdamState adam;
  adam.config.lr = config.lr;
  std::vector<Tensor2*> param_ptrs;
  for (auto& e : out.params.entries()) param_ptrs.push_back(e.tensor);

  const auto batch_size = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const std::uint64_t epoch_seed =
        Rng({config.seed, 0xe90c4ULL, static_cast<std::uint64_t>(epoch)}).next_u64();
    const auto batches = config.balanced_batches
                             ? make_balanced_batches(groups, batch_size, epoch_seed)
                             : make_batches(labeled.size(), batch_size, epoch_seed);
    double total = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      std::vector<const TrainSeason*> members;
      for (std::size_t idx : batches[b]) members.push_back(labeled[idx]);
      LossGrad lg = batch_loss(out.params, spec, members);
      if (!std::isfinite(lg.loss) || !lg.grads.all_finite()) {
        throw DivergenceError(fmt::format("non-finite loss/gradient at epoch {} batch {} (loss {})",
                                          epoch + 1, b + 1, lg.loss));
      }
      std::vector<const Tensor2*> grad_ptrs;
      for (const auto& e : std::as_const(lg.grads).entries()) grad_ptrs.push_back(e.tensor);
      adam_step(adam, param_ptrs, grad_ptrs);
      total += lg.loss * static_cast<double>(members.size());
      seen += members.size();
    }
    const double mean = total / static_cast<double>(seen);
    out.record.epoch_loss.push_back(mean);
    if (on_epoch) on_epoch(epoch + 1, mean);
  }
  out.record.adam_steps = adam.step_count;
  out.record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

GradCheckReport gradcheck_model(const ModelSpec& spec, const GradCheckOptions& options) {
  spec.validate();
  if (options.seq_len < 2) throw Error("gradcheck: sequence length must be at least 2");
  Rng rng({options.seed, 0x9c4eULL});
  ParamSet params = init_params(spec, rng.next_u64());
  // Perturb away from the zero biases so every gate and head is exercised.
  for (auto& e : params.entries()) {
    for (Eigen::Index i = 0; i < e.tensor->size(); ++i) e.tensor->data()[i] += 0.05 * rng.normal();
  }

  // Two sequences per cultivar with different lengths, so the batch has a
  // ragged tail.
  std::vector<TrainSeason> seasons;
  for (int c = 0; c < spec.num_cultivars; ++c) {
    for (int k = 0; k < 2; ++k) {
      const int length = options.seq_len - k * (options.seq_len / 3);
      TrainSeason s;
      s.features = Matrix(spec.input_dim, length);
      for (Eigen::Index i = 0; i < s.features.size(); ++i) s.features.data()[i] = rng.normal();
      const int doy = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(length)));
      const auto labels = build_labels(doy, length);
      s.labels = Eigen::Map<const Vector>(labels.labels.data(), length);
      s.mask = Eigen::Map<const Vector>(labels.mask.data(), length);
      s.cultivar = c;
      seasons.push_back(std::move(s));
    }
  }
  std::vector<const TrainSeason*> batch;
  for (const auto& s : seasons) batch.push_back(&s);

  ParamSet analytic = batch_loss(params, spec, batch).grads;
  std::vector<ParamGroup> groups;
  auto pe = params.entries();
  auto ae = analytic.entries();
  for (std::size_t i = 0; i < pe.size(); ++i) {
    if (options.fault_group && *options.fault_group == pe[i].name) {
      for (Eigen::Index j = 0; j < ae[i].tensor->size(); ++j) {
        ae[i].tensor->data()[j] = ae[i].tensor->data()[j] * 1.5 + 1e-3;
      }
    }
    groups.push_back({std::string(pe[i].name),
                      {pe[i].tensor->data(), static_cast<std::size_t>(pe[i].tensor->size())},
                      {ae[i].tensor->data(), static_cast<std::size_t>(ae[i].tensor->size())}});
  }
  if (options.fault_group &&
      std::none_of(groups.begin(), groups.end(),
                   [&](const ParamGroup& g) { return g.name == *options.fault_group; })) {
    throw Error(fmt::format("gradcheck: no parameter group named '{}'", *options.fault_group));
  }
  return finite_diff_check([&] { return batch_loss(params, spec, batch).loss; }, groups,
                           options.step, options.tolerance);
}

// ---------------------------------------------------------------------------

std::vector<SeasonEval> ExperimentResult::evaluations() const {
  std::vector<SeasonEval> all;
  for (const auto& run : runs) all.insert(all.end(), run.test.begin(), run.test.end());
  return all;
}

std::filesystem::path checkpoint_filename(Variant variant, int trial,
                                          const std::optional<std::string>& cultivar) {
  if (cultivar) {
    return fmt::format("{}_{}_trial{}.ckpt", variant_name(variant), safe_file_component(*cultivar),
                       trial);
  }
  return fmt::format("{}_trial{}.ckpt", variant_name(variant), trial);
}

namespace {

struct Job {
  Variant variant;
  int trial;
  std::optional<int> cultivar_id;
};

std::size_t variant_index(Variant v) {
  for (std::size_t i = 0; i < kAllVariants.size(); ++i) {
    if (kAllVariants[i] == v) return i;
  }
  return 0;
}

RunResult execute(const Corpus& corpus, const TrialPlan& plan, const ExperimentConfig& config,
                  const Job& job) {
  RunResult run;
  run.variant = job.variant;
  run.trial = job.trial;

  std::vector<const CultivarDataset*> members;
  if (job.cultivar_id) {
    members.push_back(&corpus.cultivars.at(*job.cultivar_id));
    run.cultivar = members.front()->name;
  } else {
    for (const auto& c : corpus.cultivars) members.push_back(&c);
  }

  std::vector<const SeasonSeries*> train_raw;
  std::vector<int> train_cultivar;
  CheckpointMeta meta;
  meta.trial = job.trial;
  meta.epochs = config.train.epochs;
  meta.feature_names = corpus.feature_names;
  for (std::size_t m = 0; m < members.size(); ++m) {
    const CultivarDataset& c = *members[m];
    meta.cultivars.push_back(c.name);
    meta.test_years[c.name] = plan.test_years(job.trial, c.cultivar_id);
    for (const auto& s : c.seasons) {
      if (plan.is_test(job.trial, c.cultivar_id, s.year)) continue;
      train_raw.push_back(&s);
      train_cultivar.push_back(static_cast<int>(m));
    }
  }

  const ModelSpec spec = ModelSpec::make(job.variant, static_cast<int>(corpus.feature_names.size()),
                                         config.fc_dims, config.gru_hidden,
                                         static_cast<int>(members.size()), config.concat_dim,
                                         config.embed_at);
  const NormStats norm = fit_normalization(train_raw);
  std::vector<TrainSeason> train;
  train.reserve(train_raw.size());
  for (std::size_t i = 0; i < train_raw.size(); ++i) {
    train.push_back(make_train_season(apply_normalization(norm, *train_raw[i]), train_cultivar[i]));
  }

  TrainConfig tc = config.train;
  tc.seed = Rng({config.seed, 0x5eedULL, variant_index(job.variant),
                 static_cast<std::uint64_t>(job.trial),
                 static_cast<std::uint64_t>(job.cultivar_id.value_or(-1) + 1)})
                .next_u64();
  meta.seed = tc.seed;
  run.record.run_id = fmt::format("{}_trial{}{}", variant_name(job.variant), job.trial,
                                  run.cultivar ? "_" + safe_file_component(*run.cultivar) : "");

  EpochCallback progress;
  if (config.verbose) {
    progress = [id = run.record.run_id, epochs = tc.epochs](int epoch, double loss) {
      if (epoch == 1 || epoch % 25 == 0 || epoch == epochs) {
        std::cerr << fmt::format("[{}] epoch {}/{} train bce {:.5f}\n", id, epoch, epochs, loss);
      }
    };
  }
  TrainedModel trained = train_model(tc, spec, train, progress);
  trained.record.run_id = run.record.run_id;

  run.checkpoint = Checkpoint{spec, norm, std::move(trained.params), std::move(meta)};
  run.record = std::move(trained.record);
  run.test = evaluate_checkpoint(run.checkpoint, corpus);
  for (const auto& [name, c] : eval_bce(run.test)) run.record.test_bce[name] = c.bce;
  run.checkpoint_file = std::filesystem::path("checkpoints") /
                        checkpoint_filename(job.variant, job.trial, run.cultivar);
  return run;
}

void write_outputs(const std::filesystem::path& dir, const ExperimentConfig& config,
                   const Corpus& corpus, const ExperimentResult& result) {
  using nlohmann::json;
  std::filesystem::create_directories(dir / "checkpoints");
  json runs = json::array();
  std::string log;
  for (const auto& run : result.runs) {
    save_checkpoint(dir / run.checkpoint_file, run.checkpoint);
    runs.push_back(json{{"variant", variant_name(run.variant)},
                        {"trial", run.trial},
                        {"cultivar", run.cultivar ? json(*run.cultivar) : json(nullptr)},
                        {"checkpoint", run.checkpoint_file.generic_string()}});
    log += json{{"run_id", run.record.run_id},
                {"variant", variant_name(run.variant)},
                {"trial", run.trial},
                {"cultivar", run.cultivar ? json(*run.cultivar) : json(nullptr)},
                {"seed", run.record.seed},
                {"epochs", run.record.epoch_loss.size()},
                {"epoch_loss", run.record.epoch_loss},
                {"skipped_unlabeled", run.record.skipped_unlabeled},
                {"adam_steps", run.record.adam_steps},
                {"wall_seconds", run.record.wall_seconds},
                {"test_bce", run.record.test_bce}}
               .dump() +
           "\n";
  }
  json plan;
  for (const auto& c : corpus.cultivars) {
    json trials = json::array();
    for (int k = 0; k < kNumTrials; ++k) trials.push_back(result.plan.test_years(k, c.cultivar_id));
    plan[c.name] = trials;
  }
  json variants = json::array();
  for (Variant v : config.variants) variants.push_back(variant_name(v));
  const json manifest = {{"seed", config.seed},
                         {"variants", variants},
                         {"fc_dims", config.fc_dims},
                         {"gru_hidden", config.gru_hidden},
                         {"concat_dim", config.concat_dim},
                         {"embed_at", embed_at_name(config.embed_at)},
                         {"epochs", config.train.epochs},
                         {"lr", config.train.lr},
                         {"batch_size", config.train.batch_size},
                         {"balanced_batches", config.train.balanced_batches},
                         {"cultivars", corpus.cultivar_names()},
                         {"trial_plan", plan},
                         {"runs", runs}};
  std::ofstream(dir / "experiment.json", std::ios::binary) << manifest.dump(2) << "\n";
  std::ofstream(dir / "train_log.jsonl", std::ios::binary) << log;
}

}  // namespace

ExperimentResult run_experiment(const Corpus& corpus, const ExperimentConfig& config) {
  config.train.validate();
  if (config.variants.empty()) throw Error("run_experiment: no variants requested");
  ExperimentResult result;
  result.plan = make_trial_plan(corpus.cultivars, config.seed);

  std::vector<Job> jobs;
  for (Variant v : config.variants) {
    for (int k = 0; k < kNumTrials; ++k) {
      if (v == Variant::STL) {
        for (const auto& c : corpus.cultivars) jobs.push_back({v, k, c.cultivar_id});
      } else {
        jobs.push_back({v, k, std::nullopt});
      }
    }
  }

  result.runs.resize(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        result.runs[i] = execute(corpus, result.plan, config, jobs[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int workers = std::max(1, std::min<int>(config.jobs, static_cast<int>(jobs.size())));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  if (config.output_dir) write_outputs(*config.output_dir, config, corpus, result);
  return result;
}

}  // namespace budbreak
