// SPDX-License-Identifier: Apache-2.0
//
// Masked-BCE training with Adam over shuffled batches of seasons, and the
// three-trial experiment that trains every requested variant.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "budbreak/datasets.hpp"
#include "budbreak/evaluation.hpp"
#include "budbreak/models.hpp"

namespace budbreak {

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 12;
  int epochs = 400;
  std::uint64_t seed = 0;
  bool balanced_batches = false;

  void validate() const;
};

/// A normalized season ready for training. `cultivar` is the model's
/// cultivar index (always 0 for STL).
struct TrainSeason {
  Matrix features;
  Vector labels;
  Vector mask;
  int cultivar = 0;
  int year = 0;

  bool labeled() const { return mask.sum() > 0.0; }
};

TrainSeason make_train_season(const SeasonSeries& normalized, int model_cultivar);

struct TrainRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  std::vector<double> epoch_loss;
  std::size_t skipped_unlabeled = 0;
  std::int64_t adam_steps = 0;
  double wall_seconds = 0.0;
  std::map<std::string, double> test_bce;
};

struct LossGrad {
  double loss = 0.0;
  ParamSet grads;
};

/// Masked mean BCE of one labeled season and its exact gradient.
LossGrad season_loss(const ParamSet& params, const ModelSpec& spec, const TrainSeason& season);

/// Mean of per-season losses and gradients over a batch.
LossGrad batch_loss(const ParamSet& params, const ModelSpec& spec,
                    std::span<const TrainSeason* const> batch);

struct TrainedModel {
  ParamSet params;
  TrainRecord record;
};

using EpochCallback = std::function<void(int epoch, double mean_loss)>;

/// Unlabeled seasons are skipped and counted; at least one must be labeled.
TrainedModel train_model(const TrainConfig& config, const ModelSpec& spec,
                         std::span<const TrainSeason> seasons,
                         const EpochCallback& on_epoch = nullptr);

/// Finite-difference check of batch_loss on random toy sequences covering every
/// cultivar. `fault_group` names a parameter whose analytic gradient is
/// deliberately corrupted (negative control).
struct GradCheckOptions {
  int seq_len = 10;
  std::uint64_t seed = 0;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::optional<std::string> fault_group;
};

GradCheckReport gradcheck_model(const ModelSpec& spec, const GradCheckOptions& options = {});

// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::vector<Variant> variants = {kAllVariants.begin(), kAllVariants.end()};
  std::array<int, 3> fc_dims = {64, 128, 64};
  int gru_hidden = 128;
  int concat_dim = kDefaultConcatEmbedding;
  EmbedAt embed_at = EmbedAt::gru_input;
  TrainConfig train;
  std::uint64_t seed = 0;
  int jobs = 1;
  std::optional<std::filesystem::path> output_dir;
  bool verbose = false;
};

struct RunResult {
  Variant variant = Variant::STL;
  int trial = 0;
  std::optional<std::string> cultivar;  // STL only
  Checkpoint checkpoint;
  TrainRecord record;
  std::vector<SeasonEval> test;
  std::filesystem::path checkpoint_file;  // relative to the output directory
};

struct ExperimentResult {
  TrialPlan plan;
  std::vector<RunResult> runs;

  std::vector<SeasonEval> evaluations() const;
};

std::filesystem::path checkpoint_filename(Variant variant, int trial,
                                          const std::optional<std::string>& cultivar);

/// For each variant and trial: STL trains one model per cultivar on that
/// cultivar's non-test seasons; multi-task variants train one model on all
/// cultivars jointly. Normalization is fitted on the training seasons only.
/// With an output directory, writes checkpoints/, train_log.jsonl and
/// experiment.json.
ExperimentResult run_experiment(const Corpus& corpus, const ExperimentConfig& config);

}  // namespace budbreak
