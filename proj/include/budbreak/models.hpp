// SPDX-License-Identifier: Apache-2.0
//
// Recurrent budbreak models. Every variant shares the backbone
//
//   x_t -> FC1+ReLU -> FC2+ReLU -> [combine cultivar embedding] -> GRU -> FC3+ReLU
//
// followed by a sigmoid head. STL has one head and no embedding. MultiH keeps
// one head per cultivar. AddE / ConcatE / MultE learn a per-cultivar embedding
// that is added to, concatenated with, or multiplied into the GRU input (or
// the raw weather input when EmbedAt::raw_input is selected).
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "budbreak/datasets.hpp"
#include "budbreak/tensorcore.hpp"

namespace budbreak {

enum class Variant { STL, MultiH, AddE, ConcatE, MultE };

inline constexpr std::array<Variant, 5> kAllVariants = {Variant::STL, Variant::MultiH,
                                                        Variant::AddE, Variant::ConcatE,
                                                        Variant::MultE};

std::string_view variant_name(Variant v);
/// Throws DataError listing valid names.
Variant parse_variant(std::string_view name);
bool is_multitask(Variant v);
bool uses_embedding(Variant v);

enum class EmbedAt { gru_input, raw_input };

std::string_view embed_at_name(EmbedAt e);
EmbedAt parse_embed_at(std::string_view name);

inline constexpr int kDefaultConcatEmbedding = 64;

struct ModelSpec {
  Variant variant = Variant::STL;
  int input_dim = 7;
  std::array<int, 3> fc_dims = {64, 128, 64};
  int gru_hidden = 128;
  int num_cultivars = 1;
  int embedding_dim = 0;  // 0 for STL / MultiH
  EmbedAt embed_at = EmbedAt::gru_input;

  /// Fills embedding_dim from the variant: AddE/MultE match the combined
  /// vector, ConcatE uses `concat_dim`. STL forces one cultivar.
  static ModelSpec make(Variant variant, int input_dim, std::array<int, 3> fc_dims,
                        int gru_hidden, int num_cultivars,
                        int concat_dim = kDefaultConcatEmbedding,
                        EmbedAt embed_at = EmbedAt::gru_input);

  void validate() const;
  int fc1_input_dim() const;
  int gru_input_dim() const;
  int num_heads() const;

  bool operator==(const ModelSpec&) const = default;
};

std::string describe(const ModelSpec& spec);

struct ParamSet {
  Tensor2 fc1_weight, fc1_bias;
  Tensor2 fc2_weight, fc2_bias;
  GruParams gru;
  Tensor2 fc3_weight, fc3_bias;
  Tensor2 head_weight, head_bias;  // one row per head
  Tensor2 embedding;               // num_cultivars × embedding_dim, empty if unused

  struct Entry {
    std::string_view name;
    Tensor2* tensor;
  };
  struct ConstEntry {
    std::string_view name;
    const Tensor2* tensor;
  };
  /// Canonical order used by Adam, checkpoints, and gradient checks.
  std::vector<Entry> entries();
  std::vector<ConstEntry> entries() const;

  static ParamSet zeros(const ModelSpec& spec);
  void set_zero();
  ParamSet& operator+=(const ParamSet& other);
  ParamSet& operator*=(double scale);
  bool all_finite() const;
  bool operator==(const ParamSet& other) const;
};

/// Glorot-uniform weights, zero biases; MultE embeddings in [0.9, 1.1],
/// AddE/ConcatE embeddings in ±0.1.
ParamSet init_params(const ModelSpec& spec, std::uint64_t seed);

/// One input sequence: F × T features (column t = step t) and the cultivar
/// (task) it belongs to.
struct SequenceRef {
  const Matrix* features = nullptr;
  int cultivar = 0;
};

/// Activations of a batched forward pass. Sequences are laid out time-major,
/// longest first, so the sequences still running at step t are always a
/// prefix of the block for step t.
struct ForwardCache {
  ModelSpec spec;
  std::vector<std::size_t> order;     // rank -> input index
  std::vector<int> lengths;           // by input index
  std::vector<Eigen::Index> offsets;  // column offset of each step block
  std::vector<Eigen::Index> active;   // sequences running at each step
  std::vector<int> column_cultivar;

  Matrix raw_input;  // only kept when the embedding joins the raw input
  Matrix input;      // FC1 input
  Matrix fc1_out;
  Matrix fc2_out;
  Matrix gru_input;
  Matrix h_prev;
  Matrix gate_z, gate_r, gate_n, hidden_n;
  Matrix hidden;
  Matrix fc3_out;
  Vector probs;      // one per column

  Eigen::Index columns() const { return fc1_out.cols(); }
  Eigen::Index column(std::size_t input_index, int step) const;
};

struct BatchOutput {
  std::vector<Vector> probs;  // by input index
  ForwardCache cache;
};

BatchOutput forward_batch(const ParamSet& params, const ModelSpec& spec,
                          std::span<const SequenceRef> sequences);

/// Gradients of sum_s <grad_probs[s], probs[s]> w.r.t. all parameters.
ParamSet backward_batch(const ParamSet& params, const ForwardCache& cache,
                        std::span<const Vector> grad_probs);

/// Per-step FC3 features (d3 × T, column t = step t).
Matrix backbone_forward(const ParamSet& params, const Matrix& features, int cultivar,
                        const ModelSpec& spec);
Vector predict_probs(const ParamSet& params, const Matrix& features, int cultivar,
                     const ModelSpec& spec);
ParamSet model_backward(const ParamSet& params, const ForwardCache& cache, const Vector& grad_probs);

// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint64_t seed = 0;
  int epochs = 0;
  int trial = 0;
  std::vector<std::string> cultivars;  // index = model cultivar id
  std::vector<std::string> feature_names;
  std::map<std::string, std::vector<int>> test_years;

  bool operator==(const CheckpointMeta&) const = default;
};

struct Checkpoint {
  ModelSpec spec;
  NormStats norm;
  ParamSet params;
  CheckpointMeta meta;
};

/// Layout: "BUDBRKPT", u32 version, u64 manifest length, JSON manifest,
/// little-endian f64 arrays in manifest order, u32 CRC-32 of all prior bytes.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes,
                                  const std::optional<ModelSpec>& expected = std::nullopt);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<ModelSpec>& expected = std::nullopt);

}  // namespace budbreak
