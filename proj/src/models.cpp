// SPDX-License-Identifier: Apache-2.0
#include "budbreak/models.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>

#include <fmt/format.h>

#include "budbreak/error.hpp"
#include "budbreak/rng.hpp"

namespace budbreak {

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::STL: return "STL";
    case Variant::MultiH: return "MultiH";
    case Variant::AddE: return "AddE";
    case Variant::ConcatE: return "ConcatE";
    case Variant::MultE: return "MultE";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : kAllVariants) {
    if (variant_name(v) == name) return v;
  }
  throw DataError(fmt::format("unknown variant '{}' (expected STL, MultiH, AddE, ConcatE, MultE)",
                              name));
}

bool is_multitask(Variant v) { return v != Variant::STL; }

bool uses_embedding(Variant v) {
  return v == Variant::AddE || v == Variant::ConcatE || v == Variant::MultE;
}

std::string_view embed_at_name(EmbedAt e) {
  return e == EmbedAt::gru_input ? "gru_input" : "raw_input";
}

EmbedAt parse_embed_at(std::string_view name) {
  if (name == "gru_input") return EmbedAt::gru_input;
  if (name == "raw_input") return EmbedAt::raw_input;
  throw DataError(fmt::format("unknown embedding position '{}' (expected gru_input, raw_input)",
                              name));
}

ModelSpec ModelSpec::make(Variant variant, int input_dim, std::array<int, 3> fc_dims,
                          int gru_hidden, int num_cultivars, int concat_dim, EmbedAt embed_at) {
  ModelSpec spec;
  spec.variant = variant;
  spec.input_dim = input_dim;
  spec.fc_dims = fc_dims;
  spec.gru_hidden = gru_hidden;
  spec.num_cultivars = variant == Variant::STL ? 1 : num_cultivars;
  spec.embed_at = embed_at;
  const int combined = embed_at == EmbedAt::gru_input ? fc_dims[1] : input_dim;
  switch (variant) {
    case Variant::AddE:
    case Variant::MultE: spec.embedding_dim = combined; break;
    case Variant::ConcatE: spec.embedding_dim = concat_dim; break;
    default: spec.embedding_dim = 0; break;
  }
  spec.validate();
  return spec;
}

void ModelSpec::validate() const {
  if (input_dim < 1 || gru_hidden < 1 || num_cultivars < 1 ||
      std::any_of(fc_dims.begin(), fc_dims.end(), [](int d) { return d < 1; })) {
    throw ShapeError(fmt::format("invalid model dims: {}", describe(*this)));
  }
  if (variant == Variant::STL && num_cultivars != 1) {
    throw ShapeError("STL model must have exactly one cultivar");
  }
  const int combined = embed_at == EmbedAt::gru_input ? fc_dims[1] : input_dim;
  if (uses_embedding(variant)) {
    if (embedding_dim < 1) throw ShapeError("embedding variant needs embedding_dim >= 1");
    if (variant != Variant::ConcatE && embedding_dim != combined) {
      throw ShapeError(fmt::format("{} needs embedding_dim == {} (got {})", variant_name(variant),
                                   combined, embedding_dim));
    }
  } else if (embedding_dim != 0) {
    throw ShapeError(fmt::format("{} takes no embedding", variant_name(variant)));
  }
}

int ModelSpec::fc1_input_dim() const {
  if (variant == Variant::ConcatE && embed_at == EmbedAt::raw_input) {
    return input_dim + embedding_dim;
  }
  return input_dim;
}

int ModelSpec::gru_input_dim() const {
  if (variant == Variant::ConcatE && embed_at == EmbedAt::gru_input) {
    return fc_dims[1] + embedding_dim;
  }
  return fc_dims[1];
}

int ModelSpec::num_heads() const { return variant == Variant::MultiH ? num_cultivars : 1; }

std::string describe(const ModelSpec& spec) {
  return fmt::format("{} F={} fc=[{},{},{}] gru={} C={} E={} embed_at={}",
                     variant_name(spec.variant), spec.input_dim, spec.fc_dims[0], spec.fc_dims[1],
                     spec.fc_dims[2], spec.gru_hidden, spec.num_cultivars, spec.embedding_dim,
                     embed_at_name(spec.embed_at));
}

// ---------------------------------------------------------------------------

std::vector<ParamSet::Entry> ParamSet::entries() {
  std::vector<Entry> out = {
      {"fc1.weight", &fc1_weight},     {"fc1.bias", &fc1_bias},
      {"fc2.weight", &fc2_weight},     {"fc2.bias", &fc2_bias},
      {"gru.w_input", &gru.w_input},   {"gru.w_hidden", &gru.w_hidden},
      {"gru.b_input", &gru.b_input},   {"gru.b_hidden_n", &gru.b_hidden_n},
      {"fc3.weight", &fc3_weight},     {"fc3.bias", &fc3_bias},
      {"head.weight", &head_weight},   {"head.bias", &head_bias},
  };
  if (embedding.size() > 0) out.push_back({"embedding", &embedding});
  return out;
}

std::vector<ParamSet::ConstEntry> ParamSet::entries() const {
  std::vector<ConstEntry> out;
  for (const auto& e : const_cast<ParamSet*>(this)->entries()) out.push_back({e.name, e.tensor});
  return out;
}

ParamSet ParamSet::zeros(const ModelSpec& spec) {
  spec.validate();
  const auto [d1, d2, d3] = spec.fc_dims;
  ParamSet p;
  p.fc1_weight = Tensor2::Zero(d1, spec.fc1_input_dim());
  p.fc1_bias = Tensor2::Zero(d1, 1);
  p.fc2_weight = Tensor2::Zero(d2, d1);
  p.fc2_bias = Tensor2::Zero(d2, 1);
  p.gru = GruParams::zeros(spec.gru_input_dim(), spec.gru_hidden);
  p.fc3_weight = Tensor2::Zero(d3, spec.gru_hidden);
  p.fc3_bias = Tensor2::Zero(d3, 1);
  p.head_weight = Tensor2::Zero(spec.num_heads(), d3);
  p.head_bias = Tensor2::Zero(spec.num_heads(), 1);
  if (uses_embedding(spec.variant)) {
    p.embedding = Tensor2::Zero(spec.num_cultivars, spec.embedding_dim);
  }
  return p;
}

void ParamSet::set_zero() {
  for (auto& e : entries()) e.tensor->setZero();
}

ParamSet& ParamSet::operator+=(const ParamSet& other) {
  auto mine = entries();
  const auto theirs = other.entries();
  if (mine.size() != theirs.size()) throw ShapeError("ParamSet +=: layouts differ");
  for (std::size_t i = 0; i < mine.size(); ++i) *mine[i].tensor += *theirs[i].tensor;
  return *this;
}

ParamSet& ParamSet::operator*=(double scale) {
  for (auto& e : entries()) *e.tensor *= scale;
  return *this;
}

bool ParamSet::all_finite() const {
  for (const auto& e : entries()) {
    if (!e.tensor->allFinite()) return false;
  }
  return true;
}

bool ParamSet::operator==(const ParamSet& other) const {
  const auto a = entries();
  const auto b = other.entries();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Tensor2& x = *a[i].tensor;
    const Tensor2& y = *b[i].tensor;
    if (x.rows() != y.rows() || x.cols() != y.cols()) return false;
    if (std::memcmp(x.data(), y.data(), sizeof(double) * static_cast<std::size_t>(x.size())) != 0) {
      return false;
    }
  }
  return true;
}

ParamSet init_params(const ModelSpec& spec, std::uint64_t seed) {
  ParamSet p = ParamSet::zeros(spec);
  Rng rng({seed, 0x1a17ULL});
  p.fc1_weight = glorot_uniform(p.fc1_weight.rows(), p.fc1_weight.cols(), rng);
  p.fc2_weight = glorot_uniform(p.fc2_weight.rows(), p.fc2_weight.cols(), rng);
  p.gru.w_input = glorot_uniform(p.gru.w_input.rows(), p.gru.w_input.cols(), rng);
  p.gru.w_hidden = glorot_uniform(p.gru.w_hidden.rows(), p.gru.w_hidden.cols(), rng);
  p.fc3_weight = glorot_uniform(p.fc3_weight.rows(), p.fc3_weight.cols(), rng);
  p.head_weight = glorot_uniform(p.head_weight.rows(), p.head_weight.cols(), rng);
  if (uses_embedding(spec.variant)) {
    const double center = spec.variant == Variant::MultE ? 1.0 : 0.0;
    for (Eigen::Index i = 0; i < p.embedding.size(); ++i) {
      p.embedding.data()[i] = center + rng.uniform(-0.1, 0.1);
    }
  }
  return p;
}

// ---------------------------------------------------------------------------

namespace {

Matrix gather_embedding(const Tensor2& table, const std::vector<int>& column_cultivar) {
  Matrix out(table.cols(), static_cast<Eigen::Index>(column_cultivar.size()));
  for (std::size_t j = 0; j < column_cultivar.size(); ++j) {
    out.col(static_cast<Eigen::Index>(j)) = table.row(column_cultivar[j]).transpose();
  }
  return out;
}

Matrix combine(Variant variant, const Matrix& base, const Matrix& emb) {
  switch (variant) {
    case Variant::AddE: return base + emb;
    case Variant::MultE: return base.cwiseProduct(emb);
    case Variant::ConcatE: {
      Matrix out(base.rows() + emb.rows(), base.cols());
      out.topRows(base.rows()) = base;
      out.bottomRows(emb.rows()) = emb;
      return out;
    }
    default: return base;
  }
}

// Splits the gradient of combine() into (d base, d embedding columns).
std::pair<Matrix, Matrix> combine_backward(Variant variant, const Matrix& base, const Matrix& emb,
                                           const Matrix& grad) {
  switch (variant) {
    case Variant::AddE: return {grad, grad};
    case Variant::MultE: return {grad.cwiseProduct(emb), grad.cwiseProduct(base)};
    case Variant::ConcatE:
      return {grad.topRows(base.rows()), grad.bottomRows(emb.rows())};
    default: return {grad, Matrix()};
  }
}

void scatter_embedding(const Matrix& grad_cols, const std::vector<int>& column_cultivar,
                       Tensor2& grad_table) {
  for (std::size_t j = 0; j < column_cultivar.size(); ++j) {
    grad_table.row(column_cultivar[j]) += grad_cols.col(static_cast<Eigen::Index>(j)).transpose();
  }
}

inline int head_of(const ModelSpec& spec, int cultivar) {
  return spec.variant == Variant::MultiH ? cultivar : 0;
}

}  // namespace

Eigen::Index ForwardCache::column(std::size_t input_index, int step) const {
  const auto rank = static_cast<Eigen::Index>(
      std::find(order.begin(), order.end(), input_index) - order.begin());
  return offsets[step] + rank;
}

BatchOutput forward_batch(const ParamSet& params, const ModelSpec& spec,
                          std::span<const SequenceRef> sequences) {
  spec.validate();
  if (sequences.empty()) throw ShapeError("forward: empty batch");
  BatchOutput out;
  ForwardCache& c = out.cache;
  c.spec = spec;
  const std::size_t count = sequences.size();
  c.lengths.resize(count);
  for (std::size_t s = 0; s < count; ++s) {
    const SequenceRef& seq = sequences[s];
    if (seq.features == nullptr || seq.features->rows() != spec.input_dim ||
        seq.features->cols() < 1) {
      throw ShapeError(fmt::format("forward: sequence {} has shape {}, model expects {} features",
                                   s,
                                   seq.features ? shape_string(seq.features->rows(),
                                                               seq.features->cols())
                                                : "null",
                                   spec.input_dim));
    }
    if (seq.cultivar < 0 || seq.cultivar >= spec.num_cultivars) {
      throw DataError(fmt::format("forward: unknown cultivar id {} (model has {})", seq.cultivar,
                                  spec.num_cultivars));
    }
    c.lengths[s] = static_cast<int>(seq.features->cols());
  }
  c.order.resize(count);
  std::iota(c.order.begin(), c.order.end(), std::size_t{0});
  std::stable_sort(c.order.begin(), c.order.end(),
                   [&](std::size_t a, std::size_t b) { return c.lengths[a] > c.lengths[b]; });
  const int steps = c.lengths[c.order.front()];
  c.offsets.assign(steps + 1, 0);
  c.active.assign(steps, 0);
  for (int t = 0; t < steps; ++t) {
    Eigen::Index b = 0;
    while (b < static_cast<Eigen::Index>(count) && c.lengths[c.order[b]] > t) ++b;
    c.active[t] = b;
    c.offsets[t + 1] = c.offsets[t] + b;
  }
  const Eigen::Index cols = c.offsets[steps];

  Matrix raw(spec.input_dim, cols);
  c.column_cultivar.resize(cols);
  for (int t = 0; t < steps; ++t) {
    for (Eigen::Index r = 0; r < c.active[t]; ++r) {
      const SequenceRef& seq = sequences[c.order[r]];
      raw.col(c.offsets[t] + r) = seq.features->col(t);
      c.column_cultivar[c.offsets[t] + r] = seq.cultivar;
    }
  }
  const bool embed = uses_embedding(spec.variant);
  Matrix emb;
  if (embed) emb = gather_embedding(params.embedding, c.column_cultivar);

  if (embed && spec.embed_at == EmbedAt::raw_input) {
    c.input = combine(spec.variant, raw, emb);
    c.raw_input = std::move(raw);
  } else {
    c.input = std::move(raw);
  }
  c.fc1_out = (params.fc1_weight * c.input).colwise() + params.fc1_bias.col(0);
  activation_inplace(Activation::relu, c.fc1_out);
  c.fc2_out = (params.fc2_weight * c.fc1_out).colwise() + params.fc2_bias.col(0);
  activation_inplace(Activation::relu, c.fc2_out);
  c.gru_input = (embed && spec.embed_at == EmbedAt::gru_input)
                    ? combine(spec.variant, c.fc2_out, emb)
                    : c.fc2_out;

  const Eigen::Index hd = spec.gru_hidden;
  const Matrix gate_input = (params.gru.w_input * c.gru_input).colwise() + params.gru.b_input.col(0);
  c.h_prev.resize(hd, cols);
  c.gate_z.resize(hd, cols);
  c.gate_r.resize(hd, cols);
  c.gate_n.resize(hd, cols);
  c.hidden_n.resize(hd, cols);
  c.hidden.resize(hd, cols);
  for (int t = 0; t < steps; ++t) {
    const Eigen::Index o = c.offsets[t];
    const Eigen::Index b = c.active[t];
    if (t == 0) {
      c.h_prev.middleCols(o, b).setZero();
    } else {
      c.h_prev.middleCols(o, b) = c.hidden.middleCols(c.offsets[t - 1], b);
    }
    gru_step_forward(params.gru, gate_input.middleCols(o, b), c.h_prev.middleCols(o, b),
                     {c.gate_z.middleCols(o, b), c.gate_r.middleCols(o, b),
                      c.gate_n.middleCols(o, b), c.hidden_n.middleCols(o, b),
                      c.hidden.middleCols(o, b)});
  }

  c.fc3_out = (params.fc3_weight * c.hidden).colwise() + params.fc3_bias.col(0);
  activation_inplace(Activation::relu, c.fc3_out);
  const Matrix head_logits = params.head_weight * c.fc3_out;
  c.probs.resize(cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    const int k = head_of(spec, c.column_cultivar[j]);
    c.probs[j] = 1.0 / (1.0 + std::exp(-(head_logits(k, j) + params.head_bias(k, 0))));
  }

  out.probs.resize(count);
  for (std::size_t r = 0; r < count; ++r) {
    const std::size_t s = c.order[r];
    Vector& p = out.probs[s];
    p.resize(c.lengths[s]);
    for (int t = 0; t < c.lengths[s]; ++t) p[t] = c.probs[c.offsets[t] + static_cast<Eigen::Index>(r)];
  }
  return out;
}

ParamSet backward_batch(const ParamSet& params, const ForwardCache& c,
                        std::span<const Vector> grad_probs) {
  const ModelSpec& spec = c.spec;
  const std::size_t count = c.order.size();
  if (grad_probs.size() != count) {
    throw ShapeError(fmt::format("backward: cache holds {} sequences, got {} gradients", count,
                                 grad_probs.size()));
  }
  for (std::size_t s = 0; s < count; ++s) {
    if (grad_probs[s].size() != c.lengths[s]) {
      throw ShapeError(fmt::format("backward: sequence {} has {} steps, gradient has {}", s,
                                   c.lengths[s], grad_probs[s].size()));
    }
  }
  const ParamSet layout = ParamSet::zeros(spec);
  if (layout.fc1_weight.cols() != params.fc1_weight.cols() ||
      layout.gru.w_input.cols() != params.gru.w_input.cols() ||
      layout.head_weight.rows() != params.head_weight.rows()) {
    throw ShapeError("backward: parameters do not match the cached model spec");
  }

  const Eigen::Index cols = c.columns();
  const int steps = static_cast<int>(c.active.size());
  const Eigen::Index hd = spec.gru_hidden;
  ParamSet g = layout;

  // Head: d(logit) = d(prob) * p(1-p), routed to the column's head row.
  Matrix grad_logits = Matrix::Zero(spec.num_heads(), cols);
  for (std::size_t r = 0; r < count; ++r) {
    const std::size_t s = c.order[r];
    for (int t = 0; t < c.lengths[s]; ++t) {
      const Eigen::Index j = c.offsets[t] + static_cast<Eigen::Index>(r);
      const double p = c.probs[j];
      grad_logits(head_of(spec, c.column_cultivar[j]), j) = grad_probs[s][t] * p * (1.0 - p);
    }
  }
  g.head_weight.noalias() = grad_logits * c.fc3_out.transpose();
  g.head_bias = grad_logits.rowwise().sum();

  const Matrix grad_fc3 =
      activation_backward(Activation::relu, c.fc3_out, params.head_weight.transpose() * grad_logits);
  g.fc3_weight.noalias() = grad_fc3 * c.hidden.transpose();
  g.fc3_bias = grad_fc3.rowwise().sum();
  const Matrix grad_hidden = params.fc3_weight.transpose() * grad_fc3;

  Matrix grad_gate_input(3 * hd, cols);
  Matrix grad_gate_hidden(3 * hd, cols);
  Matrix carry = Matrix::Zero(hd, c.active.front());
  for (int t = steps - 1; t >= 0; --t) {
    const Eigen::Index o = c.offsets[t];
    const Eigen::Index b = c.active[t];
    const Matrix grad_h = grad_hidden.middleCols(o, b) + carry.leftCols(b);
    Matrix grad_h_prev = gru_step_backward(
        params.gru, c.h_prev.middleCols(o, b), c.gate_z.middleCols(o, b),
        c.gate_r.middleCols(o, b), c.gate_n.middleCols(o, b), c.hidden_n.middleCols(o, b), grad_h,
        grad_gate_input.middleCols(o, b), grad_gate_hidden.middleCols(o, b));
    carry.setZero();
    carry.leftCols(b) = grad_h_prev;
  }
  g.gru.w_hidden.noalias() = grad_gate_hidden * c.h_prev.transpose();
  g.gru.b_hidden_n = grad_gate_hidden.bottomRows(hd).rowwise().sum();
  g.gru.w_input.noalias() = grad_gate_input * c.gru_input.transpose();
  g.gru.b_input = grad_gate_input.rowwise().sum();
  Matrix grad_gru_input = params.gru.w_input.transpose() * grad_gate_input;

  const bool embed = uses_embedding(spec.variant);
  Matrix emb;
  if (embed) emb = gather_embedding(params.embedding, c.column_cultivar);

  Matrix grad_fc2_out;
  if (embed && spec.embed_at == EmbedAt::gru_input) {
    auto [d_base, d_emb] = combine_backward(spec.variant, c.fc2_out, emb, grad_gru_input);
    scatter_embedding(d_emb, c.column_cultivar, g.embedding);
    grad_fc2_out = std::move(d_base);
  } else {
    grad_fc2_out = std::move(grad_gru_input);
  }
  const Matrix grad_fc2 = activation_backward(Activation::relu, c.fc2_out, grad_fc2_out);
  g.fc2_weight.noalias() = grad_fc2 * c.fc1_out.transpose();
  g.fc2_bias = grad_fc2.rowwise().sum();
  const Matrix grad_fc1 =
      activation_backward(Activation::relu, c.fc1_out, params.fc2_weight.transpose() * grad_fc2);
  g.fc1_weight.noalias() = grad_fc1 * c.input.transpose();
  g.fc1_bias = grad_fc1.rowwise().sum();

  if (embed && spec.embed_at == EmbedAt::raw_input) {
    const Matrix grad_input = params.fc1_weight.transpose() * grad_fc1;
    auto [d_base, d_emb] = combine_backward(spec.variant, c.raw_input, emb, grad_input);
    scatter_embedding(d_emb, c.column_cultivar, g.embedding);
  }
  return g;
}

Matrix backbone_forward(const ParamSet& params, const Matrix& features, int cultivar,
                        const ModelSpec& spec) {
  const SequenceRef seq{&features, cultivar};
  auto out = forward_batch(params, spec, std::span<const SequenceRef>(&seq, 1));
  return std::move(out.cache.fc3_out);
}

Vector predict_probs(const ParamSet& params, const Matrix& features, int cultivar,
                     const ModelSpec& spec) {
  const SequenceRef seq{&features, cultivar};
  auto out = forward_batch(params, spec, std::span<const SequenceRef>(&seq, 1));
  return std::move(out.probs.front());
}

ParamSet model_backward(const ParamSet& params, const ForwardCache& cache,
                        const Vector& grad_probs) {
  return backward_batch(params, cache, std::span<const Vector>(&grad_probs, 1));
}

}  // namespace budbreak
