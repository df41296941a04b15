// SPDX-License-Identifier: Apache-2.0
//
// Dense numerics for the budbreak models: fully connected layers, activations,
// the GRU recurrence with its hand-written backward pass, masked binary cross
// entropy, Adam, and a central-difference gradient checker.
//
// Activations are stored column-major with one column per time step (or per
// batch element); weights are row-major Tensor2 values.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "budbreak/rng.hpp"

namespace budbreak {

using Tensor2 = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

std::string shape_string(Eigen::Index rows, Eigen::Index cols);

/// Returns W·x + b.
Vector affine_forward(const Tensor2& weight, const Vector& bias, const Vector& x);

enum class Activation { relu, sigmoid, tanh };

Vector activation_forward(Activation kind, const Vector& x);
void activation_inplace(Activation kind, Eigen::Ref<Matrix> values);

/// Multiplies grad_out by the activation derivative, expressed through the
/// activation output (relu: out > 0, sigmoid: out(1-out), tanh: 1-out^2).
Matrix activation_backward(Activation kind, const Matrix& output, const Matrix& grad_out);

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
Tensor2 glorot_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng);

// ---------------------------------------------------------------------------
// GRU
//
//   z  = σ(W_z x + U_z h + b_z)
//   r  = σ(W_r x + U_r h + b_r)
//   n  = tanh(W_n x + b_in + r ∘ (U_n h + b_hn))
//   h' = (1 - z) ∘ n + z ∘ h
//
// Gate blocks are stacked [z; r; n] in w_input (3H × I), w_hidden (3H × H) and
// b_input (3H × 1). b_hidden_n is the H × 1 bias inside the reset product.

struct GruParams {
  Tensor2 w_input;
  Tensor2 w_hidden;
  Tensor2 b_input;
  Tensor2 b_hidden_n;

  static GruParams zeros(Eigen::Index input_dim, Eigen::Index hidden_dim);

  Eigen::Index input_dim() const { return w_input.cols(); }
  Eigen::Index hidden_dim() const { return w_hidden.cols(); }
};

struct GruState {
  Vector hidden;

  static GruState zeros(Eigen::Index hidden_dim) { return {Vector::Zero(hidden_dim)}; }
};

/// Column blocks written by one recurrent step. `hidden_n` holds U_n h + b_hn.
struct GruStepBuffers {
  Eigen::Ref<Matrix> z;
  Eigen::Ref<Matrix> r;
  Eigen::Ref<Matrix> n;
  Eigen::Ref<Matrix> hidden_n;
  Eigen::Ref<Matrix> h_next;
};

/// One recurrent step over a block of columns. `gate_input` is the
/// precomputed W x + b_input for those columns (3H × B).
void gru_step_forward(const GruParams& params, const Eigen::Ref<const Matrix>& gate_input,
                      const Eigen::Ref<const Matrix>& h_prev, GruStepBuffers out);

/// Backward of gru_step_forward. Writes the gradient w.r.t. the input gate
/// pre-activations (`grad_gate_input`, 3H × B) and w.r.t. U h + [0; 0; b_hn]
/// (`grad_gate_hidden`), and returns the gradient w.r.t. h_prev.
Matrix gru_step_backward(const GruParams& params, const Eigen::Ref<const Matrix>& h_prev,
                         const Eigen::Ref<const Matrix>& z, const Eigen::Ref<const Matrix>& r,
                         const Eigen::Ref<const Matrix>& n,
                         const Eigen::Ref<const Matrix>& hidden_n,
                         const Eigen::Ref<const Matrix>& grad_h_next,
                         Eigen::Ref<Matrix> grad_gate_input, Eigen::Ref<Matrix> grad_gate_hidden);

struct GruCellCache {
  Vector x;
  Vector h_prev;
  Vector z;
  Vector r;
  Vector n;
  Vector hidden_n;
};

struct GruCellOutput {
  GruState next;
  GruCellCache cache;
};

GruCellOutput gru_cell_forward(const GruParams& params, const Vector& x, const GruState& h);

struct GruCellGrads {
  Vector grad_x;
  Vector grad_h;
};

/// Adds this step's parameter gradients into `grad_params` so repeated calls
/// over a sequence accumulate BPTT gradients.
GruCellGrads gru_cell_backward(const GruParams& params, const GruCellCache& cache,
                               const Vector& grad_h_next, GruParams& grad_params);

// ---------------------------------------------------------------------------
// Loss

inline constexpr double kProbClamp = 1e-7;

struct BceResult {
  double loss = 0.0;
  Vector grad_p;
};

/// Mean over masked steps of -[y ln p + (1-y) ln(1-p)], with p clamped to
/// [1e-7, 1 - 1e-7]. The gradient is evaluated at the clamped probability.
BceResult bce_loss(const Vector& p, const Vector& y, const Vector& mask);

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<Tensor2> first_moment;
  std::vector<Tensor2> second_moment;
  std::int64_t step_count = 0;
};

/// Bias-corrected Adam update applied in place. Moments are allocated on the
/// first call and shape-checked on every later one.
void adam_step(AdamState& state, std::span<Tensor2* const> params,
               std::span<const Tensor2* const> grads);

// ---------------------------------------------------------------------------
// Finite differences

struct ParamGroup {
  std::string name;
  std::span<double> values;
  std::span<const double> analytic;
};

struct GroupCheck {
  std::string name;
  std::size_t count = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckReport {
  double step = 0.0;
  double tolerance = 0.0;
  std::vector<GroupCheck> groups;
  double max_rel_error = 0.0;
  std::string worst_group;
  bool passed = true;

  std::vector<std::string> failing_groups() const;
};

/// |a - n| / max(|a|, |n|, kGradCheckFloor).
inline constexpr double kGradCheckFloor = 1e-6;
double relative_error(double analytic, double numeric);

/// Central differences (f(w+h) - f(w-h)) / 2h for every entry of every group,
/// compared with the analytic gradient. `loss_fn` must read the values the
/// groups point at; each entry is restored after probing.
GradCheckReport finite_diff_check(const std::function<double()>& loss_fn,
                                  std::span<const ParamGroup> groups, double step,
                                  double tolerance);

}  // namespace budbreak
