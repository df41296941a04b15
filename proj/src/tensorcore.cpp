// SPDX-License-Identifier: Apache-2.0
#include "budbreak/tensorcore.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "budbreak/error.hpp"

namespace budbreak {

std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return fmt::format("{}x{}", rows, cols);
}

Vector affine_forward(const Tensor2& weight, const Vector& bias, const Vector& x) {
  if (weight.cols() != x.size() || weight.rows() != bias.size()) {
    throw ShapeError(fmt::format("affine: weight {} bias {} input {}",
                                 shape_string(weight.rows(), weight.cols()),
                                 shape_string(bias.size(), 1), shape_string(x.size(), 1)));
  }
  return weight * x + bias;
}

namespace {

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Eigen vectorizes exp but not tanh for doubles.
template <typename Derived>
auto sigmoid_array(const Eigen::ArrayBase<Derived>& x) {
  return ((-x).exp() + 1.0).inverse();
}

template <typename Derived>
auto tanh_array(const Eigen::ArrayBase<Derived>& x) {
  return 2.0 * ((-2.0 * x).exp() + 1.0).inverse() - 1.0;
}

}  // namespace

void activation_inplace(Activation kind, Eigen::Ref<Matrix> values) {
  switch (kind) {
    case Activation::relu:
      values = values.cwiseMax(0.0);
      break;
    case Activation::sigmoid:
      values = sigmoid_array(values.array()).matrix();
      break;
    case Activation::tanh:
      values = tanh_array(values.array()).matrix();
      break;
  }
}

Vector activation_forward(Activation kind, const Vector& x) {
  Matrix m = x;
  activation_inplace(kind, m);
  return m.col(0);
}

Matrix activation_backward(Activation kind, const Matrix& output, const Matrix& grad_out) {
  if (output.rows() != grad_out.rows() || output.cols() != grad_out.cols()) {
    throw ShapeError(fmt::format("activation backward: output {} grad {}",
                                 shape_string(output.rows(), output.cols()),
                                 shape_string(grad_out.rows(), grad_out.cols())));
  }
  switch (kind) {
    case Activation::relu:
      return (output.array() > 0.0).select(grad_out, 0.0);
    case Activation::sigmoid:
      return (grad_out.array() * output.array() * (1.0 - output.array())).matrix();
    case Activation::tanh:
      return (grad_out.array() * (1.0 - output.array().square())).matrix();
  }
  return grad_out;
}

Tensor2 glorot_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Tensor2 w(rows, cols);
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    w.data()[i] = rng.uniform(-limit, limit);
  }
  return w;
}

// ---------------------------------------------------------------------------

GruParams GruParams::zeros(Eigen::Index input_dim, Eigen::Index hidden_dim) {
  return {Tensor2::Zero(3 * hidden_dim, input_dim), Tensor2::Zero(3 * hidden_dim, hidden_dim),
          Tensor2::Zero(3 * hidden_dim, 1), Tensor2::Zero(hidden_dim, 1)};
}

void gru_step_forward(const GruParams& params, const Eigen::Ref<const Matrix>& gate_input,
                      const Eigen::Ref<const Matrix>& h_prev, GruStepBuffers out) {
  const Eigen::Index hd = params.hidden_dim();
  if (gate_input.rows() != 3 * hd || h_prev.rows() != hd || gate_input.cols() != h_prev.cols()) {
    throw ShapeError(fmt::format("gru step: gate input {} hidden {} (hidden_dim {})",
                                 shape_string(gate_input.rows(), gate_input.cols()),
                                 shape_string(h_prev.rows(), h_prev.cols()), hd));
  }
  const Matrix gate_hidden = params.w_hidden * h_prev;

  out.z = sigmoid_array(gate_input.topRows(hd).array() + gate_hidden.topRows(hd).array()).matrix();
  out.r = sigmoid_array(gate_input.middleRows(hd, hd).array() +
                        gate_hidden.middleRows(hd, hd).array())
              .matrix();
  out.hidden_n = gate_hidden.bottomRows(hd).colwise() + params.b_hidden_n.col(0);
  out.n = tanh_array(gate_input.bottomRows(hd).array() + out.r.array() * out.hidden_n.array()).matrix();
  out.h_next = (out.n.array() + out.z.array() * (h_prev.array() - out.n.array())).matrix();
}

Matrix gru_step_backward(const GruParams& params, const Eigen::Ref<const Matrix>& h_prev,
                         const Eigen::Ref<const Matrix>& z, const Eigen::Ref<const Matrix>& r,
                         const Eigen::Ref<const Matrix>& n,
                         const Eigen::Ref<const Matrix>& hidden_n,
                         const Eigen::Ref<const Matrix>& grad_h_next,
                         Eigen::Ref<Matrix> grad_gate_input, Eigen::Ref<Matrix> grad_gate_hidden) {
  const Eigen::Index hd = params.hidden_dim();
  if (grad_h_next.rows() != hd || grad_h_next.cols() != h_prev.cols() ||
      grad_gate_input.rows() != 3 * hd || grad_gate_hidden.rows() != 3 * hd ||
      grad_gate_input.cols() != h_prev.cols() || grad_gate_hidden.cols() != h_prev.cols()) {
    throw ShapeError(fmt::format("gru step backward: grad {} for hidden {}",
                                 shape_string(grad_h_next.rows(), grad_h_next.cols()),
                                 shape_string(h_prev.rows(), h_prev.cols())));
  }
  const auto dh = grad_h_next.array();
  const auto dn_pre = (dh * (1.0 - z.array()) * (1.0 - n.array().square())).eval();
  const auto dz_pre = (dh * (h_prev.array() - n.array()) * z.array() * (1.0 - z.array())).eval();
  const auto dr_pre = (dn_pre * hidden_n.array() * r.array() * (1.0 - r.array())).eval();

  grad_gate_input.topRows(hd) = dz_pre.matrix();
  grad_gate_input.middleRows(hd, hd) = dr_pre.matrix();
  grad_gate_input.bottomRows(hd) = dn_pre.matrix();
  grad_gate_hidden.topRows(hd) = dz_pre.matrix();
  grad_gate_hidden.middleRows(hd, hd) = dr_pre.matrix();
  grad_gate_hidden.bottomRows(hd) = (dn_pre * r.array()).matrix();

  Matrix grad_h_prev = (dh * z.array()).matrix();
  grad_h_prev.noalias() += params.w_hidden.transpose() * grad_gate_hidden;
  return grad_h_prev;
}

GruCellOutput gru_cell_forward(const GruParams& params, const Vector& x, const GruState& h) {
  const Eigen::Index hd = params.hidden_dim();
  if (x.size() != params.input_dim() || h.hidden.size() != hd) {
    throw ShapeError(fmt::format("gru cell: input {} hidden {} expected input {} hidden {}",
                                 x.size(), h.hidden.size(), params.input_dim(), hd));
  }
  GruCellOutput out;
  out.cache.x = x;
  out.cache.h_prev = h.hidden;
  out.cache.z.resize(hd);
  out.cache.r.resize(hd);
  out.cache.n.resize(hd);
  out.cache.hidden_n.resize(hd);
  out.next.hidden.resize(hd);
  const Matrix gate_input = params.w_input * x + params.b_input;
  gru_step_forward(params, gate_input, h.hidden,
                   {out.cache.z, out.cache.r, out.cache.n, out.cache.hidden_n, out.next.hidden});
  return out;
}

GruCellGrads gru_cell_backward(const GruParams& params, const GruCellCache& cache,
                               const Vector& grad_h_next, GruParams& grad_params) {
  const Eigen::Index hd = params.hidden_dim();
  if (cache.h_prev.size() != hd || cache.x.size() != params.input_dim() ||
      grad_h_next.size() != hd) {
    throw ShapeError("gru cell backward: cache does not match parameters");
  }
  if (grad_params.w_input.rows() != params.w_input.rows() ||
      grad_params.w_input.cols() != params.w_input.cols() ||
      grad_params.w_hidden.rows() != params.w_hidden.rows()) {
    throw ShapeError("gru cell backward: gradient accumulator shape mismatch");
  }
  Vector grad_gate_input(3 * hd);
  Vector grad_gate_hidden(3 * hd);
  GruCellGrads out;
  out.grad_h = gru_step_backward(params, cache.h_prev, cache.z, cache.r, cache.n, cache.hidden_n,
                                 grad_h_next, grad_gate_input, grad_gate_hidden);
  grad_params.w_input.noalias() += grad_gate_input * cache.x.transpose();
  grad_params.b_input += grad_gate_input;
  grad_params.w_hidden.noalias() += grad_gate_hidden * cache.h_prev.transpose();
  grad_params.b_hidden_n += grad_gate_hidden.tail(hd);
  out.grad_x = params.w_input.transpose() * grad_gate_input;
  return out;
}

// ---------------------------------------------------------------------------

BceResult bce_loss(const Vector& p, const Vector& y, const Vector& mask) {
  if (p.size() != y.size() || p.size() != mask.size()) {
    throw ShapeError(fmt::format("bce: probs {} labels {} mask {}", p.size(), y.size(),
                                 mask.size()));
  }
  const double labeled = mask.sum();
  if (!(labeled > 0.0)) {
    throw DataError("bce: no labeled steps");
  }
  BceResult out;
  out.grad_p = Vector::Zero(p.size());
  double total = 0.0;
  for (Eigen::Index t = 0; t < p.size(); ++t) {
    if (mask[t] == 0.0) continue;
    const double pc = std::clamp(p[t], kProbClamp, 1.0 - kProbClamp);
    total -= mask[t] * (y[t] * std::log(pc) + (1.0 - y[t]) * std::log(1.0 - pc));
    out.grad_p[t] = -mask[t] * (y[t] / pc - (1.0 - y[t]) / (1.0 - pc)) / labeled;
  }
  out.loss = total / labeled;
  return out;
}

// ---------------------------------------------------------------------------

void adam_step(AdamState& state, std::span<Tensor2* const> params,
               std::span<const Tensor2* const> grads) {
  if (params.size() != grads.size()) {
    throw ShapeError(fmt::format("adam: {} parameter tensors but {} gradients", params.size(),
                                 grads.size()));
  }
  if (state.first_moment.empty() && state.step_count == 0) {
    for (const Tensor2* p : params) {
      state.first_moment.push_back(Tensor2::Zero(p->rows(), p->cols()));
      state.second_moment.push_back(Tensor2::Zero(p->rows(), p->cols()));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError(fmt::format("adam: state tracks {} tensors, got {}",
                                 state.first_moment.size(), params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor2& m = state.first_moment[i];
    if (params[i]->rows() != m.rows() || params[i]->cols() != m.cols() ||
        grads[i]->rows() != m.rows() || grads[i]->cols() != m.cols()) {
      throw ShapeError(fmt::format("adam: tensor {} param {} grad {} state {}", i,
                                   shape_string(params[i]->rows(), params[i]->cols()),
                                   shape_string(grads[i]->rows(), grads[i]->cols()),
                                   shape_string(m.rows(), m.cols())));
    }
  }

  ++state.step_count;
  const AdamConfig& c = state.config;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto m = state.first_moment[i].array();
    auto v = state.second_moment[i].array();
    const auto g = grads[i]->array();
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.square();
    params[i]->array() -= c.lr * (m / correction1) / ((v / correction2).sqrt() + c.epsilon);
  }
}

// ---------------------------------------------------------------------------

std::vector<std::string> GradCheckReport::failing_groups() const {
  std::vector<std::string> names;
  for (const auto& g : groups) {
    if (!(g.max_rel_error < tolerance)) names.push_back(g.name);
  }
  return names;
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport finite_diff_check(const std::function<double()>& loss_fn,
                                  std::span<const ParamGroup> groups, double step,
                                  double tolerance) {
  if (!(step > 0.0)) throw Error("finite_diff_check: step must be positive");
  GradCheckReport report;
  report.step = step;
  report.tolerance = tolerance;
  for (const ParamGroup& group : groups) {
    if (group.values.size() != group.analytic.size()) {
      throw ShapeError(fmt::format("finite_diff_check: group {} has {} values, {} gradients",
                                   group.name, group.values.size(), group.analytic.size()));
    }
    GroupCheck check;
    check.name = group.name;
    check.count = group.values.size();
    for (std::size_t i = 0; i < group.values.size(); ++i) {
      const double saved = group.values[i];
      group.values[i] = saved + step;
      const double plus = loss_fn();
      group.values[i] = saved - step;
      const double minus = loss_fn();
      group.values[i] = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw Error(fmt::format("finite_diff_check: non-finite loss probing {}[{}] ({} / {})",
                                group.name, i, plus, minus));
      }
      const double numeric = (plus - minus) / (2.0 * step);
      const double err = relative_error(group.analytic[i], numeric);
      if (err > check.max_rel_error || i == 0) {
        check.max_rel_error = err;
        check.worst_index = i;
        check.worst_analytic = group.analytic[i];
        check.worst_numeric = numeric;
      }
    }
    if (check.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = check.max_rel_error;
      report.worst_group = check.name;
    }
    report.passed = report.passed && check.max_rel_error < tolerance;
    report.groups.push_back(std::move(check));
  }
  return report;
}

}  // namespace budbreak
