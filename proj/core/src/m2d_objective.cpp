#include "m2dclap/m2d_objective.hpp"

#include <cmath>

namespace m2dclap::m2d {

TargetNorm parse_target_norm(const std::string& s) {
  if (s == "token") return TargetNorm::PerToken;
  if (s == "batch_feature") return TargetNorm::PerBatchFeature;
  throw Error("unknown target normalization '" + s + "' (token | batch_feature)");
}

const char* to_string(TargetNorm n) { return n == TargetNorm::PerToken ? "token" : "batch_feature"; }

Matrix standardize_target(const Matrix& z, TargetNorm norm, double eps) {
  if (norm == TargetNorm::PerToken) return layers::standardize_rows(z, eps);
  Matrix t = z.transpose();
  return layers::standardize_rows(t, eps).transpose();
}

TargetOutput target_forward(const ParamStore& target, const ModelConfig& cfg, const Matrix& masked_tokens,
                            const Matrix& masked_pe_rows, TargetNorm norm, double eps) {
  if (masked_tokens.rows() == 0) throw Error("target_forward: empty masked set");
  TargetOutput out;
  out.raw = encode(target, cfg.encoder, masked_tokens, masked_pe_rows, cfg.ln_eps);
  out.standardized = standardize_target(out.raw, norm, eps);
  return out;
}

LossResult m2d_loss(const Matrix& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw ShapeError("m2d_loss: prediction and target shapes differ");
  }
  if (pred.rows() == 0) throw Error("m2d_loss: no masked rows");
  const auto rows = static_cast<double>(pred.rows());
  LossResult r;
  r.grad.resize(pred.rows(), pred.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    const double np = pred.row(i).norm();
    const double nt = target.row(i).norm();
    if (!(np > 0.0) || !(nt > 0.0)) {
      throw Error("m2d_loss: zero-norm row " + std::to_string(i) + " (collapsed embedding)");
    }
    const double c = pred.row(i).dot(target.row(i)) / (np * nt);
    total += 2.0 - 2.0 * c;
    r.grad.row(i) = (-2.0 / rows) * (target.row(i) / (np * nt) - c * pred.row(i) / (np * np));
  }
  r.value = total / rows;
  return r;
}

double EmaSchedule::at(long step) const {
  if (ramp_steps <= 0 || step >= ramp_steps) return ramp_steps <= 0 ? start : end;
  const double f = static_cast<double>(step) / static_cast<double>(ramp_steps);
  return start + (end - start) * f;
}

void ema_update(const ParamStore& online, ParamStore& target, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("ema_update: alpha must be in [0, 1]");
  for (auto& e : target.entries()) {
    if (!online.contains(e.name)) throw ShapeError("ema_update: online store lacks " + e.name);
    const Matrix& theta = online.at(e.name);
    if (theta.rows() != e.value.rows() || theta.cols() != e.value.cols()) {
      throw ShapeError("ema_update: shape mismatch for " + e.name);
    }
  }
  for (auto& e : target.entries()) {
    e.value = alpha * e.value + (1.0 - alpha) * online.at(e.name);
  }
}

}  // namespace m2dclap::m2d
