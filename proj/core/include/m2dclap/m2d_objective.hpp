#pragma once

#include "m2dclap/model.hpp"

namespace m2dclap::m2d {

enum class TargetNorm {
  PerToken,         // each token standardized over its feature dims
  PerBatchFeature,  // each feature standardized over the masked tokens
};

TargetNorm parse_target_norm(const std::string& s);
const char* to_string(TargetNorm n);

struct TargetOutput {
  Matrix raw;           // z_m
  Matrix standardized;  // z~_m
};

inline constexpr double kTargetEps = 1e-6;

// Runs the target encoder over the masked patches only. Read-only on the
// target store; nothing downstream of this is differentiated.
TargetOutput target_forward(const ParamStore& target, const ModelConfig& cfg, const Matrix& masked_tokens,
                            const Matrix& masked_pe_rows, TargetNorm norm = TargetNorm::PerToken,
                            double eps = kTargetEps);

Matrix standardize_target(const Matrix& z, TargetNorm norm, double eps = kTargetEps);

struct LossResult {
  double value = 0.0;
  Matrix grad;  // dL/d(prediction); the target side is a constant
};

// Mean over rows of 2 - 2 cos(pred_row, target_row). Throws on a zero-norm row.
LossResult m2d_loss(const Matrix& pred, const Matrix& target);

// Decay-rate schedule: linear ramp from `start` to `end` over `ramp_steps`,
// constant afterwards.
struct EmaSchedule {
  double start = 0.99;
  double end = 0.99;
  long ramp_steps = 0;

  double at(long step) const;
};

// target <- alpha * target + (1 - alpha) * online, for every target tensor.
// Online may hold extra tensors (predictor, projector); the target's names
// must all resolve in it with identical shapes.
void ema_update(const ParamStore& online, ParamStore& target, double alpha);

}  // namespace m2dclap::m2d
