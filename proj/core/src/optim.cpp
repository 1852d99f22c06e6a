#include "m2dclap/optim.hpp"

#include <cmath>
#include <numbers>

namespace m2dclap::optim {

Kind parse_kind(const std::string& s) {
  if (s == "adamw") return Kind::AdamW;
  if (s == "sgd") return Kind::Sgd;
  throw Error("unknown optimizer '" + s + "' (adamw | sgd)");
}

const char* to_string(Kind k) { return k == Kind::AdamW ? "adamw" : "sgd"; }

double learning_rate(const OptimizerSpec& spec, double epoch, double total_epochs) {
  if (spec.warmup_epochs > 0.0 && epoch < spec.warmup_epochs) {
    return spec.lr * epoch / spec.warmup_epochs;
  }
  if (!spec.cosine || total_epochs <= spec.warmup_epochs) return spec.lr;
  const double progress = (epoch - spec.warmup_epochs) / (total_epochs - spec.warmup_epochs);
  return spec.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

Optimizer::Optimizer(OptimizerSpec spec, const ParamStore& params)
    : spec_(spec), m_(params.zeros_like()), v_(spec.kind == Kind::AdamW ? params.zeros_like() : ParamStore{}) {
  if (!(spec.lr >= 0.0)) throw Error("optimizer: lr must be non-negative");
}

void Optimizer::step(ParamStore& params, const ParamStore& grads, double lr) {
  if (!params.same_layout(grads) || !params.same_layout(m_)) throw ShapeError("optimizer: layout mismatch");
  ++steps_;
  const double b1 = spec_.momentum;
  const double b2 = spec_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (size_t i = 0; i < params.entries().size(); ++i) {
    auto& p = params.entries()[i];
    if (!p.trainable) continue;
    const Matrix& g = grads.entries()[i].value;
    Matrix& m = m_.entries()[i].value;
    const bool decay = spec_.weight_decay > 0.0 && p.value.rows() > 1;
    if (spec_.kind == Kind::AdamW) {
      Matrix& v = v_.entries()[i].value;
      m = b1 * m + (1.0 - b1) * g;
      v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
      if (decay) p.value *= 1.0 - lr * spec_.weight_decay;
      p.value.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + spec_.eps);
    } else {
      Matrix d = g;
      if (decay) d += spec_.weight_decay * p.value;
      m = b1 * m + d;
      p.value -= lr * m;
    }
  }
}

}  // namespace m2dclap::optim
