#pragma once

#include "m2dclap/params.hpp"

#include <string>

namespace m2dclap::optim {

enum class Kind { AdamW, Sgd };

Kind parse_kind(const std::string& s);
const char* to_string(Kind k);

struct OptimizerSpec {
  Kind kind = Kind::AdamW;
  double lr = 1e-3;
  double momentum = 0.9;  // SGD momentum / Adam beta1
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double warmup_epochs = 0.0;
  // Cosine decay to zero over the run after warm-up; constant when false.
  bool cosine = false;
};

// Learning rate at a fractional epoch position. Callers pass the position
// reached after the step, so the first warm-up step is not zero.
double learning_rate(const OptimizerSpec& spec, double epoch, double total_epochs);

// Weight decay skips 1-row tensors (biases, norm gains, tokens, scalars).
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerSpec spec, const ParamStore& params);

  const OptimizerSpec& spec() const { return spec_; }

  // Updates every trainable tensor of `params` from the matching gradient.
  void step(ParamStore& params, const ParamStore& grads, double lr);

  long steps() const { return steps_; }
  void set_steps(long s) { steps_ = s; }
  ParamStore& first_moment() { return m_; }
  ParamStore& second_moment() { return v_; }
  const ParamStore& first_moment() const { return m_; }
  const ParamStore& second_moment() const { return v_; }

 private:
  OptimizerSpec spec_;
  ParamStore m_{StoreRole::Gradient};
  ParamStore v_{StoreRole::Gradient};
  long steps_ = 0;
};

}  // namespace m2dclap::optim
