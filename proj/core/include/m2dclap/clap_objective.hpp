#pragma once

#include "m2dclap/params.hpp"

namespace m2dclap::clap {

// Logits are never scaled by more than 1 / kMinTemperature = 100.
inline constexpr double kMinTemperature = 0.01;

struct LossWeights {
  double m2d = 1.0;
  double clap = 0.01;

  void validate() const;
};

// S(m, n) = cos(audio_m, text_n). Both inputs are B x d_s.
Matrix similarity(const Matrix& audio, const Matrix& text);

// Backpropagates dL/dS to the raw (unnormalized) audio rows.
Matrix similarity_backward_audio(const Matrix& audio, const Matrix& text, const Matrix& dS);
Matrix similarity_backward_text(const Matrix& audio, const Matrix& text, const Matrix& dS);

struct NtXentResult {
  double loss = 0.0;
  Matrix dS;           // dL/dS
  double dtau = 0.0;   // dL/dtau
  double dlogit_scale = 0.0;  // dL/d log(1/tau)
};

// Symmetric NT-Xent: mean of the audio-axis and caption-axis cross entropies
// with the diagonal as the positive pair.
NtXentResult nt_xent(const Matrix& S, double tau);

double combined_loss(double l_m2d, double l_clap, const LossWeights& w);

double clamp_temperature(double tau);

// Applies the temperature clamp to the stored log(1/tau) parameter.
void clamp_logit_scale(ParamStore& online);

}  // namespace m2dclap::clap
