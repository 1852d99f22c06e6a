#include "m2dclap/clap_objective.hpp"

#include "m2dclap/layers.hpp"
#include "m2dclap/model.hpp"

#include <cmath>

namespace m2dclap::clap {

void LossWeights::validate() const {
  if (!(m2d >= 0.0) || !(clap >= 0.0)) throw Error("loss weights must be non-negative");
}

Matrix similarity(const Matrix& audio, const Matrix& text) {
  if (audio.rows() != text.rows()) throw ShapeError("similarity: audio and text batch sizes differ");
  if (audio.cols() != text.cols()) throw ShapeError("similarity: embedding dimensions differ");
  const Matrix a = l2_normalize_rows(audio, "similarity(audio)");
  const Matrix t = l2_normalize_rows(text, "similarity(text)");
  return a * t.transpose();
}

namespace {

// d/dx of x/|x| applied row-wise: (g - xhat (xhat . g)) / |x|.
Matrix normalize_backward(const Matrix& x, const Matrix& dxhat) {
  Matrix dx(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double n = x.row(r).norm();
    const RowVector xhat = x.row(r) / n;
    dx.row(r) = (dxhat.row(r) - xhat * xhat.dot(dxhat.row(r))) / n;
  }
  return dx;
}

}  // namespace

Matrix similarity_backward_audio(const Matrix& audio, const Matrix& text, const Matrix& dS) {
  const Matrix t = l2_normalize_rows(text, "similarity(text)");
  return normalize_backward(audio, dS * t);
}

Matrix similarity_backward_text(const Matrix& audio, const Matrix& text, const Matrix& dS) {
  const Matrix a = l2_normalize_rows(audio, "similarity(audio)");
  return normalize_backward(text, dS.transpose() * a);
}

NtXentResult nt_xent(const Matrix& S, double tau) {
  if (S.rows() != S.cols()) throw ShapeError("nt_xent: similarity matrix must be square");
  if (!(tau > 0.0)) throw Error("nt_xent: temperature must be positive");
  const Eigen::Index b = S.rows();
  if (b == 0) throw ShapeError("nt_xent: empty batch");
  const Matrix logits = S / tau;

  // Row softmax: caption axis for each audio; column softmax: audio axis for
  // each caption.
  const Matrix log_row = layers::log_softmax_rows(logits);
  const Matrix log_col = layers::log_softmax_rows(logits.transpose()).transpose();

  double sum = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) sum += log_row(i, i) + log_col(i, i);

  NtXentResult r;
  const double scale = 1.0 / (2.0 * static_cast<double>(b));
  r.loss = -scale * sum;

  Matrix dlogits = log_row.array().exp() + log_col.array().exp();
  dlogits.diagonal().array() -= 2.0;
  dlogits *= scale;
  r.dS = dlogits / tau;
  const double dl_dinv_tau = (dlogits.array() * S.array()).sum();
  r.dtau = -dl_dinv_tau / (tau * tau);
  r.dlogit_scale = dl_dinv_tau / tau;
  return r;
}

double combined_loss(double l_m2d, double l_clap, const LossWeights& w) {
  return w.m2d * l_m2d + w.clap * l_clap;
}

double clamp_temperature(double tau) { return std::max(tau, kMinTemperature); }

namespace {

// Largest log(1/tau) whose tau = exp(-s) still rounds to >= kMinTemperature.
double max_logit_scale() {
  double s = std::log(1.0 / kMinTemperature);
  while (std::exp(-s) < kMinTemperature) s = std::nextafter(s, 0.0);
  return s;
}

}  // namespace

void clamp_logit_scale(ParamStore& online) {
  static const double kMax = max_logit_scale();
  double& ls = online.at(names::kLogitScale)(0, 0);
  ls = std::min(ls, kMax);
}

}  // namespace m2dclap::clap
