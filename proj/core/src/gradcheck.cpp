#include "m2dclap/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace m2dclap {

namespace {

std::vector<Eigen::Index> sample_coords(Eigen::Index n, int k, Rng& rng) {
  std::vector<Eigen::Index> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  if (k >= n) return idx;
  rng.shuffle(idx);
  idx.resize(static_cast<size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

double checked(double v) {
  if (!std::isfinite(v)) throw Error("grad_check: non-finite loss encountered");
  return v;
}

// f is evaluated at x + d for the perturbation d.
template <typename F>
double richardson(const F& f, double h) {
  const double d1 = (checked(f(h)) - checked(f(-h))) / (2.0 * h);
  const double d2 = (checked(f(h / 2)) - checked(f(-h / 2))) / h;
  return (4.0 * d2 - d1) / 3.0;
}

void record(GradCheckReport& r, double a, double n, double floor, const std::string& where) {
  if (!std::isfinite(a)) throw Error("grad_check: non-finite analytic gradient at " + where);
  const double abs_err = std::abs(a - n);
  const double rel = abs_err / std::max({std::abs(a), std::abs(n), floor});
  r.max_abs_error = std::max(r.max_abs_error, abs_err);
  if (rel >= r.max_rel_error) {
    r.max_rel_error = rel;
    r.worst = where;
  }
  ++r.coords_checked;
}

}  // namespace

GradCheckReport grad_check(const std::function<double(const ParamStore&)>& loss, const ParamStore& params,
                           const ParamStore& analytic, const GradCheckOptions& opts) {
  if (!params.same_layout(analytic)) throw ShapeError("grad_check: gradient layout differs from params");
  GradCheckReport r;
  Rng rng(opts.seed);
  ParamStore probe = params;
  checked(loss(probe));
  for (size_t t = 0; t < probe.entries().size(); ++t) {
    auto& e = probe.entries()[t];
    if (!opts.prefix.empty() && e.name.rfind(opts.prefix, 0) != 0) continue;
    for (Eigen::Index i : sample_coords(e.value.size(), opts.coords_per_tensor, rng)) {
      double& x = e.value.data()[i];
      const double orig = x;
      const double numeric = richardson(
          [&](double d) {
            x = orig + d;
            return loss(probe);
          },
          opts.step);
      x = orig;
      record(r, analytic.entries()[t].value.data()[i], numeric, opts.denominator_floor,
             e.name + "[" + std::to_string(i) + "]");
    }
  }
  return r;
}

GradCheckReport grad_check(const std::function<double(const Matrix&)>& loss, const Matrix& x,
                           const Matrix& analytic, const GradCheckOptions& opts) {
  if (x.rows() != analytic.rows() || x.cols() != analytic.cols()) {
    throw ShapeError("grad_check: gradient shape differs from input");
  }
  GradCheckReport r;
  Rng rng(opts.seed);
  Matrix probe = x;
  checked(loss(probe));
  for (Eigen::Index i : sample_coords(x.size(), opts.coords_per_tensor, rng)) {
    const double orig = probe.data()[i];
    const double numeric = richardson(
        [&](double d) {
          probe.data()[i] = orig + d;
          return loss(probe);
        },
        opts.step);
    probe.data()[i] = orig;
    record(r, analytic.data()[i], numeric, opts.denominator_floor, "x[" + std::to_string(i) + "]");
  }
  return r;
}

}  // namespace m2dclap
