#include "m2dclap/layers.hpp"

#include <cmath>
#include <numbers>

namespace m2dclap::layers {

namespace {

constexpr double kInitStd = 0.02;

void fill_trunc_normal(Matrix& m, Rng& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.truncated_normal(kInitStd);
}

void accumulate(ParamStore* g, const std::string& name, const Matrix& delta) {
  if (g == nullptr || !g->contains(name) || !g->trainable(name)) return;
  g->at(name) += delta;
}

}  // namespace

void init_linear(ParamStore& p, const std::string& prefix, int in, int out, Rng& rng) {
  fill_trunc_normal(p.add(join(prefix, "weight"), out, in), rng);
  p.add(join(prefix, "bias"), 1, out);
}

Matrix linear(const ParamStore& p, const std::string& prefix, const Matrix& x) {
  const Matrix& w = p.at(join(prefix, "weight"));
  const Matrix& b = p.at(join(prefix, "bias"));
  if (x.cols() != w.cols()) {
    throw ShapeError(prefix + ": input width " + std::to_string(x.cols()) + " != " + std::to_string(w.cols()));
  }
  Matrix y = x * w.transpose();
  y.rowwise() += b.row(0);
  return y;
}

Matrix linear_backward(const ParamStore& p, ParamStore* g, const std::string& prefix, const Matrix& x,
                       const Matrix& dy) {
  const Matrix& w = p.at(join(prefix, "weight"));
  accumulate(g, join(prefix, "weight"), dy.transpose() * x);
  accumulate(g, join(prefix, "bias"), dy.colwise().sum());
  return dy * w;
}

Matrix standardize_rows(const Matrix& x, double eps, LayerNormCache* cache) {
  const Eigen::Index n = x.rows();
  const auto d = static_cast<double>(x.cols());
  Matrix xhat(n, x.cols());
  Vector rstd(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = x.row(r).sum() / d;
    const RowVector centered = x.row(r).array() - mean;
    const double var = centered.squaredNorm() / d;
    rstd[r] = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = centered * rstd[r];
  }
  if (cache != nullptr) {
    cache->xhat = xhat;
    cache->rstd = rstd;
  }
  return xhat;
}

Matrix standardize_rows_backward(const LayerNormCache& cache, const Matrix& dxhat) {
  const auto d = static_cast<double>(dxhat.cols());
  Matrix dx(dxhat.rows(), dxhat.cols());
  for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
    const double mean_d = dxhat.row(r).sum() / d;
    const double mean_dx = dxhat.row(r).dot(cache.xhat.row(r)) / d;
    dx.row(r) = cache.rstd[r] * (dxhat.row(r).array() - mean_d - cache.xhat.row(r).array() * mean_dx);
  }
  return dx;
}

void init_layer_norm(ParamStore& p, const std::string& prefix, int dim) {
  p.add(join(prefix, "gamma"), Matrix::Ones(1, dim));
  p.add(join(prefix, "beta"), 1, dim);
}

Matrix layer_norm(const ParamStore& p, const std::string& prefix, const Matrix& x, double eps,
                  LayerNormCache* cache) {
  const Matrix& gamma = p.at(join(prefix, "gamma"));
  const Matrix& beta = p.at(join(prefix, "beta"));
  Matrix y = standardize_rows(x, eps, cache);
  y.array().rowwise() *= gamma.row(0).array();
  y.rowwise() += beta.row(0);
  return y;
}

Matrix layer_norm_backward(const ParamStore& p, ParamStore* g, const std::string& prefix,
                           const LayerNormCache& cache, const Matrix& dy) {
  const Matrix& gamma = p.at(join(prefix, "gamma"));
  accumulate(g, join(prefix, "gamma"), (dy.array() * cache.xhat.array()).colwise().sum().matrix());
  accumulate(g, join(prefix, "beta"), dy.colwise().sum());
  Matrix dxhat = dy;
  dxhat.array().rowwise() *= gamma.row(0).array();
  return standardize_rows_backward(cache, dxhat);
}

Matrix gelu(const Matrix& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); });
}

Matrix gelu_backward(const Matrix& x, const Matrix& dy) {
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  Matrix d = x.unaryExpr([inv_sqrt_2pi](double v) {
    const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
    return cdf + v * pdf;
  });
  return d.cwiseProduct(dy);
}

void init_attention(ParamStore& p, const std::string& prefix, int dim, Rng& rng) {
  init_linear(p, join(prefix, "qkv"), dim, 3 * dim, rng);
  init_linear(p, join(prefix, "proj"), dim, dim, rng);
}

Matrix attention(const ParamStore& p, const std::string& prefix, const Matrix& x, int heads,
                 AttentionCache* cache) {
  const auto dim = static_cast<int>(x.cols());
  if (heads <= 0 || dim % heads != 0) throw ShapeError(prefix + ": dim not divisible by heads");
  const int hd = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const Eigen::Index n = x.rows();

  Matrix qkv = linear(p, join(prefix, "qkv"), x);
  Matrix context(n, dim);
  std::vector<Matrix> probs;
  probs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const auto q = qkv.middleCols(h * hd, hd);
    const auto k = qkv.middleCols(dim + h * hd, hd);
    const auto v = qkv.middleCols(2 * dim + h * hd, hd);
    Matrix logits = (q * k.transpose()) * scale;
    Matrix a = layers::log_softmax_rows(logits).array().exp();
    context.middleCols(h * hd, hd) = a * v;
    probs.push_back(std::move(a));
  }
  Matrix out = linear(p, join(prefix, "proj"), context);
  if (cache != nullptr) {
    cache->input = x;
    cache->qkv = std::move(qkv);
    cache->probs = std::move(probs);
    cache->context = std::move(context);
  }
  return out;
}

Matrix attention_backward(const ParamStore& p, ParamStore* g, const std::string& prefix, int heads,
                          const AttentionCache& cache, const Matrix& dy) {
  const auto dim = static_cast<int>(cache.input.cols());
  const int hd = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  const Matrix dcontext = linear_backward(p, g, join(prefix, "proj"), cache.context, dy);
  Matrix dqkv(cache.qkv.rows(), cache.qkv.cols());
  for (int h = 0; h < heads; ++h) {
    const auto q = cache.qkv.middleCols(h * hd, hd);
    const auto k = cache.qkv.middleCols(dim + h * hd, hd);
    const auto v = cache.qkv.middleCols(2 * dim + h * hd, hd);
    const Matrix& a = cache.probs[static_cast<size_t>(h)];
    const auto dctx = dcontext.middleCols(h * hd, hd);

    const Matrix da = dctx * v.transpose();
    dqkv.middleCols(2 * dim + h * hd, hd) = a.transpose() * dctx;
    // Softmax Jacobian, row by row.
    const Vector row_dot = (da.array() * a.array()).rowwise().sum();
    Matrix ds = a.array() * (da.array().colwise() - row_dot.array());
    ds *= scale;
    dqkv.middleCols(h * hd, hd) = ds * k;
    dqkv.middleCols(dim + h * hd, hd) = ds.transpose() * q;
  }
  return linear_backward(p, g, join(prefix, "qkv"), cache.input, dqkv);
}

void init_block(ParamStore& p, const std::string& prefix, int dim, int hidden, Rng& rng) {
  init_layer_norm(p, join(prefix, "norm1"), dim);
  init_attention(p, join(prefix, "attn"), dim, rng);
  init_layer_norm(p, join(prefix, "norm2"), dim);
  init_linear(p, join(prefix, "fc1"), dim, hidden, rng);
  init_linear(p, join(prefix, "fc2"), hidden, dim, rng);
}

Matrix block(const ParamStore& p, const std::string& prefix, const Matrix& x, int heads, double eps,
             BlockCache* cache) {
  LayerNormCache n1, n2;
  AttentionCache ac;
  const bool keep = cache != nullptr;
  const Matrix h1 = layer_norm(p, join(prefix, "norm1"), x, eps, keep ? &n1 : nullptr);
  Matrix x1 = x + attention(p, join(prefix, "attn"), h1, heads, keep ? &ac : nullptr);
  Matrix h2 = layer_norm(p, join(prefix, "norm2"), x1, eps, keep ? &n2 : nullptr);
  Matrix pre = linear(p, join(prefix, "fc1"), h2);
  Matrix act = gelu(pre);
  Matrix y = x1 + linear(p, join(prefix, "fc2"), act);
  if (keep) {
    cache->norm1 = std::move(n1);
    cache->norm2 = std::move(n2);
    cache->attn = std::move(ac);
    cache->x1 = std::move(x1);
    cache->mlp_in = std::move(h2);
    cache->mlp_hidden = std::move(pre);
    cache->mlp_act = std::move(act);
  }
  return y;
}

Matrix block_backward(const ParamStore& p, ParamStore* g, const std::string& prefix, int heads,
                      const BlockCache& cache, const Matrix& dy) {
  const Matrix dact = linear_backward(p, g, join(prefix, "fc2"), cache.mlp_act, dy);
  const Matrix dpre = gelu_backward(cache.mlp_hidden, dact);
  const Matrix dh2 = linear_backward(p, g, join(prefix, "fc1"), cache.mlp_in, dpre);
  const Matrix dx1 = dy + layer_norm_backward(p, g, join(prefix, "norm2"), cache.norm2, dh2);
  const Matrix dh1 = attention_backward(p, g, join(prefix, "attn"), heads, cache.attn, dx1);
  return dx1 + layer_norm_backward(p, g, join(prefix, "norm1"), cache.norm1, dh1);
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

}  // namespace m2dclap::layers
