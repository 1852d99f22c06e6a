#pragma once

#include "m2dclap/params.hpp"

#include <string>
#include <vector>

// Transformer building blocks with explicit forward caches and backward passes.
// Parameters are looked up in a ParamStore by "<prefix>.<name>"; gradients are
// accumulated (+=) into a gradient store of the same layout. A null gradient
// store means "propagate to the input only".
namespace m2dclap::layers {

inline std::string join(const std::string& prefix, const char* name) { return prefix + "." + name; }

// y = x W^T + b, W: (out x in), b: (1 x out).
void init_linear(ParamStore& p, const std::string& prefix, int in, int out, Rng& rng);
Matrix linear(const ParamStore& p, const std::string& prefix, const Matrix& x);
Matrix linear_backward(const ParamStore& p, ParamStore* g, const std::string& prefix, const Matrix& x,
                       const Matrix& dy);

struct LayerNormCache {
  Matrix xhat;
  Vector rstd;
};

// Row-wise standardization without affine parameters.
Matrix standardize_rows(const Matrix& x, double eps, LayerNormCache* cache = nullptr);
Matrix standardize_rows_backward(const LayerNormCache& cache, const Matrix& dy);

void init_layer_norm(ParamStore& p, const std::string& prefix, int dim);
Matrix layer_norm(const ParamStore& p, const std::string& prefix, const Matrix& x, double eps,
                  LayerNormCache* cache);
Matrix layer_norm_backward(const ParamStore& p, ParamStore* g, const std::string& prefix,
                           const LayerNormCache& cache, const Matrix& dy);

Matrix gelu(const Matrix& x);
Matrix gelu_backward(const Matrix& x, const Matrix& dy);

struct AttentionCache {
  Matrix input;
  Matrix qkv;
  std::vector<Matrix> probs;  // per head, N x N
  Matrix context;             // N x D, heads concatenated
};

void init_attention(ParamStore& p, const std::string& prefix, int dim, Rng& rng);
Matrix attention(const ParamStore& p, const std::string& prefix, const Matrix& x, int heads,
                 AttentionCache* cache);
Matrix attention_backward(const ParamStore& p, ParamStore* g, const std::string& prefix, int heads,
                          const AttentionCache& cache, const Matrix& dy);

struct BlockCache {
  LayerNormCache norm1, norm2;
  AttentionCache attn;
  Matrix x1;          // after the attention residual
  Matrix mlp_in;      // norm2 output
  Matrix mlp_hidden;  // fc1 pre-activation
  Matrix mlp_act;     // gelu output
};

// Pre-norm block: x + attn(ln1(x)), then + mlp(ln2(.)).
void init_block(ParamStore& p, const std::string& prefix, int dim, int hidden, Rng& rng);
Matrix block(const ParamStore& p, const std::string& prefix, const Matrix& x, int heads, double eps,
             BlockCache* cache);
Matrix block_backward(const ParamStore& p, ParamStore* g, const std::string& prefix, int heads,
                      const BlockCache& cache, const Matrix& dy);

// Row-wise stable log-softmax.
Matrix log_softmax_rows(const Matrix& logits);

}  // namespace m2dclap::layers
