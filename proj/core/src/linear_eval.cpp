#include "m2dclap/linear_eval.hpp"

#include "m2dclap/parallel.hpp"
#include "m2dclap/tensor_file.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace m2dclap::linear {

Pooling parse_pooling(const std::string& s) {
  if (s == "mean") return Pooling::MeanAll;
  if (s == "freq_stack") return Pooling::FreqStackTimeMean;
  throw Error("unknown pooling '" + s + "' (mean | freq_stack)");
}

const char* to_string(Pooling p) { return p == Pooling::MeanAll ? "mean" : "freq_stack"; }

RowVector pool_tokens(const Matrix& z, GridShape grid, Pooling pooling) {
  if (z.rows() != grid.count()) throw ShapeError("pool_tokens: token count does not match grid");
  if (pooling == Pooling::MeanAll) return z.colwise().mean();
  const Eigen::Index d = z.cols();
  RowVector out(grid.rows * d);
  for (int r = 0; r < grid.rows; ++r) {
    out.segment(r * d, d) = z.middleRows(static_cast<Eigen::Index>(r) * grid.cols, grid.cols).colwise().mean();
  }
  return out;
}

Matrix extract_features(const ParamStore& params, const ModelConfig& cfg, const std::vector<Matrix>& spectrograms,
                        GridShape pretrain_grid, Pooling pooling, int threads) {
  const PositionalEncoding base = sincos_2d(pretrain_grid, cfg.encoder.dim);
  std::vector<RowVector> rows(spectrograms.size());
  parallel_for(spectrograms.size(), threads, [&](size_t i) {
    const PatchSequence seq = patchify(spectrograms[i], cfg.encoder.patch);
    const PositionalEncoding pe = interpolate_posenc(base, seq.grid);
    rows[i] = pool_tokens(encode_all(params, cfg, seq, pe), seq.grid, pooling);
  });
  if (rows.empty()) return Matrix(0, 0);
  Matrix out(static_cast<Eigen::Index>(rows.size()), rows[0].size());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != out.cols()) throw ShapeError("extract_features: clips pool to different widths");
    out.row(static_cast<Eigen::Index>(i)) = rows[i];
  }
  return out;
}

double ci95_halfwidth(const std::vector<double>& values) {
  if (values.size() < 3) throw Error("confidence interval needs at least 3 runs");
  const double k = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / k;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return 1.96 * std::sqrt(ss / (k - 1.0)) / std::sqrt(k);
}

namespace {

struct Standardizer {
  RowVector mean, scale;

  explicit Standardizer(const Matrix& x) {
    mean = x.colwise().mean();
    scale.resize(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double var = (x.col(j).array() - mean[j]).square().mean();
      scale[j] = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
    }
  }
  Matrix apply(const Matrix& x) const {
    return ((x.rowwise() - mean).array().rowwise() * scale.array()).matrix();
  }
};

int num_classes(const std::vector<int>& a, const std::vector<int>& b) {
  int c = 0;
  for (int v : a) c = std::max(c, v + 1);
  for (int v : b) c = std::max(c, v + 1);
  return c;
}

struct Linear {
  Matrix w;  // C x d
  RowVector b;

  Matrix logits(const Matrix& x) const {
    Matrix l = x * w.transpose();
    l.rowwise() += b;
    return l;
  }
};

double accuracy_of(const Linear& m, const Matrix& x, const std::vector<int>& y) {
  if (y.empty()) return 0.0;
  const Matrix l = m.logits(x);
  size_t ok = 0;
  for (Eigen::Index i = 0; i < l.rows(); ++i) {
    Eigen::Index arg;
    l.row(i).maxCoeff(&arg);
    ok += static_cast<int>(arg) == y[static_cast<size_t>(i)] ? 1 : 0;
  }
  return static_cast<double>(ok) / static_cast<double>(y.size());
}

double mean_xent(const Linear& m, const Matrix& x, const std::vector<int>& y) {
  const Matrix lp = layers::log_softmax_rows(m.logits(x));
  double s = 0.0;
  for (Eigen::Index i = 0; i < lp.rows(); ++i) s -= lp(i, y[static_cast<size_t>(i)]);
  return s / static_cast<double>(lp.rows());
}

Matrix take_rows(const Matrix& x, const std::vector<size_t>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

ProbeRun run_probe(const Matrix& x, const std::vector<int>& y, const Matrix& test_x, const std::vector<int>& test_y,
                   int classes, uint64_t seed, const ProbeOptions& opts) {
  Rng rng(seed);
  std::vector<size_t> order(y.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  auto n_val = static_cast<size_t>(std::floor(opts.validation_fraction * static_cast<double>(y.size())));
  if (y.size() - n_val < 2) n_val = 0;
  const std::vector<size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<size_t> fit_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  const Matrix val_x = take_rows(x, val_idx);
  const Matrix fit_x = take_rows(x, fit_idx);
  std::vector<int> val_y, fit_y;
  for (size_t i : val_idx) val_y.push_back(y[i]);
  for (size_t i : fit_idx) fit_y.push_back(y[i]);

  Linear m{Matrix(classes, x.cols()), RowVector::Zero(classes)};
  for (Eigen::Index i = 0; i < m.w.size(); ++i) m.w.data()[i] = rng.normal(0.0, 0.01);
  Matrix vw = Matrix::Zero(m.w.rows(), m.w.cols());
  RowVector vb = RowVector::Zero(classes);

  Linear best = m;
  double best_val = -1.0;
  double prev_loss = std::numeric_limits<double>::infinity();
  ProbeRun run;
  run.seed = seed;
  std::vector<size_t> perm(fit_idx.size());
  std::iota(perm.begin(), perm.end(), 0);
  for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
    rng.shuffle(perm);
    for (size_t start = 0; start < perm.size(); start += static_cast<size_t>(opts.batch_size)) {
      const size_t end = std::min(perm.size(), start + static_cast<size_t>(opts.batch_size));
      const std::vector<size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(start),
                                    perm.begin() + static_cast<std::ptrdiff_t>(end));
      const Matrix bx = take_rows(fit_x, idx);
      Matrix p = layers::log_softmax_rows(m.logits(bx)).array().exp();
      for (size_t i = 0; i < idx.size(); ++i) p(static_cast<Eigen::Index>(i), fit_y[idx[i]]) -= 1.0;
      p /= static_cast<double>(idx.size());
      const Matrix gw = p.transpose() * bx + opts.weight_decay * m.w;
      const RowVector gb = p.colwise().sum();
      vw = opts.momentum * vw + gw;
      vb = opts.momentum * vb + gb;
      m.w -= opts.lr * vw;
      m.b -= opts.lr * vb;
    }
    run.epochs = epoch + 1;
    const double val_acc = val_y.empty() ? 0.0 : accuracy_of(m, val_x, val_y);
    if (val_y.empty() || val_acc > best_val) {
      best_val = val_acc;
      best = m;
    }
    const double loss = mean_xent(m, fit_x, fit_y);
    if (!std::isfinite(loss)) throw Error("linear probe diverged");
    if (std::abs(prev_loss - loss) < opts.tolerance) break;
    prev_loss = loss;
  }
  run.train_accuracy = accuracy_of(best, fit_x, fit_y);
  run.test_accuracy = accuracy_of(best, test_x, test_y);
  return run;
}

}  // namespace

ProbeResult train_probe(const Matrix& train_x, const std::vector<int>& train_y, const Matrix& test_x,
                        const std::vector<int>& test_y, const std::vector<uint64_t>& seeds,
                        const ProbeOptions& opts) {
  if (seeds.size() < 3) throw Error("train_probe: need at least 3 seeds for a confidence interval");
  if (static_cast<size_t>(train_x.rows()) != train_y.size() || static_cast<size_t>(test_x.rows()) != test_y.size()) {
    throw ShapeError("train_probe: feature/label count mismatch");
  }
  if (train_x.cols() != test_x.cols()) throw ShapeError("train_probe: train/test feature widths differ");
  std::vector<int> distinct(train_y);
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 2) throw Error("train_probe: training data has a single class");

  const Standardizer st(train_x);
  const Matrix x = st.apply(train_x);
  const Matrix tx = st.apply(test_x);
  const int classes = num_classes(train_y, test_y);

  ProbeResult r;
  std::vector<double> accs;
  for (uint64_t seed : seeds) {
    r.runs.push_back(run_probe(x, train_y, tx, test_y, classes, seed, opts));
    accs.push_back(r.runs.back().test_accuracy);
    r.train_accuracy += r.runs.back().train_accuracy / static_cast<double>(seeds.size());
  }
  r.accuracy = std::accumulate(accs.begin(), accs.end(), 0.0) / static_cast<double>(accs.size());
  r.ci95 = ci95_halfwidth(accs);
  return r;
}

double nearest_centroid_accuracy(const Matrix& train_x, const std::vector<int>& train_y, const Matrix& test_x,
                                 const std::vector<int>& test_y) {
  const Standardizer st(train_x);
  const Matrix x = st.apply(train_x);
  const Matrix tx = st.apply(test_x);
  const int classes = num_classes(train_y, test_y);
  Matrix centroids = Matrix::Zero(classes, x.cols());
  std::vector<int> counts(static_cast<size_t>(classes), 0);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    centroids.row(train_y[static_cast<size_t>(i)]) += x.row(i);
    ++counts[static_cast<size_t>(train_y[static_cast<size_t>(i)])];
  }
  size_t ok = 0;
  for (Eigen::Index i = 0; i < tx.rows(); ++i) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int c = 0; c < classes; ++c) {
      if (counts[static_cast<size_t>(c)] == 0) continue;
      const double d = (tx.row(i) - centroids.row(c) / counts[static_cast<size_t>(c)]).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    ok += best == test_y[static_cast<size_t>(i)] ? 1 : 0;
  }
  return test_y.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(test_y.size());
}

void save_feature_cache(const std::filesystem::path& path, const FeatureCache& cache) {
  TensorFile f;
  f.magic = "M2DF";
  std::ostringstream h;
  h << "pooling = " << to_string(cache.pooling) << "\n";
  for (const auto& c : cache.class_names) h << "class " << c << "\n";
  for (const auto& id : cache.ids) h << "id " << id << "\n";
  f.header = h.str();
  f.tensors.push_back({"features", cache.features, DType::F64});
  Matrix labels(static_cast<Eigen::Index>(cache.labels.size()), 1);
  for (size_t i = 0; i < cache.labels.size(); ++i) labels(static_cast<Eigen::Index>(i), 0) = cache.labels[i];
  f.tensors.push_back({"labels", labels, DType::F64});
  save_tensor_file(path, f);
}

FeatureCache load_feature_cache(const std::filesystem::path& path) {
  const TensorFile f = load_tensor_file(path, "M2DF");
  FeatureCache c;
  c.features = f.get("features");
  const Matrix& labels = f.get("labels");
  for (Eigen::Index i = 0; i < labels.rows(); ++i) c.labels.push_back(static_cast<int>(labels(i, 0)));
  std::istringstream h(f.header);
  std::string line;
  while (std::getline(h, line)) {
    if (line.rfind("pooling = ", 0) == 0) {
      c.pooling = parse_pooling(line.substr(10));
    } else if (line.rfind("class ", 0) == 0) {
      c.class_names.push_back(line.substr(6));
    } else if (line.rfind("id ", 0) == 0) {
      c.ids.push_back(line.substr(3));
    }
  }
  return c;
}

}  // namespace m2dclap::linear
