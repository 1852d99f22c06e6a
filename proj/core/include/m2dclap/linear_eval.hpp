#pragma once

#include "m2dclap/model.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace m2dclap::linear {

enum class Pooling {
  MeanAll,            // mean over every token: D
  FreqStackTimeMean,  // concatenate the frequency rows per time step, mean over time: rows * D
};

Pooling parse_pooling(const std::string& s);
const char* to_string(Pooling p);

// Pools encoder output tokens laid out on `grid` (frequency-major).
RowVector pool_tokens(const Matrix& z, GridShape grid, Pooling pooling);

// Encodes each clip with every patch visible and pools it. Clips may differ in
// duration; the positional table is interpolated from `pretrain_grid`.
Matrix extract_features(const ParamStore& params, const ModelConfig& cfg, const std::vector<Matrix>& spectrograms,
                        GridShape pretrain_grid, Pooling pooling, int threads = 1);

struct ProbeOptions {
  int max_epochs = 1000;
  double tolerance = 1e-6;  // stop when the epoch loss moves less than this
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 64;
  double validation_fraction = 0.1;
};

struct ProbeRun {
  uint64_t seed = 0;
  double test_accuracy = 0.0;
  double train_accuracy = 0.0;
  int epochs = 0;
};

struct ProbeResult {
  std::string task;
  double accuracy = 0.0;     // mean over seeds
  double ci95 = 0.0;         // 1.96 * sd / sqrt(k)
  double train_accuracy = 0.0;
  std::vector<ProbeRun> runs;
};

// Multinomial logistic regression on standardized features, one run per seed.
ProbeResult train_probe(const Matrix& train_x, const std::vector<int>& train_y, const Matrix& test_x,
                        const std::vector<int>& test_y, const std::vector<uint64_t>& seeds,
                        const ProbeOptions& opts = {});

// 1.96 * sample sd / sqrt(k); requires k >= 3.
double ci95_halfwidth(const std::vector<double>& values);

// Nearest class centroid (Euclidean on standardized features); used as an
// independent separability check.
double nearest_centroid_accuracy(const Matrix& train_x, const std::vector<int>& train_y, const Matrix& test_x,
                                 const std::vector<int>& test_y);

struct FeatureCache {
  Matrix features;
  std::vector<int> labels;
  std::vector<std::string> ids;
  std::vector<std::string> class_names;
  Pooling pooling = Pooling::FreqStackTimeMean;
};

void save_feature_cache(const std::filesystem::path& path, const FeatureCache& cache);
FeatureCache load_feature_cache(const std::filesystem::path& path);

}  // namespace m2dclap::linear
