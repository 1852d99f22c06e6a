#include "m2dclap/dataset.hpp"

#include "m2dclap/parallel.hpp"
#include "m2dclap/zeroshot_eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace m2dclap::data {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::string item;
  std::stringstream ss(s);
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join(const std::vector<std::string>& v, char sep) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += v[i];
  }
  return out;
}

}  // namespace

std::vector<ManifestRecord> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  const auto dir = path.parent_path();
  std::vector<ManifestRecord> out;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() < 3 || cols.size() > 5) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 3 to 5 tab-separated columns");
    }
    ManifestRecord r;
    r.id = cols[0];
    if (r.id.empty()) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": empty sample id");
    if (!seen.insert(r.id).second) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": duplicate sample id " + r.id);
    }
    r.wav = cols[1];
    if (r.wav.is_relative()) r.wav = (dir / r.wav).lexically_normal();
    r.labels = split(cols[2], ';');
    if (cols.size() > 3) r.captions = split(cols[3], '|');
    if (cols.size() > 4) r.caption_ids = split(cols[4], ';');
    if (r.captions.empty() && r.caption_ids.empty()) {
      if (r.labels.empty()) {
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": record has neither labels nor captions");
      }
      r.captions = {text::caption_from_labels(r.labels)};
    }
    if (r.caption_ids.empty()) {
      for (const auto& c : r.captions) r.caption_ids.push_back(text::caption_id(c));
    }
    if (!r.captions.empty() && r.captions.size() != r.caption_ids.size()) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": caption and caption-id counts differ");
    }
    out.push_back(std::move(r));
  }
  if (out.empty()) throw FormatError("manifest " + path.string() + " has no records");
  return out;
}

void save_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest " + path.string());
  const auto dir = path.parent_path();
  for (const auto& r : records) {
    auto wav = r.wav;
    if (!dir.empty()) wav = std::filesystem::absolute(wav).lexically_relative(std::filesystem::absolute(dir));
    out << r.id << '\t' << wav.generic_string() << '\t' << join(r.labels, ';') << '\t' << join(r.captions, '|')
        << '\t' << join(r.caption_ids, ';') << '\n';
  }
}

std::vector<std::string> class_names(const std::vector<std::vector<ManifestRecord>>& manifests) {
  std::set<std::string> names;
  for (const auto& m : manifests) {
    for (const auto& r : m) names.insert(r.labels.begin(), r.labels.end());
  }
  return {names.begin(), names.end()};
}

ClipSet load_clips(const std::filesystem::path& manifest, const std::vector<std::string>& classes) {
  ClipSet set;
  set.records = load_manifest(manifest);
  set.class_names = classes;
  set.waves.reserve(set.records.size());
  set.label.reserve(set.records.size());
  set.multi_hot = Matrix::Zero(static_cast<Eigen::Index>(set.records.size()), static_cast<Eigen::Index>(classes.size()));
  for (size_t i = 0; i < set.records.size(); ++i) {
    const auto& r = set.records[i];
    set.waves.push_back(audio::load_wav(r.wav));
    if (r.labels.empty()) {
      set.label.push_back(-1);
      continue;
    }
    if (r.labels.size() > 1) set.multi_label = true;
    for (size_t j = 0; j < r.labels.size(); ++j) {
      const auto it = std::find(classes.begin(), classes.end(), r.labels[j]);
      if (it == classes.end()) {
        throw Error("manifest/label mismatch: " + r.id + " has label '" + r.labels[j] + "' outside the class list");
      }
      const auto c = static_cast<int>(it - classes.begin());
      set.multi_hot(static_cast<Eigen::Index>(i), c) = 1.0;
      if (j == 0) set.label.push_back(c);
    }
  }
  return set;
}

std::vector<Matrix> clip_spectrograms(const ClipSet& clips, const audio::MelConfig& mel, double mean, double std,
                                      int threads) {
  std::vector<Matrix> out(clips.size());
  parallel_for(clips.size(), threads, [&](size_t i) {
    out[i] = audio::standardize(audio::logmel(clips.waves[i], mel), mean, std).values;
  });
  return out;
}

text::EmbeddingTable resolve_captions(const std::vector<ManifestRecord>& records, const text::EmbeddingTable& table,
                                      bool toy_fallback, int dim) {
  if (table.size() > 0 && table.dim() != dim) {
    throw Error("embedding table has d_s = " + std::to_string(table.dim()) + ", model expects " + std::to_string(dim));
  }
  text::EmbeddingTable out(dim);
  for (const auto& r : records) {
    for (size_t j = 0; j < r.caption_ids.size(); ++j) {
      const auto& id = r.caption_ids[j];
      if (out.contains(id)) continue;
      if (table.contains(id)) {
        out.put(id, table.raw(id));
      } else if (toy_fallback && j < r.captions.size()) {
        out.put(id, text::toy_embed(r.captions[j], dim));
      } else {
        throw Error("caption id " + id + " of sample " + r.id + " is missing from the embedding table");
      }
    }
  }
  return out;
}

std::string tone_label(int k) { return "tone class " + std::to_string(k); }

audio::Waveform synth_tone(const SyntheticSpec& spec, int k, Rng& rng) {
  audio::Waveform w;
  const int sr = audio::kSampleRate;
  const auto n = static_cast<size_t>(std::llround(spec.duration_s * sr));
  w.samples.resize(n);
  const double f0 = spec.base_hz * std::pow(spec.ratio, k) * (1.0 + rng.uniform(-0.01, 0.01));
  double amp[4];
  double phase[4];
  for (int h = 0; h < 4; ++h) {
    amp[h] = rng.uniform(0.5, 1.0) / (h + 1);
    phase[h] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  const double gain = rng.uniform(0.15, 0.3);
  const double ramp = 0.02 * sr;
  for (size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sr;
    double v = 0.0;
    for (int h = 0; h < 4; ++h) {
      const double f = f0 * (h + 1);
      if (f < sr / 2.0) v += amp[h] * std::sin(2.0 * std::numbers::pi * f * t + phase[h]);
    }
    const double env = std::min({1.0, i / ramp, (n - i) / ramp});
    w.samples[i] = static_cast<float>(gain * env * v + spec.noise * rng.normal());
  }
  return w;
}

SyntheticLayout write_synthetic(const std::filesystem::path& dir, const SyntheticSpec& spec) {
  if (spec.classes < 2) throw Error("synthetic corpus needs at least 2 classes");
  if (spec.test_per_class < 1 || spec.test_per_class >= spec.clips_per_class) {
    throw Error("synthetic corpus: test clips per class must be in [1, clips_per_class)");
  }
  std::filesystem::create_directories(dir / "wav");
  std::vector<ManifestRecord> train, test;
  text::EmbeddingTable table(spec.dim);
  for (int k = 0; k < spec.classes; ++k) {
    const std::string label = tone_label(k);
    const std::string caption = text::caption_from_labels({label});
    const std::string cid = text::caption_id(caption);
    if (!table.contains(cid)) table.put(cid, text::toy_embed(caption, spec.dim));
    const std::string prompt = zeroshot::label_to_caption("synthetic", label);
    const std::string pid = text::caption_id(prompt);
    if (!table.contains(pid)) table.put(pid, text::toy_embed(prompt, spec.dim));
    for (int j = 0; j < spec.clips_per_class; ++j) {
      Rng rng = Rng::derive(spec.seed, {static_cast<uint64_t>(k), static_cast<uint64_t>(j)});
      char id[32];
      std::snprintf(id, sizeof id, "tone%02d_%03d", k, j);
      const auto wav = dir / "wav" / (std::string(id) + ".wav");
      audio::save_wav(wav, synth_tone(spec, k, rng));
      ManifestRecord r{id, wav, {label}, {caption}, {cid}};
      (j < spec.clips_per_class - spec.test_per_class ? train : test).push_back(std::move(r));
    }
  }
  SyntheticLayout layout{dir / "train.tsv", dir / "test.tsv", dir / "captions.m2dc"};
  save_manifest(layout.train_manifest, train);
  save_manifest(layout.test_manifest, test);
  text::save_table(layout.embedding_table, table);
  return layout;
}

}  // namespace m2dclap::data
