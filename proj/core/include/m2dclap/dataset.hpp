#pragma once

#include "m2dclap/audio_frontend.hpp"
#include "m2dclap/text_embed.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace m2dclap::data {

// One manifest line, tab separated:
//   id <TAB> wav path <TAB> labels (';') <TAB> captions ('|') <TAB> caption ids (';')
// Captions and caption ids may be empty; a record without captions gets the
// label caption "The sound of <labels>". Relative WAV paths resolve against
// the manifest's directory.
struct ManifestRecord {
  std::string id;
  std::filesystem::path wav;
  std::vector<std::string> labels;
  std::vector<std::string> captions;
  std::vector<std::string> caption_ids;

  text::CaptionRecord caption_record() const { return {id, captions, caption_ids}; }
};

std::vector<ManifestRecord> load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);

// Sorted union of every label that appears in the given manifests.
std::vector<std::string> class_names(const std::vector<std::vector<ManifestRecord>>& manifests);

struct ClipSet {
  std::vector<ManifestRecord> records;
  std::vector<audio::Waveform> waves;
  std::vector<std::string> class_names;
  std::vector<int> label;  // first label's class index
  Matrix multi_hot;        // clips x classes
  bool multi_label = false;

  size_t size() const { return records.size(); }
};

// Loads every WAV of the manifest. Labels not in `classes` raise an error.
ClipSet load_clips(const std::filesystem::path& manifest, const std::vector<std::string>& classes);

// Full-clip standardized log-mel spectrograms.
std::vector<Matrix> clip_spectrograms(const ClipSet& clips, const audio::MelConfig& mel, double mean, double std,
                                      int threads = 1);

// Looks up every caption id of the manifest, falling back to the toy embedder
// for missing ids when `toy_fallback` is set.
text::EmbeddingTable resolve_captions(const std::vector<ManifestRecord>& records, const text::EmbeddingTable& table,
                                      bool toy_fallback, int dim);

struct SyntheticSpec {
  int classes = 8;
  int clips_per_class = 100;
  int test_per_class = 20;
  double duration_s = 3.0;
  double base_hz = 200.0;
  double ratio = 1.4;  // fundamental of class k: base_hz * ratio^k
  double noise = 0.02;
  int dim = 128;  // caption embedding size
  uint64_t seed = 7;
};

// "tone class <k>"
std::string tone_label(int k);

// One clip of tone class k: a fundamental with three harmonics, random
// amplitudes, slight detuning, an onset ramp and white noise.
audio::Waveform synth_tone(const SyntheticSpec& spec, int k, Rng& rng);

struct SyntheticLayout {
  std::filesystem::path train_manifest;
  std::filesystem::path test_manifest;
  std::filesystem::path embedding_table;
};

// Writes wav/, train.tsv, test.tsv and captions.m2dc (every training caption
// plus the zero-shot class prompts, toy-embedded) under `dir`.
SyntheticLayout write_synthetic(const std::filesystem::path& dir, const SyntheticSpec& spec);

}  // namespace m2dclap::data
