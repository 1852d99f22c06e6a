#pragma once

#include "m2dclap/common.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace m2dclap::text {

// Binary embedding table:
//   "M2DC" | u32 version | u32 d_s | u64 count |
//   count x (u16 id_len | id bytes | d_s x f32) | u32 CRC32 of everything before
// All integers and floats little-endian.
inline constexpr uint32_t kTableVersion = 1;

class EmbeddingTable {
 public:
  explicit EmbeddingTable(int dim = 0) : dim_(dim) {}

  int dim() const { return dim_; }
  size_t size() const { return ids_.size(); }
  bool contains(const std::string& id) const { return index_.count(id) != 0; }

  // Insert or replace; vectors are stored as float32, as on disk.
  void put(const std::string& id, const std::vector<float>& vec);
  void put(const std::string& id, const RowVector& vec);
  RowVector get(const std::string& id) const;
  const std::vector<std::string>& ids() const { return ids_; }
  const std::vector<float>& raw(const std::string& id) const;

 private:
  int dim_;
  std::vector<std::string> ids_;
  std::map<std::string, size_t> index_;
  std::vector<std::vector<float>> vecs_;
};

void save_table(const std::filesystem::path& path, const EmbeddingTable& table);
// expected_dim < 0 skips the dimension check.
EmbeddingTable load_table(const std::filesystem::path& path, int expected_dim = -1);

uint32_t crc32(const unsigned char* data, size_t n);

// Deterministic stand-in for a frozen sentence encoder: lowercase,
// whitespace/punctuation tokenization, one seeded Gaussian vector per token
// (FNV-1a seeded mt19937_64), averaged and l2-normalized.
RowVector toy_embed(const std::string& caption, int dim);
std::vector<std::string> tokenize(const std::string& caption);

// Stable content id of a caption: 16 hex digits of FNV-1a-64.
std::string caption_id(const std::string& caption);

struct CaptionRecord {
  std::string sample_id;
  std::vector<std::string> captions;
  std::vector<std::string> caption_ids;
};

// Uniform pick among a record's captions. Returns the caption id.
const std::string& pick_caption(const CaptionRecord& rec, Rng& rng);

// "The sound of " + labels joined with ", ".
std::string caption_from_labels(const std::vector<std::string>& labels);

}  // namespace m2dclap::text
