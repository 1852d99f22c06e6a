#include "m2dclap/text_embed.hpp"

#include <zlib.h>

#include <bit>
#include <cctype>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace m2dclap::text {

namespace {

static_assert(std::endian::native == std::endian::little, "table I/O assumes a little-endian host");

template <typename T>
void put(std::vector<unsigned char>& b, T v) {
  unsigned char tmp[sizeof(T)];
  std::memcpy(tmp, &v, sizeof(T));
  b.insert(b.end(), tmp, tmp + sizeof(T));
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& b, size_t end) : b_(b), end_(end) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  size_t pos() const { return pos_; }

 private:
  void need(size_t n) const {
    if (pos_ + n > end_) throw FormatError("embedding table: truncated payload");
  }
  const std::vector<unsigned char>& b_;
  size_t end_;
  size_t pos_ = 0;
};

}  // namespace

uint32_t crc32(const unsigned char* data, size_t n) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<size_t>(n, 1u << 30));
    c = ::crc32(c, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<uint32_t>(c);
}

void EmbeddingTable::put(const std::string& id, const std::vector<float>& vec) {
  if (static_cast<int>(vec.size()) != dim_) {
    throw ShapeError("embedding table: vector for '" + id + "' has length " + std::to_string(vec.size()) +
                     ", table d_s is " + std::to_string(dim_));
  }
  for (float v : vec) {
    if (!std::isfinite(v)) throw Error("embedding table: non-finite value in '" + id + "'");
  }
  if (id.size() > 0xffff) throw Error("embedding table: id too long");
  auto it = index_.find(id);
  if (it != index_.end()) {
    vecs_[it->second] = vec;
    return;
  }
  index_.emplace(id, ids_.size());
  ids_.push_back(id);
  vecs_.push_back(vec);
}

void EmbeddingTable::put(const std::string& id, const RowVector& vec) {
  std::vector<float> v(static_cast<size_t>(vec.size()));
  for (Eigen::Index i = 0; i < vec.size(); ++i) v[static_cast<size_t>(i)] = static_cast<float>(vec[i]);
  put(id, v);
}

const std::vector<float>& EmbeddingTable::raw(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw Error("embedding table: no entry for caption id '" + id + "'");
  return vecs_[it->second];
}

RowVector EmbeddingTable::get(const std::string& id) const {
  const auto& v = raw(id);
  RowVector out(static_cast<Eigen::Index>(v.size()));
  for (size_t i = 0; i < v.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[i];
  return out;
}

void save_table(const std::filesystem::path& path, const EmbeddingTable& table) {
  std::vector<unsigned char> b;
  b.insert(b.end(), {'M', '2', 'D', 'C'});
  put<uint32_t>(b, kTableVersion);
  put<uint32_t>(b, static_cast<uint32_t>(table.dim()));
  put<uint64_t>(b, table.size());
  for (const auto& id : table.ids()) {
    put<uint16_t>(b, static_cast<uint16_t>(id.size()));
    b.insert(b.end(), id.begin(), id.end());
    for (float v : table.raw(id)) put<float>(b, v);
  }
  put<uint32_t>(b, crc32(b.data(), b.size()));

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write embedding table: " + path.string());
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  }
  std::filesystem::rename(tmp, path);
}

EmbeddingTable load_table(const std::filesystem::path& path, int expected_dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open embedding table: " + path.string());
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (b.size() < 24 || std::memcmp(b.data(), "M2DC", 4) != 0) {
    throw FormatError("embedding table: bad magic or truncated header in " + path.string());
  }
  uint32_t stored_crc;
  std::memcpy(&stored_crc, b.data() + b.size() - 4, 4);
  if (crc32(b.data(), b.size() - 4) != stored_crc) {
    throw FormatError("embedding table: checksum mismatch in " + path.string());
  }
  Reader r(b, b.size() - 4);
  r.str(4);
  const auto version = r.get<uint32_t>();
  if (version != kTableVersion) {
    throw FormatError("embedding table: unsupported version " + std::to_string(version));
  }
  const auto dim = static_cast<int>(r.get<uint32_t>());
  if (expected_dim >= 0 && dim != expected_dim) {
    throw ShapeError("embedding table: d_s " + std::to_string(dim) + " does not match configured " +
                     std::to_string(expected_dim));
  }
  const auto count = r.get<uint64_t>();
  EmbeddingTable t(dim);
  std::vector<float> vec(static_cast<size_t>(dim));
  for (uint64_t i = 0; i < count; ++i) {
    const auto len = r.get<uint16_t>();
    std::string id = r.str(len);
    for (auto& v : vec) v = r.get<float>();
    t.put(id, vec);
  }
  if (r.pos() != b.size() - 4) throw FormatError("embedding table: trailing bytes before checksum");
  return t;
}

std::vector<std::string> tokenize(const std::string& caption) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : caption) {
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

RowVector toy_embed(const std::string& caption, int dim) {
  if (dim <= 0) throw Error("toy_embed: dimension must be positive");
  const auto tokens = tokenize(caption);
  if (tokens.empty()) throw Error("toy_embed: empty caption");
  RowVector sum = RowVector::Zero(dim);
  for (const auto& tok : tokens) {
    Rng rng(fnv1a64(tok));
    for (int i = 0; i < dim; ++i) sum[i] += rng.normal();
  }
  sum /= static_cast<double>(tokens.size());
  return sum / sum.norm();
}

std::string caption_id(const std::string& caption) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(caption);
  return os.str();
}

const std::string& pick_caption(const CaptionRecord& rec, Rng& rng) {
  if (rec.caption_ids.empty()) throw Error("pick_caption: record '" + rec.sample_id + "' has no captions");
  return rec.caption_ids[static_cast<size_t>(rng.below(rec.caption_ids.size()))];
}

std::string caption_from_labels(const std::vector<std::string>& labels) {
  if (labels.empty()) throw Error("caption_from_labels: no labels");
  std::string s = "The sound of ";
  for (size_t i = 0; i < labels.size(); ++i) {
    if (i > 0) s += ", ";
    s += labels[i];
  }
  return s;
}

}  // namespace m2dclap::text
