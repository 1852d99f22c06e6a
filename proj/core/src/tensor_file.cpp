#include "m2dclap/tensor_file.hpp"

#include "m2dclap/text_embed.hpp"

#include <cstring>
#include <fstream>

namespace m2dclap {

namespace {

template <typename T>
void put(std::vector<unsigned char>& b, T v) {
  unsigned char tmp[sizeof(T)];
  std::memcpy(tmp, &v, sizeof(T));
  b.insert(b.end(), tmp, tmp + sizeof(T));
}

struct Cursor {
  const std::vector<unsigned char>& b;
  size_t end;
  size_t pos = 0;

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b.data() + pos), n);
    pos += n;
    return s;
  }
  void need(size_t n) const {
    if (pos + n > end) throw FormatError("tensor file: truncated");
  }
};

}  // namespace

const Matrix& TensorFile::get(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw FormatError("tensor file: missing tensor " + name);
}

bool TensorFile::contains(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

void TensorFile::add_store(const std::string& group, const ParamStore& store, DType dtype) {
  for (const auto& e : store.entries()) tensors.push_back({group + "/" + e.name, e.value, dtype});
}

ParamStore TensorFile::store(const std::string& group, StoreRole role) const {
  ParamStore s(role);
  const std::string prefix = group + "/";
  for (const auto& t : tensors) {
    if (t.name.rfind(prefix, 0) == 0) s.add(t.name.substr(prefix.size()), t.value, role != StoreRole::Target);
  }
  return s;
}

void save_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  if (file.magic.size() != 4) throw Error("tensor file: magic must be 4 bytes");
  std::vector<unsigned char> b;
  b.insert(b.end(), file.magic.begin(), file.magic.end());
  put<uint32_t>(b, kTensorFileVersion);
  put<uint32_t>(b, static_cast<uint32_t>(file.header.size()));
  b.insert(b.end(), file.header.begin(), file.header.end());
  put<uint64_t>(b, file.tensors.size());
  for (const auto& t : file.tensors) {
    put<uint16_t>(b, static_cast<uint16_t>(t.name.size()));
    b.insert(b.end(), t.name.begin(), t.name.end());
    put<uint8_t>(b, static_cast<uint8_t>(t.dtype));
    put<uint8_t>(b, 2);
    put<uint64_t>(b, static_cast<uint64_t>(t.value.rows()));
    put<uint64_t>(b, static_cast<uint64_t>(t.value.cols()));
    for (Eigen::Index i = 0; i < t.value.size(); ++i) {
      const double v = t.value.data()[i];
      if (t.dtype == DType::F32) {
        put<float>(b, static_cast<float>(v));
      } else {
        put<double>(b, v);
      }
    }
  }
  put<uint32_t>(b, text::crc32(b.data(), b.size()));

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  }
  std::filesystem::rename(tmp, path);
}

TensorFile load_tensor_file(const std::filesystem::path& path, const std::string& expected_magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (b.size() < 16) throw FormatError("tensor file: truncated " + path.string());
  uint32_t stored;
  std::memcpy(&stored, b.data() + b.size() - 4, 4);
  if (text::crc32(b.data(), b.size() - 4) != stored) {
    throw FormatError("tensor file: checksum mismatch in " + path.string());
  }
  Cursor c{b, b.size() - 4};
  TensorFile f;
  f.magic = c.str(4);
  if (f.magic != expected_magic) {
    throw FormatError("tensor file: expected magic " + expected_magic + ", found " + f.magic);
  }
  const auto version = c.get<uint32_t>();
  if (version != kTensorFileVersion) throw FormatError("tensor file: unsupported version " + std::to_string(version));
  f.header = c.str(c.get<uint32_t>());
  const auto count = c.get<uint64_t>();
  for (uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = c.str(c.get<uint16_t>());
    const auto dtype = c.get<uint8_t>();
    if (dtype > 1) throw FormatError("tensor file: unknown dtype in " + t.name);
    t.dtype = static_cast<DType>(dtype);
    const auto ndim = c.get<uint8_t>();
    if (ndim != 2) throw FormatError("tensor file: only 2-D tensors are supported (" + t.name + ")");
    const auto rows = c.get<uint64_t>();
    const auto cols = c.get<uint64_t>();
    const size_t elem = t.dtype == DType::F32 ? 4 : 8;
    c.need(rows * cols * elem);
    t.value.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index k = 0; k < t.value.size(); ++k) {
      t.value.data()[k] = t.dtype == DType::F32 ? static_cast<double>(c.get<float>()) : c.get<double>();
    }
    f.tensors.push_back(std::move(t));
  }
  if (c.pos != c.end) throw FormatError("tensor file: trailing bytes in " + path.string());
  return f;
}

}  // namespace m2dclap
