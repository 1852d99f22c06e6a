#pragma once

#include "m2dclap/common.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace m2dclap {

enum class StoreRole { Online, Target, Gradient };

const char* to_string(StoreRole role);

// Ordered collection of named parameter matrices. Insertion order is the
// iteration order, which keeps serialization and reductions deterministic.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Matrix value;
    bool trainable = true;
  };

  explicit ParamStore(StoreRole role = StoreRole::Online) : role_(role) {}

  StoreRole role() const { return role_; }
  void set_role(StoreRole role) { role_ = role; }

  Matrix& add(const std::string& name, Eigen::Index rows, Eigen::Index cols, bool trainable = true);
  Matrix& add(const std::string& name, Matrix value, bool trainable = true);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Matrix& at(const std::string& name);
  const Matrix& at(const std::string& name) const;

  bool trainable(const std::string& name) const;
  // Sets the flag on every tensor whose name starts with `prefix`. Returns the
  // number of tensors touched.
  int set_trainable(const std::string& prefix, bool trainable);

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  size_t size() const { return entries_.size(); }

  size_t parameter_count() const;

  // Same names/shapes, zero values, gradient role.
  ParamStore zeros_like() const;
  // New store restricted to names with the given prefix.
  ParamStore subset(const std::string& prefix) const;

  // this += scale * other; shapes must match entry by entry.
  void add_scaled(const ParamStore& other, double scale);
  void set_zero();
  bool all_finite() const;
  bool same_layout(const ParamStore& other) const;

  // Max absolute elementwise difference; stores must share a layout.
  double max_abs_diff(const ParamStore& other) const;

 private:
  StoreRole role_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace m2dclap
