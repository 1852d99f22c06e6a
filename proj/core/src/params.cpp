#include "m2dclap/params.hpp"

#include <cmath>

namespace m2dclap {

const char* to_string(StoreRole role) {
  switch (role) {
    case StoreRole::Online: return "online";
    case StoreRole::Target: return "target";
    case StoreRole::Gradient: return "gradient";
  }
  return "?";
}

Matrix& ParamStore::add(const std::string& name, Eigen::Index rows, Eigen::Index cols, bool trainable) {
  return add(name, Matrix::Zero(rows, cols), trainable);
}

Matrix& ParamStore::add(const std::string& name, Matrix value, bool trainable) {
  if (contains(name)) throw Error("ParamStore: duplicate tensor " + name);
  index_.emplace(name, entries_.size());
  entries_.push_back({name, std::move(value), trainable});
  return entries_.back().value;
}

Matrix& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("ParamStore: no tensor named " + name);
  return entries_[it->second].value;
}

const Matrix& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("ParamStore: no tensor named " + name);
  return entries_[it->second].value;
}

bool ParamStore::trainable(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("ParamStore: no tensor named " + name);
  return role_ != StoreRole::Target && entries_[it->second].trainable;
}

int ParamStore::set_trainable(const std::string& prefix, bool trainable) {
  int n = 0;
  for (auto& e : entries_) {
    if (e.name.rfind(prefix, 0) == 0) {
      e.trainable = trainable;
      ++n;
    }
  }
  return n;
}

size_t ParamStore::parameter_count() const {
  size_t n = 0;
  for (const auto& e : entries_) n += static_cast<size_t>(e.value.size());
  return n;
}

ParamStore ParamStore::zeros_like() const {
  ParamStore g(StoreRole::Gradient);
  for (const auto& e : entries_) g.add(e.name, Matrix::Zero(e.value.rows(), e.value.cols()), e.trainable);
  return g;
}

ParamStore ParamStore::subset(const std::string& prefix) const {
  ParamStore s(role_);
  for (const auto& e : entries_) {
    if (e.name.rfind(prefix, 0) == 0) s.add(e.name, e.value, e.trainable);
  }
  return s;
}

void ParamStore::add_scaled(const ParamStore& other, double scale) {
  if (!same_layout(other)) throw ShapeError("ParamStore::add_scaled: layout mismatch");
  for (size_t i = 0; i < entries_.size(); ++i) entries_[i].value += scale * other.entries_[i].value;
}

void ParamStore::set_zero() {
  for (auto& e : entries_) e.value.setZero();
}

bool ParamStore::all_finite() const {
  for (const auto& e : entries_) {
    if (!e.value.allFinite()) return false;
  }
  return true;
}

bool ParamStore::same_layout(const ParamStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) return false;
  }
  return true;
}

double ParamStore::max_abs_diff(const ParamStore& other) const {
  if (!same_layout(other)) throw ShapeError("ParamStore::max_abs_diff: layout mismatch");
  double m = 0.0;
  for (size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].value.size() == 0) continue;
    m = std::max(m, (entries_[i].value - other.entries_[i].value).cwiseAbs().maxCoeff());
  }
  return m;
}

}  // namespace m2dclap
