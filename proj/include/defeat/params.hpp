#pragma once

#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "defeat/errors.hpp"

namespace defeat {

struct ParamArray {
  std::string name;
  std::vector<int> shape;
  std::vector<double> data;

  std::span<double> span() { return data; }
  std::span<const double> span() const { return data; }
};

/// Ordered collection of uniquely named parameter arrays. Also used to hold
/// gradients (same layout as the parameters they belong to).
class ParamStore {
 public:
  std::size_t add(const std::string& name, std::vector<int> shape) {
    if (index_.count(name)) throw ContractViolation("duplicate parameter name " + name);
    const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                                          [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
    index_.emplace(name, arrays_.size());
    arrays_.push_back({name, std::move(shape), std::vector<double>(n, 0.0)});
    return arrays_.size() - 1;
  }

  std::size_t find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractViolation("unknown parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  ParamArray& operator[](std::size_t i) { return arrays_[i]; }
  const ParamArray& operator[](std::size_t i) const { return arrays_[i]; }
  ParamArray& at(const std::string& name) { return arrays_[find(name)]; }
  const ParamArray& at(const std::string& name) const { return arrays_[find(name)]; }

  std::size_t size() const { return arrays_.size(); }
  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& a : arrays_) n += a.data.size();
    return n;
  }

  ParamStore zeros_like() const {
    ParamStore out = *this;
    for (auto& a : out.arrays_) std::fill(a.data.begin(), a.data.end(), 0.0);
    return out;
  }
  void zero() {
    for (auto& a : arrays_) std::fill(a.data.begin(), a.data.end(), 0.0);
  }

  auto begin() { return arrays_.begin(); }
  auto end() { return arrays_.end(); }
  auto begin() const { return arrays_.begin(); }
  auto end() const { return arrays_.end(); }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.arrays_.size() != b.arrays_.size()) return false;
    for (std::size_t i = 0; i < a.arrays_.size(); ++i) {
      if (a.arrays_[i].name != b.arrays_[i].name || a.arrays_[i].shape != b.arrays_[i].shape ||
          a.arrays_[i].data != b.arrays_[i].data)
        return false;
    }
    return true;
  }

 private:
  std::vector<ParamArray> arrays_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace defeat
