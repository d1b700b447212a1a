#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "stf/tape.hpp"
#include "stf/tensor.hpp"

namespace stf {

// Named parameter registry. Owns the tensors, their Adam moments, and the
// per-tensor frozen flag. Iteration order is registration order, which makes
// initialization and checkpoint layout deterministic.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> adam_m, adam_v;
    bool frozen = false;
  };

  Tensor<T>& add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw std::invalid_argument("param already registered: " + name);
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, std::move(init), {}, {}, false});
    return entries_.back().value;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Entry& entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown param: " + name);
    return entries_[it->second];
  }
  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown param: " + name);
    return entries_[it->second];
  }

  Tensor<T>& value(const std::string& name) { return entry(name).value; }
  const Tensor<T>& value(const std::string& name) const { return entry(name).value; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }

  // Marks every parameter whose name starts with `prefix`.
  void set_frozen_prefix(const std::string& prefix, bool frozen) {
    bool any = false;
    for (Entry& e : entries_)
      if (e.name.rfind(prefix, 0) == 0) {
        e.frozen = frozen;
        any = true;
      }
    if (!any) throw std::out_of_range("no params under prefix: " + prefix);
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

// Leaf vars for every parameter of one training step.
template <typename T>
struct VarMap {
  std::unordered_map<std::string, Var> vars;

  static VarMap bind(Tape<T>& tp, ParamStore<T>& store) {
    VarMap vm;
    for (auto& e : store.entries()) vm.vars[e.name] = tp.leaf(e.value);
    return vm;
  }

  Var operator()(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw std::out_of_range("unbound param: " + name);
    return it->second;
  }
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

// He-uniform for conv kernels [Cout,Cin,k,k] and dense weights [Cout,Cin].
template <typename T>
Tensor<T> he_uniform(std::vector<int> shape, std::mt19937_64& rng) {
  std::int64_t fan_in = 1;
  for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::int64_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(dist(rng));
  return t;
}

}  // namespace stf
