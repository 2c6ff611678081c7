#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "normtune/nn/tensor.hpp"
#include "normtune/util/error.hpp"
#include "normtune/util/random.hpp"

namespace normtune::nn {

// A named trainable tensor. `trainable` is an element mask (1 = updated by
// the optimizer); an empty mask means every element is trainable.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  std::vector<std::uint8_t> trainable;

  void zero_grad() {
    if (grad.shape() != value.shape()) {
      grad = Tensor(value.shape());
    } else {
      grad.fill(0.0);
    }
  }

  bool is_trainable(std::size_t i) const { return trainable.empty() || trainable[i] != 0; }

  void freeze() { trainable.assign(value.size(), 0); }
  void unfreeze() { trainable.clear(); }
  bool fully_frozen() const {
    return !trainable.empty() && std::all_of(trainable.begin(), trainable.end(), [](auto m) { return m == 0; });
  }
};

// Ordered collection of uniquely named parameters. Insertion order is the
// serialization order of checkpoints.
class ParameterSet {
 public:
  Parameter& add(std::string name, Tensor value) {
    if (index_.count(name)) throw InvalidArgument("duplicate parameter name '" + name + "'");
    index_.emplace(name, params_.size());
    params_.push_back(Parameter{std::move(name), std::move(value), {}, {}});
    return params_.back();
  }

  Parameter& add_normal(std::string name, Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = stddev * rng.normal();
    return add(std::move(name), std::move(t));
  }

  Parameter& get(const std::string& name) { return params_[index_of(name)]; }
  const Parameter& get(const std::string& name) const { return params_[index_of(name)]; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }
  void freeze_all() {
    for (auto& p : params_) p.freeze();
  }
  void unfreeze_all() {
    for (auto& p : params_) p.unfreeze();
  }

  // Values only; gradients and masks are not compared.
  bool same_values(const ParameterSet& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name != other.params_[i].name || !(params_[i].value == other.params_[i].value)) return false;
    }
    return true;
  }

 private:
  std::size_t index_of(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace normtune::nn
