#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "nhgcat/tensor.hpp"

namespace nhgcat {

struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
};

using ParamId = std::size_t;

// Owns every learnable tensor of a model. Modules refer to entries by id, so a
// store (and therefore a whole model) is a copyable value.
class ParamStore {
 public:
  ParamId add(std::string name, Shape shape, std::vector<double> value);
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) drawn from a stream keyed by name.
  ParamId add_uniform(std::string name, Shape shape, std::size_t fan_in, std::uint64_t seed);
  ParamId add_constant(std::string name, Shape shape, double v);

  Parameter& operator[](ParamId id) { return params_[id]; }
  const Parameter& operator[](ParamId id) const { return params_[id]; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  ParamId find(const std::string& name) const;  // throws UsageError when absent
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  void zero_grad();
  double grad_norm() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, ParamId> index_;
};

// Binds parameters onto one tape as differentiable leaves, created on first
// use so unused parameters cost nothing.
class Binder {
 public:
  Binder(Tape& tape, const ParamStore& store);

  Tensor operator()(ParamId id);
  Tape& tape() { return tape_; }
  const ParamStore& store() const { return store_; }

  // Adds leaf gradients into store grads (after tape.backward).
  void accumulate_grads(ParamStore& target) const;

 private:
  Tape& tape_;
  const ParamStore& store_;
  std::vector<std::size_t> leaf_;  // tape id + 1, 0 = unbound
};

// Affine map x W + b with W stored in_dim x out_dim.
struct Linear {
  ParamId weight = 0;
  ParamId bias = 0;
  bool has_bias = true;
  std::size_t in = 0;
  std::size_t out = 0;
};

Linear make_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                   std::uint64_t seed, bool bias = true);
Tensor apply_linear(const Linear& layer, Binder& bind, const Tensor& x);

}  // namespace nhgcat
