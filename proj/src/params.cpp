#include "nhgcat/params.hpp"

#include <cmath>

#include "nhgcat/errors.hpp"
#include "nhgcat/rng.hpp"

namespace nhgcat {

ParamId ParamStore::add(std::string name, Shape shape, std::vector<double> value) {
  if (index_.count(name)) throw UsageError("parameter '" + name + "' registered twice");
  if (numel(shape) != value.size()) throw ShapeError("parameter '" + name + "': value size mismatch");
  const ParamId id = params_.size();
  index_.emplace(name, id);
  Parameter p;
  p.name = std::move(name);
  p.grad.assign(value.size(), 0.0);
  p.shape = std::move(shape);
  p.value = std::move(value);
  params_.push_back(std::move(p));
  return id;
}

ParamId ParamStore::add_uniform(std::string name, Shape shape, std::size_t fan_in, std::uint64_t seed) {
  RngStream rng(seed, "init/" + name);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = (2.0 * rng.uniform() - 1.0) * bound;
  return add(std::move(name), std::move(shape), std::move(v));
}

ParamId ParamStore::add_constant(std::string name, Shape shape, double v) {
  std::vector<double> values(numel(shape), v);
  return add(std::move(name), std::move(shape), std::move(values));
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

ParamId ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("no parameter named '" + name + "'");
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), 0.0);
}

double ParamStore::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_)
    for (double g : p.grad) s += g * g;
  return std::sqrt(s);
}

Binder::Binder(Tape& tape, const ParamStore& store) : tape_(tape), store_(store), leaf_(store.size(), 0) {}

Tensor Binder::operator()(ParamId id) {
  if (id >= leaf_.size()) throw UsageError("parameter id " + std::to_string(id) + " out of range");
  if (leaf_[id] == 0) {
    const Parameter& p = store_[id];
    leaf_[id] = tape_.variable(p.shape, p.value).id() + 1;
  }
  return Tensor(&tape_, leaf_[id] - 1);
}

void Binder::accumulate_grads(ParamStore& target) const {
  for (std::size_t id = 0; id < leaf_.size(); ++id) {
    if (leaf_[id] == 0) continue;
    const auto g = tape_.grad_view(leaf_[id] - 1);
    auto& dst = target[id].grad;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }
}

Linear make_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                   std::uint64_t seed, bool bias) {
  Linear l;
  l.in = in;
  l.out = out;
  l.has_bias = bias;
  l.weight = store.add_uniform(name + ".weight", {in, out}, in, seed);
  if (bias) l.bias = store.add_constant(name + ".bias", {1, out}, 0.0);
  return l;
}

Tensor apply_linear(const Linear& layer, Binder& bind, const Tensor& x) {
  Tensor y = matmul(x, bind(layer.weight));
  return layer.has_bias ? add(y, bind(layer.bias)) : y;
}

}  // namespace nhgcat
