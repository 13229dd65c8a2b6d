#include "nhgcat/layers.hpp"

#include "nhgcat/errors.hpp"

namespace nhgcat {

std::optional<RngStream> Context::stream(std::string_view site) const {
  if (!rng) return std::nullopt;
  return rng->derive(site);
}

Tensor Context::dropout(const Tensor& x, double p, std::string_view site) const {
  if (!training || p == 0.0) return x;
  if (!rng) throw UsageError("training-mode dropout needs a random stream");
  RngStream s = rng->derive(site);
  return nhgcat::dropout(x, p, &s, true);
}

Gate make_gate(ParamStore& store, const std::string& name, std::size_t dim, std::uint64_t seed) {
  return {make_linear(store, name, 2 * dim, dim, seed)};
}

GateResult apply_gate(const Gate& gate, Binder& bind, const Tensor& z1, const Tensor& z2) {
  if (z1.shape() != z2.shape())
    throw ShapeError("gate: operands " + to_string(z1.shape()) + " and " + to_string(z2.shape()) + " differ");
  Tensor g = sigmoid(apply_linear(gate.proj, bind, concat({z1, z2}, 1)));
  // g * z1 + (1 - g) * z2 written as z2 + g * (z1 - z2) keeps equal operands exact.
  Tensor fused = add(z2, mul(g, sub(z1, z2)));
  return {fused, g};
}

Tensor neighbour_mean_matrix(Tape& tape, const std::vector<std::vector<std::size_t>>& adjacency) {
  const std::size_t n = adjacency.size();
  std::vector<double> m(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (adjacency[i].empty()) {
      m[i * n + i] = 1.0;
      continue;
    }
    const double w = 1.0 / static_cast<double>(adjacency[i].size());
    for (std::size_t j : adjacency[i]) m[i * n + j] += w;
  }
  return tape.constant({n, n}, std::move(m));
}

std::vector<std::uint8_t> attention_mask(const std::vector<std::vector<std::size_t>>& adjacency) {
  const std::size_t n = adjacency.size();
  std::vector<std::uint8_t> mask(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    mask[i * n + i] = 1;
    for (std::size_t j : adjacency[i]) mask[i * n + j] = 1;
  }
  return mask;
}

MeanConv make_mean_conv(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                        std::uint64_t seed) {
  return {make_linear(store, name + "/self", in, out, seed), make_linear(store, name + "/neigh", in, out, seed, false)};
}

Tensor apply_mean_conv(const MeanConv& conv, Binder& bind, const Tensor& x, const Tensor& mean_op) {
  return add(apply_linear(conv.self, bind, x), apply_linear(conv.neigh, bind, matmul(mean_op, x)));
}

AttentionConv make_attention_conv(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                                  std::uint64_t seed) {
  AttentionConv c;
  c.proj = make_linear(store, name + "/proj", in, out, seed, false);
  c.att_src = store.add_uniform(name + "/att_src", {out, 1}, out, seed);
  c.att_dst = store.add_uniform(name + "/att_dst", {out, 1}, out, seed);
  c.bias = store.add_constant(name + "/bias", {1, out}, 0.0);
  return c;
}

AttentionConvResult apply_attention_conv(const AttentionConv& conv, Binder& bind, const Tensor& x,
                                         const std::vector<std::uint8_t>& mask) {
  Tensor h = apply_linear(conv.proj, bind, x);
  Tensor src = matmul(h, bind(conv.att_src));             // n x 1
  Tensor dst = transpose(matmul(h, bind(conv.att_dst)));  // 1 x n
  Tensor alpha = masked_softmax(leaky_relu(add(src, dst)), mask);
  return {add(matmul(alpha, h), bind(conv.bias)), alpha};
}

}  // namespace nhgcat
