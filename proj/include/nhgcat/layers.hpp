#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nhgcat/data.hpp"
#include "nhgcat/params.hpp"
#include "nhgcat/rng.hpp"
#include "nhgcat/tensor.hpp"

namespace nhgcat {

// Per-forward settings shared by every module. Random draws come from child
// streams of `rng` labelled by call site, so results do not depend on the order
// in which modules run.
struct Context {
  bool training = false;
  const RngStream* rng = nullptr;

  std::optional<RngStream> stream(std::string_view site) const;
  Tensor dropout(const Tensor& x, double p, std::string_view site) const;
};

// G = sigmoid([z1 | z2] W + b); out = G * z1 + (1 - G) * z2.
struct Gate {
  Linear proj;
};

Gate make_gate(ParamStore& store, const std::string& name, std::size_t dim, std::uint64_t seed);

struct GateResult {
  Tensor fused;
  Tensor weight;  // G
};

GateResult apply_gate(const Gate& gate, Binder& bind, const Tensor& z1, const Tensor& z2);

// Row-normalised neighbour-mean operator. A node without neighbours averages
// over itself only.
Tensor neighbour_mean_matrix(Tape& tape, const std::vector<std::vector<std::size_t>>& adjacency);

// Neighbour set plus self loop, row-major n x n, for masked attention.
std::vector<std::uint8_t> attention_mask(const std::vector<std::vector<std::size_t>>& adjacency);

// Mean-aggregation convolution: x W_self + mean_{j in N(i)} x_j W_neigh + b.
struct MeanConv {
  Linear self;
  Linear neigh;
};

MeanConv make_mean_conv(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                        std::uint64_t seed);
Tensor apply_mean_conv(const MeanConv& conv, Binder& bind, const Tensor& x, const Tensor& mean_op);

// Single-head graph attention: e_ij = leaky(a_src . Wx_i + a_dst . Wx_j) over
// j in N(i) plus i, softmax per row, out = alpha (x W) + b.
struct AttentionConv {
  Linear proj;  // no bias
  ParamId att_src = 0;
  ParamId att_dst = 0;
  ParamId bias = 0;
};

AttentionConv make_attention_conv(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                                  std::uint64_t seed);

struct AttentionConvResult {
  Tensor out;
  Tensor alpha;
};

AttentionConvResult apply_attention_conv(const AttentionConv& conv, Binder& bind, const Tensor& x,
                                         const std::vector<std::uint8_t>& mask);

}  // namespace nhgcat
