#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "nhgcat/layers.hpp"

namespace nhgcat {

struct HcPoolingConfig {
  std::size_t input_dim = 8;  // width of the node embeddings coming in
  std::size_t dim = 32;
  std::size_t mix_hidden = 16;
  std::size_t depth = 3;  // hierarchy levels, 1..4
  double eps = 0.5;       // a node stays eligible for the next level while its assigned mass is below eps
  bool literal_tree = true;  // both W and U act on the child sum
};

struct TreeLstm {
  Linear w_i, u_i, w_o, u_o, w_u, u_u, u_f;
  bool literal = true;
};

TreeLstm make_tree_lstm(ParamStore& store, const std::string& name, std::size_t dim, bool literal,
                        std::uint64_t seed);

struct TreeState {
  Tensor h;  // 1 x d
  Tensor c;  // 1 x d
};

// One ChildSum step over the rows of children_h / children_c (k x d each).
// `input` is the node input x of the canonical formulation; the literal form
// ignores it.
TreeState childsum_step(const TreeLstm& cell, Binder& bind, const Tensor& children_h, const Tensor& children_c,
                        const Tensor* input = nullptr);

struct CircuitPooler {
  Linear mix1, mix2;  // pooled embedding -> 3 prior weights
  Linear gcn;
  std::vector<Linear> level_logits;  // depth - 1 selectors, d -> 2
  TreeLstm tree;
};

struct HcPooling {
  HcPoolingConfig config;
  std::array<CircuitPooler, kCircuitCount> circuits;
};

HcPooling make_hc_pooling(ParamStore& store, const HcPoolingConfig& config, std::uint64_t seed);

struct Adjacency {
  Tensor matrix;       // m x m
  Tensor mix_weights;  // 1 x 3 over (subject, MDD template, HC template)
};

Adjacency reconstruct_adjacency(const CircuitPooler& p, Binder& bind, const Tensor& z, const Matrix& a1,
                                const Matrix& a2, const Matrix& a3);

// leaky(D^-1/2 (A + I) D^-1/2 z W + b) with D_ii = 1 + sum_j |A_ij|.
Tensor gcn_embed(const Linear& layer, Binder& bind, const Tensor& z, const Tensor& adjacency);

// Returns `depth` mask columns as an m x depth tensor whose rows sum to one.
// rng == nullptr selects the noise-free relaxation (evaluation mode).
Tensor assign_levels(const std::vector<Linear>& selectors, Binder& bind, const Tensor& h, std::size_t depth,
                     double tau, double eps, RngStream* rng);

TreeState aggregate_bottom_up(const TreeLstm& tree, Binder& bind, const Tensor& h, const Tensor& masks);

// Squared Frobenius distance between A_c and the template of the given label.
Tensor adjacency_prior_loss(const Tensor& adjacency, const Matrix& template_block);

struct CircuitTrace {
  std::vector<std::size_t> regions;
  Tensor masks;  // m x depth
  Tensor mix_weights;
  Tensor adjacency;
};

struct PoolingResult {
  Tensor embeddings;  // 5 x d
  Tensor prior_loss;  // mean over circuits; invalid when no label was given
  std::array<CircuitTrace, kCircuitCount> trace;
};

// label < 0 skips the prior loss (inference).
PoolingResult pool_circuits(const HcPooling& m, Binder& bind, const Tensor& z_ve, const CircuitAtlas& atlas,
                            const GroupTemplates& templates, const Matrix& subject_fc, int label, double tau,
                            const Context& ctx);

}  // namespace nhgcat
