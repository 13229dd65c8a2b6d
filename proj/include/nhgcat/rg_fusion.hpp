#pragma once

#include <cstdint>
#include <vector>

#include "nhgcat/layers.hpp"

namespace nhgcat {

struct RgFusionConfig {
  std::size_t timepoints = 120;
  std::size_t static_width = 21;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t ve_hidden = 16;
  std::size_t ve_latent = 8;
  double dropout = 0.2;
  double feature_temperature = 0.1;
  double node_temperature = 0.1;
};

// One post-norm encoder block; regions are the sequence axis and there is no
// positional encoding.
struct TransformerBlock {
  Linear embed;  // T -> d
  Linear query, key, value, out;
  ParamId ln1_gamma = 0, ln1_beta = 0;
  Linear ffn1, ffn2;
  ParamId ln2_gamma = 0, ln2_beta = 0;
  std::size_t heads = 4;
};

struct TwoStageAttention {
  Linear feature;  // d -> d logits per node
  Linear node;     // d -> 1 logit per node
  double feature_temperature = 0.1;
  double node_temperature = 0.1;
};

struct VariationalEncoder {
  Linear hidden;
  Linear mu;
  Linear log_var;
};

struct RgFusion {
  RgFusionConfig config;
  TransformerBlock transformer;
  Linear static_proj;  // X1 -> d, input to the graph encoder
  MeanConv mean_conv;
  AttentionConv attn_conv;
  Linear merge;  // 2d -> d after the dual-path convolutions
  Linear mlp1, mlp2;
  Gate static_gate;
  AttentionConv static_conv;
  TwoStageAttention two_stage;
  Gate final_gate;
  VariationalEncoder encoder;
};

RgFusion make_rg_fusion(ParamStore& store, const RgFusionConfig& config, std::uint64_t seed);

struct TransformerResult {
  Tensor out;                       // n x d
  std::vector<Tensor> attention;    // one n x n matrix per head
};

TransformerResult transformer_encode(const TransformerBlock& block, Binder& bind, const Tensor& x_temporal,
                                     const Context& ctx, double dropout);

// Graph inputs for one subject.
struct GraphOperators {
  Tensor mean_op;
  std::vector<std::uint8_t> mask;
};

GraphOperators graph_operators(Tape& tape, const BrainGraph& graph);

Tensor graph_encode(const RgFusion& m, Binder& bind, const Tensor& x_static, const Tensor& h_temp,
                    const GraphOperators& ops, const Context& ctx);
Tensor static_encode(const RgFusion& m, Binder& bind, const Tensor& x_static, const Tensor& h_temp,
                     const GraphOperators& ops, const Context& ctx);

struct TwoStageResult {
  Tensor out;
  Tensor feature_weights;  // n x d, rows sum to 1
  Tensor node_weights;     // n x 1, sums to 1
};

TwoStageResult two_stage_attention(const TwoStageAttention& att, Binder& bind, const Tensor& h);

struct VariationalResult {
  Tensor mu;
  Tensor log_var;
  Tensor z;
  Tensor kl;  // summed over latent dims, averaged over nodes
};

VariationalResult variational_encode(const VariationalEncoder& enc, Binder& bind, const Tensor& x, const Context& ctx);

struct NodeEmbeddings {
  Tensor h_temp, z_temp, z_static, h_attn, h_final, z_final, z_ve;
  Tensor mu, log_var;
  Tensor kl;
};

NodeEmbeddings rg_fusion_forward(const RgFusion& m, Binder& bind, const SubjectFeatures& subject,
                                 const BrainGraph& graph, const Context& ctx);

}  // namespace nhgcat
