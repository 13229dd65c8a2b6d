#include "nhgcat/rg_fusion.hpp"

#include <cmath>

#include "nhgcat/errors.hpp"

namespace nhgcat {

namespace {

ParamId ones(ParamStore& store, const std::string& name, std::size_t dim) {
  return store.add_constant(name, {1, dim}, 1.0);
}

ParamId zeros(ParamStore& store, const std::string& name, std::size_t dim) {
  return store.add_constant(name, {1, dim}, 0.0);
}

void check_finite(const Tensor& t, const char* what) {
  for (double v : t.values())
    if (!std::isfinite(v)) throw DataError(std::string(what) + " contains non-finite values");
}

}  // namespace

RgFusion make_rg_fusion(ParamStore& store, const RgFusionConfig& c, std::uint64_t seed) {
  if (c.dim % c.heads != 0) throw UsageError("model dim must be divisible by the number of heads");
  const std::size_t d = c.dim;
  RgFusion m;
  m.config = c;
  auto& t = m.transformer;
  t.heads = c.heads;
  t.embed = make_linear(store, "rg/transformer/embed", c.timepoints, d, seed);
  t.query = make_linear(store, "rg/transformer/query", d, d, seed);
  t.key = make_linear(store, "rg/transformer/key", d, d, seed);
  t.value = make_linear(store, "rg/transformer/value", d, d, seed);
  t.out = make_linear(store, "rg/transformer/out", d, d, seed);
  t.ln1_gamma = ones(store, "rg/transformer/ln1.gamma", d);
  t.ln1_beta = zeros(store, "rg/transformer/ln1.beta", d);
  t.ffn1 = make_linear(store, "rg/transformer/ffn1", d, 2 * d, seed);
  t.ffn2 = make_linear(store, "rg/transformer/ffn2", 2 * d, d, seed);
  t.ln2_gamma = ones(store, "rg/transformer/ln2.gamma", d);
  t.ln2_beta = zeros(store, "rg/transformer/ln2.beta", d);

  m.static_proj = make_linear(store, "rg/graph/static_proj", c.static_width, d, seed);
  m.mean_conv = make_mean_conv(store, "rg/graph/mean_conv", 2 * d, d, seed);
  m.attn_conv = make_attention_conv(store, "rg/graph/attn_conv", 2 * d, d, seed);
  m.merge = make_linear(store, "rg/graph/merge", 2 * d, d, seed);

  m.mlp1 = make_linear(store, "rg/static/mlp1", c.static_width, d, seed);
  m.mlp2 = make_linear(store, "rg/static/mlp2", d, d, seed);
  m.static_gate = make_gate(store, "rg/static/gate", d, seed);
  m.static_conv = make_attention_conv(store, "rg/static/attn_conv", d, d, seed);

  m.two_stage.feature = make_linear(store, "rg/attention/feature", d, d, seed);
  m.two_stage.node = make_linear(store, "rg/attention/node", d, 1, seed);
  m.two_stage.feature_temperature = c.feature_temperature;
  m.two_stage.node_temperature = c.node_temperature;
  m.final_gate = make_gate(store, "rg/final_gate", d, seed);

  m.encoder.hidden = make_linear(store, "rg/ve/hidden", 2 * d, c.ve_hidden, seed);
  m.encoder.mu = make_linear(store, "rg/ve/mu", c.ve_hidden, c.ve_latent, seed);
  m.encoder.log_var = make_linear(store, "rg/ve/log_var", c.ve_hidden, c.ve_latent, seed);
  return m;
}

TransformerResult transformer_encode(const TransformerBlock& b, Binder& bind, const Tensor& x, const Context& ctx,
                                     double dropout) {
  check_finite(x, "temporal input");
  Tensor e = apply_linear(b.embed, bind, x);
  const std::size_t d = b.query.out, dh = d / b.heads;
  Tensor q = apply_linear(b.query, bind, e);
  Tensor k = apply_linear(b.key, bind, e);
  Tensor v = apply_linear(b.value, bind, e);
  TransformerResult r;
  std::vector<Tensor> heads;
  const double scale_by = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t h = 0; h < b.heads; ++h) {
    const std::size_t lo = h * dh, hi = lo + dh;
    Tensor scores = scale(matmul(slice_cols(q, lo, hi), transpose(slice_cols(k, lo, hi))), scale_by);
    Tensor a = softmax(scores, 1);
    r.attention.push_back(a);
    heads.push_back(matmul(a, slice_cols(v, lo, hi)));
  }
  Tensor attended = ctx.dropout(apply_linear(b.out, bind, concat(heads, 1)), dropout, "rg/transformer/attn");
  Tensor e1 = layer_norm(add(e, attended), bind(b.ln1_gamma), bind(b.ln1_beta));
  Tensor f = apply_linear(b.ffn2, bind, leaky_relu(apply_linear(b.ffn1, bind, e1)));
  f = ctx.dropout(f, dropout, "rg/transformer/ffn");
  r.out = layer_norm(add(e1, f), bind(b.ln2_gamma), bind(b.ln2_beta));
  return r;
}

GraphOperators graph_operators(Tape& tape, const BrainGraph& graph) {
  auto adj = graph.adjacency();
  return {neighbour_mean_matrix(tape, adj), attention_mask(adj)};
}

Tensor graph_encode(const RgFusion& m, Binder& bind, const Tensor& x_static, const Tensor& h_temp,
                    const GraphOperators& ops, const Context& ctx) {
  Tensor projected = leaky_relu(apply_linear(m.static_proj, bind, x_static));
  Tensor h2 = concat({projected, h_temp}, 1);
  Tensor mean_path = leaky_relu(apply_mean_conv(m.mean_conv, bind, h2, ops.mean_op));
  Tensor attn_path = leaky_relu(apply_attention_conv(m.attn_conv, bind, h2, ops.mask).out);
  mean_path = ctx.dropout(mean_path, m.config.dropout, "rg/graph/mean_conv");
  attn_path = ctx.dropout(attn_path, m.config.dropout, "rg/graph/attn_conv");
  return apply_linear(m.merge, bind, concat({mean_path, attn_path}, 1));
}

Tensor static_encode(const RgFusion& m, Binder& bind, const Tensor& x_static, const Tensor& h_temp,
                     const GraphOperators& ops, const Context& ctx) {
  Tensor s = leaky_relu(apply_linear(m.mlp1, bind, x_static));
  s = leaky_relu(apply_linear(m.mlp2, bind, s));
  Tensor gated = apply_gate(m.static_gate, bind, s, h_temp).fused;
  Tensor out = leaky_relu(apply_attention_conv(m.static_conv, bind, gated, ops.mask).out);
  return ctx.dropout(out, m.config.dropout, "rg/static/attn_conv");
}

TwoStageResult two_stage_attention(const TwoStageAttention& att, Binder& bind, const Tensor& h) {
  TwoStageResult r;
  // Feature stage: per-node softmax over features; the weighted feature mean
  // of each node is added back to that node's row.
  r.feature_weights = softmax(apply_linear(att.feature, bind, h), 1, att.feature_temperature);
  Tensor hf = add(h, sum(mul(r.feature_weights, h), 1));  // n x 1 broadcast over columns
  // Node stage: softmax over nodes; the weighted node mean is added back to
  // every node.
  r.node_weights = softmax(apply_linear(att.node, bind, hf), 0, att.node_temperature);
  Tensor summary = matmul(transpose(r.node_weights), hf);  // 1 x d
  r.out = add(hf, summary);
  return r;
}

VariationalResult variational_encode(const VariationalEncoder& enc, Binder& bind, const Tensor& x,
                                     const Context& ctx) {
  check_finite(x, "variational encoder input");
  VariationalResult r;
  Tensor h = leaky_relu(apply_linear(enc.hidden, bind, x));
  r.mu = apply_linear(enc.mu, bind, h);
  r.log_var = apply_linear(enc.log_var, bind, h);
  if (ctx.training) {
    RngStream s = *ctx.stream("rg/ve");
    r.z = sample_gaussian_reparam(r.mu, r.log_var, s);
  } else {
    r.z = r.mu;
  }
  r.kl = gaussian_kl(r.mu, r.log_var);
  return r;
}

NodeEmbeddings rg_fusion_forward(const RgFusion& m, Binder& bind, const SubjectFeatures& subject,
                                 const BrainGraph& graph, const Context& ctx) {
  Tape& tape = bind.tape();
  Tensor x_static = to_tensor(tape, subject.x_static);
  Tensor x_temporal = to_tensor(tape, subject.x_temporal);
  GraphOperators ops = graph_operators(tape, graph);

  NodeEmbeddings e;
  e.h_temp = transformer_encode(m.transformer, bind, x_temporal, ctx, m.config.dropout).out;
  e.z_temp = graph_encode(m, bind, x_static, e.h_temp, ops, ctx);
  e.z_static = static_encode(m, bind, x_static, e.h_temp, ops, ctx);
  e.h_attn = ctx.dropout(two_stage_attention(m.two_stage, bind, e.h_temp).out, m.config.dropout, "rg/attention");
  e.h_final = apply_gate(m.final_gate, bind, e.z_temp, e.h_attn).fused;
  e.z_final = concat({e.h_final, e.z_static}, 1);
  VariationalResult v = variational_encode(m.encoder, bind, e.z_final, ctx);
  e.mu = v.mu;
  e.log_var = v.log_var;
  e.z_ve = v.z;
  e.kl = v.kl;
  return e;
}

}  // namespace nhgcat
