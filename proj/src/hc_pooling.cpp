#include "nhgcat/hc_pooling.hpp"

#include <string>

#include "nhgcat/errors.hpp"

namespace nhgcat {

namespace {

std::vector<double> block(const Matrix& m, const std::vector<std::size_t>& idx) {
  std::vector<double> out;
  out.reserve(idx.size() * idx.size());
  for (std::size_t i : idx)
    for (std::size_t j : idx) out.push_back(m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
  return out;
}

Tensor zeros(Tape& tape, std::size_t rows, std::size_t cols) {
  return tape.constant({rows, cols}, std::vector<double>(rows * cols, 0.0));
}

}  // namespace

TreeLstm make_tree_lstm(ParamStore& store, const std::string& name, std::size_t dim, bool literal,
                        std::uint64_t seed) {
  TreeLstm t;
  t.literal = literal;
  t.w_i = make_linear(store, name + "/w_i", dim, dim, seed);
  t.u_i = make_linear(store, name + "/u_i", dim, dim, seed, false);
  t.w_o = make_linear(store, name + "/w_o", dim, dim, seed);
  t.u_o = make_linear(store, name + "/u_o", dim, dim, seed, false);
  t.w_u = make_linear(store, name + "/w_u", dim, dim, seed);
  t.u_u = make_linear(store, name + "/u_u", dim, dim, seed, false);
  t.u_f = make_linear(store, name + "/u_f", dim, dim, seed);
  return t;
}

TreeState childsum_step(const TreeLstm& cell, Binder& bind, const Tensor& children_h, const Tensor& children_c,
                        const Tensor* input) {
  if (children_h.shape() != children_c.shape())
    throw ShapeError("childsum_step: hidden " + to_string(children_h.shape()) + " vs cell " +
                     to_string(children_c.shape()));
  Tensor h_sum = sum(children_h, 0);
  const Tensor& x = (cell.literal || input == nullptr) ? h_sum : *input;
  auto gate = [&](const Linear& w, const Linear& u) {
    return add(apply_linear(w, bind, x), apply_linear(u, bind, h_sum));
  };
  Tensor i = sigmoid(gate(cell.w_i, cell.u_i));
  Tensor o = sigmoid(gate(cell.w_o, cell.u_o));
  Tensor u = tanh(gate(cell.w_u, cell.u_u));
  Tensor f = sigmoid(apply_linear(cell.u_f, bind, children_h));
  Tensor c = add(mul(i, u), sum(mul(f, children_c), 0));
  return {mul(o, tanh(c)), c};
}

HcPooling make_hc_pooling(ParamStore& store, const HcPoolingConfig& config, std::uint64_t seed) {
  if (config.depth < 1 || config.depth > 4) throw UsageError("hierarchy depth must be between 1 and 4");
  if (!(config.eps > 0.0 && config.eps <= 1.0)) throw UsageError("level threshold eps must lie in (0, 1]");
  HcPooling m;
  m.config = config;
  for (Circuit c : kCircuits) {
    const std::string name = "hc/" + std::string(circuit_name(c));
    auto& p = m.circuits[static_cast<std::size_t>(c)];
    p.mix1 = make_linear(store, name + "/mix1", config.input_dim, config.mix_hidden, seed);
    p.mix2 = make_linear(store, name + "/mix2", config.mix_hidden, 3, seed);
    p.gcn = make_linear(store, name + "/gcn", config.input_dim, config.dim, seed);
    for (std::size_t l = 1; l < config.depth; ++l)
      p.level_logits.push_back(make_linear(store, name + "/level" + std::to_string(l), config.dim, 2, seed));
    p.tree = make_tree_lstm(store, name + "/tree", config.dim, config.literal_tree, seed);
  }
  return m;
}

Adjacency reconstruct_adjacency(const CircuitPooler& p, Binder& bind, const Tensor& z, const Matrix& a1,
                                const Matrix& a2, const Matrix& a3) {
  const auto m = static_cast<std::size_t>(a1.rows());
  if (a2.rows() != a1.rows() || a3.rows() != a1.rows() || z.rows() != m)
    throw ShapeError("reconstruct_adjacency: priors and embeddings disagree on the node count");
  Tensor pooled = mean(z, 0);
  Tensor logits = apply_linear(p.mix2, bind, leaky_relu(apply_linear(p.mix1, bind, pooled)));
  Adjacency out;
  out.mix_weights = softmax(logits, 1);
  std::vector<double> stacked;
  stacked.reserve(3 * m * m);
  for (const Matrix* a : {&a1, &a2, &a3}) stacked.insert(stacked.end(), a->data(), a->data() + m * m);
  Tensor priors = bind.tape().constant({3, m * m}, std::move(stacked));
  out.matrix = reshape(matmul(out.mix_weights, priors), {m, m});
  return out;
}

Tensor gcn_embed(const Linear& layer, Binder& bind, const Tensor& z, const Tensor& adjacency) {
  const std::size_t m = adjacency.rows();
  std::vector<double> eye(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) eye[i * m + i] = 1.0;
  Tensor with_loops = add(adjacency, bind.tape().constant({m, m}, std::move(eye)));
  Tensor degree = add_scalar(sum(abs(adjacency), 1), 1.0);
  Tensor inv_sqrt = pow(degree, -0.5);
  Tensor normalized = mul(mul(with_loops, inv_sqrt), transpose(inv_sqrt));
  return leaky_relu(apply_linear(layer, bind, matmul(normalized, z)));
}

Tensor assign_levels(const std::vector<Linear>& selectors, Binder& bind, const Tensor& h, std::size_t depth,
                     double tau, double eps, RngStream* rng) {
  if (!(tau > 0.0)) throw ShapeError("assign_levels: temperature must be positive");
  if (selectors.size() + 1 < depth) throw ShapeError("assign_levels: not enough level selectors for the depth");
  Tape& tape = bind.tape();
  const std::size_t m = h.rows();
  Tensor ones = tape.constant({m, 1}, std::vector<double>(m, 1.0));
  if (depth == 1) return ones;
  std::vector<Tensor> masks;
  Tensor assigned = zeros(tape, m, 1);
  for (std::size_t l = 0; l + 1 < depth; ++l) {
    std::optional<RngStream> noise;
    if (rng) noise = rng->derive("level" + std::to_string(l + 1));
    Tensor g = sample_gumbel_softmax(apply_linear(selectors[l], bind, h), tau, noise ? &*noise : nullptr);
    Tensor selected = slice_cols(g, 0, 1);
    Tensor level;
    if (l == 0) {
      level = selected;
    } else {
      // Nodes already holding at least eps of their mass sit out this level.
      std::vector<double> eligible(m);
      for (std::size_t i = 0; i < m; ++i) eligible[i] = assigned.values()[i] < eps ? 1.0 : 0.0;
      level = mul(mul(one_minus(assigned), selected), tape.constant({m, 1}, std::move(eligible)));
    }
    masks.push_back(level);
    assigned = l == 0 ? level : add(assigned, level);
  }
  masks.push_back(one_minus(assigned));
  return concat(masks, 1);
}

TreeState aggregate_bottom_up(const TreeLstm& tree, Binder& bind, const Tensor& h, const Tensor& masks) {
  Tape& tape = bind.tape();
  const std::size_t depth = masks.cols(), m = h.rows(), d = h.cols();
  Tensor cell_zero = zeros(tape, m, d);  // node cell states start at zero
  auto level_rows = [&](std::size_t l) { return mul(h, slice_cols(masks, l, l + 1)); };
  Tensor lowest = level_rows(depth - 1);
  Tensor x = mean(lowest, 0);
  TreeState state = childsum_step(tree, bind, lowest, cell_zero, &x);
  for (std::size_t l = depth - 1; l-- > 0;) {
    Tensor rows = level_rows(l);
    Tensor input = mean(rows, 0);
    state = childsum_step(tree, bind, concat({state.h, rows}, 0), concat({state.c, cell_zero}, 0), &input);
  }
  return state;
}

Tensor adjacency_prior_loss(const Tensor& adjacency, const Matrix& template_block) {
  const auto m = static_cast<std::size_t>(template_block.rows());
  Tensor target = adjacency.tape().constant({m, m}, std::vector<double>(template_block.data(),
                                                                        template_block.data() + m * m));
  return squared_error(adjacency, target);
}

PoolingResult pool_circuits(const HcPooling& model, Binder& bind, const Tensor& z_ve, const CircuitAtlas& atlas,
                            const GroupTemplates& templates, const Matrix& subject_fc, int label, double tau,
                            const Context& ctx) {
  if (atlas.regions() != z_ve.rows())
    throw ShapeError("pool_circuits: atlas has " + std::to_string(atlas.regions()) + " regions, embeddings have " +
                     std::to_string(z_ve.rows()));
  PoolingResult r;
  std::vector<Tensor> roots, priors;
  for (Circuit c : kCircuits) {
    const auto ci = static_cast<std::size_t>(c);
    const auto& pooler = model.circuits[ci];
    const auto& regions = atlas.members(c);
    const auto m = static_cast<Eigen::Index>(regions.size());
    auto as_matrix = [&](const Matrix& full) {
      auto v = block(full, regions);
      return Matrix(Eigen::Map<Matrix>(v.data(), m, m));
    };
    const Matrix a1 = as_matrix(subject_fc), a2 = as_matrix(templates.mdd), a3 = as_matrix(templates.hc);

    Tensor z = gather_rows(z_ve, regions);
    Adjacency adj = reconstruct_adjacency(pooler, bind, z, a1, a2, a3);
    Tensor h = gcn_embed(pooler.gcn, bind, z, adj.matrix);
    std::optional<RngStream> noise;
    if (ctx.training) noise = ctx.stream("hc/" + std::string(circuit_name(c)));
    Tensor masks = assign_levels(pooler.level_logits, bind, h, model.config.depth, tau, model.config.eps,
                                 noise ? &*noise : nullptr);
    roots.push_back(aggregate_bottom_up(pooler.tree, bind, h, masks).h);
    if (label >= 0) priors.push_back(adjacency_prior_loss(adj.matrix, label == 1 ? a2 : a3));
    r.trace[ci] = {regions, masks, adj.mix_weights, adj.matrix};
  }
  r.embeddings = concat(roots, 0);
  if (!priors.empty()) r.prior_loss = mean(concat(priors, 0));
  return r;
}

}  // namespace nhgcat
