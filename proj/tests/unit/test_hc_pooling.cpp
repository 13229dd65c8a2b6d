#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "nhgcat/errors.hpp"
#include "nhgcat/gradcheck.hpp"
#include "nhgcat/hc_pooling.hpp"

using namespace nhgcat;
using nhgcat::testing::randomize;
using nhgcat::testing::small_cohort;
using nhgcat::testing::weighted_sum;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  RngStream rng(seed, "matrix");
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

Matrix symmetric(std::size_t n, std::uint64_t seed) {
  Matrix m = random_matrix(n, n, seed);
  return (m + m.transpose()).eval();
}

void set_linear(ParamStore& store, const Linear& l, double w, std::vector<double> bias) {
  std::fill(store[l.weight].value.begin(), store[l.weight].value.end(), w);
  if (l.has_bias) store[l.bias].value = std::move(bias);
}

HcPoolingConfig config(std::size_t depth = 3) {
  HcPoolingConfig c;
  c.input_dim = 8;
  c.dim = 12;
  c.depth = depth;
  return c;
}

Matrix permuted(const Matrix& m, const std::vector<std::size_t>& perm, bool cols) {
  Matrix out = m;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(perm[i]));
  }
  if (!cols) return out;
  Matrix both = out;
  for (std::size_t j = 0; j < perm.size(); ++j)
    both.col(static_cast<Eigen::Index>(j)) = out.col(static_cast<Eigen::Index>(perm[j]));
  return both;
}

}  // namespace

TEST(Adjacency, IdenticalPriorsAreReturned) {
  ParamStore store;
  HcPooling m = make_hc_pooling(store, config(), 1);
  randomize(store, 1.0, 2);
  Matrix a = symmetric(4, 3);
  Tape tape;
  Binder bind(tape, store);
  Adjacency adj = reconstruct_adjacency(m.circuits[0], bind, to_tensor(tape, random_matrix(4, 8, 4)), a, a, a);
  for (Eigen::Index i = 0; i < a.size(); ++i) EXPECT_NEAR(adj.matrix.values()[static_cast<std::size_t>(i)], a.data()[i], 1e-12);
}

TEST(Adjacency, SaturatedMixSelectsSubjectPrior) {
  ParamStore store;
  HcPooling m = make_hc_pooling(store, config(), 1);
  set_linear(store, m.circuits[0].mix2, 0.0, {60.0, -60.0, -60.0});
  Matrix a1 = symmetric(4, 5), a2 = symmetric(4, 6), a3 = symmetric(4, 7);
  Tape tape;
  Binder bind(tape, store);
  Adjacency adj = reconstruct_adjacency(m.circuits[0], bind, to_tensor(tape, random_matrix(4, 8, 8)), a1, a2, a3);
  for (Eigen::Index i = 0; i < a1.size(); ++i)
    EXPECT_NEAR(adj.matrix.values()[static_cast<std::size_t>(i)], a1.data()[i], 1e-12);
}

TEST(Adjacency, StaysInsidePriorEnvelopeAndSimplex) {
  ParamStore store;
  HcPooling m = make_hc_pooling(store, config(), 1);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    randomize(store, 3.0, seed);
    Matrix a1 = symmetric(5, 10 + seed), a2 = symmetric(5, 100 + seed), a3 = symmetric(5, 200 + seed);
    Tape tape;
    Binder bind(tape, store);
    Adjacency adj = reconstruct_adjacency(m.circuits[seed % kCircuitCount], bind,
                                          to_tensor(tape, random_matrix(5, 8, 300 + seed)), a1, a2, a3);
    double total = 0.0;
    for (double w : adj.mix_weights.values()) {
      EXPECT_GE(w, 0.0);
      EXPECT_LE(w, 1.0);
      total += w;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
    for (Eigen::Index i = 0; i < a1.size(); ++i) {
      const double lo = std::min({a1.data()[i], a2.data()[i], a3.data()[i]});
      const double hi = std::max({a1.data()[i], a2.data()[i], a3.data()[i]});
      const double v = adj.matrix.values()[static_cast<std::size_t>(i)];
      EXPECT_GE(v, lo - 1e-12);
      EXPECT_LE(v, hi + 1e-12);
    }
  }
}

TEST(Adjacency, RejectsMismatchedPriors) {
  ParamStore store;
  HcPooling m = make_hc_pooling(store, config(), 1);
  Tape tape;
  Binder bind(tape, store);
  EXPECT_THROW(reconstruct_adjacency(m.circuits[0], bind, to_tensor(tape, random_matrix(4, 8, 1)), symmetric(4, 1),
                                     symmetric(3, 2), symmetric(4, 3)),
               ShapeError);
}

TEST(Gcn, ZeroAdjacencyIsAffinePlusActivation) {
  ParamStore store;
  Linear layer = make_linear(store, "gcn", 8, 12, 3);
  Matrix z = random_matrix(4, 8, 9);
  Tape tape;
  Binder bind(tape, store);
  Tensor zt = to_tensor(tape, z);
  Tensor h = gcn_embed(layer, bind, zt, tape.constant({4, 4}, std::vector<double>(16, 0.0)));
  Tensor expected = leaky_relu(apply_linear(layer, bind, zt));
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(h.values()[i], expected.values()[i], 1e-14);
}

TEST(Gcn, RegularGraphWithIdenticalFeaturesIsSymmetric) {
  ParamStore store;
  Linear layer = make_linear(store, "gcn", 8, 12, 3);
  // Ring on five nodes: every node has degree two.
  std::vector<double> ring(25, 0.0);
  for (std::size_t i = 0; i < 5; ++i) {
    ring[i * 5 + (i + 1) % 5] = 0.7;
    ring[i * 5 + (i + 4) % 5] = 0.7;
  }
  Matrix row = random_matrix(1, 8, 10);
  Tape tape;
  Binder bind(tape, store);
  Tensor h = gcn_embed(layer, bind, to_tensor(tape, row.replicate(5, 1)), tape.constant({5, 5}, ring));
  for (std::size_t i = 1; i < 5; ++i)
    for (std::size_t c = 0; c < 12; ++c) EXPECT_NEAR(h.at(i, c), h.at(0, c), 1e-14);
}

TEST(Gcn, GradientMatchesFiniteDifferences) {
  ParamStore store;
  Linear layer = make_linear(store, "gcn", 8, 12, 3);
  Matrix z = random_matrix(5, 8, 11), a = symmetric(5, 12);
  auto loss = [&](Tape& tape, Binder& bind) {
    return weighted_sum(tape, gcn_embed(layer, bind, to_tensor(tape, z), to_tensor(tape, a)), 5);
  };
  for (const auto& check : check_param_gradients(loss, store, 20, 1e-5, 1))
    EXPECT_LT(check.result.max_rel_error, 1e-4) << check.name;
  // And with respect to the adjacency itself.
  std::vector<double> av(a.data(), a.data() + a.size());
  ParamStore layer_only = store;
  auto f = [&](Tape& tape, const Tensor& adj) {
    Binder bind(tape, layer_only);
    return weighted_sum(tape, gcn_embed(layer, bind, to_tensor(tape, z), adj), 5);
  };
  EXPECT_LT(grad_check(f, {5, 5}, av).max_rel_error, 1e-4);
}

TEST(Levels, SaturatedFirstSelectorPutsEverythingOnLevelOne) {
  ParamStore store;
  HcPooling m = make_hc_pooling(store, config(), 1);
  const auto& sel = m.circuits[0].level_logits;
  set_linear(store, sel[0], 0.0, {60.0, -60.0});
  Tape tape;
  Binder bind(tape, store);
  Tensor masks = assign_levels(sel, bind, to_tensor(tape, random_matrix(6, 12, 3)), 3, 0.5, 0.5, nullptr);
  ASSERT_EQ(masks.cols(), 3u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(masks.at(i, 0), 1.0, 1e-12);
    EXPECT_NEAR(masks.at(i, 1), 0.0, 1e-12);
    EXPECT_NEAR(masks.at(i, 2), 0.0, 1e-12);
  }
}

TEST(Levels, MasksPartitionUnity) {
  for (std::size_t depth = 1; depth <= 4; ++depth) {
    ParamStore store;
    HcPooling m = make_hc_pooling(store, config(depth), depth);
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      randomize(store, 2.0, seed);
      Tape tape;
      Binder bind(tape, store);
      RngStream rng(seed, "levels");
      const double tau = 0.2 + 0.05 * static_cast<double>(seed);
      Tensor masks = assign_levels(m.circuits[0].level_logits, bind, to_tensor(tape, random_matrix(7, 12, seed)),
                                   depth, tau, 0.5, seed % 2 ? &rng : nullptr);
      ASSERT_EQ(masks.cols(), depth);
      for (std::size_t i = 0; i < masks.rows(); ++i) {
        double s = 0.0;
        for (std::size_t l = 0; l < depth; ++l) {
          EXPECT_GE(masks.at(i, l), 0.0);
          EXPECT_LE(masks.at(i, l), 1.0);
          s += masks.at(i, l);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
    }
  }
}

TEST(Levels, ThresholdControlsEligibility) {
  ParamStore store;
  HcPooling m = make_hc_pooling(store, config(), 1);
  randomize(store, 1.0, 4);
  Matrix h = random_matrix(8, 12, 5);
  Tape tape;
  Binder bind(tape, store);
  // eps = 1: first-level mass is always below one, so every node reaches level 2.
  Tensor open = assign_levels(m.circuits[0].level_logits, bind, to_tensor(tape, h), 3, 0.7, 1.0, nullptr);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_GT(open.at(i, 1), 0.0);
  // A tiny threshold excludes every node that already holds more than it.
  Tensor closed = assign_levels(m.circuits[0].level_logits, bind, to_tensor(tape, h), 3, 0.7, 1e-9, nullptr);
  for (std::size_t i = 0; i < 8; ++i) {
    ASSERT_GT(closed.at(i, 0), 1e-9);
    EXPECT_EQ(closed.at(i, 1), 0.0);
  }
}

TEST(Levels, NonPositiveTemperatureRejected) {
  ParamStore store;
  HcPooling m = make_hc_pooling(store, config(), 1);
  Tape tape;
  Binder bind(tape, store);
  Tensor h = to_tensor(tape, random_matrix(3, 12, 1));
  EXPECT_THROW(assign_levels(m.circuits[0].level_logits, bind, h, 3, 0.0, 0.5, nullptr), ShapeError);
  EXPECT_THROW(assign_levels(m.circuits[0].level_logits, bind, h, 3, -1.0, 0.5, nullptr), ShapeError);
}

TEST(Levels, ConfigRejectsOutOfRangeDepthAndThreshold) {
  ParamStore store;
  EXPECT_THROW(make_hc_pooling(store, config(0), 1), UsageError);
  EXPECT_THROW(make_hc_pooling(store, config(5), 1), UsageError);
  HcPoolingConfig c = config();
  c.eps = 0.0;
  EXPECT_THROW(make_hc_pooling(store, c, 1), UsageError);
}

TEST(ChildSum, ZeroChildrenWithZeroBiasesGiveZero) {
  ParamStore store;
  TreeLstm cell = make_tree_lstm(store, "tree", 6, true, 2);
  for (auto& p : store)
    if (p.name.ends_with("/bias")) std::fill(p.value.begin(), p.value.end(), 0.0);
  Tape tape;
  Binder bind(tape, store);
  Tensor zero = tape.constant({3, 6}, std::vector<double>(18, 0.0));
  TreeState s = childsum_step(cell, bind, zero, zero);
  for (double v : s.h.values()) EXPECT_EQ(v, 0.0);
  for (double v : s.c.values()) EXPECT_EQ(v, 0.0);
}

TEST(ChildSum, ChildOrderDoesNotMatter) {
  ParamStore store;
  TreeLstm cell = make_tree_lstm(store, "tree", 6, true, 2);
  Matrix h = random_matrix(4, 6, 3), c = random_matrix(4, 6, 4);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  Tape tape;
  Binder bind(tape, store);
  TreeState a = childsum_step(cell, bind, to_tensor(tape, h), to_tensor(tape, c));
  TreeState b = childsum_step(cell, bind, to_tensor(tape, permuted(h, perm, false)),
                              to_tensor(tape, permuted(c, perm, false)));
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(a.h.values()[i], b.h.values()[i], 1e-14);
    EXPECT_NEAR(a.c.values()[i], b.c.values()[i], 1e-14);
  }
}

TEST(ChildSum, HalfWeightDuplicatesMatchSingleChild) {
  ParamStore store;
  TreeLstm cell = make_tree_lstm(store, "tree", 6, true, 2);
  Matrix h = random_matrix(1, 6, 5);
  Matrix halves(2, 6);
  halves.row(0) = 0.5 * h.row(0);
  halves.row(1) = 0.5 * h.row(0);
  Tape tape;
  Binder bind(tape, store);
  // Zero cell states: the forget gates multiply zeros, so h depends on the
  // child sum alone.
  TreeState one = childsum_step(cell, bind, to_tensor(tape, h), tape.constant({1, 6}, std::vector<double>(6, 0.0)));
  TreeState two =
      childsum_step(cell, bind, to_tensor(tape, halves), tape.constant({2, 6}, std::vector<double>(12, 0.0)));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(one.h.values()[i], two.h.values()[i], 1e-15);
}

TEST(ChildSum, CanonicalFormUsesSeparateInput) {
  ParamStore store;
  TreeLstm literal = make_tree_lstm(store, "lit", 4, true, 2);
  TreeLstm canonical = literal;
  canonical.literal = false;
  Matrix h = random_matrix(3, 4, 6), x = random_matrix(1, 4, 7);
  Tape tape;
  Binder bind(tape, store);
  Tensor zero = tape.constant({3, 4}, std::vector<double>(12, 0.0));
  Tensor xt = to_tensor(tape, x);
  TreeState a = childsum_step(literal, bind, to_tensor(tape, h), zero, &xt);
  TreeState b = childsum_step(canonical, bind, to_tensor(tape, h), zero, &xt);
  TreeState c = childsum_step(literal, bind, to_tensor(tape, h), zero);
  EXPECT_NE(std::vector<double>(a.h.values().begin(), a.h.values().end()),
            std::vector<double>(b.h.values().begin(), b.h.values().end()));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(a.h.values()[i], c.h.values()[i]);
}

TEST(ChildSum, RejectsMismatchedStates) {
  ParamStore store;
  TreeLstm cell = make_tree_lstm(store, "tree", 4, true, 2);
  Tape tape;
  Binder bind(tape, store);
  EXPECT_THROW(childsum_step(cell, bind, tape.constant({2, 4}, std::vector<double>(8, 0.0)),
                             tape.constant({3, 4}, std::vector<double>(12, 0.0))),
               ShapeError);
}

TEST(Aggregate, NodePermutationLeavesRootUnchanged) {
  ParamStore store;
  HcPooling m = make_hc_pooling(store, config(), 1);
  randomize(store, 0.5, 8);
  Matrix h = random_matrix(6, 12, 9);
  RngStream rng(3, "masks");
  Matrix masks(6, 3);
  for (Eigen::Index i = 0; i < 6; ++i) {
    double a = rng.uniform(), b = (1.0 - a) * rng.uniform();
    masks.row(i) << a, b, 1.0 - a - b;
  }
  const std::vector<std::size_t> perm{5, 3, 1, 0, 2, 4};
  Tape tape;
  Binder bind(tape, store);
  TreeState a = aggregate_bottom_up(m.circuits[0].tree, bind, to_tensor(tape, h), to_tensor(tape, masks));
  TreeState b = aggregate_bottom_up(m.circuits[0].tree, bind, to_tensor(tape, permuted(h, perm, false)),
                                    to_tensor(tape, permuted(masks, perm, false)));
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(a.h.values()[i], b.h.values()[i], 1e-13);
}

TEST(Aggregate, AllMassOnLevelOneUsesOnlyThoseRows) {
  ParamStore store;
  HcPooling m = make_hc_pooling(store, config(), 1);
  randomize(store, 0.5, 10);
  const TreeLstm& tree = m.circuits[1].tree;
  Matrix h = random_matrix(5, 12, 11);
  Matrix masks = Matrix::Zero(5, 3);
  masks.col(0).setOnes();
  Tape tape;
  Binder bind(tape, store);
  TreeState root = aggregate_bottom_up(tree, bind, to_tensor(tape, h), to_tensor(tape, masks));
  // Manual chain: levels 3 and 2 contribute zero rows only.
  Tensor zero_rows = tape.constant({5, 12}, std::vector<double>(60, 0.0));
  TreeState s = childsum_step(tree, bind, zero_rows, zero_rows);
  s = childsum_step(tree, bind, concat({s.h, zero_rows}, 0), concat({s.c, zero_rows}, 0));
  s = childsum_step(tree, bind, concat({s.h, to_tensor(tape, h)}, 0), concat({s.c, zero_rows}, 0));
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(root.h.values()[i], s.h.values()[i], 1e-14);
}

TEST(Aggregate, TreeGradientMatchesFiniteDifferences) {
  ParamStore store;
  HcPooling m = make_hc_pooling(store, config(), 1);
  randomize(store, 0.5, 12);
  Matrix h = random_matrix(5, 12, 13);
  Matrix masks(5, 3);
  masks << 0.6, 0.3, 0.1, 0.2, 0.2, 0.6, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4, 0.9, 0.05, 0.05;
  auto loss = [&](Tape& tape, Binder& bind) {
    return weighted_sum(tape, aggregate_bottom_up(m.circuits[2].tree, bind, to_tensor(tape, h), to_tensor(tape, masks)).h,
                        6);
  };
  for (const auto& check : check_param_gradients(loss, store, 6, 1e-5, 2))
    if (check.name.starts_with("hc/FPN/tree")) EXPECT_LT(check.result.max_rel_error, 1e-4) << check.name;
}

TEST(PriorLoss, ExamplesAndPermutationInvariance) {
  Matrix t = symmetric(2, 14);
  Tape tape;
  EXPECT_EQ(adjacency_prior_loss(to_tensor(tape, t), t).item(), 0.0);
  Matrix shifted = t.array() + 1.0;
  EXPECT_DOUBLE_EQ(adjacency_prior_loss(to_tensor(tape, shifted), t).item(), 4.0);

  Matrix a = symmetric(5, 15), b = symmetric(5, 16);
  const std::vector<std::size_t> perm{3, 0, 4, 2, 1};
  EXPECT_NEAR(adjacency_prior_loss(to_tensor(tape, a), b).item(),
              adjacency_prior_loss(to_tensor(tape, permuted(a, perm, true)), permuted(b, perm, true)).item(), 1e-12);
}

namespace {

struct PoolFixture {
  nhgcat::testing::SmallCohort s = small_cohort(21);
  ParamStore store;
  HcPooling m;
  Matrix z;

  explicit PoolFixture(std::size_t depth = 3) {
    HcPoolingConfig c = config(depth);
    m = make_hc_pooling(store, c, 3);
    z = random_matrix(s.cohort.regions(), c.input_dim, 17);
  }
};

}  // namespace

TEST(Pool, ProducesOneEmbeddingPerCircuit) {
  PoolFixture f;
  Tape tape;
  Binder bind(tape, f.store);
  PoolingResult r = pool_circuits(f.m, bind, to_tensor(tape, f.z), f.s.cohort.atlas, f.s.templates,
                                  f.s.features[0].fc, 1, 1.0, Context{});
  EXPECT_EQ(r.embeddings.rows(), kCircuitCount);
  EXPECT_EQ(r.embeddings.cols(), 12u);
  EXPECT_TRUE(r.prior_loss.valid());
  PoolingResult unlabeled = pool_circuits(f.m, bind, to_tensor(tape, f.z), f.s.cohort.atlas, f.s.templates,
                                          f.s.features[0].fc, -1, 1.0, Context{});
  EXPECT_FALSE(unlabeled.prior_loss.valid());
  for (std::size_t i = 0; i < r.embeddings.size(); ++i)
    EXPECT_EQ(r.embeddings.values()[i], unlabeled.embeddings.values()[i]);
}

TEST(Pool, WithinCircuitPermutationLeavesEmbeddingsUnchanged) {
  PoolFixture f;
  const CircuitAtlas& atlas = f.s.cohort.atlas;
  const auto& members = atlas.members(Circuit::SN);
  ASSERT_GE(members.size(), 3u);
  // Region permutation that reverses the SN members and fixes the rest.
  std::vector<std::size_t> perm(atlas.regions());
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = 0; i < members.size(); ++i) perm[members[i]] = members[members.size() - 1 - i];

  Tape tape;
  Binder bind(tape, f.store);
  const Matrix& fc = f.s.features[0].fc;
  PoolingResult a =
      pool_circuits(f.m, bind, to_tensor(tape, f.z), atlas, f.s.templates, fc, 0, 1.0, Context{});
  GroupTemplates pt{permuted(f.s.templates.mdd, perm, true), permuted(f.s.templates.hc, perm, true)};
  PoolingResult b = pool_circuits(f.m, bind, to_tensor(tape, permuted(f.z, perm, false)), atlas, pt,
                                  permuted(fc, perm, true), 0, 1.0, Context{});
  for (std::size_t i = 0; i < a.embeddings.size(); ++i) EXPECT_NEAR(a.embeddings.values()[i], b.embeddings.values()[i], 1e-12);
  EXPECT_NEAR(a.prior_loss.item(), b.prior_loss.item(), 1e-12);
}

TEST(Pool, DepthOneIsOneChildSumOverTheCircuit) {
  PoolFixture f(1);
  Tape tape;
  Binder bind(tape, f.store);
  Tensor z = to_tensor(tape, f.z);
  PoolingResult r =
      pool_circuits(f.m, bind, z, f.s.cohort.atlas, f.s.templates, f.s.features[0].fc, -1, 1.0, Context{});
  for (Circuit c : kCircuits) {
    const auto ci = static_cast<std::size_t>(c);
    const auto& pooler = f.m.circuits[ci];
    const auto& trace = r.trace[ci];
    EXPECT_EQ(trace.masks.cols(), 1u);
    for (double v : trace.masks.values()) EXPECT_EQ(v, 1.0);
    Tensor h = gcn_embed(pooler.gcn, bind, gather_rows(z, trace.regions), trace.adjacency);
    Tensor zeros = tape.constant(h.shape(), std::vector<double>(h.size(), 0.0));
    TreeState expected = childsum_step(pooler.tree, bind, h, zeros);
    for (std::size_t k = 0; k < 12; ++k) EXPECT_NEAR(r.embeddings.at(ci, k), expected.h.values()[k], 1e-14);
  }
}

TEST(Pool, TrainingModeMasksPartitionUnity) {
  PoolFixture f;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Tape tape;
    Binder bind(tape, f.store);
    RngStream stream(seed, "pool");
    Context ctx{true, &stream};
    PoolingResult r = pool_circuits(f.m, bind, to_tensor(tape, f.z), f.s.cohort.atlas, f.s.templates,
                                    f.s.features[seed % f.s.features.size()].fc, 1, 0.5, ctx);
    for (const auto& t : r.trace)
      for (std::size_t i = 0; i < t.masks.rows(); ++i)
        EXPECT_NEAR(t.masks.at(i, 0) + t.masks.at(i, 1) + t.masks.at(i, 2), 1.0, 1e-12);
  }
}

TEST(Pool, ForwardAndLossGradientMatchesFiniteDifferences) {
  PoolFixture f;
  randomize(f.store, 0.4, 22);
  auto loss = [&](Tape& tape, Binder& bind) {
    RngStream stream(4, "pool-gradcheck");
    Context ctx{true, &stream};
    PoolingResult r = pool_circuits(f.m, bind, to_tensor(tape, f.z), f.s.cohort.atlas, f.s.templates,
                                    f.s.features[0].fc, 1, 0.7, ctx);
    return add(weighted_sum(tape, r.embeddings, 7), r.prior_loss);
  };
  double worst = 0.0;
  std::string name;
  for (const auto& check : check_param_gradients(loss, f.store, 3, 1e-5, 5))
    if (check.result.max_rel_error > worst) {
      worst = check.result.max_rel_error;
      name = check.name;
    }
  EXPECT_LT(worst, 1e-4) << name;
}
