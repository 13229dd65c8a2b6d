#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace nhgcat {

class RngStream;

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid as long as the
// owning tape is alive and has not been cleared.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

  const Shape& shape() const;
  std::size_t size() const;
  // Two-dimensional view: rank 0/1 tensors are a single row, higher ranks
  // fold every leading extent into rows.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  // Zeros when the node was never reached by backward.
  std::span<const double> grad() const;
  double item() const;
  double at(std::size_t r, std::size_t c) const;
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode differentiation tape. Records are appended in evaluation order,
// which is a topological order; backward walks them once in reverse.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Shape shape, std::vector<double> values);
  Tensor variable(Shape shape, std::vector<double> values);
  Tensor scalar(double v) { return constant({1}, {v}); }

  // Appends an op record. `backward` is only invoked when some input needs
  // gradients, which the caller states via `requires_grad`.
  Tensor record(Shape shape, std::vector<double> values, bool requires_grad, BackwardFn backward);

  void backward(const Tensor& loss);
  void zero_grad();
  void clear();

  std::size_t size() const { return nodes_.size(); }
  const Shape& shape(std::size_t id) const { return nodes_[id].shape; }
  const std::vector<double>& value(std::size_t id) const { return nodes_[id].value; }
  std::vector<double>& mutable_value(std::size_t id) { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }
  // Lazily zero-initialised gradient buffer.
  std::vector<double>& grad(std::size_t id);
  std::span<const double> grad_view(std::size_t id) const;

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Op catalog. Every op checks its shape rule and throws ShapeError naming the
// offending extents. Binary elementwise ops broadcast on the 2-D view: each
// operand's rows/cols must match the other's or be 1.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor one_minus(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor pow(const Tensor& a, double p);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.2);

// Softmax along `axis` of the 2-D view (1 = within each row, 0 = within each
// column) of a / temperature. Masked-out entries (mask value 0) are exactly 0;
// a fully masked slice yields all zeros.
Tensor softmax(const Tensor& a, int axis = 1, double temperature = 1.0);
Tensor masked_softmax(const Tensor& a, std::span<const std::uint8_t> mask, int axis = 1,
                      double temperature = 1.0);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// Inverted dropout; identity when !training or p == 0.
Tensor dropout(const Tensor& x, double p, RngStream* rng, bool training);

Tensor concat(std::span<const Tensor> parts, int axis);
Tensor concat(std::initializer_list<Tensor> parts, int axis);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// Reductions. axis -1 reduces everything to shape {1}; axis 0 sums over rows
// producing 1 x cols; axis 1 sums within rows producing rows x 1.
Tensor sum(const Tensor& a, int axis = -1);
Tensor mean(const Tensor& a, int axis = -1);

// Sum of squared differences (squared Frobenius distance).
Tensor squared_error(const Tensor& a, const Tensor& b);
Tensor mse(const Tensor& a, const Tensor& b);
// Mean over rows of -log softmax(logits)[label].
Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const int> labels);
// Mean over rows of sum_j 0.5 * (exp(lv) + (mu - prior)^2 - 1 - lv).
Tensor gaussian_kl(const Tensor& mu, const Tensor& log_var, double prior_mean = 0.0);

// z = mu + exp(log_var / 2) * eps with eps ~ N(0, I) drawn from rng. Gradients
// reach mu and log_var only. log_var = -inf gives z = mu exactly.
Tensor sample_gaussian_reparam(const Tensor& mu, const Tensor& log_var, RngStream& rng);
// Same, with externally supplied noise (used for the shared-noise mode).
Tensor reparam_with_noise(const Tensor& mu, const Tensor& log_var, std::span<const double> eps);

// Row-wise Gumbel-Softmax. With rng == nullptr no noise is added (the
// deterministic relaxation). hard = straight-through one-hot.
Tensor sample_gumbel_softmax(const Tensor& logits, double tau, RngStream* rng, bool hard = false);
// Forward: one-hot of each row's argmax (lowest index on ties). Backward: identity.
Tensor straight_through_onehot(const Tensor& soft);

// Returns a constant copy of the value, cutting the gradient path.
Tensor detach(const Tensor& a);

// ---------------------------------------------------------------------------
// Uniform dispatch over the catalog, used by tooling and tests that iterate
// every op.

enum class OpKind {
  MatMul,
  Add,
  Sub,
  Mul,
  Div,
  Scale,
  Exp,
  Log,
  Abs,
  Pow,
  Sigmoid,
  Tanh,
  LeakyRelu,
  Softmax,
  LayerNorm,
  Dropout,
  Concat,
  GatherRows,
  SliceCols,
  Transpose,
  Sum,
  Mean,
  SquaredError,
  Mse,
  CrossEntropy,
  GaussianKl,
};

struct OpAttrs {
  int axis = 1;
  double temperature = 1.0;
  double slope = 0.2;
  double scalar = 1.0;
  double prior_mean = 0.0;
  double p = 0.0;
  bool training = false;
  RngStream* rng = nullptr;
  std::vector<std::size_t> indices;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::vector<int> labels;
};

OpKind parse_op_kind(std::string_view name);
std::string_view op_name(OpKind kind);
Tensor apply(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

}  // namespace nhgcat
