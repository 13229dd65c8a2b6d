#include "nhgcat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Core>

#include "nhgcat/errors.hpp"
#include "nhgcat/rng.hpp"

namespace nhgcat {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

struct View {
  std::size_t rows;
  std::size_t cols;
};

View view_of(const Shape& s) {
  if (s.empty()) return {1, 1};
  if (s.size() == 1) return {1, s[0]};
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
  return {r, s.back()};
}

[[noreturn]] void shape_fail(std::string_view op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void require_same_tape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (!a.valid() || !b.valid()) shape_fail(op, "invalid tensor handle");
  if (&a.tape() != &b.tape()) shape_fail(op, "operands live on different tapes");
}

template <class F>
Tensor unary(std::string_view op, const Tensor& a, F&& f, std::function<double(double, double)> dfdx) {
  if (!a.valid()) shape_fail(op, "invalid tensor handle");
  Tape& tape = a.tape();
  const auto& av = tape.value(a.id());
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const std::size_t aid = a.id();
  return tape.record(tape.shape(aid), std::move(out), a.requires_grad(),
                     [aid, dfdx](Tape& t, std::size_t self) {
                       const auto& x = t.value(aid);
                       const auto& y = t.value(self);
                       const auto& g = t.grad(self);
                       auto& ga = t.grad(aid);
                       for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
                     });
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(std::string_view op, BinOp kind, const Tensor& a, const Tensor& b) {
  require_same_tape(op, a, b);
  Tape& tape = a.tape();
  const View va = view_of(a.shape());
  const View vb = view_of(b.shape());
  const bool rows_ok = va.rows == vb.rows || va.rows == 1 || vb.rows == 1;
  const bool cols_ok = va.cols == vb.cols || va.cols == 1 || vb.cols == 1;
  if (!rows_ok || !cols_ok)
    shape_fail(op, "cannot broadcast " + to_string(a.shape()) + " with " + to_string(b.shape()));
  const std::size_t R = std::max(va.rows, vb.rows);
  const std::size_t C = std::max(va.cols, vb.cols);
  Shape out_shape;
  if (va.rows == R && va.cols == C)
    out_shape = a.shape();
  else if (vb.rows == R && vb.cols == C)
    out_shape = b.shape();
  else
    out_shape = {R, C};

  const auto& x = tape.value(a.id());
  const auto& y = tape.value(b.id());
  std::vector<double> out(R * C);
  const bool ar = va.rows == R, ac = va.cols == C, br = vb.rows == R, bc = vb.cols == C;
  for (std::size_t r = 0; r < R; ++r) {
    const std::size_t ra = ar ? r : 0, rb = br ? r : 0;
    for (std::size_t c = 0; c < C; ++c) {
      const double u = x[ra * va.cols + (ac ? c : 0)];
      const double v = y[rb * vb.cols + (bc ? c : 0)];
      double o = 0.0;
      switch (kind) {
        case BinOp::Add: o = u + v; break;
        case BinOp::Sub: o = u - v; break;
        case BinOp::Mul: o = u * v; break;
        case BinOp::Div: o = u / v; break;
      }
      out[r * C + c] = o;
    }
  }
  const std::size_t aid = a.id(), bid = b.id();
  const bool ga_needed = a.requires_grad(), gb_needed = b.requires_grad();
  return tape.record(
      std::move(out_shape), std::move(out), ga_needed || gb_needed,
      [=](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& xv = t.value(aid);
        const auto& yv = t.value(bid);
        std::vector<double>* gx = ga_needed ? &t.grad(aid) : nullptr;
        std::vector<double>* gy = gb_needed ? &t.grad(bid) : nullptr;
        for (std::size_t r = 0; r < R; ++r) {
          const std::size_t ra = ar ? r : 0, rb = br ? r : 0;
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t ia = ra * va.cols + (ac ? c : 0);
            const std::size_t ib = rb * vb.cols + (bc ? c : 0);
            const double go = g[r * C + c];
            switch (kind) {
              case BinOp::Add:
                if (gx) (*gx)[ia] += go;
                if (gy) (*gy)[ib] += go;
                break;
              case BinOp::Sub:
                if (gx) (*gx)[ia] += go;
                if (gy) (*gy)[ib] -= go;
                break;
              case BinOp::Mul:
                if (gx) (*gx)[ia] += go * yv[ib];
                if (gy) (*gy)[ib] += go * xv[ia];
                break;
              case BinOp::Div:
                if (gx) (*gx)[ia] += go / yv[ib];
                if (gy) (*gy)[ib] -= go * xv[ia] / (yv[ib] * yv[ib]);
                break;
            }
          }
        }
      });
}

// Iterates the 1-D slices a softmax along `axis` runs over.
struct SliceGeometry {
  std::size_t count;
  std::size_t length;
  std::size_t stride;      // step between elements of one slice
  std::size_t slice_step;  // step between slice starts
  std::size_t offset(std::size_t s) const { return s * slice_step; }
};

SliceGeometry slices_for(const View& v, int axis, std::string_view op) {
  if (axis == 1) return {v.rows, v.cols, 1, v.cols};
  if (axis == 0) return {v.cols, v.rows, v.cols, 1};
  shape_fail(op, "axis must be 0 or 1, got " + std::to_string(axis));
}

Tensor softmax_impl(std::string_view op, const Tensor& a, const std::uint8_t* mask, int axis,
                    double temperature) {
  if (!a.valid()) shape_fail(op, "invalid tensor handle");
  if (!(temperature > 0.0)) shape_fail(op, "temperature must be > 0");
  Tape& tape = a.tape();
  const View v = view_of(a.shape());
  const SliceGeometry geo = slices_for(v, axis, op);
  const auto& x = tape.value(a.id());
  std::vector<double> out(x.size(), 0.0);
  std::vector<std::uint8_t> keep;
  if (mask) keep.assign(mask, mask + x.size());
  for (std::size_t s = 0; s < geo.count; ++s) {
    const std::size_t base = geo.offset(s);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < geo.length; ++i) {
      const std::size_t k = base + i * geo.stride;
      if (!mask || keep[k]) mx = std::max(mx, x[k]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) continue;
    double z = 0.0;
    for (std::size_t i = 0; i < geo.length; ++i) {
      const std::size_t k = base + i * geo.stride;
      if (mask && !keep[k]) continue;
      out[k] = std::exp((x[k] - mx) / temperature);
      z += out[k];
    }
    for (std::size_t i = 0; i < geo.length; ++i) out[base + i * geo.stride] /= z;
  }
  const std::size_t aid = a.id();
  return tape.record(tape.shape(aid), std::move(out), a.requires_grad(),
                     [aid, geo, temperature](Tape& t, std::size_t self) {
                       const auto& y = t.value(self);
                       const auto& g = t.grad(self);
                       auto& ga = t.grad(aid);
                       for (std::size_t s = 0; s < geo.count; ++s) {
                         const std::size_t base = geo.offset(s);
                         double dot = 0.0;
                         for (std::size_t i = 0; i < geo.length; ++i) {
                           const std::size_t k = base + i * geo.stride;
                           dot += g[k] * y[k];
                         }
                         for (std::size_t i = 0; i < geo.length; ++i) {
                           const std::size_t k = base + i * geo.stride;
                           ga[k] += y[k] * (g[k] - dot) / temperature;
                         }
                       }
                     });
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

const Shape& Tensor::shape() const { return tape_->shape(id_); }
std::size_t Tensor::size() const { return tape_->value(id_).size(); }
std::size_t Tensor::rows() const { return view_of(shape()).rows; }
std::size_t Tensor::cols() const { return view_of(shape()).cols; }
std::span<const double> Tensor::values() const { return tape_->value(id_); }
std::span<const double> Tensor::grad() const { return tape_->grad_view(id_); }
bool Tensor::requires_grad() const { return tape_->requires_grad(id_); }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
  return values()[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return values()[r * cols() + c]; }

Tensor Tape::constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size())
    throw ShapeError("constant: shape " + to_string(shape) + " does not hold " + std::to_string(values.size()) +
                     " values");
  for (auto e : shape)
    if (e == 0) throw ShapeError("constant: zero extent in " + to_string(shape));
  return record(std::move(shape), std::move(values), false, nullptr);
}

Tensor Tape::variable(Shape shape, std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  nodes_[t.id()].requires_grad = true;
  return t;
}

Tensor Tape::record(Shape shape, std::vector<double> values, bool requires_grad, BackwardFn backward) {
  Node node;
  node.shape = std::move(shape);
  node.value = std::move(values);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Tensor(this, nodes_.size() - 1);
}

std::vector<double>& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

std::span<const double> Tape::grad_view(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.grad.empty()) {
    static thread_local std::vector<double> zeros;
    zeros.assign(n.value.size(), 0.0);
    return zeros;
  }
  return n.grad;
}

void Tape::backward(const Tensor& loss) {
  if (&loss.tape() != this) throw ShapeError("backward: loss belongs to another tape");
  if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got " + to_string(loss.shape()));
  zero_grad();
  grad(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
  }
  for (auto& n : nodes_)
    if (n.requires_grad && n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
}

void Tape::zero_grad() {
  for (auto& n : nodes_) n.grad.clear();
}

void Tape::clear() { nodes_.clear(); }

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_tape("matmul", a, b);
  const View va = view_of(a.shape()), vb = view_of(b.shape());
  if (a.shape().size() > 2 || b.shape().size() > 2)
    shape_fail("matmul", "operands must have rank <= 2, got " + to_string(a.shape()) + " and " + to_string(b.shape()));
  if (va.cols != vb.rows)
    shape_fail("matmul", "inner extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Tape& tape = a.tape();
  std::vector<double> out(va.rows * vb.cols);
  MutMap(out.data(), va.rows, vb.cols).noalias() =
      ConstMap(tape.value(a.id()).data(), va.rows, va.cols) * ConstMap(tape.value(b.id()).data(), vb.rows, vb.cols);
  const std::size_t aid = a.id(), bid = b.id();
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return tape.record({va.rows, vb.cols}, std::move(out), ga || gb, [=](Tape& t, std::size_t self) {
    ConstMap g(t.grad(self).data(), va.rows, vb.cols);
    if (ga) {
      MutMap(t.grad(aid).data(), va.rows, va.cols).noalias() +=
          g * ConstMap(t.value(bid).data(), vb.rows, vb.cols).transpose();
    }
    if (gb) {
      MutMap(t.grad(bid).data(), vb.rows, vb.cols).noalias() +=
          ConstMap(t.value(aid).data(), va.rows, va.cols).transpose() * g;
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinOp::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary("div", BinOp::Div, a, b); }

Tensor scale(const Tensor& a, double s) {
  return unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor one_minus(const Tensor& a) {
  return unary("one_minus", a, [](double x) { return 1.0 - x; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor abs(const Tensor& a) {
  return unary("abs", a, [](double x) { return std::fabs(x); },
               [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor pow(const Tensor& a, double p) {
  return unary("pow", a, [p](double x) { return std::pow(x, p); },
               [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a,
               [](double x) {
                 if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
                 const double e = std::exp(x);
                 return e / (1.0 + e);
               },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary("leaky_relu", a, [slope](double x) { return x >= 0 ? x : slope * x; },
               [slope](double x, double) { return x >= 0 ? 1.0 : slope; });
}

Tensor softmax(const Tensor& a, int axis, double temperature) {
  return softmax_impl("softmax", a, nullptr, axis, temperature);
}

Tensor masked_softmax(const Tensor& a, std::span<const std::uint8_t> mask, int axis, double temperature) {
  if (mask.size() != a.size())
    shape_fail("masked_softmax", "mask holds " + std::to_string(mask.size()) + " entries for " + to_string(a.shape()));
  return softmax_impl("masked_softmax", a, mask.data(), axis, temperature);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_same_tape("layer_norm", x, gamma);
  require_same_tape("layer_norm", x, beta);
  const View v = view_of(x.shape());
  if (gamma.size() != v.cols || beta.size() != v.cols)
    shape_fail("layer_norm", "gain/bias " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
                                 " do not match feature extent of " + to_string(x.shape()));
  Tape& tape = x.tape();
  const auto& xv = tape.value(x.id());
  const auto& gv = tape.value(gamma.id());
  const auto& bv = tape.value(beta.id());
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(v.rows);
  for (std::size_t r = 0; r < v.rows; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < v.cols; ++c) mu += xv[r * v.cols + c];
    mu /= static_cast<double>(v.cols);
    double var = 0.0;
    for (std::size_t c = 0; c < v.cols; ++c) {
      const double d = xv[r * v.cols + c] - mu;
      var += d * d;
    }
    var /= static_cast<double>(v.cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < v.cols; ++c) {
      const std::size_t k = r * v.cols + c;
      xhat[k] = (xv[k] - mu) * inv_std[r];
      out[k] = xhat[k] * gv[c] + bv[c];
    }
  }
  const std::size_t xid = x.id(), gid = gamma.id(), bid = beta.id();
  const bool gx = x.requires_grad(), gg = gamma.requires_grad(), gb = beta.requires_grad();
  return tape.record(x.shape(), std::move(out), gx || gg || gb,
                     [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       const auto& gam = t.value(gid);
                       const double n = static_cast<double>(v.cols);
                       if (gg) {
                         auto& d = t.grad(gid);
                         for (std::size_t k = 0; k < g.size(); ++k) d[k % v.cols] += g[k] * xhat[k];
                       }
                       if (gb) {
                         auto& d = t.grad(bid);
                         for (std::size_t k = 0; k < g.size(); ++k) d[k % v.cols] += g[k];
                       }
                       if (gx) {
                         auto& d = t.grad(xid);
                         for (std::size_t r = 0; r < v.rows; ++r) {
                           double s1 = 0.0, s2 = 0.0;
                           for (std::size_t c = 0; c < v.cols; ++c) {
                             const std::size_t k = r * v.cols + c;
                             const double dh = g[k] * gam[c];
                             s1 += dh;
                             s2 += dh * xhat[k];
                           }
                           for (std::size_t c = 0; c < v.cols; ++c) {
                             const std::size_t k = r * v.cols + c;
                             const double dh = g[k] * gam[c];
                             d[k] += inv_std[r] * (dh - s1 / n - xhat[k] * s2 / n);
                           }
                         }
                       }
                     });
}

Tensor dropout(const Tensor& x, double p, RngStream* rng, bool training) {
  if (p < 0.0 || p >= 1.0) shape_fail("dropout", "rate must lie in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  if (!rng) shape_fail("dropout", "training mode requires a random stream");
  std::vector<double> keep(x.size());
  const double s = 1.0 / (1.0 - p);
  for (auto& k : keep) k = rng->uniform() >= p ? s : 0.0;
  Tensor mask = x.tape().constant(x.shape(), std::move(keep));
  return mul(x, mask);
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) shape_fail("concat", "no operands");
  if (axis != 0 && axis != 1) shape_fail("concat", "axis must be 0 or 1");
  Tape& tape = parts[0].tape();
  std::vector<View> views;
  bool needs = false;
  for (const auto& p : parts) {
    require_same_tape("concat", parts[0], p);
    views.push_back(view_of(p.shape()));
    needs = needs || p.requires_grad();
  }
  std::size_t R = 0, C = 0;
  if (axis == 0) {
    C = views[0].cols;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (views[i].cols != C)
        shape_fail("concat", "column extents differ: " + to_string(parts[0].shape()) + " vs " +
                                 to_string(parts[i].shape()));
      R += views[i].rows;
    }
  } else {
    R = views[0].rows;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (views[i].rows != R)
        shape_fail("concat", "row extents differ: " + to_string(parts[0].shape()) + " vs " +
                                 to_string(parts[i].shape()));
      C += views[i].cols;
    }
  }
  std::vector<double> out(R * C);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& pv = tape.value(parts[i].id());
    const View w = views[i];
    for (std::size_t r = 0; r < w.rows; ++r)
      for (std::size_t c = 0; c < w.cols; ++c) {
        const std::size_t dst = axis == 0 ? (off + r) * C + c : r * C + off + c;
        out[dst] = pv[r * w.cols + c];
      }
    ids.push_back(parts[i].id());
    offsets.push_back(off);
    off += axis == 0 ? w.rows : w.cols;
  }
  return tape.record({R, C}, std::move(out), needs, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!t.requires_grad(ids[i])) continue;
      auto& d = t.grad(ids[i]);
      const View w = views[i];
      for (std::size_t r = 0; r < w.rows; ++r)
        for (std::size_t c = 0; c < w.cols; ++c) {
          const std::size_t src = axis == 0 ? (offsets[i] + r) * C + c : r * C + offsets[i] + c;
          d[r * w.cols + c] += g[src];
        }
    }
  });
}

Tensor concat(std::initializer_list<Tensor> parts, int axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  if (rows.empty()) shape_fail("gather_rows", "empty index list");
  const View v = view_of(a.shape());
  for (auto r : rows)
    if (r >= v.rows)
      shape_fail("gather_rows", "row " + std::to_string(r) + " out of range for " + to_string(a.shape()));
  Tape& tape = a.tape();
  const auto& av = tape.value(a.id());
  std::vector<double> out(rows.size() * v.cols);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(rows[i] * v.cols), v.cols,
                out.begin() + static_cast<std::ptrdiff_t>(i * v.cols));
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const std::size_t aid = a.id();
  return tape.record({rows.size(), v.cols}, std::move(out), a.requires_grad(),
                     [aid, idx = std::move(idx), v](Tape& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       auto& d = t.grad(aid);
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::size_t c = 0; c < v.cols; ++c) d[idx[i] * v.cols + c] += g[i * v.cols + c];
                     });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  const View v = view_of(a.shape());
  if (begin >= end || end > v.cols)
    shape_fail("slice_cols", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                                 to_string(a.shape()));
  Tape& tape = a.tape();
  const auto& av = tape.value(a.id());
  const std::size_t w = end - begin;
  std::vector<double> out(v.rows * w);
  for (std::size_t r = 0; r < v.rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = av[r * v.cols + begin + c];
  const std::size_t aid = a.id();
  return tape.record({v.rows, w}, std::move(out), a.requires_grad(), [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& d = t.grad(aid);
    for (std::size_t r = 0; r < v.rows; ++r)
      for (std::size_t c = 0; c < w; ++c) d[r * v.cols + begin + c] += g[r * w + c];
  });
}

Tensor transpose(const Tensor& a) {
  if (a.shape().size() > 2) shape_fail("transpose", "rank > 2: " + to_string(a.shape()));
  const View v = view_of(a.shape());
  Tape& tape = a.tape();
  const auto& av = tape.value(a.id());
  std::vector<double> out(av.size());
  for (std::size_t r = 0; r < v.rows; ++r)
    for (std::size_t c = 0; c < v.cols; ++c) out[c * v.rows + r] = av[r * v.cols + c];
  const std::size_t aid = a.id();
  return tape.record({v.cols, v.rows}, std::move(out), a.requires_grad(), [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& d = t.grad(aid);
    for (std::size_t r = 0; r < v.rows; ++r)
      for (std::size_t c = 0; c < v.cols; ++c) d[r * v.cols + c] += g[c * v.rows + r];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    shape_fail("reshape", "cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  Tape& tape = a.tape();
  const std::size_t aid = a.id();
  return tape.record(std::move(shape), tape.value(aid), a.requires_grad(), [aid](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& d = t.grad(aid);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Tensor sum(const Tensor& a, int axis) {
  Tape& tape = a.tape();
  const View v = view_of(a.shape());
  const auto& av = tape.value(a.id());
  const std::size_t aid = a.id();
  if (axis == -1) {
    double s = 0.0;
    for (double x : av) s += x;
    return tape.record({1}, {s}, a.requires_grad(), [aid](Tape& t, std::size_t self) {
      const double g = t.grad(self)[0];
      for (auto& d : t.grad(aid)) d += g;
    });
  }
  if (axis == 0) {
    std::vector<double> out(v.cols, 0.0);
    for (std::size_t r = 0; r < v.rows; ++r)
      for (std::size_t c = 0; c < v.cols; ++c) out[c] += av[r * v.cols + c];
    return tape.record({1, v.cols}, std::move(out), a.requires_grad(), [aid, v](Tape& t, std::size_t self) {
      const auto& g = t.grad(self);
      auto& d = t.grad(aid);
      for (std::size_t r = 0; r < v.rows; ++r)
        for (std::size_t c = 0; c < v.cols; ++c) d[r * v.cols + c] += g[c];
    });
  }
  if (axis == 1) {
    std::vector<double> out(v.rows, 0.0);
    for (std::size_t r = 0; r < v.rows; ++r)
      for (std::size_t c = 0; c < v.cols; ++c) out[r] += av[r * v.cols + c];
    return tape.record({v.rows, 1}, std::move(out), a.requires_grad(), [aid, v](Tape& t, std::size_t self) {
      const auto& g = t.grad(self);
      auto& d = t.grad(aid);
      for (std::size_t r = 0; r < v.rows; ++r)
        for (std::size_t c = 0; c < v.cols; ++c) d[r * v.cols + c] += g[r];
    });
  }
  shape_fail("sum", "axis must be -1, 0 or 1");
}

Tensor mean(const Tensor& a, int axis) {
  const View v = view_of(a.shape());
  const double n = axis == -1 ? static_cast<double>(a.size()) : static_cast<double>(axis == 0 ? v.rows : v.cols);
  return scale(sum(a, axis), 1.0 / n);
}

Tensor squared_error(const Tensor& a, const Tensor& b) {
  require_same_tape("squared_error", a, b);
  if (a.shape() != b.shape())
    shape_fail("squared_error", "shapes differ: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tape& tape = a.tape();
  const auto& x = tape.value(a.id());
  const auto& y = tape.value(b.id());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  const std::size_t aid = a.id(), bid = b.id();
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return tape.record({1}, {s}, ga || gb, [=](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    const auto& xv = t.value(aid);
    const auto& yv = t.value(bid);
    if (ga) {
      auto& d = t.grad(aid);
      for (std::size_t i = 0; i < xv.size(); ++i) d[i] += 2.0 * g * (xv[i] - yv[i]);
    }
    if (gb) {
      auto& d = t.grad(bid);
      for (std::size_t i = 0; i < xv.size(); ++i) d[i] -= 2.0 * g * (xv[i] - yv[i]);
    }
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  return scale(squared_error(a, b), 1.0 / static_cast<double>(a.size()));
}

Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const int> labels) {
  const View v = view_of(logits.shape());
  if (labels.size() != v.rows)
    shape_fail("cross_entropy", std::to_string(labels.size()) + " labels for logits " + to_string(logits.shape()));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= v.cols)
      shape_fail("cross_entropy", "label " + std::to_string(y) + " outside [0," + std::to_string(v.cols) + ")");
  Tape& tape = logits.tape();
  const auto& x = tape.value(logits.id());
  std::vector<double> prob(x.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < v.rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < v.cols; ++c) mx = std::max(mx, x[r * v.cols + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < v.cols; ++c) z += std::exp(x[r * v.cols + c] - mx);
    const double lse = mx + std::log(z);
    loss += lse - x[r * v.cols + static_cast<std::size_t>(labels[r])];
    for (std::size_t c = 0; c < v.cols; ++c) prob[r * v.cols + c] = std::exp(x[r * v.cols + c] - lse);
  }
  loss /= static_cast<double>(v.rows);
  std::vector<int> ys(labels.begin(), labels.end());
  const std::size_t lid = logits.id();
  return tape.record({1}, {loss}, logits.requires_grad(),
                     [lid, v, prob = std::move(prob), ys = std::move(ys)](Tape& t, std::size_t self) {
                       const double g = t.grad(self)[0] / static_cast<double>(v.rows);
                       auto& d = t.grad(lid);
                       for (std::size_t r = 0; r < v.rows; ++r)
                         for (std::size_t c = 0; c < v.cols; ++c) {
                           const double target = static_cast<int>(c) == ys[r] ? 1.0 : 0.0;
                           d[r * v.cols + c] += g * (prob[r * v.cols + c] - target);
                         }
                     });
}

Tensor gaussian_kl(const Tensor& mu, const Tensor& log_var, double prior_mean) {
  require_same_tape("gaussian_kl", mu, log_var);
  if (mu.shape() != log_var.shape())
    shape_fail("gaussian_kl", "mean " + to_string(mu.shape()) + " vs log-variance " + to_string(log_var.shape()));
  const View v = view_of(mu.shape());
  Tape& tape = mu.tape();
  const auto& m = tape.value(mu.id());
  const auto& lv = tape.value(log_var.id());
  double s = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double dm = m[i] - prior_mean;
    s += 0.5 * (std::exp(lv[i]) + dm * dm - 1.0 - lv[i]);
  }
  s /= static_cast<double>(v.rows);
  const std::size_t mid = mu.id(), lid = log_var.id();
  const bool gm = mu.requires_grad(), gl = log_var.requires_grad();
  return tape.record({1}, {s}, gm || gl, [=](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0] / static_cast<double>(v.rows);
    const auto& mv = t.value(mid);
    const auto& lvv = t.value(lid);
    if (gm) {
      auto& d = t.grad(mid);
      for (std::size_t i = 0; i < mv.size(); ++i) d[i] += g * (mv[i] - prior_mean);
    }
    if (gl) {
      auto& d = t.grad(lid);
      for (std::size_t i = 0; i < lvv.size(); ++i) d[i] += g * 0.5 * (std::exp(lvv[i]) - 1.0);
    }
  });
}

Tensor reparam_with_noise(const Tensor& mu, const Tensor& log_var, std::span<const double> eps) {
  require_same_tape("reparam", mu, log_var);
  if (mu.shape() != log_var.shape())
    shape_fail("reparam", "mean " + to_string(mu.shape()) + " vs log-variance " + to_string(log_var.shape()));
  if (eps.size() != mu.size())
    shape_fail("reparam", std::to_string(eps.size()) + " noise values for " + to_string(mu.shape()));
  Tape& tape = mu.tape();
  const auto& m = tape.value(mu.id());
  const auto& lv = tape.value(log_var.id());
  std::vector<double> out(m.size());
  std::vector<double> noise(eps.begin(), eps.end());
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double sd = std::exp(0.5 * lv[i]);
    out[i] = sd == 0.0 ? m[i] : m[i] + sd * noise[i];
  }
  const std::size_t mid = mu.id(), lid = log_var.id();
  const bool gm = mu.requires_grad(), gl = log_var.requires_grad();
  return tape.record(mu.shape(), std::move(out), gm || gl,
                     [=, noise = std::move(noise)](Tape& t, std::size_t self) {
                       const auto& g = t.grad(self);
                       if (gm) {
                         auto& d = t.grad(mid);
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                       }
                       if (gl) {
                         const auto& lvv = t.value(lid);
                         auto& d = t.grad(lid);
                         for (std::size_t i = 0; i < g.size(); ++i)
                           d[i] += g[i] * 0.5 * std::exp(0.5 * lvv[i]) * noise[i];
                       }
                     });
}

Tensor sample_gaussian_reparam(const Tensor& mu, const Tensor& log_var, RngStream& rng) {
  if (mu.shape() != log_var.shape())
    shape_fail("reparam", "mean " + to_string(mu.shape()) + " vs log-variance " + to_string(log_var.shape()));
  std::vector<double> eps(mu.size());
  for (auto& e : eps) e = rng.normal();
  return reparam_with_noise(mu, log_var, eps);
}

Tensor sample_gumbel_softmax(const Tensor& logits, double tau, RngStream* rng, bool hard) {
  if (!(tau > 0.0)) shape_fail("gumbel_softmax", "temperature must be > 0, got " + std::to_string(tau));
  Tensor perturbed = logits;
  if (rng) {
    std::vector<double> g(logits.size());
    for (auto& x : g) x = -std::log(-std::log(rng->uniform()));
    perturbed = add(logits, logits.tape().constant(logits.shape(), std::move(g)));
  }
  Tensor soft = softmax(perturbed, 1, tau);
  return hard ? straight_through_onehot(soft) : soft;
}

Tensor straight_through_onehot(const Tensor& soft) {
  const View v = view_of(soft.shape());
  Tape& tape = soft.tape();
  const auto& s = tape.value(soft.id());
  std::vector<double> out(s.size(), 0.0);
  for (std::size_t r = 0; r < v.rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < v.cols; ++c)
      if (s[r * v.cols + c] > s[r * v.cols + best]) best = c;
    out[r * v.cols + best] = 1.0;
  }
  const std::size_t sid = soft.id();
  return tape.record(soft.shape(), std::move(out), soft.requires_grad(), [sid](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& d = t.grad(sid);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Tensor detach(const Tensor& a) { return a.tape().constant(a.shape(), a.tape().value(a.id())); }

// ---------------------------------------------------------------------------

namespace {

struct OpEntry {
  OpKind kind;
  std::string_view name;
  std::size_t arity;  // 0 = variadic
};

constexpr OpEntry kOps[] = {
    {OpKind::MatMul, "matmul", 2},
    {OpKind::Add, "add", 2},
    {OpKind::Sub, "sub", 2},
    {OpKind::Mul, "mul", 2},
    {OpKind::Div, "div", 2},
    {OpKind::Scale, "scale", 1},
    {OpKind::Exp, "exp", 1},
    {OpKind::Log, "log", 1},
    {OpKind::Abs, "abs", 1},
    {OpKind::Pow, "pow", 1},
    {OpKind::Sigmoid, "sigmoid", 1},
    {OpKind::Tanh, "tanh", 1},
    {OpKind::LeakyRelu, "leaky_relu", 1},
    {OpKind::Softmax, "softmax", 1},
    {OpKind::LayerNorm, "layer_norm", 3},
    {OpKind::Dropout, "dropout", 1},
    {OpKind::Concat, "concat", 0},
    {OpKind::GatherRows, "gather_rows", 1},
    {OpKind::SliceCols, "slice_cols", 1},
    {OpKind::Transpose, "transpose", 1},
    {OpKind::Sum, "sum", 1},
    {OpKind::Mean, "mean", 1},
    {OpKind::SquaredError, "squared_error", 2},
    {OpKind::Mse, "mse", 2},
    {OpKind::CrossEntropy, "cross_entropy", 1},
    {OpKind::GaussianKl, "gaussian_kl", 2},
};

const OpEntry& entry(OpKind kind) {
  for (const auto& e : kOps)
    if (e.kind == kind) return e;
  throw ShapeError("apply: unknown op kind " + std::to_string(static_cast<int>(kind)));
}

}  // namespace

OpKind parse_op_kind(std::string_view name) {
  for (const auto& e : kOps)
    if (e.name == name) return e.kind;
  throw ShapeError("apply: unknown op kind '" + std::string(name) + "'");
}

std::string_view op_name(OpKind kind) { return entry(kind).name; }

Tensor apply(OpKind kind, std::span<const Tensor> in, const OpAttrs& at) {
  const OpEntry& e = entry(kind);
  if (e.arity != 0 && in.size() != e.arity)
    throw ShapeError("apply: " + std::string(e.name) + " takes " + std::to_string(e.arity) + " inputs, got " +
                     std::to_string(in.size()));
  switch (kind) {
    case OpKind::MatMul: return matmul(in[0], in[1]);
    case OpKind::Add: return add(in[0], in[1]);
    case OpKind::Sub: return sub(in[0], in[1]);
    case OpKind::Mul: return mul(in[0], in[1]);
    case OpKind::Div: return div(in[0], in[1]);
    case OpKind::Scale: return scale(in[0], at.scalar);
    case OpKind::Exp: return exp(in[0]);
    case OpKind::Log: return log(in[0]);
    case OpKind::Abs: return abs(in[0]);
    case OpKind::Pow: return pow(in[0], at.scalar);
    case OpKind::Sigmoid: return sigmoid(in[0]);
    case OpKind::Tanh: return tanh(in[0]);
    case OpKind::LeakyRelu: return leaky_relu(in[0], at.slope);
    case OpKind::Softmax: return softmax(in[0], at.axis, at.temperature);
    case OpKind::LayerNorm: return layer_norm(in[0], in[1], in[2]);
    case OpKind::Dropout: return dropout(in[0], at.p, at.rng, at.training);
    case OpKind::Concat: return concat(in, at.axis);
    case OpKind::GatherRows: return gather_rows(in[0], at.indices);
    case OpKind::SliceCols: return slice_cols(in[0], at.begin, at.end);
    case OpKind::Transpose: return transpose(in[0]);
    case OpKind::Sum: return sum(in[0], at.axis);
    case OpKind::Mean: return mean(in[0], at.axis);
    case OpKind::SquaredError: return squared_error(in[0], in[1]);
    case OpKind::Mse: return mse(in[0], in[1]);
    case OpKind::CrossEntropy: return cross_entropy_with_logits(in[0], at.labels);
    case OpKind::GaussianKl: return gaussian_kl(in[0], in[1], at.prior_mean);
  }
  throw ShapeError("apply: unknown op kind");
}

}  // namespace nhgcat
