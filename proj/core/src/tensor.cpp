#include "kplift/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace kplift {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;
using StridedConstMat = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using StridedMat = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

using detail::GradSinks;

std::size_t leading_rows(const Shape& shape) {
  std::size_t rows = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) rows *= shape[i];
  return rows;
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

// Offsets into each operand for every output element under broadcasting.
struct Broadcast {
  enum class Kind { Same, ScalarB, ScalarA, Suffix, General };
  Kind kind = Kind::Same;
  Shape out;
  std::vector<std::size_t> a_off;
  std::vector<std::size_t> b_off;

  std::size_t a_index(std::size_t i, std::size_t b_numel) const {
    switch (kind) {
      case Kind::Same:
      case Kind::ScalarB:
      case Kind::Suffix:
        return i;
      case Kind::ScalarA:
        return 0;
      case Kind::General:
        return a_off[i];
    }
    (void)b_numel;
    return 0;
  }
  std::size_t b_index(std::size_t i, std::size_t b_numel) const {
    switch (kind) {
      case Kind::Same:
      case Kind::ScalarA:
        return i;
      case Kind::ScalarB:
        return 0;
      case Kind::Suffix:
        return i % b_numel;
      case Kind::General:
        return b_off[i];
    }
    return 0;
  }
};

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.kind = Broadcast::Kind::Same;
    bc.out = a;
    return bc;
  }
  const std::size_t an = numel_of(a);
  const std::size_t bn = numel_of(b);
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t ad = i + a.size() >= nd ? a[i + a.size() - nd] : 1;
    const std::size_t bd = i + b.size() >= nd ? b[i + b.size() - nd] : 1;
    if (ad != bd && ad != 1 && bd != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(ad, bd);
  }
  bc.out = out;
  if (bn == 1 && numel_of(out) == an) {
    bc.kind = Broadcast::Kind::ScalarB;
    return bc;
  }
  if (an == 1 && numel_of(out) == bn) {
    bc.kind = Broadcast::Kind::ScalarA;
    return bc;
  }
  // b equal to a trailing block of a (after stripping b's leading ones).
  if (numel_of(out) == an && an % bn == 0) {
    Shape bs = b;
    while (!bs.empty() && bs.front() == 1) bs.erase(bs.begin());
    if (bs.size() <= a.size() && std::equal(bs.begin(), bs.end(), a.end() - static_cast<std::ptrdiff_t>(bs.size()))) {
      bc.kind = Broadcast::Kind::Suffix;
      return bc;
    }
  }
  bc.kind = Broadcast::Kind::General;
  auto strides_for = [&](const Shape& s) {
    std::vector<std::size_t> st(nd, 0);
    std::size_t acc = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
      const std::size_t oi = i + nd - s.size();
      st[oi] = s[i] == 1 ? 0 : acc;
      acc *= s[i];
    }
    return st;
  };
  const auto as = strides_for(a);
  const auto bs = strides_for(b);
  const std::size_t total = numel_of(out);
  bc.a_off.resize(total);
  bc.b_off.resize(total);
  std::vector<std::size_t> idx(nd, 0);
  std::size_t ao = 0;
  std::size_t bo = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    bc.a_off[flat] = ao;
    bc.b_off[flat] = bo;
    for (std::size_t d = nd; d-- > 0;) {
      ++idx[d];
      ao += as[d];
      bo += bs[d];
      if (idx[d] < out[d]) break;
      ao -= as[d] * out[d];
      bo -= bs[d] * out[d];
      idx[d] = 0;
    }
  }
  return bc;
}

// Shared implementation of the broadcasting binary ops. `fn` computes the
// value, `da`/`db` the partial derivatives given (a, b, out).
template <typename Fn, typename Da, typename Db>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fn fn, Da da, Db db) {
  auto bc = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape(), name));
  const std::size_t n = numel_of(bc->out);
  const std::size_t bn = b.numel();
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(n);
  if (bc->kind == Broadcast::Kind::Same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(ad[i], bd[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(ad[bc->a_index(i, bn)], bd[bc->b_index(i, bn)]);
  }
  Tensor ta = a;
  Tensor tb = b;
  return Tensor::make_result(
      bc->out, std::move(out), {a, b},
      [ta, tb, bc, da, db](const std::vector<double>& g, GradSinks sinks) {
        const auto av = ta.data();
        const auto bv = tb.data();
        const std::size_t bn2 = tb.numel();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t ai = bc->a_index(i, bn2);
          const std::size_t bi = bc->b_index(i, bn2);
          if (sinks[0]) (*sinks[0])[ai] += g[i] * da(av[ai], bv[bi]);
          if (sinks[1]) (*sinks[1])[bi] += g[i] * db(av[ai], bv[bi]);
        }
      });
}

template <typename Fn, typename Df>
Tensor unary_op(const Tensor& a, Fn fn, Df df) {
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fn(ad[i]);
  Tensor ta = a;
  return Tensor::make_result(a.shape(), std::move(out), {a},
                             [ta, df](const std::vector<double>& g, GradSinks sinks) {
                               const auto av = ta.data();
                               auto& s = *sinks[0];
                               for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * df(av[i]);
                             });
}

// Records one bit per element through the active branch trace.
template <typename Pred>
void trace_branches(std::span<const double> values, Pred pred) {
  if (!BranchTrace::active()) return;
  std::uint64_t word = 0;
  std::size_t bits = 0;
  for (double v : values) {
    word = (word << 1) | (pred(v) ? 1U : 0U);
    if (++bits == 64) {
      BranchTrace::record(word);
      word = 0;
      bits = 0;
    }
  }
  BranchTrace::record(word ^ (static_cast<std::uint64_t>(bits) << 56));
}

thread_local BranchTrace* g_trace = nullptr;

}  // namespace

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : node_(std::make_shared<detail::Node>()) {
  node_->data.assign(1, 0.0);
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto node = std::make_shared<detail::Node>();
  node->data.assign(numel_of(shape), value);
  node->shape = std::move(shape);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (numel_of(shape) != values.size()) {
    throw ShapeError("tensor of shape " + shape_str(shape) + " given " + std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = from(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= ndim()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

Tensor Tensor::detach() const { return from(shape(), node_->data); }

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw std::logic_error("mutable_data() on a non-leaf tensor");
  return node_->data;
}

Tensor Tensor::make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                           std::function<void(const std::vector<double>&, detail::GradSinks)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (any) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& t : inputs) node->parents.push_back(t.node_);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Reverse sweep

Tensor Gradients::operator[](const Tensor& param) const {
  auto it = grads_.find(param.id());
  if (it == grads_.end()) return Tensor::zeros(param.shape());
  return Tensor::from(param.shape(), it->second);
}

std::span<const double> Gradients::raw(const Tensor& param) const {
  auto it = grads_.find(param.id());
  if (it == grads_.end()) return {};
  return it->second;
}

bool Gradients::contains(const Tensor& param) const { return grads_.count(param.id()) != 0; }

Gradients gradient_of(const Tensor& loss, std::initializer_list<Tensor> params) {
  return gradient_of(loss, std::span<const Tensor>(params.begin(), params.size()));
}

Gradients gradient_of(const Tensor& loss, std::span<const Tensor> params) {
  if (loss.numel() != 1) throw ShapeError("gradient_of: loss must be scalar, got " + shape_str(loss.shape()));
  Gradients result;
  std::unordered_set<const detail::Node*> wanted;
  for (const auto& p : params) wanted.insert(p.id());
  if (!loss.requires_grad()) return result;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.id());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<const detail::Node*, std::vector<double>> grads;
  grads[loss.id()].assign(1, 1.0);
  std::vector<std::vector<double>*> sinks;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    auto g = grads.find(node);
    if (g == grads.end()) continue;
    if (node->backward) {
      sinks.assign(node->parents.size(), nullptr);
      for (std::size_t i = 0; i < node->parents.size(); ++i) {
        detail::Node* parent = node->parents[i].get();
        if (!parent->requires_grad) continue;
        auto& buf = grads[parent];
        if (buf.empty()) buf.assign(parent->data.size(), 0.0);
        sinks[i] = &buf;
      }
      node->backward(g->second, sinks);
    }
    if (wanted.count(node)) {
      result.grads_[node] = std::move(g->second);
      result.shapes_[node] = node->shape;
    }
    grads.erase(node);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MapMat(out.data(), m, n).noalias() = MapConstMat(a.data().data(), m, k) * MapConstMat(b.data().data(), k, n);
  Tensor ta = a;
  Tensor tb = b;
  return Tensor::make_result({a.dim(0), b.dim(1)}, std::move(out), {a, b},
                             [ta, tb, m, k, n](const std::vector<double>& g, GradSinks sinks) {
                               MapConstMat G(g.data(), m, n);
                               if (sinks[0]) {
                                 MapMat(sinks[0]->data(), m, k).noalias() +=
                                     G * MapConstMat(tb.data().data(), k, n).transpose();
                               }
                               if (sinks[1]) {
                                 MapMat(sinks[1]->data(), k, n).noalias() +=
                                     MapConstMat(ta.data().data(), m, k).transpose() * G;
                               }
                             });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  require(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0),
          "bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t batch = a.dim(0);
  const auto ar = static_cast<Eigen::Index>(a.dim(1));
  const auto ac = static_cast<Eigen::Index>(a.dim(2));
  const auto br = static_cast<Eigen::Index>(b.dim(1));
  const auto bcn = static_cast<Eigen::Index>(b.dim(2));
  const Eigen::Index m = transpose_a ? ac : ar;
  const Eigen::Index k = transpose_a ? ar : ac;
  const Eigen::Index kb = transpose_b ? bcn : br;
  const Eigen::Index n = transpose_b ? br : bcn;
  require(k == kb, "bmm: inner dimensions differ for " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t a_step = a.dim(1) * a.dim(2);
  const std::size_t b_step = b.dim(1) * b.dim(2);
  const std::size_t o_step = static_cast<std::size_t>(m * n);
  std::vector<double> out(batch * o_step);
  for (std::size_t i = 0; i < batch; ++i) {
    MapConstMat A(a.data().data() + i * a_step, ar, ac);
    MapConstMat B(b.data().data() + i * b_step, br, bcn);
    MapMat O(out.data() + i * o_step, m, n);
    if (transpose_a && transpose_b) O.noalias() = A.transpose() * B.transpose();
    else if (transpose_a) O.noalias() = A.transpose() * B;
    else if (transpose_b) O.noalias() = A * B.transpose();
    else O.noalias() = A * B;
  }
  Tensor ta = a;
  Tensor tb = b;
  return Tensor::make_result(
      {batch, static_cast<std::size_t>(m), static_cast<std::size_t>(n)}, std::move(out), {a, b},
      [=](const std::vector<double>& g, GradSinks sinks) {
        for (std::size_t i = 0; i < batch; ++i) {
          MapConstMat G(g.data() + i * o_step, m, n);
          MapConstMat A(ta.data().data() + i * a_step, ar, ac);
          MapConstMat B(tb.data().data() + i * b_step, br, bcn);
          if (sinks[0]) {
            MapMat dA(sinks[0]->data() + i * a_step, ar, ac);
            // op(A) = G op(B)^T
            if (!transpose_a && !transpose_b) dA.noalias() += G * B.transpose();
            else if (!transpose_a && transpose_b) dA.noalias() += G * B;
            else if (transpose_a && !transpose_b) dA.noalias() += B * G.transpose();
            else dA.noalias() += B.transpose() * G.transpose();
          }
          if (sinks[1]) {
            MapMat dB(sinks[1]->data() + i * b_step, br, bcn);
            // op(B) = op(A)^T G
            if (!transpose_a && !transpose_b) dB.noalias() += A.transpose() * G;
            else if (!transpose_a && transpose_b) dB.noalias() += G.transpose() * A;
            else if (transpose_a && !transpose_b) dB.noalias() += A * G;
            else dB.noalias() += G.transpose() * A.transpose();
          }
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(weight.ndim() == 2 && bias.ndim() == 1 && bias.dim(0) == weight.dim(1),
          "linear: weight " + shape_str(weight.shape()) + " and bias " + shape_str(bias.shape()) + " disagree");
  require(x.ndim() >= 1 && x.shape().back() == weight.dim(0),
          "linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
  const auto rows = static_cast<Eigen::Index>(leading_rows(x.shape()));
  const auto in = static_cast<Eigen::Index>(weight.dim(0));
  const auto outd = static_cast<Eigen::Index>(weight.dim(1));
  std::vector<double> out(static_cast<std::size_t>(rows * outd));
  MapMat O(out.data(), rows, outd);
  O.noalias() = MapConstMat(x.data().data(), rows, in) * MapConstMat(weight.data().data(), in, outd);
  O.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), outd);
  Shape shape = x.shape();
  shape.back() = weight.dim(1);
  Tensor tx = x;
  Tensor tw = weight;
  return Tensor::make_result(shape, std::move(out), {x, weight, bias},
                             [tx, tw, rows, in, outd](const std::vector<double>& g, GradSinks sinks) {
                               MapConstMat G(g.data(), rows, outd);
                               if (sinks[0]) {
                                 MapMat(sinks[0]->data(), rows, in).noalias() +=
                                     G * MapConstMat(tw.data().data(), in, outd).transpose();
                               }
                               if (sinks[1]) {
                                 MapMat(sinks[1]->data(), in, outd).noalias() +=
                                     MapConstMat(tx.data().data(), rows, in).transpose() * G;
                               }
                               if (sinks[2]) {
                                 Eigen::Map<Eigen::RowVectorXd>(sinks[2]->data(), outd) += G.colwise().sum();
                               }
                             });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& a, double factor) {
  return unary_op(
      a, [factor](double x) { return x * factor; }, [factor](double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary_op(
      a, [value](double x) { return x + value; }, [](double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  trace_branches(a.data(), [](double v) { return v > 0.0; });
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  auto sig = [](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  };
  return unary_op(a, sig, [sig](double x) {
    const double s = sig(x);
    return s * (1.0 - s);
  });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::sqrt(x); }, [](double x) { return 0.5 / std::sqrt(x); });
}

Tensor abs(const Tensor& a) {
  trace_branches(a.data(), [](double v) { return v > 0.0; });
  return unary_op(
      a, [](double x) { return std::fabs(x); },
      [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Tensor huber(const Tensor& residual, double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("huber: threshold must be positive");
  trace_branches(residual.data(), [delta](double v) { return std::fabs(v) <= delta; });
  return unary_op(
      residual,
      [delta](double r) {
        const double a = std::fabs(r);
        return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
      },
      [delta](double r) {
        if (std::fabs(r) <= delta) return r;
        return r > 0.0 ? delta : -delta;
      });
}

// ---------------------------------------------------------------------------
// Softmax family

namespace {

void softmax_rows(std::span<const double> in, std::vector<double>& out, std::size_t rows, std::size_t cols) {
  out.resize(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * cols;
    double* y = out.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      total += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= total;
  }
}

}  // namespace

Tensor softmax(const Tensor& a) {
  require(a.ndim() >= 1 && a.numel() > 0, "softmax: empty tensor");
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.numel() / cols;
  std::vector<double> out;
  softmax_rows(a.data(), out, rows, cols);
  auto probs = std::make_shared<std::vector<double>>(out);
  return Tensor::make_result(a.shape(), std::move(out), {a},
                             [probs, rows, cols](const std::vector<double>& g, GradSinks sinks) {
                               auto& s = *sinks[0];
                               const auto& p = *probs;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double dot = 0.0;
                                 for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * p[r * cols + c];
                                 for (std::size_t c = 0; c < cols; ++c) {
                                   s[r * cols + c] += p[r * cols + c] * (g[r * cols + c] - dot);
                                 }
                               }
                             });
}

Tensor log_softmax(const Tensor& a) {
  require(a.ndim() >= 1 && a.numel() > 0, "log_softmax: empty tensor");
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.numel() / cols;
  auto probs = std::make_shared<std::vector<double>>();
  softmax_rows(a.data(), *probs, rows, cols);
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double mx = *std::max_element(x.begin() + r * cols, x.begin() + (r + 1) * cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(x[r * cols + c] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] - lse;
  }
  return Tensor::make_result(a.shape(), std::move(out), {a},
                             [probs, rows, cols](const std::vector<double>& g, GradSinks sinks) {
                               auto& s = *sinks[0];
                               const auto& p = *probs;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double total = 0.0;
                                 for (std::size_t c = 0; c < cols; ++c) total += g[r * cols + c];
                                 for (std::size_t c = 0; c < cols; ++c) {
                                   s[r * cols + c] += g[r * cols + c] - p[r * cols + c] * total;
                                 }
                               }
                             });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require(logits.ndim() == 2, "cross_entropy: logits must be [N,K], got " + shape_str(logits.shape()));
  const std::size_t rows = logits.dim(0);
  const std::size_t cols = logits.dim(1);
  require(targets.size() == rows, "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                      std::to_string(rows) + " rows");
  require(rows > 0, "cross_entropy: no rows");
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= cols) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside [0," + std::to_string(cols) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<double>>();
  softmax_rows(logits.data(), *probs, rows, cols);
  const auto x = logits.data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double mx = *std::max_element(x.begin() + r * cols, x.begin() + (r + 1) * cols);
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += std::exp(x[r * cols + c] - mx);
    total += mx + std::log(acc) - x[r * cols + static_cast<std::size_t>(targets[r])];
  }
  std::vector<int> tg(targets.begin(), targets.end());
  return Tensor::make_result({}, {total / static_cast<double>(rows)}, {logits},
                             [probs, tg, rows, cols](const std::vector<double>& g, GradSinks sinks) {
                               auto& s = *sinks[0];
                               const double w = g[0] / static_cast<double>(rows);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 for (std::size_t c = 0; c < cols; ++c) s[r * cols + c] += w * (*probs)[r * cols + c];
                                 s[r * cols + static_cast<std::size_t>(tg[r])] -= w;
                               }
                             });
}

// ---------------------------------------------------------------------------
// Reductions and layout

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return Tensor::make_result({}, {total}, {a}, [](const std::vector<double>& g, GradSinks sinks) {
    for (auto& v : *sinks[0]) v += g[0];
  });
}

Tensor mean(const Tensor& a) {
  require(a.numel() > 0, "mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_last(const Tensor& a) {
  require(a.ndim() >= 1, "sum_last: scalar input");
  const std::size_t cols = a.shape().back();
  const std::size_t rows = cols == 0 ? 0 : a.numel() / cols;
  std::vector<double> out(rows, 0.0);
  const auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r] += x[r * cols + c];
  }
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  return Tensor::make_result(shape, std::move(out), {a}, [rows, cols](const std::vector<double>& g, GradSinks sinks) {
    auto& s = *sinks[0];
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) s[r * cols + c] += g[r];
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {a}, [](const std::vector<double>& g, GradSinks sinks) {
    auto& s = *sinks[0];
    for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i];
  });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts[0].shape();
  require(axis < first.size(), "concat: axis " + std::to_string(axis) + " out of range for " + shape_str(first));
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::size_t> widths;
  std::size_t total_axis = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    require(ok, "concat: shape " + shape_str(s) + " does not match " + shape_str(first) + " off axis " +
                    std::to_string(axis));
    widths.push_back(s[axis] * inner);
    total_axis += s[axis];
  }
  const std::size_t row = total_axis * inner;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto src = parts[p].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + o * widths[p], widths[p], out.begin() + o * row + offset);
    }
    offset += widths[p];
  }
  Shape shape = first;
  shape[axis] = total_axis;
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return Tensor::make_result(shape, std::move(out), inputs,
                             [widths, outer, row](const std::vector<double>& g, GradSinks sinks) {
                               std::size_t off = 0;
                               for (std::size_t p = 0; p < widths.size(); ++p) {
                                 if (sinks[p]) {
                                   auto& s = *sinks[p];
                                   for (std::size_t o = 0; o < outer; ++o) {
                                     for (std::size_t i = 0; i < widths[p]; ++i) s[o * widths[p] + i] += g[o * row + off + i];
                                   }
                                 }
                                 off += widths[p];
                               }
                             });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = a.shape();
  require(axis < s.size() && start + length <= s[axis],
          "slice: [" + std::to_string(start) + "," + std::to_string(start + length) + ") on axis " +
              std::to_string(axis) + " of " + shape_str(s));
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t src_row = s[axis] * inner;
  const std::size_t dst_row = length * inner;
  std::vector<double> out(outer * dst_row);
  const auto src = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(src.begin() + o * src_row + start * inner, dst_row, out.begin() + o * dst_row);
  }
  Shape shape = s;
  shape[axis] = length;
  const std::size_t first = start * inner;
  return Tensor::make_result(shape, std::move(out), {a},
                             [outer, src_row, dst_row, first](const std::vector<double>& g, GradSinks sinks) {
                               auto& d = *sinks[0];
                               for (std::size_t o = 0; o < outer; ++o) {
                                 for (std::size_t i = 0; i < dst_row; ++i) d[o * src_row + first + i] += g[o * dst_row + i];
                               }
                             });
}

Tensor transpose_last2(const Tensor& a) {
  require(a.ndim() >= 2, "transpose_last2: needs at least 2 axes, got " + shape_str(a.shape()));
  const std::size_t m = a.shape()[a.ndim() - 2];
  const std::size_t n = a.shape()[a.ndim() - 1];
  const std::size_t batch = a.numel() / (m * n);
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = x[b * m * n + i * n + j];
    }
  }
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  return Tensor::make_result(shape, std::move(out), {a}, [batch, m, n](const std::vector<double>& g, GradSinks sinks) {
    auto& s = *sinks[0];
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) s[b * m * n + i * n + j] += g[b * m * n + j * m + i];
      }
    }
  });
}

Tensor index_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require(a.ndim() == 2, "index_rows: expects a 2-D tensor, got " + shape_str(a.shape()));
  const std::size_t cols = a.dim(1);
  std::vector<double> out(rows.size() * cols);
  const auto x = a.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= a.dim(0)) throw std::out_of_range("index_rows: row " + std::to_string(rows[i]) + " of " + shape_str(a.shape()));
    std::copy_n(x.begin() + rows[i] * cols, cols, out.begin() + i * cols);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return Tensor::make_result({rows.size(), cols}, std::move(out), {a},
                             [idx, cols](const std::vector<double>& g, GradSinks sinks) {
                               auto& s = *sinks[0];
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                 for (std::size_t c = 0; c < cols; ++c) s[idx[i] * cols + c] += g[i * cols + c];
                               }
                             });
}

Tensor scatter_rows(const Tensor& src, std::span<const std::size_t> rows, std::size_t total_rows) {
  require(src.ndim() == 2 && src.dim(0) == rows.size(),
          "scatter_rows: " + std::to_string(rows.size()) + " targets for source " + shape_str(src.shape()));
  const std::size_t cols = src.dim(1);
  std::vector<double> out(total_rows * cols, 0.0);
  const auto x = src.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= total_rows) throw std::out_of_range("scatter_rows: row " + std::to_string(rows[i]) + " past " + std::to_string(total_rows));
    for (std::size_t c = 0; c < cols; ++c) out[rows[i] * cols + c] += x[i * cols + c];
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return Tensor::make_result({total_rows, cols}, std::move(out), {src},
                             [idx, cols](const std::vector<double>& g, GradSinks sinks) {
                               auto& s = *sinks[0];
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                 for (std::size_t c = 0; c < cols; ++c) s[i * cols + c] += g[idx[i] * cols + c];
                               }
                             });
}

Tensor layer_norm(const Tensor& x, double eps) {
  require(x.ndim() >= 1 && x.numel() > 0, "layer_norm: empty tensor");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.numel() / cols;
  std::vector<double> out(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += v[r * cols + c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (v[r * cols + c] - mu) * (v[r * cols + c] - mu);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = (v[r * cols + c] - mu) * is;
  }
  auto normed = std::make_shared<std::vector<double>>(out);
  return Tensor::make_result(x.shape(), std::move(out), {x},
                             [normed, inv_std, rows, cols](const std::vector<double>& g, GradSinks sinks) {
                               auto& s = *sinks[0];
                               const auto& y = *normed;
                               const double n = static_cast<double>(cols);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double mg = 0.0;
                                 double mgy = 0.0;
                                 for (std::size_t c = 0; c < cols; ++c) {
                                   mg += g[r * cols + c];
                                   mgy += g[r * cols + c] * y[r * cols + c];
                                 }
                                 mg /= n;
                                 mgy /= n;
                                 for (std::size_t c = 0; c < cols; ++c) {
                                   s[r * cols + c] += (*inv_std)[r] * (g[r * cols + c] - mg - y[r * cols + c] * mgy);
                                 }
                               }
                             });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  require(q.ndim() == 3 && k.ndim() == 3 && v.ndim() == 3 && q.dim(0) == k.dim(0) && k.shape() == v.shape() &&
              q.dim(2) == k.dim(2) && heads > 0 && q.dim(2) % heads == 0,
          "attention: incompatible q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
              shape_str(v.shape()) + " for " + std::to_string(heads) + " heads");
  const std::size_t batch = q.dim(0);
  const auto tq = static_cast<Eigen::Index>(q.dim(1));
  const auto tk = static_cast<Eigen::Index>(k.dim(1));
  const std::size_t width = q.dim(2);
  const auto dh = static_cast<Eigen::Index>(width / heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto w = static_cast<Eigen::Index>(width);
  // Attention weights, kept for the backward pass: [B, H, Tq, Tk].
  auto probs = std::make_shared<std::vector<double>>(batch * heads * static_cast<std::size_t>(tq * tk));
  std::vector<double> out(q.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t col = h * static_cast<std::size_t>(dh);
      StridedConstMat Q(q.data().data() + b * q.dim(1) * width + col, tq, dh, Eigen::OuterStride<>(w));
      StridedConstMat K(k.data().data() + b * k.dim(1) * width + col, tk, dh, Eigen::OuterStride<>(w));
      StridedConstMat V(v.data().data() + b * k.dim(1) * width + col, tk, dh, Eigen::OuterStride<>(w));
      MapMat P(probs->data() + (b * heads + h) * static_cast<std::size_t>(tq * tk), tq, tk);
      P.noalias() = (Q * K.transpose()) * inv_sqrt;
      for (Eigen::Index r = 0; r < tq; ++r) {
        const double mx = P.row(r).maxCoeff();
        P.row(r) = (P.row(r).array() - mx).exp();
        P.row(r) /= P.row(r).sum();
      }
      StridedMat O(out.data() + b * q.dim(1) * width + col, tq, dh, Eigen::OuterStride<>(w));
      O.noalias() = P * V;
    }
  }
  Tensor tqt = q;
  Tensor tkt = k;
  Tensor tvt = v;
  return Tensor::make_result(
      q.shape(), std::move(out), {q, k, v},
      [=](const std::vector<double>& g, GradSinks sinks) {
        RowMat dP(tq, tk);
        RowMat dS(tq, tk);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t col = h * static_cast<std::size_t>(dh);
            const std::size_t qoff = b * static_cast<std::size_t>(tq) * width + col;
            const std::size_t koff = b * static_cast<std::size_t>(tk) * width + col;
            StridedConstMat Q(tqt.data().data() + qoff, tq, dh, Eigen::OuterStride<>(w));
            StridedConstMat K(tkt.data().data() + koff, tk, dh, Eigen::OuterStride<>(w));
            StridedConstMat V(tvt.data().data() + koff, tk, dh, Eigen::OuterStride<>(w));
            StridedConstMat G(g.data() + qoff, tq, dh, Eigen::OuterStride<>(w));
            MapConstMat P(probs->data() + (b * heads + h) * static_cast<std::size_t>(tq * tk), tq, tk);
            dP.noalias() = G * V.transpose();
            for (Eigen::Index r = 0; r < tq; ++r) {
              const double dot = dP.row(r).dot(P.row(r));
              dS.row(r) = P.row(r).array() * (dP.row(r).array() - dot);
            }
            dS *= inv_sqrt;
            if (sinks[0]) {
              StridedMat dQ(sinks[0]->data() + qoff, tq, dh, Eigen::OuterStride<>(w));
              dQ.noalias() += dS * K;
            }
            if (sinks[1]) {
              StridedMat dK(sinks[1]->data() + koff, tk, dh, Eigen::OuterStride<>(w));
              dK.noalias() += dS.transpose() * Q;
            }
            if (sinks[2]) {
              StridedMat dV(sinks[2]->data() + koff, tk, dh, Eigen::OuterStride<>(w));
              dV.noalias() += P.transpose() * G;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Branch trace

BranchTrace::BranchTrace() : previous_(g_trace) { g_trace = this; }

BranchTrace::~BranchTrace() { g_trace = previous_; }

bool BranchTrace::active() { return g_trace != nullptr; }

void BranchTrace::record(std::uint64_t bits) {
  if (!g_trace) return;
  std::uint64_t h = g_trace->hash_;
  for (int i = 0; i < 8; ++i) {
    h ^= (bits >> (8 * i)) & 0xffU;
    h *= 0x100000001b3ULL;
  }
  g_trace->hash_ = h;
}

}  // namespace kplift
