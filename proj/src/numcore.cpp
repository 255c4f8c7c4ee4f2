#include "muse/numcore.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

#include "muse/error.hpp"

namespace muse::nc {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

CMapR as_mat(const Tensor& t) { return CMapR(t.data(), static_cast<Eigen::Index>(t.rows()),
                                             static_cast<Eigen::Index>(t.cols())); }
MapR as_mat(Tensor& t) { return MapR(t.data(), static_cast<Eigen::Index>(t.rows()),
                                     static_cast<Eigen::Index>(t.cols())); }

[[noreturn]] void shape_error(const std::string& op, const Tensor& a, const Tensor& b) {
  throw Error(ErrorKind::ShapeMismatch,
              op + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

void accumulate(Tensor* slot, const Tensor& delta) {
  if (slot == nullptr) return;
  double* dst = slot->data();
  const double* src = delta.data();
  for (std::size_t i = 0; i < delta.size(); ++i) dst[i] += src[i];
}

template <typename Fwd, typename Bwd>
Var unary(Graph& g, Var x, Fwd fwd, Bwd dydx) {
  const Tensor& xv = g.value(x);
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = fwd(xv[i]);
  return g.record(std::move(y), {x}, [x, dydx](Graph& gr, int self) {
    Tensor* dx = gr.grad_slot(x);
    if (dx == nullptr) return;
    const Tensor& xv = gr.value(x);
    const Tensor& yv = gr.value(Var{self});
    const Tensor& dy = gr.out_grad(self);
    for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i] * dydx(xv[i], yv[i]);
  });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

namespace {

// tanh through one exp call; libm's tanh is several times slower and GELU
// sits on the hot path of the pooling MLP.
double gelu_tanh(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  if (u > 20.0) return 1.0;
  if (u < -20.0) return -1.0;
  return 1.0 - 2.0 / (std::exp(2.0 * u) + 1.0);
}

}  // namespace

double gelu_value(double x) { return 0.5 * x * (1.0 + gelu_tanh(x)); }

double gelu_grad(double x) {
  const double t = gelu_tanh(x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

void gelu_with_grad(double x, double& value, double& slope) {
  const double t = gelu_tanh(x);
  value = 0.5 * x * (1.0 + t);
  slope = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  std::size_t n = 1;
  for (auto d : shape_) {
    if (d == 0) throw Error(ErrorKind::ShapeMismatch, "zero-sized dimension in " + shape_string(shape_));
    n *= d;
  }
  data_.assign(shape_.empty() ? 0 : n, fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : Tensor(std::move(shape)) {
  if (values.size() != data_.size()) {
    throw Error(ErrorKind::ShapeMismatch, "element count " + std::to_string(values.size()) +
                                              " does not fit " + shape_string(shape_));
  }
  data_ = std::move(values);
}

Tensor Tensor::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return Tensor({rows, cols}, std::move(v));
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.empty()) return 0;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < shape_.size(); ++i) r *= shape_[i];
  return r;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

// ---- ParamStore / GradBuffer ------------------------------------------------

std::size_t ParamStore::add(std::string name, Tensor init) {
  if (by_name_.contains(name)) throw Error(ErrorKind::InvalidArgument, "duplicate parameter " + name);
  const std::size_t index = params_.size();
  by_name_.emplace(name, index);
  params_.push_back(Parameter{std::move(name), std::move(init)});
  return index;
}

bool ParamStore::contains(std::string_view name) const { return by_name_.contains(std::string(name)); }

std::size_t ParamStore::index_of(std::string_view name) const {
  auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) throw Error(ErrorKind::InvalidArgument, "unknown parameter " + std::string(name));
  return it->second;
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

GradBuffer::GradBuffer(const ParamStore& store) {
  grads_.reserve(store.size());
  for (const auto& p : store) grads_.emplace_back(p.value.shape(), 0.0);
}

void GradBuffer::zero() {
  for (auto& g : grads_) g.fill(0.0);
}

void GradBuffer::add(const GradBuffer& other) {
  if (other.size() != grads_.size()) throw Error(ErrorKind::ShapeMismatch, "gradient buffers differ in size");
  for (std::size_t i = 0; i < grads_.size(); ++i) accumulate(&grads_[i], other.grads_[i]);
}

void GradBuffer::scale(double factor) {
  for (auto& g : grads_)
    for (auto& v : g.values()) v *= factor;
}

double GradBuffer::global_norm() const {
  double s = 0.0;
  for (const auto& g : grads_)
    for (double v : g.values()) s += v * v;
  return std::sqrt(s);
}

// ---- Graph -----------------------------------------------------------------

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Graph::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Graph::param(std::size_t index) {
  if (params_ == nullptr) throw Error(ErrorKind::InvalidArgument, "graph has no parameter store");
  Node n;
  n.ref = &params_->at(index).value;
  n.needs_grad = true;
  n.param = static_cast<long>(index);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Graph::param(std::string_view name) {
  if (params_ == nullptr) throw Error(ErrorKind::InvalidArgument, "graph has no parameter store");
  return param(params_->index_of(name));
}

const Tensor& Graph::value(Var v) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  return n.ref != nullptr ? *n.ref : n.value;
}

const Tensor& Graph::grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).grad; }

Var Graph::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (Var in : inputs) {
    if (in.valid() && nodes_.at(static_cast<std::size_t>(in.id)).needs_grad) {
      n.needs_grad = true;
      break;
    }
  }
  if (n.needs_grad) n.fn = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Tensor* Graph::grad_slot(Var input) {
  if (!input.valid()) return nullptr;
  Node& n = nodes_[static_cast<std::size_t>(input.id)];
  if (!n.needs_grad) return nullptr;
  if (n.param >= 0 && sink_ != nullptr) return &(*sink_)[static_cast<std::size_t>(n.param)];
  if (n.grad.empty()) n.grad = Tensor(value(input).shape(), 0.0);
  return &n.grad;
}

void Graph::backward(Var root, GradBuffer* sink) {
  backward(root, Tensor(value(root).shape(), 1.0), sink);
}

void Graph::backward(Var root, const Tensor& seed, GradBuffer* sink) {
  if (!seed.same_shape(value(root))) shape_error("backward seed", seed, value(root));
  for (auto& n : nodes_) n.grad = Tensor();
  sink_ = sink;
  nodes_[static_cast<std::size_t>(root.id)].grad = seed;
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.fn || n.grad.empty()) continue;
    n.fn(*this, i);
  }
  sink_ = nullptr;
}

// ---- elementwise -----------------------------------------------------------

Var add(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (!av.same_shape(bv)) shape_error("add", av, bv);
  Tensor y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return g.record(std::move(y), {a, b}, [a, b](Graph& gr, int self) {
    const Tensor& dy = gr.out_grad(self);
    accumulate(gr.grad_slot(a), dy);
    accumulate(gr.grad_slot(b), dy);
  });
}

Var sub(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (!av.same_shape(bv)) shape_error("sub", av, bv);
  Tensor y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return g.record(std::move(y), {a, b}, [a, b](Graph& gr, int self) {
    const Tensor& dy = gr.out_grad(self);
    accumulate(gr.grad_slot(a), dy);
    if (Tensor* db = gr.grad_slot(b))
      for (std::size_t i = 0; i < dy.size(); ++i) (*db)[i] -= dy[i];
  });
}

Var mul(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (!av.same_shape(bv)) shape_error("mul", av, bv);
  Tensor y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return g.record(std::move(y), {a, b}, [a, b](Graph& gr, int self) {
    const Tensor& dy = gr.out_grad(self);
    if (Tensor* da = gr.grad_slot(a)) {
      const Tensor& bv = gr.value(b);
      for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i] * bv[i];
    }
    if (Tensor* db = gr.grad_slot(b)) {
      const Tensor& av = gr.value(a);
      for (std::size_t i = 0; i < dy.size(); ++i) (*db)[i] += dy[i] * av[i];
    }
  });
}

Var scale(Graph& g, Var a, double factor) {
  Tensor y = g.value(a);
  for (auto& v : y.values()) v *= factor;
  return g.record(std::move(y), {a}, [a, factor](Graph& gr, int self) {
    if (Tensor* da = gr.grad_slot(a)) {
      const Tensor& dy = gr.out_grad(self);
      for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i] * factor;
    }
  });
}

Var add_bias(Graph& g, Var x, Var b) {
  const Tensor& xv = g.value(x);
  const Tensor& bv = g.value(b);
  if (bv.rank() != 1 || bv.size() != xv.cols()) shape_error("add_bias", xv, bv);
  Tensor y = xv;
  const std::size_t n = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) y[r * n + c] += bv[c];
  return g.record(std::move(y), {x, b}, [x, b](Graph& gr, int self) {
    const Tensor& dy = gr.out_grad(self);
    accumulate(gr.grad_slot(x), dy);
    if (Tensor* db = gr.grad_slot(b)) {
      const std::size_t n = db->size();
      for (std::size_t i = 0; i < dy.size(); ++i) (*db)[i % n] += dy[i];
    }
  });
}

Var matmul(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (av.rank() > 2 || bv.rank() != 2 || av.cols() != bv.dim(0)) shape_error("matmul", av, bv);
  Shape out_shape = av.rank() == 1 ? Shape{bv.cols()} : Shape{av.rows(), bv.cols()};
  Tensor y(out_shape);
  as_mat(y).noalias() = as_mat(av) * as_mat(bv);
  return g.record(std::move(y), {a, b}, [a, b](Graph& gr, int self) {
    const Tensor& dy = gr.out_grad(self);
    if (Tensor* da = gr.grad_slot(a)) as_mat(*da).noalias() += as_mat(dy) * as_mat(gr.value(b)).transpose();
    if (Tensor* db = gr.grad_slot(b)) as_mat(*db).noalias() += as_mat(gr.value(a)).transpose() * as_mat(dy);
  });
}

Var linear(Graph& g, Var x, Var w, Var b) { return add_bias(g, matmul(g, x, w), b); }

Var relu(Graph& g, Var x) {
  return unary(g, x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double xv, double) { return xv > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  Tensor y(xv.shape());
  auto slope = std::make_shared<std::vector<double>>(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) gelu_with_grad(xv[i], y[i], (*slope)[i]);
  return g.record(std::move(y), {x}, [x, slope](Graph& gr, int self) {
    if (Tensor* dx = gr.grad_slot(x)) {
      const Tensor& dy = gr.out_grad(self);
      for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i] * (*slope)[i];
    }
  });
}

Var sigmoid(Graph& g, Var x) {
  return unary(g, x, [](double v) { return sigmoid(v); }, [](double, double y) { return y * (1.0 - y); });
}

Var tanh_act(Graph& g, Var x) {
  return unary(g, x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var softmax(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  Tensor y(xv.shape());
  const std::size_t n = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const double* in = xv.data() + r * n;
    double* out = y.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += (out[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < n; ++c) out[c] /= z;
  }
  return g.record(std::move(y), {x}, [x](Graph& gr, int self) {
    Tensor* dx = gr.grad_slot(x);
    if (dx == nullptr) return;
    const Tensor& yv = gr.value(Var{self});
    const Tensor& dy = gr.out_grad(self);
    const std::size_t n = yv.cols();
    for (std::size_t r = 0; r < yv.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += dy[r * n + c] * yv[r * n + c];
      for (std::size_t c = 0; c < n; ++c) (*dx)[r * n + c] += yv[r * n + c] * (dy[r * n + c] - dot);
    }
  });
}

Var layer_norm(Graph& g, Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = g.value(x);
  const Tensor& gv = g.value(gain);
  const Tensor& bv = g.value(bias);
  const std::size_t n = xv.cols();
  const std::size_t rows = xv.rows();
  if (gv.size() != n || bv.size() != n) shape_error("layer_norm", xv, gv);
  Tensor y(xv.shape());
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += in[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (in[c] - mu) * is;
      (*xhat)[r * n + c] = h;
      y[r * n + c] = h * gv[c] + bv[c];
    }
  }
  return g.record(std::move(y), {x, gain, bias}, [x, gain, bias, xhat, inv_std](Graph& gr, int self) {
    const Tensor& dy = gr.out_grad(self);
    const Tensor& gv = gr.value(gain);
    const std::size_t n = gv.size();
    const std::size_t rows = dy.size() / n;
    Tensor* dx = gr.grad_slot(x);
    Tensor* dg = gr.grad_slot(gain);
    Tensor* db = gr.grad_slot(bias);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* dyr = dy.data() + r * n;
      const double* hr = xhat->data() + r * n;
      if (dg != nullptr)
        for (std::size_t c = 0; c < n; ++c) (*dg)[c] += dyr[c] * hr[c];
      if (db != nullptr)
        for (std::size_t c = 0; c < n; ++c) (*db)[c] += dyr[c];
      if (dx != nullptr) {
        double mean_d = 0.0, mean_dh = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          const double d = dyr[c] * gv[c];
          mean_d += d;
          mean_dh += d * hr[c];
        }
        mean_d /= static_cast<double>(n);
        mean_dh /= static_cast<double>(n);
        for (std::size_t c = 0; c < n; ++c) {
          const double d = dyr[c] * gv[c];
          (*dx)[r * n + c] += (*inv_std)[r] * (d - mean_d - hr[c] * mean_dh);
        }
      }
    }
  });
}

Var embedding(Graph& g, Var table, std::span<const int> ids) {
  const Tensor& tv = g.value(table);
  if (tv.rank() != 2) throw Error(ErrorKind::ShapeMismatch, "embedding table must be rank 2");
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw Error(ErrorKind::IndexOutOfRange,
                  "embedding id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  if (ids.empty()) throw Error(ErrorKind::ShapeMismatch, "embedding lookup with no ids");
  Tensor y({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, y.data() + i * d);
  std::vector<int> saved(ids.begin(), ids.end());
  return g.record(std::move(y), {table}, [table, saved = std::move(saved), d](Graph& gr, int self) {
    Tensor* dt = gr.grad_slot(table);
    if (dt == nullptr) return;
    const Tensor& dy = gr.out_grad(self);
    for (std::size_t i = 0; i < saved.size(); ++i) {
      double* row = dt->data() + static_cast<std::size_t>(saved[i]) * d;
      for (std::size_t c = 0; c < d; ++c) row[c] += dy[i * d + c];
    }
  });
}

Var embedding_mean(Graph& g, Var table, const std::vector<std::vector<int>>& ids) {
  const Tensor& tv = g.value(table);
  if (tv.rank() != 2) throw Error(ErrorKind::ShapeMismatch, "embedding table must be rank 2");
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  if (ids.empty()) throw Error(ErrorKind::ShapeMismatch, "embedding lookup with no rows");
  Tensor y({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i].empty()) continue;
    const double w = 1.0 / static_cast<double>(ids[i].size());
    for (int id : ids[i]) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
        throw Error(ErrorKind::IndexOutOfRange,
                    "embedding id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
      }
      const double* row = tv.data() + static_cast<std::size_t>(id) * d;
      for (std::size_t c = 0; c < d; ++c) y[i * d + c] += w * row[c];
    }
  }
  return g.record(std::move(y), {table}, [table, ids, d](Graph& gr, int self) {
    Tensor* dt = gr.grad_slot(table);
    if (dt == nullptr) return;
    const Tensor& dy = gr.out_grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i].empty()) continue;
      const double w = 1.0 / static_cast<double>(ids[i].size());
      for (int id : ids[i]) {
        double* row = dt->data() + static_cast<std::size_t>(id) * d;
        for (std::size_t c = 0; c < d; ++c) row[c] += w * dy[i * d + c];
      }
    }
  });
}

Var continuous_embed(Graph& g, Var x, Var w) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(w);
  if (wv.rank() != 1) shape_error("continuous_embed", xv, wv);
  const std::size_t n = xv.size(), d = wv.size();
  Tensor y({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) y[i * d + c] = xv[i] * wv[c];
  return g.record(std::move(y), {x, w}, [x, w, n, d](Graph& gr, int self) {
    const Tensor& dy = gr.out_grad(self);
    if (Tensor* dx = gr.grad_slot(x)) {
      const Tensor& wv = gr.value(w);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) (*dx)[i] += dy[i * d + c] * wv[c];
    }
    if (Tensor* dw = gr.grad_slot(w)) {
      const Tensor& xv = gr.value(x);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) (*dw)[c] += dy[i * d + c] * xv[i];
    }
  });
}

Var concat_cols(Graph& g, std::span<const Var> parts) {
  if (parts.empty()) throw Error(ErrorKind::ShapeMismatch, "concat of nothing");
  const std::size_t rows = g.value(parts[0]).rows();
  bool all_rank1 = true;
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (Var p : parts) {
    const Tensor& v = g.value(p);
    if (v.rows() != rows) shape_error("concat_cols", g.value(parts[0]), v);
    all_rank1 = all_rank1 && v.rank() == 1;
    widths.push_back(v.cols());
    total += v.cols();
  }
  Tensor y(all_rank1 ? Shape{total} : Shape{rows, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = g.value(parts[k]);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data() + r * widths[k], widths[k], y.data() + r * total + offset);
    offset += widths[k];
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return g.record(std::move(y), parts, [saved, widths, rows, total](Graph& gr, int self) {
    const Tensor& dy = gr.out_grad(self);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < saved.size(); ++k) {
      if (Tensor* dp = gr.grad_slot(saved[k])) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) (*dp)[r * widths[k] + c] += dy[r * total + offset + c];
      }
      offset += widths[k];
    }
  });
}

Var slice_rows(Graph& g, Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = g.value(x);
  if (xv.rank() != 2 || begin >= end || end > xv.dim(0)) {
    throw Error(ErrorKind::IndexOutOfRange, "slice_rows [" + std::to_string(begin) + "," + std::to_string(end) +
                                                ") of " + shape_string(xv.shape()));
  }
  const std::size_t n = xv.cols();
  Tensor y({end - begin, n});
  std::copy_n(xv.data() + begin * n, (end - begin) * n, y.data());
  return g.record(std::move(y), {x}, [x, begin, n](Graph& gr, int self) {
    Tensor* dx = gr.grad_slot(x);
    if (dx == nullptr) return;
    const Tensor& dy = gr.out_grad(self);
    for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[begin * n + i] += dy[i];
  });
}

Var reshape(Graph& g, Var x, Shape shape) {
  const Tensor& xv = g.value(x);
  Tensor y(std::move(shape));
  if (y.size() != xv.size()) shape_error("reshape", xv, y);
  std::copy_n(xv.data(), xv.size(), y.data());
  return g.record(std::move(y), {x}, [x](Graph& gr, int self) {
    if (Tensor* dx = gr.grad_slot(x)) {
      const Tensor& dy = gr.out_grad(self);
      for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i];
    }
  });
}

Var dropout(Graph& g, Var x, double p, Rng* rng) {
  if (p < 0.0 || p >= 1.0) throw Error(ErrorKind::InvalidArgument, "dropout rate must be in [0,1)");
  if (p == 0.0 || rng == nullptr) return x;
  const Tensor& xv = g.value(x);
  auto keep = std::make_shared<std::vector<double>>(xv.size());
  const double inv = 1.0 / (1.0 - p);
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double u = static_cast<double>((*rng)() >> 11) * 0x1.0p-53;
    (*keep)[i] = u >= p ? inv : 0.0;
    y[i] = xv[i] * (*keep)[i];
  }
  return g.record(std::move(y), {x}, [x, keep](Graph& gr, int self) {
    if (Tensor* dx = gr.grad_slot(x)) {
      const Tensor& dy = gr.out_grad(self);
      for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i] * (*keep)[i];
    }
  });
}

Var bce_loss(Graph& g, Var p, std::span<const double> labels, std::span<const double> weights) {
  const Tensor& pv = g.value(p);
  if (labels.size() != pv.size() || weights.size() != pv.size()) {
    throw Error(ErrorKind::ShapeMismatch, "bce_loss: labels/weights do not match predictions");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (weights[i] != 0.0) total += weights[i] * bce(pv[i], labels[i]);
  }
  std::vector<double> y(labels.begin(), labels.end());
  std::vector<double> w(weights.begin(), weights.end());
  return g.record(Tensor::scalar(total), {p}, [p, y = std::move(y), w = std::move(w)](Graph& gr, int self) {
    Tensor* dp = gr.grad_slot(p);
    if (dp == nullptr) return;
    const double seed = gr.out_grad(self)[0];
    const Tensor& pv = gr.value(p);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      if (w[i] == 0.0) continue;
      const double q = pv[i];
      if (q <= kProbFloor || q >= 1.0 - kProbFloor) continue;
      (*dp)[i] += seed * w[i] * (-(y[i] / q) + (1.0 - y[i]) / (1.0 - q));
    }
  });
}

Var sum(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  const double s = std::accumulate(xv.values().begin(), xv.values().end(), 0.0);
  return g.record(Tensor::scalar(s), {x}, [x](Graph& gr, int self) {
    if (Tensor* dx = gr.grad_slot(x)) {
      const double d = gr.out_grad(self)[0];
      for (auto& v : dx->values()) v += d;
    }
  });
}

Var mean(Graph& g, Var x) { return scale(g, sum(g, x), 1.0 / static_cast<double>(g.value(x).size())); }

// ---- attention -------------------------------------------------------------

Var attention(Graph& g, Var q, Var k, Var v, const Tensor& mask, std::size_t heads) {
  const Tensor& qv = g.value(q);
  const Tensor& kv = g.value(k);
  const Tensor& vv = g.value(v);
  const std::size_t L = qv.rows(), S = kv.rows(), d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || vv.rows() != S) shape_error("attention", qv, kv);
  if (heads == 0 || d % heads != 0) {
    throw Error(ErrorKind::ShapeMismatch, "model width " + std::to_string(d) + " not divisible by " +
                                              std::to_string(heads) + " heads");
  }
  if (mask.rows() != L || mask.cols() != S) shape_error("attention mask", mask, qv);
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<std::vector<MatR>>(heads);
  Tensor y({L, d});
  CMapR Q = as_mat(qv), K = as_mat(kv), V = as_mat(vv);
  CMapR M = as_mat(mask);
  MapR Y = as_mat(y);
  const auto Li = static_cast<Eigen::Index>(L), Si = static_cast<Eigen::Index>(S),
             dhi = static_cast<Eigen::Index>(dh);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h * dh);
    MatR s = (Q.middleCols(off, dhi) * K.middleCols(off, dhi).transpose()) * sc + M;
    for (Eigen::Index r = 0; r < Li; ++r) {
      const double mx = s.row(r).maxCoeff();
      if (!std::isfinite(mx)) throw Error(ErrorKind::InvalidArgument, "attention row with every key masked");
      double z = 0.0;
      for (Eigen::Index c = 0; c < Si; ++c) z += (s(r, c) = std::exp(s(r, c) - mx));
      s.row(r) /= z;
    }
    Y.middleCols(off, dhi).noalias() = s * V.middleCols(off, dhi);
    (*probs)[h] = std::move(s);
  }
  return g.record(std::move(y), {q, k, v}, [q, k, v, probs, heads, dh, sc](Graph& gr, int self) {
    const Tensor& dy = gr.out_grad(self);
    CMapR dY = as_mat(dy);
    CMapR Q = as_mat(gr.value(q)), K = as_mat(gr.value(k)), V = as_mat(gr.value(v));
    Tensor* dq = gr.grad_slot(q);
    Tensor* dk = gr.grad_slot(k);
    Tensor* dv = gr.grad_slot(v);
    const auto dhi = static_cast<Eigen::Index>(dh);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto off = static_cast<Eigen::Index>(h * dh);
      const MatR& P = (*probs)[h];
      if (dv != nullptr) as_mat(*dv).middleCols(off, dhi).noalias() += P.transpose() * dY.middleCols(off, dhi);
      if (dq == nullptr && dk == nullptr) continue;
      MatR dP = dY.middleCols(off, dhi) * V.middleCols(off, dhi).transpose();
      Eigen::VectorXd rowdot = (dP.array() * P.array()).rowwise().sum();
      MatR dS = (P.array() * (dP.colwise() - rowdot).array()).matrix() * sc;
      if (dq != nullptr) as_mat(*dq).middleCols(off, dhi).noalias() += dS * K.middleCols(off, dhi);
      if (dk != nullptr) as_mat(*dk).middleCols(off, dhi).noalias() += dS.transpose() * Q.middleCols(off, dhi);
    }
  });
}

Var multi_head_attention(Graph& g, Var xq, Var xkv, const AttentionWeights& w, const Tensor& mask,
                         std::size_t heads) {
  Var q = linear(g, xq, w.wq, w.bq);
  Var k = linear(g, xkv, w.wk, w.bk);
  Var v = linear(g, xkv, w.wv, w.bv);
  return linear(g, attention(g, q, k, v, mask, heads), w.wo, w.bo);
}

// ---- GRU -------------------------------------------------------------------

namespace {

struct GruCache {
  std::vector<double> z, r, c, h_prev;
};

// One step given a = x W + b. Writes h_out and fills the cache.
void gru_forward_step(const double* a, const double* h, CMapR U, std::size_t d, double* h_out, GruCache& cache) {
  const auto di = static_cast<Eigen::Index>(d);
  Eigen::Map<const RowVec> hv(h, di);
  RowVec uzr = hv * U.leftCols(2 * di);
  cache.z.resize(d);
  cache.r.resize(d);
  cache.c.resize(d);
  cache.h_prev.assign(h, h + d);
  RowVec rh(di);
  for (std::size_t i = 0; i < d; ++i) {
    cache.z[i] = sigmoid(a[i] + uzr[static_cast<Eigen::Index>(i)]);
    cache.r[i] = sigmoid(a[d + i] + uzr[static_cast<Eigen::Index>(d + i)]);
    rh[static_cast<Eigen::Index>(i)] = cache.r[i] * h[i];
  }
  RowVec uc = rh * U.rightCols(di);
  for (std::size_t i = 0; i < d; ++i) {
    cache.c[i] = std::tanh(a[2 * d + i] + uc[static_cast<Eigen::Index>(i)]);
    h_out[i] = (1.0 - cache.z[i]) * h[i] + cache.z[i] * cache.c[i];
  }
}

// Given dh_out, writes da (3d) and adds into dh_prev (d) and dU.
void gru_backward_step(const double* dh_out, const GruCache& cache, CMapR U, std::size_t d, double* da,
                       double* dh_prev, MapR* dU) {
  const auto di = static_cast<Eigen::Index>(d);
  RowVec dc_pre(di), dzr(2 * di), rh(di);
  for (std::size_t i = 0; i < d; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    const double z = cache.z[i], c = cache.c[i], hp = cache.h_prev[i];
    dh_prev[i] += dh_out[i] * (1.0 - z);
    const double dz = dh_out[i] * (c - hp);
    dc_pre[ii] = dh_out[i] * z * (1.0 - c * c);
    dzr[ii] = dz * z * (1.0 - z);
    rh[ii] = cache.r[i] * hp;
  }
  RowVec drh = dc_pre * U.rightCols(di).transpose();
  for (std::size_t i = 0; i < d; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    const double r = cache.r[i];
    const double dr = drh[ii] * cache.h_prev[i];
    dh_prev[i] += drh[ii] * r;
    dzr[di + ii] = dr * r * (1.0 - r);
  }
  Eigen::Map<const RowVec> hp(cache.h_prev.data(), di);
  RowVec dh_gates = dzr * U.leftCols(2 * di).transpose();
  for (std::size_t i = 0; i < d; ++i) dh_prev[i] += dh_gates[static_cast<Eigen::Index>(i)];
  if (dU != nullptr) {
    dU->leftCols(2 * di).noalias() += hp.transpose() * dzr;
    dU->rightCols(di).noalias() += rh.transpose() * dc_pre;
  }
  for (std::size_t i = 0; i < 2 * d; ++i) da[i] = dzr[static_cast<Eigen::Index>(i)];
  for (std::size_t i = 0; i < d; ++i) da[2 * d + i] = dc_pre[static_cast<Eigen::Index>(i)];
}

void check_gru_shapes(const Tensor& x, const Tensor& h, const Tensor& w, const Tensor& u, const Tensor& b) {
  const std::size_t d = h.cols();
  if (w.rank() != 2 || w.dim(0) != x.cols() || w.dim(1) != 3 * d) shape_error("gru W", x, w);
  if (u.rank() != 2 || u.dim(0) != d || u.dim(1) != 3 * d) shape_error("gru U", h, u);
  if (b.size() != 3 * d) shape_error("gru b", h, b);
}

}  // namespace

Var gru_cell(Graph& g, Var x, Var h, Var w, Var u, Var b) {
  const Tensor& xv = g.value(x);
  const Tensor& hv = g.value(h);
  check_gru_shapes(xv, hv, g.value(w), g.value(u), g.value(b));
  if (xv.rows() != 1 || hv.rows() != 1) shape_error("gru_cell", xv, hv);
  const std::size_t d = hv.size();
  RowVec a = as_mat(xv) * as_mat(g.value(w));
  for (std::size_t i = 0; i < 3 * d; ++i) a[static_cast<Eigen::Index>(i)] += g.value(b)[i];
  auto cache = std::make_shared<GruCache>();
  Tensor y({d});
  gru_forward_step(a.data(), hv.data(), as_mat(g.value(u)), d, y.data(), *cache);
  return g.record(std::move(y), {x, h, w, u, b}, [x, h, w, u, b, d, cache](Graph& gr, int self) {
    const Tensor& dy = gr.out_grad(self);
    std::vector<double> da(3 * d), dh(d, 0.0);
    Tensor* du = gr.grad_slot(u);
    MapR dU = du != nullptr ? as_mat(*du) : MapR(nullptr, 0, 0);
    gru_backward_step(dy.data(), *cache, as_mat(gr.value(u)), d, da.data(), dh.data(), du ? &dU : nullptr);
    if (Tensor* dhs = gr.grad_slot(h))
      for (std::size_t i = 0; i < d; ++i) (*dhs)[i] += dh[i];
    Eigen::Map<const RowVec> dav(da.data(), static_cast<Eigen::Index>(3 * d));
    if (Tensor* db = gr.grad_slot(b))
      for (std::size_t i = 0; i < 3 * d; ++i) (*db)[i] += da[i];
    if (Tensor* dw = gr.grad_slot(w)) as_mat(*dw).noalias() += as_mat(gr.value(x)).transpose() * dav;
    if (Tensor* dx = gr.grad_slot(x)) as_mat(*dx).noalias() += dav * as_mat(gr.value(w)).transpose();
  });
}

Var gru_sequence(Graph& g, Var xs, Var h0, Var w, Var u, Var b, std::span<const std::uint8_t> active) {
  const Tensor& xv = g.value(xs);
  const Tensor& hv = g.value(h0);
  check_gru_shapes(xv, hv, g.value(w), g.value(u), g.value(b));
  if (xv.rank() != 2 || hv.rows() != 1) shape_error("gru_sequence", xv, hv);
  const std::size_t T = xv.rows(), d = hv.size();
  if (!active.empty() && active.size() != T) throw Error(ErrorKind::ShapeMismatch, "gru_sequence active mask length");
  std::vector<std::uint8_t> act(active.begin(), active.end());
  if (act.empty()) act.assign(T, 1);

  MatR A = as_mat(xv) * as_mat(g.value(w));
  A.rowwise() += Eigen::Map<const RowVec>(g.value(b).data(), static_cast<Eigen::Index>(3 * d));
  auto caches = std::make_shared<std::vector<GruCache>>(T);
  Tensor y({T, d});
  CMapR U = as_mat(g.value(u));
  const double* prev = hv.data();
  for (std::size_t t = 0; t < T; ++t) {
    double* out = y.data() + t * d;
    if (act[t]) {
      gru_forward_step(A.row(static_cast<Eigen::Index>(t)).data(), prev, U, d, out, (*caches)[t]);
    } else {
      std::copy_n(prev, d, out);
    }
    prev = out;
  }
  return g.record(std::move(y), {xs, h0, w, u, b}, [xs, h0, w, u, b, T, d, caches, act](Graph& gr, int self) {
    const Tensor& dy = gr.out_grad(self);
    Tensor* du = gr.grad_slot(u);
    MapR dU = du != nullptr ? as_mat(*du) : MapR(nullptr, 0, 0);
    CMapR U = as_mat(gr.value(u));
    MatR dA = MatR::Zero(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(3 * d));
    std::vector<double> carry(d, 0.0), dh_out(d);
    for (std::size_t t = T; t-- > 0;) {
      for (std::size_t i = 0; i < d; ++i) dh_out[i] = dy[t * d + i] + carry[i];
      std::fill(carry.begin(), carry.end(), 0.0);
      if (act[t]) {
        gru_backward_step(dh_out.data(), (*caches)[t], U, d, dA.row(static_cast<Eigen::Index>(t)).data(),
                          carry.data(), du ? &dU : nullptr);
      } else {
        carry = dh_out;
      }
    }
    if (Tensor* dh0 = gr.grad_slot(h0))
      for (std::size_t i = 0; i < d; ++i) (*dh0)[i] += carry[i];
    if (Tensor* db = gr.grad_slot(b)) {
      RowVec s = dA.colwise().sum();
      for (std::size_t i = 0; i < 3 * d; ++i) (*db)[i] += s[static_cast<Eigen::Index>(i)];
    }
    if (Tensor* dw = gr.grad_slot(w)) as_mat(*dw).noalias() += as_mat(gr.value(xs)).transpose() * dA;
    if (Tensor* dx = gr.grad_slot(xs)) as_mat(*dx).noalias() += dA * as_mat(gr.value(w)).transpose();
  });
}

// ---- plain helpers ---------------------------------------------------------

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

Tensor glorot(std::size_t in, std::size_t out, Rng& rng) {
  return normal_tensor({in, out}, std::sqrt(2.0 / static_cast<double>(in + out)), rng);
}

double clamp_probability(double p) { return std::clamp(p, kProbFloor, 1.0 - kProbFloor); }

double bce(double p, double y) {
  const double q = clamp_probability(p);
  return -(y * std::log(q) + (1.0 - y) * std::log(1.0 - q));
}

Tensor causal_mask(std::size_t length) {
  Tensor m({length, length});
  for (std::size_t r = 0; r < length; ++r)
    for (std::size_t c = r + 1; c < length; ++c) m.at(r, c) = -std::numeric_limits<double>::infinity();
  return m;
}

}  // namespace muse::nc
