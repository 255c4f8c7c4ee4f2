#pragma once

// Minimal reverse-mode differentiable arrays. A Graph records one forward
// computation (typically one training example) and replays it backwards.
// Parameters live in a ParamStore that graphs only read; gradients land in a
// caller-owned GradBuffer so several graphs can share one store.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace muse::nc {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::string shape_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  // Rank-1 tensors behave as a single row.
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  void fill(double v);
  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

struct Parameter {
  std::string name;
  Tensor value;
};

class ParamStore {
 public:
  std::size_t add(std::string name, Tensor init);
  std::size_t size() const noexcept { return params_.size(); }
  Parameter& at(std::size_t i) { return params_.at(i); }
  const Parameter& at(std::size_t i) const { return params_.at(i); }
  bool contains(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;
  Tensor& value(std::string_view name) { return params_[index_of(name)].value; }
  const Tensor& value(std::string_view name) const { return params_[index_of(name)].value; }
  std::size_t total_elements() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

// Gradient accumulators, index-aligned with a ParamStore.
class GradBuffer {
 public:
  GradBuffer() = default;
  explicit GradBuffer(const ParamStore& store);

  Tensor& operator[](std::size_t i) { return grads_[i]; }
  const Tensor& operator[](std::size_t i) const { return grads_[i]; }
  std::size_t size() const noexcept { return grads_.size(); }

  void zero();
  void add(const GradBuffer& other);
  void scale(double factor);
  double global_norm() const;

 private:
  std::vector<Tensor> grads_;
};

struct Var {
  int id = -1;
  bool valid() const noexcept { return id >= 0; }
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int)>;

  explicit Graph(const ParamStore* params = nullptr) : params_(params) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value);
  Var param(std::size_t index);
  Var param(std::string_view name);

  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Appends an op node. The backward function is dropped when no input
  // requires a gradient.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }

  // For use inside backward functions.
  const Tensor& out_grad(int node) const { return nodes_[node].grad; }
  Tensor* grad_slot(Var input);

  // Seeds d(root) with ones (or `seed`) and propagates. Parameter gradients
  // are added into `sink` when given, otherwise kept on the graph.
  void backward(Var root, GradBuffer* sink = nullptr);
  void backward(Var root, const Tensor& seed, GradBuffer* sink = nullptr);

 private:
  struct Node {
    Tensor value;
    const Tensor* ref = nullptr;
    Tensor grad;
    bool needs_grad = false;
    long param = -1;
    BackwardFn fn;
  };

  std::deque<Node> nodes_;
  const ParamStore* params_;
  GradBuffer* sink_ = nullptr;
};

// ---- ops -------------------------------------------------------------------

Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var a, double factor);
// x[..., n] + b[n] broadcast over rows.
Var add_bias(Graph& g, Var x, Var b);
Var matmul(Graph& g, Var a, Var b);
Var linear(Graph& g, Var x, Var w, Var b);

Var relu(Graph& g, Var x);
Var gelu(Graph& g, Var x);
Var sigmoid(Graph& g, Var x);
Var tanh_act(Graph& g, Var x);

// Softmax over the last axis.
Var softmax(Graph& g, Var x);
Var layer_norm(Graph& g, Var x, Var gain, Var bias, double eps = 1e-5);

Var embedding(Graph& g, Var table, std::span<const int> ids);
// Row i is the mean of the table rows in ids[i]; an empty list gives zeros.
Var embedding_mean(Graph& g, Var table, const std::vector<std::vector<int>>& ids);
// x[n] scalars times a learned vector w[d] -> [n, d].
Var continuous_embed(Graph& g, Var x, Var w);

Var concat_cols(Graph& g, std::span<const Var> parts);
Var slice_rows(Graph& g, Var x, std::size_t begin, std::size_t end);
Var reshape(Graph& g, Var x, Shape shape);

// Inverted dropout. Identity when p == 0 or rng is null (inference).
Var dropout(Graph& g, Var x, double p, Rng* rng);

// Weighted sum over elements of -[y log p + (1-y) log(1-p)], p clamped to
// [1e-7, 1 - 1e-7]. The gradient vanishes where the clamp is active.
Var bce_loss(Graph& g, Var p, std::span<const double> labels, std::span<const double> weights);
Var sum(Graph& g, Var x);
Var mean(Graph& g, Var x);

// Scaled dot-product attention over already projected q[L,d], k[S,d],
// v[S,d]. `mask` is additive ([L,S], 0 or -inf). Every row of the mask must
// keep at least one finite entry.
Var attention(Graph& g, Var q, Var k, Var v, const Tensor& mask, std::size_t heads);

struct AttentionWeights {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

Var multi_head_attention(Graph& g, Var xq, Var xkv, const AttentionWeights& w, const Tensor& mask,
                         std::size_t heads);

// Gate layout inside w[d_in,3d], u[d,3d], b[3d] is (update z | reset r | candidate).
//   z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br)
//   c = tanh(x Wc + (r*h) Uc + bc),  h' = (1-z)*h + z*c
Var gru_cell(Graph& g, Var x, Var h, Var w, Var u, Var b);

// Runs gru_cell over the rows of xs[T,d_in] starting from h0[d]. Rows with
// active[t] == 0 carry the previous state unchanged. Returns all states [T,d].
Var gru_sequence(Graph& g, Var xs, Var h0, Var w, Var u, Var b, std::span<const std::uint8_t> active = {});

// ---- plain helpers ---------------------------------------------------------

constexpr double kProbFloor = 1e-7;

double sigmoid(double x);
// tanh approximation of GELU and its derivative.
double gelu_value(double x);
double gelu_grad(double x);
void gelu_with_grad(double x, double& value, double& slope);
double clamp_probability(double p);
double bce(double p, double y);
// Initializers. Draws come from `rng` in row-major order.
Tensor normal_tensor(Shape shape, double stddev, Rng& rng);
// Glorot-normal matrix [in, out].
Tensor glorot(std::size_t in, std::size_t out, Rng& rng);

// Lower-triangular additive mask (0 on and below the diagonal, -inf above).
Tensor causal_mask(std::size_t length);

}  // namespace muse::nc
