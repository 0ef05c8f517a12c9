#pragma once

// Tape-based reverse-mode differentiation over dense row-major float64 arrays.
//
// A Tape owns every intermediate array created while building a loss. Model
// weights live in Parameter objects outside the tape; Tape::bind aliases them
// so that backward() accumulates straight into Parameter::grad.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace cast::ad {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;

  Parameter() = default;
  Parameter(std::string name, Shape shape);

  std::size_t size() const { return value.size(); }
  void zero_grad();
};

class Tape;

// Handle to one node on a tape. Cheap to copy; only valid while its tape lives.
class DiffArray {
 public:
  DiffArray() = default;

  const Shape& shape() const;
  std::size_t size() const;
  // Leading dimensions flattened; last dimension is the row length.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  std::span<const double> grad() const;
  double item() const;

  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  DiffArray(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Called once during backward with the tape and the node's own id.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf that owns its value and a zero-initialized gradient.
  DiffArray variable(Shape shape, std::vector<double> values);
  // Leaf aliasing a parameter; gradients accumulate into p.grad.
  DiffArray bind(Parameter& p);
  // Leaf aliasing a read-only parameter; its gradient stays on the tape.
  DiffArray bind(const Parameter& p);

  // Accumulates d(loss)/d(leaf) into every leaf reachable from `loss`.
  // Intermediate gradients are recomputed from scratch on every call.
  void backward(const DiffArray& loss);

  // Zeroes every leaf gradient on this tape, including bound parameters.
  void zero_grads();

  std::size_t size() const { return nodes_.size(); }

  // Op-author interface.
  DiffArray record(Shape shape, std::vector<double> values, BackwardFn backward);
  std::span<const double> values(std::size_t id) const;
  std::span<double> grad(std::size_t id);
  const Shape& shape(std::size_t id) const;
  void check_owned(const DiffArray& a) const;

 private:
  struct Node {
    Shape shape;
    std::vector<double> owned_value;
    std::vector<double> owned_grad;
    const double* value = nullptr;
    double* grad = nullptr;
    std::size_t count = 0;
    bool leaf = false;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;
};

// ---- differentiable operations -------------------------------------------

// [m x k] * [k x n]. Leading dimensions of `a` are flattened into m.
DiffArray op_matmul(const DiffArray& a, const DiffArray& b);
DiffArray op_add(const DiffArray& a, const DiffArray& b);
// x [rows x n] + bias [n], broadcast over rows.
DiffArray op_add_bias(const DiffArray& x, const DiffArray& bias);
DiffArray op_scale(const DiffArray& x, double factor);
DiffArray op_sum(const DiffArray& x);
DiffArray op_reshape(const DiffArray& x, Shape shape);
// tanh approximation of GELU.
DiffArray op_gelu(const DiffArray& x);
DiffArray op_layernorm(const DiffArray& x, const DiffArray& gain, const DiffArray& bias,
                       double eps = 1e-5);
DiffArray op_softmax_rows(const DiffArray& x);
// Gathers rows of `table` [vocab x d] -> [ids.size() x d].
DiffArray op_embed_lookup(const DiffArray& table, std::span<const int> ids);
// Mean cross-entropy over rows with mask[r] != 0. All-zero mask yields 0.
DiffArray op_cross_entropy(const DiffArray& logits, std::span<const int> targets,
                           std::span<const unsigned char> mask);
// Returns base with `block` added into columns [col_offset, col_offset + block.cols()).
DiffArray op_add_into_columns(const DiffArray& base, const DiffArray& block,
                              std::size_t col_offset);

// Causal multi-head self-attention over q/k/v of shape [batch*seq x d_model].
// Heads with head_keep[h] == 0 produce an all-zero output block. An empty
// head_keep keeps all heads.
DiffArray op_causal_attention(const DiffArray& q, const DiffArray& k, const DiffArray& v,
                              std::size_t batch, std::size_t seq, std::size_t n_heads,
                              std::span<const unsigned char> head_keep = {});

// ---- gradient oracle -------------------------------------------------------

using LossFn = std::function<DiffArray(Tape&)>;

struct GradientProbe {
  Parameter* param = nullptr;
  std::size_t index = 0;
};

// Central-difference check of backward() against `loss`. Checks every element
// of `params` unless `probes` is nonempty. Returns the max relative error using
// max(|analytic|, |numeric|, 1e-12) as denominator.
double finite_difference_check(const LossFn& loss, std::span<Parameter* const> params,
                               double step, std::span<const GradientProbe> probes = {});

}  // namespace cast::ad
