#include "cast/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <sstream>
#include <utility>

#include "cast/errors.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cast::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

Tape& same_tape(const DiffArray& a, const DiffArray& b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw ContractError("operands live on different tapes");
  }
  return *a.tape();
}

Tape& tape_of(const DiffArray& a) {
  if (a.tape() == nullptr) {
    throw ContractError("operand is not attached to a tape");
  }
  return *a.tape();
}

void require_same_shape(const DiffArray& a, const DiffArray& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

}  // namespace

Tape::Tape() {
#if defined(__GLIBC__)
  // Tape buffers are freed and reallocated every step; keeping them off mmap
  // avoids a page-fault storm on large batches.
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 64 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
  });
#endif
}

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) {
      os << 'x';
    }
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Parameter::Parameter(std::string name_, Shape shape_)
    : name(std::move(name_)), shape(std::move(shape_)) {
  value.assign(element_count(shape), 0.0);
  grad.assign(value.size(), 0.0);
}

void Parameter::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

// ---- DiffArray ---------------------------------------------------------------

const Shape& DiffArray::shape() const { return tape_of(*this).shape(id_); }

std::size_t DiffArray::size() const { return values().size(); }

std::size_t DiffArray::cols() const {
  const auto& s = shape();
  return s.empty() ? 1 : s.back();
}

std::size_t DiffArray::rows() const {
  const std::size_t c = cols();
  return c == 0 ? 0 : size() / c;
}

std::span<const double> DiffArray::values() const { return tape_of(*this).values(id_); }

std::span<const double> DiffArray::grad() const { return tape_of(*this).grad(id_); }

double DiffArray::item() const {
  const auto v = values();
  if (v.size() != 1) {
    throw ContractError("item() on non-scalar array of shape " + shape_string(shape()));
  }
  return v[0];
}

// ---- Tape --------------------------------------------------------------------

DiffArray Tape::variable(Shape shape, std::vector<double> values) {
  const std::size_t n = element_count(shape);
  if (values.size() != n) {
    throw DimensionError("variable: " + std::to_string(values.size()) +
                         " values for shape " + shape_string(shape));
  }
  Node& node = nodes_.emplace_back();
  node.shape = std::move(shape);
  node.owned_value = std::move(values);
  node.owned_grad.assign(n, 0.0);
  node.value = node.owned_value.data();
  node.grad = node.owned_grad.data();
  node.count = n;
  node.leaf = true;
  return {this, nodes_.size() - 1};
}

DiffArray Tape::bind(Parameter& p) {
  if (p.value.size() != element_count(p.shape)) {
    throw DimensionError("parameter " + p.name + " has inconsistent shape");
  }
  if (p.grad.size() != p.value.size()) {
    p.grad.assign(p.value.size(), 0.0);
  }
  Node& node = nodes_.emplace_back();
  node.shape = p.shape;
  node.value = p.value.data();
  node.grad = p.grad.data();
  node.count = p.value.size();
  node.leaf = true;
  return {this, nodes_.size() - 1};
}

DiffArray Tape::bind(const Parameter& p) {
  if (p.value.size() != element_count(p.shape)) {
    throw DimensionError("parameter " + p.name + " has inconsistent shape");
  }
  Node& node = nodes_.emplace_back();
  node.shape = p.shape;
  node.value = p.value.data();
  node.count = p.value.size();
  node.leaf = true;
  return {this, nodes_.size() - 1};
}

DiffArray Tape::record(Shape shape, std::vector<double> values, BackwardFn backward) {
  Node& node = nodes_.emplace_back();
  node.count = element_count(shape);
  node.shape = std::move(shape);
  node.owned_value = std::move(values);
  node.value = node.owned_value.data();
  node.backward = std::move(backward);
  return {this, nodes_.size() - 1};
}

std::span<const double> Tape::values(std::size_t id) const {
  const Node& n = nodes_.at(id);
  return {n.value, n.count};
}

std::span<double> Tape::grad(std::size_t id) {
  Node& n = nodes_.at(id);
  if (n.grad == nullptr) {
    return {};
  }
  return {n.grad, n.count};
}

const Shape& Tape::shape(std::size_t id) const { return nodes_.at(id).shape; }

void Tape::check_owned(const DiffArray& a) const {
  if (a.tape() != this || a.id() >= nodes_.size()) {
    throw ContractError("array does not belong to this tape");
  }
}

void Tape::backward(const DiffArray& loss) {
  check_owned(loss);
  if (nodes_[loss.id()].count != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_string(nodes_[loss.id()].shape));
  }
  const std::size_t last = loss.id();
  for (std::size_t i = 0; i <= last; ++i) {
    Node& n = nodes_[i];
    if (!n.leaf) {
      n.owned_grad.assign(n.count, 0.0);
      n.grad = n.owned_grad.data();
    } else if (n.grad == nullptr) {
      n.owned_grad.assign(n.count, 0.0);
      n.grad = n.owned_grad.data();
    }
  }
  nodes_[last].grad[0] += 1.0;
  for (std::size_t i = last + 1; i-- > 0;) {
    if (nodes_[i].backward) {
      nodes_[i].backward(*this, i);
    }
  }
}

void Tape::zero_grads() {
  for (Node& n : nodes_) {
    if (n.grad != nullptr) {
      std::fill(n.grad, n.grad + n.count, 0.0);
    }
  }
}

// ---- operations ----------------------------------------------------------------

DiffArray op_matmul(const DiffArray& a, const DiffArray& b) {
  Tape& t = same_tape(a, b);
  if (b.shape().size() != 2 || a.cols() != b.shape()[0]) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.rows());
  const auto k = static_cast<Eigen::Index>(a.cols());
  const auto n = static_cast<Eigen::Index>(b.shape()[1]);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MutMap(out.data(), m, n).noalias() =
      ConstMap(a.values().data(), m, k) * ConstMap(b.values().data(), k, n);
  Shape shape = a.shape();
  shape.back() = static_cast<std::size_t>(n);
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return t.record(std::move(shape), std::move(out), [ia, ib, m, k, n](Tape& tp, std::size_t self) {
    ConstMap dc(tp.grad(self).data(), m, n);
    ConstMap av(tp.values(ia).data(), m, k);
    ConstMap bv(tp.values(ib).data(), k, n);
    MutMap(tp.grad(ia).data(), m, k).noalias() += dc * bv.transpose();
    MutMap(tp.grad(ib).data(), k, n).noalias() += av.transpose() * dc;
  });
}

DiffArray op_add(const DiffArray& a, const DiffArray& b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a, b, "add");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = av[i] + bv[i];
  }
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return t.record(a.shape(), std::move(out), [ia, ib](Tape& tp, std::size_t self) {
    const auto g = tp.grad(self);
    auto ga = tp.grad(ia);
    auto gb = tp.grad(ib);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  });
}

DiffArray op_add_bias(const DiffArray& x, const DiffArray& bias) {
  Tape& t = same_tape(x, bias);
  const std::size_t cols = x.cols();
  if (bias.size() != cols) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " vs rows of " +
                         shape_string(x.shape()));
  }
  const std::size_t rows = x.rows();
  const auto xv = x.values();
  const auto bv = bias.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = xv[r * cols + c] + bv[c];
    }
  }
  const std::size_t ix = x.id();
  const std::size_t ib = bias.id();
  return t.record(x.shape(), std::move(out), [ix, ib, rows, cols](Tape& tp, std::size_t self) {
    const auto g = tp.grad(self);
    auto gx = tp.grad(ix);
    auto gb = tp.grad(ib);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        gx[r * cols + c] += g[r * cols + c];
        gb[c] += g[r * cols + c];
      }
    }
  });
}

DiffArray op_scale(const DiffArray& x, double factor) {
  Tape& t = tape_of(x);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = xv[i] * factor;
  }
  const std::size_t ix = x.id();
  return t.record(x.shape(), std::move(out), [ix, factor](Tape& tp, std::size_t self) {
    const auto g = tp.grad(self);
    auto gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      gx[i] += g[i] * factor;
    }
  });
}

DiffArray op_sum(const DiffArray& x) {
  Tape& t = tape_of(x);
  const auto xv = x.values();
  const double s = std::accumulate(xv.begin(), xv.end(), 0.0);
  const std::size_t ix = x.id();
  return t.record({1}, {s}, [ix](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    for (double& v : tp.grad(ix)) {
      v += g;
    }
  });
}

DiffArray op_reshape(const DiffArray& x, Shape shape) {
  Tape& t = tape_of(x);
  if (element_count(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  const auto xv = x.values();
  const std::size_t ix = x.id();
  return t.record(std::move(shape), std::vector<double>(xv.begin(), xv.end()),
                  [ix](Tape& tp, std::size_t self) {
                    const auto g = tp.grad(self);
                    auto gx = tp.grad(ix);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      gx[i] += g[i];
                    }
                  });
}

DiffArray op_gelu(const DiffArray& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Tape& t = tape_of(x);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  const std::size_t ix = x.id();
  return t.record(x.shape(), std::move(out), [ix](Tape& tp, std::size_t self) {
    const auto g = tp.grad(self);
    const auto xs = tp.values(ix);
    auto gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xs[i];
      const double th = std::tanh(kC * (v + kA * v * v * v));
      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * v * v);
      gx[i] += g[i] * d;
    }
  });
}

DiffArray op_layernorm(const DiffArray& x, const DiffArray& gain, const DiffArray& bias,
                       double eps) {
  Tape& t = same_tape(x, gain);
  same_tape(x, bias);
  const std::size_t cols = x.cols();
  if (gain.size() != cols || bias.size() != cols) {
    throw DimensionError("layernorm: gain/bias must have " + std::to_string(cols) + " elements");
  }
  const std::size_t rows = x.rows();
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  std::vector<double> xhat(xv.size());
  std::vector<double> rstd(rows);
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      mean += row[c];
    }
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      var += (row[c] - mean) * (row[c] - mean);
    }
    var /= static_cast<double>(cols);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (row[c] - mean) * rstd[r];
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * gv[c] + bv[c];
    }
  }
  const std::size_t ix = x.id();
  const std::size_t ig = gain.id();
  const std::size_t ib = bias.id();
  return t.record(x.shape(), std::move(out),
                  [ix, ig, ib, rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)](
                      Tape& tp, std::size_t self) {
                    const auto g = tp.grad(self);
                    const auto gv2 = tp.values(ig);
                    auto gx = tp.grad(ix);
                    auto gg = tp.grad(ig);
                    auto gb = tp.grad(ib);
                    const double inv_n = 1.0 / static_cast<double>(cols);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double mean_d = 0.0;
                      double mean_dh = 0.0;
                      for (std::size_t c = 0; c < cols; ++c) {
                        const std::size_t i = r * cols + c;
                        const double d = g[i] * gv2[c];
                        mean_d += d;
                        mean_dh += d * xhat[i];
                        gg[c] += g[i] * xhat[i];
                        gb[c] += g[i];
                      }
                      mean_d *= inv_n;
                      mean_dh *= inv_n;
                      for (std::size_t c = 0; c < cols; ++c) {
                        const std::size_t i = r * cols + c;
                        const double d = g[i] * gv2[c];
                        gx[i] += rstd[r] * (d - mean_d - xhat[i] * mean_dh);
                      }
                    }
                  });
}

namespace {

void softmax_row(const double* in, double* out, std::size_t n) {
  double mx = in[0];
  for (std::size_t c = 1; c < n; ++c) {
    mx = std::max(mx, in[c]);
  }
  double total = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    out[c] = std::exp(in[c] - mx);
    total += out[c];
  }
  const double inv = 1.0 / total;
  for (std::size_t c = 0; c < n; ++c) {
    out[c] *= inv;
  }
}

// dx = p * (dy - <dy, p>) for one softmax row.
void softmax_row_backward(const double* p, const double* dy, double* dx, std::size_t n) {
  double dot = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    dot += dy[c] * p[c];
  }
  for (std::size_t c = 0; c < n; ++c) {
    dx[c] += p[c] * (dy[c] - dot);
  }
}

}  // namespace

DiffArray op_softmax_rows(const DiffArray& x) {
  Tape& t = tape_of(x);
  const std::size_t cols = x.cols();
  const std::size_t rows = x.rows();
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    softmax_row(xv.data() + r * cols, out.data() + r * cols, cols);
  }
  const std::size_t ix = x.id();
  return t.record(x.shape(), std::move(out), [ix, rows, cols](Tape& tp, std::size_t self) {
    const auto p = tp.values(self);
    const auto g = tp.grad(self);
    auto gx = tp.grad(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      softmax_row_backward(p.data() + r * cols, g.data() + r * cols, gx.data() + r * cols, cols);
    }
  });
}

DiffArray op_embed_lookup(const DiffArray& table, std::span<const int> ids) {
  Tape& t = tape_of(table);
  if (table.shape().size() != 2) {
    throw DimensionError("embed_lookup: table must be 2-D, got " + shape_string(table.shape()));
  }
  const std::size_t vocab = table.shape()[0];
  const std::size_t d = table.shape()[1];
  const auto tv = table.values();
  std::vector<double> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw InputError("embed_lookup: id " + std::to_string(ids[r]) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[r]) * d, d, out.data() + r * d);
  }
  const std::size_t it = table.id();
  return t.record({ids.size(), d}, std::move(out),
                  [it, d, rows = std::vector<int>(ids.begin(), ids.end())](Tape& tp,
                                                                          std::size_t self) {
                    const auto g = tp.grad(self);
                    auto gt = tp.grad(it);
                    for (std::size_t r = 0; r < rows.size(); ++r) {
                      const std::size_t base = static_cast<std::size_t>(rows[r]) * d;
                      for (std::size_t c = 0; c < d; ++c) {
                        gt[base + c] += g[r * d + c];
                      }
                    }
                  });
}

DiffArray op_cross_entropy(const DiffArray& logits, std::span<const int> targets,
                           std::span<const unsigned char> mask) {
  Tape& t = tape_of(logits);
  const std::size_t vocab = logits.cols();
  const std::size_t rows = logits.rows();
  if (targets.size() != rows || mask.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(rows) + " rows but " +
                         std::to_string(targets.size()) + " targets and " +
                         std::to_string(mask.size()) + " mask entries");
  }
  std::size_t active = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw InputError("cross_entropy: target " + std::to_string(targets[r]) +
                       " outside vocabulary of " + std::to_string(vocab));
    }
    active += mask[r] != 0 ? 1 : 0;
  }
  if (active == 0) {
    return t.record({1}, {0.0}, nullptr);
  }
  const auto lv = logits.values();
  std::vector<double> probs(active * vocab);
  std::vector<std::size_t> active_rows;
  active_rows.reserve(active);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (mask[r] == 0) {
      continue;
    }
    double* p = probs.data() + active_rows.size() * vocab;
    softmax_row(lv.data() + r * vocab, p, vocab);
    const double* row = lv.data() + r * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      z += std::exp(row[c] - mx);
    }
    total += mx + std::log(z) - row[targets[r]];
    active_rows.push_back(r);
  }
  const double inv = 1.0 / static_cast<double>(active);
  const std::size_t il = logits.id();
  return t.record(
      {1}, {total * inv},
      [il, vocab, inv, probs = std::move(probs), active_rows = std::move(active_rows),
       tg = std::vector<int>(targets.begin(), targets.end())](Tape& tp, std::size_t self) {
        const double g = tp.grad(self)[0] * inv;
        auto gl = tp.grad(il);
        for (std::size_t a = 0; a < active_rows.size(); ++a) {
          const std::size_t r = active_rows[a];
          const double* p = probs.data() + a * vocab;
          double* out = gl.data() + r * vocab;
          for (std::size_t c = 0; c < vocab; ++c) {
            out[c] += g * p[c];
          }
          out[tg[r]] -= g;
        }
      });
}

DiffArray op_add_into_columns(const DiffArray& base, const DiffArray& block,
                              std::size_t col_offset) {
  Tape& t = same_tape(base, block);
  const std::size_t rows = base.rows();
  const std::size_t cols = base.cols();
  const std::size_t width = block.cols();
  if (block.rows() != rows || col_offset + width > cols) {
    throw DimensionError("add_into_columns: block " + shape_string(block.shape()) +
                         " at column " + std::to_string(col_offset) + " does not fit " +
                         shape_string(base.shape()));
  }
  const auto bv = base.values();
  const auto kv = block.values();
  std::vector<double> out(bv.begin(), bv.end());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      out[r * cols + col_offset + c] += kv[r * width + c];
    }
  }
  const std::size_t ia = base.id();
  const std::size_t ik = block.id();
  return t.record(base.shape(), std::move(out),
                  [ia, ik, rows, cols, width, col_offset](Tape& tp, std::size_t self) {
                    const auto g = tp.grad(self);
                    auto ga = tp.grad(ia);
                    auto gk = tp.grad(ik);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      ga[i] += g[i];
                    }
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t c = 0; c < width; ++c) {
                        gk[r * width + c] += g[r * cols + col_offset + c];
                      }
                    }
                  });
}

DiffArray op_causal_attention(const DiffArray& q, const DiffArray& k, const DiffArray& v,
                              std::size_t batch, std::size_t seq, std::size_t n_heads,
                              std::span<const unsigned char> head_keep) {
  Tape& t = same_tape(q, k);
  same_tape(q, v);
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const std::size_t d = q.cols();
  if (q.rows() != batch * seq || n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("attention: " + shape_string(q.shape()) + " incompatible with batch " +
                         std::to_string(batch) + ", seq " + std::to_string(seq) + ", heads " +
                         std::to_string(n_heads));
  }
  if (!head_keep.empty() && head_keep.size() != n_heads) {
    throw DimensionError("attention: head mask has " + std::to_string(head_keep.size()) +
                         " entries for " + std::to_string(n_heads) + " heads");
  }
  const std::size_t dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto qv = q.values();
  const auto kv = k.values();
  const auto vv = v.values();
  std::vector<double> out(qv.size(), 0.0);
  std::vector<double> probs(batch * n_heads * seq * seq, 0.0);
  std::vector<double> scores(seq);
  std::vector<unsigned char> keep(n_heads, 1);
  if (!head_keep.empty()) {
    keep.assign(head_keep.begin(), head_keep.end());
  }

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      if (keep[h] == 0) {
        continue;
      }
      const std::size_t off = h * dh;
      double* pbase = probs.data() + (b * n_heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qi = qv.data() + (b * seq + i) * d + off;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* kj = kv.data() + (b * seq + j) * d + off;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) {
            s += qi[c] * kj[c];
          }
          scores[j] = s * inv_sqrt;
        }
        double* p = pbase + i * seq;
        softmax_row(scores.data(), p, i + 1);
        double* oi = out.data() + (b * seq + i) * d + off;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* vj = vv.data() + (b * seq + j) * d + off;
          for (std::size_t c = 0; c < dh; ++c) {
            oi[c] += p[j] * vj[c];
          }
        }
      }
    }
  }

  const std::size_t iq = q.id();
  const std::size_t ik = k.id();
  const std::size_t iv = v.id();
  return t.record(
      q.shape(), std::move(out),
      [iq, ik, iv, batch, seq, n_heads, d, dh, inv_sqrt, keep = std::move(keep),
       probs = std::move(probs)](Tape& tp, std::size_t self) {
        const auto g = tp.grad(self);
        const auto qs = tp.values(iq);
        const auto ks = tp.values(ik);
        const auto vs = tp.values(iv);
        auto gq = tp.grad(iq);
        auto gk = tp.grad(ik);
        auto gv = tp.grad(iv);
        std::vector<double> dp(seq);
        std::vector<double> ds(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            if (keep[h] == 0) {
              continue;
            }
            const std::size_t off = h * dh;
            const double* pbase = probs.data() + (b * n_heads + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
              const double* p = pbase + i * seq;
              const double* gi = g.data() + (b * seq + i) * d + off;
              for (std::size_t j = 0; j <= i; ++j) {
                const double* vj = vs.data() + (b * seq + j) * d + off;
                double* gvj = gv.data() + (b * seq + j) * d + off;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                  s += gi[c] * vj[c];
                  gvj[c] += p[j] * gi[c];
                }
                dp[j] = s;
                ds[j] = 0.0;
              }
              softmax_row_backward(p, dp.data(), ds.data(), i + 1);
              const double* qi = qs.data() + (b * seq + i) * d + off;
              double* gqi = gq.data() + (b * seq + i) * d + off;
              for (std::size_t j = 0; j <= i; ++j) {
                const double w = ds[j] * inv_sqrt;
                const double* kj = ks.data() + (b * seq + j) * d + off;
                double* gkj = gk.data() + (b * seq + j) * d + off;
                for (std::size_t c = 0; c < dh; ++c) {
                  gqi[c] += w * kj[c];
                  gkj[c] += w * qi[c];
                }
              }
            }
          }
        }
      });
}

// ---- finite differences ----------------------------------------------------------

double finite_difference_check(const LossFn& loss, std::span<Parameter* const> params,
                               double step, std::span<const GradientProbe> probes) {
  if (!(step > 0.0)) {
    throw InputError("finite_difference_check: step must be positive");
  }
  auto evaluate = [&loss]() {
    Tape tape;
    const double value = loss(tape).item();
    if (!std::isfinite(value)) {
      throw NumericError("finite_difference_check: non-finite loss");
    }
    return value;
  };

  for (Parameter* p : params) {
    p->zero_grad();
  }
  {
    Tape tape;
    const DiffArray l = loss(tape);
    if (!std::isfinite(l.item())) {
      throw NumericError("finite_difference_check: non-finite loss");
    }
    tape.backward(l);
  }

  std::vector<GradientProbe> all;
  if (probes.empty()) {
    for (Parameter* p : params) {
      for (std::size_t i = 0; i < p->size(); ++i) {
        all.push_back({p, i});
      }
    }
    probes = all;
  }

  double worst = 0.0;
  for (const GradientProbe& probe : probes) {
    double& slot = probe.param->value.at(probe.index);
    const double analytic = probe.param->grad.at(probe.index);
    const double original = slot;
    const double hi = original + step;
    const double lo = original - step;
    slot = hi;
    const double f_hi = evaluate();
    slot = lo;
    const double f_lo = evaluate();
    slot = original;
    const double numeric = (f_hi - f_lo) / (hi - lo);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
    worst = std::max(worst, std::abs(analytic - numeric) / denom);
  }
  return worst;
}

}  // namespace cast::ad
