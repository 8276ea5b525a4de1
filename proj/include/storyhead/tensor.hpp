#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "storyhead/common.hpp"

namespace storyhead {

using Shape = std::vector<int>;

inline int shape_numel(const Shape& shape) {
  int n = 1;
  for (int d : shape) {
    if (d < 0) throw NumericError("tensor: negative dimension in shape " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

namespace detail {
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};
}  // namespace detail

// Dense double-precision tensor, row-major. Value semantics via a shared
// node; values are immutable after creation except through the optimizer,
// grad buffers are the only mutable training state.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), {}, requires_grad, /*fill=*/0.0);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    return Tensor(std::move(shape), {}, requires_grad, v);
  }

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    const int n = shape_numel(shape);
    if (n != static_cast<int>(data.size())) {
      throw NumericError("tensor: shape " + shape_to_string(shape) + " needs " + std::to_string(n) +
                         " values, got " + std::to_string(data.size()));
    }
    Tensor t(std::move(shape), std::move(data), requires_grad, 0.0);
    return t;
  }

  static Tensor scalar(double v) { return from({}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node()->shape; }
  int rank() const { return static_cast<int>(node()->shape.size()); }
  int size() const { return static_cast<int>(node()->value.size()); }
  int dim(int axis) const { return node()->shape.at(static_cast<std::size_t>(axis)); }

  const std::vector<double>& values() const { return node()->value; }
  std::vector<double>& values() { return node()->value; }

  double item() const {
    if (size() != 1) {
      throw NumericError("tensor: item() on non-scalar of shape " + shape_to_string(shape()));
    }
    return node()->value[0];
  }

  double at(int i) const { return node()->value.at(static_cast<std::size_t>(i)); }
  double at(int r, int c) const {
    if (rank() != 2) throw NumericError("tensor: 2-d accessor on shape " + shape_to_string(shape()));
    return node()->value[static_cast<std::size_t>(r) * node()->shape[1] + c];
  }

  bool requires_grad() const { return node()->requires_grad; }
  void set_requires_grad(bool v) { node()->requires_grad = v; }

  bool has_grad() const { return !node()->grad.empty(); }
  const std::vector<double>& grad() const {
    if (!has_grad()) throw NumericError("tensor: gradient not materialized");
    return node()->grad;
  }
  void zero_grad() { node()->grad.clear(); }

  std::vector<double>& grad_buffer() {
    auto& g = node()->grad;
    if (g.empty()) g.assign(node()->value.size(), 0.0);
    return g;
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  Tensor(Shape shape, std::vector<double> data, bool requires_grad, double fill)
      : node_(std::make_shared<detail::TensorNode>()) {
    const int n = shape_numel(shape);
    node_->shape = std::move(shape);
    if (data.empty() && n > 0) {
      node_->value.assign(static_cast<std::size_t>(n), fill);
    } else {
      node_->value = std::move(data);
    }
    if (n == 0) node_->value.clear();
    node_->requires_grad = requires_grad;
  }

  std::shared_ptr<detail::TensorNode> node() const {
    if (!node_) throw NumericError("tensor: use of default-constructed tensor");
    return node_;
  }

  std::shared_ptr<detail::TensorNode> node_;
};

// Reverse-mode tape. Operations execute eagerly and append themselves in
// execution order, so the record is topologically sorted by construction.
// A tape and its tensors belong to one thread; distinct tapes are
// independent and may run concurrently.
class Tape {
 public:
  enum class Mode { Grad, NoGrad };

  explicit Tape(Mode mode = Mode::Grad) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == Mode::Grad; }
  std::size_t num_ops() const { return ops_.size(); }

  // ---- elementwise and scalar ops ----

  Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    Tensor out = Tensor::zeros(a.shape());
    auto& o = out.values();
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
    finish("add", {a, b}, out, [](const OpRecord& op) {
      const auto& g = op.output.grad();
      for (const Tensor& in : op.inputs) {
        auto& ig = const_cast<Tensor&>(in).grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ig[i] += g[i];
      }
    });
    return out;
  }

  // Scalar-with-tensor broadcast; the only implicit broadcast in the library.
  Tensor add(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    auto& o = out.values();
    const auto& av = a.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + c;
    finish("add_scalar", {a}, out, [](const OpRecord& op) {
      const auto& g = op.output.grad();
      auto& ig = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ig[i] += g[i];
    });
    return out;
  }

  Tensor scale(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    auto& o = out.values();
    const auto& av = a.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * c;
    finish("scale", {a}, out, [c](const OpRecord& op) {
      const auto& g = op.output.grad();
      auto& ig = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ig[i] += c * g[i];
    });
    return out;
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    Tensor out = Tensor::zeros(a.shape());
    auto& o = out.values();
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
    finish("mul", {a, b}, out, [](const OpRecord& op) {
      const auto& g = op.output.grad();
      const auto& av = op.inputs[0].values();
      const auto& bv = op.inputs[1].values();
      auto& ga = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      auto& gb = const_cast<Tensor&>(op.inputs[1]).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += bv[i] * g[i];
        gb[i] += av[i] * g[i];
      }
    });
    return out;
  }

  Tensor relu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    auto& o = out.values();
    const auto& av = a.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] > 0.0 ? av[i] : 0.0;
    finish("relu", {a}, out, [](const OpRecord& op) {
      const auto& g = op.output.grad();
      const auto& av = op.inputs[0].values();
      auto& ig = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (av[i] > 0.0) ig[i] += g[i];
      }
    });
    return out;
  }

  // Exact gaussian-CDF gelu; relu is the default activation elsewhere.
  Tensor gelu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    auto& o = out.values();
    const auto& av = a.values();
    for (std::size_t i = 0; i < o.size(); ++i) {
      o[i] = av[i] * 0.5 * (1.0 + std::erf(av[i] / 1.4142135623730951));
    }
    finish("gelu", {a}, out, [](const OpRecord& op) {
      const auto& g = op.output.grad();
      const auto& av = op.inputs[0].values();
      auto& ig = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double cdf = 0.5 * (1.0 + std::erf(av[i] / 1.4142135623730951));
        const double pdf = std::exp(-0.5 * av[i] * av[i]) * 0.3989422804014327;
        ig[i] += g[i] * (cdf + av[i] * pdf);
      }
    });
    return out;
  }

  // ---- linear algebra ----

  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
      throw NumericError("matmul: incompatible shapes " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& o = out.values();
    for (int i = 0; i < m; ++i) {
      for (int p = 0; p < k; ++p) {
        const double aip = av[static_cast<std::size_t>(i) * k + p];
        if (aip == 0.0) continue;
        const std::size_t brow = static_cast<std::size_t>(p) * n;
        const std::size_t orow = static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) o[orow + j] += aip * bv[brow + j];
      }
    }
    finish("matmul", {a, b}, out, [m, k, n](const OpRecord& op) {
      const auto& g = op.output.grad();
      const auto& av = op.inputs[0].values();
      const auto& bv = op.inputs[1].values();
      auto& ga = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      auto& gb = const_cast<Tensor&>(op.inputs[1]).grad_buffer();
      // dA = dC * B^T
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          const double gij = g[static_cast<std::size_t>(i) * n + j];
          if (gij == 0.0) continue;
          for (int p = 0; p < k; ++p) {
            ga[static_cast<std::size_t>(i) * k + p] += gij * bv[static_cast<std::size_t>(p) * n + j];
          }
        }
      }
      // dB = A^T * dC
      for (int p = 0; p < k; ++p) {
        for (int i = 0; i < m; ++i) {
          const double aip = av[static_cast<std::size_t>(i) * k + p];
          if (aip == 0.0) continue;
          for (int j = 0; j < n; ++j) {
            gb[static_cast<std::size_t>(p) * n + j] += aip * g[static_cast<std::size_t>(i) * n + j];
          }
        }
      }
    });
    return out;
  }

  Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) {
      throw NumericError("transpose: expected rank-2 tensor, got shape " + shape_to_string(a.shape()));
    }
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({n, m});
    const auto& av = a.values();
    auto& o = out.values();
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) o[static_cast<std::size_t>(j) * m + i] = av[static_cast<std::size_t>(i) * n + j];
    }
    finish("transpose", {a}, out, [m, n](const OpRecord& op) {
      const auto& g = op.output.grad();
      auto& ig = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          ig[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(j) * m + i];
        }
      }
    });
    return out;
  }

  Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.size()) {
      throw NumericError("reshape: cannot view shape " + shape_to_string(a.shape()) + " as " +
                         shape_to_string(shape));
    }
    Tensor out = Tensor::from(std::move(shape), a.values());
    finish("reshape", {a}, out, [](const OpRecord& op) {
      const auto& g = op.output.grad();
      auto& ig = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ig[i] += g[i];
    });
    return out;
  }

  Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw NumericError("concat: empty input list");
    const int r = parts[0].rank();
    if (r < 1 || r > 2 || axis < 0 || axis >= r) {
      throw NumericError("concat: unsupported rank/axis for shape " + shape_to_string(parts[0].shape()));
    }
    for (const Tensor& p : parts) {
      if (p.rank() != r) throw NumericError("concat: mixed ranks");
      for (int d = 0; d < r; ++d) {
        if (d != axis && p.dim(d) != parts[0].dim(d)) {
          throw NumericError("concat: shape mismatch " + shape_to_string(parts[0].shape()) + " vs " +
                             shape_to_string(p.shape()));
        }
      }
    }
    Shape out_shape = parts[0].shape();
    out_shape[static_cast<std::size_t>(axis)] = 0;
    for (const Tensor& p : parts) out_shape[static_cast<std::size_t>(axis)] += p.dim(axis);
    Tensor out = Tensor::zeros(out_shape);
    auto& o = out.values();
    if (r == 1 || axis == 0) {
      std::size_t off = 0;
      for (const Tensor& p : parts) {
        const auto& pv = p.values();
        std::copy(pv.begin(), pv.end(), o.begin() + static_cast<std::ptrdiff_t>(off));
        off += pv.size();
      }
    } else {  // rank 2, axis 1
      const int rows = out_shape[0], cols = out_shape[1];
      int col_off = 0;
      for (const Tensor& p : parts) {
        const int pc = p.dim(1);
        const auto& pv = p.values();
        for (int i = 0; i < rows; ++i) {
          for (int j = 0; j < pc; ++j) {
            o[static_cast<std::size_t>(i) * cols + col_off + j] = pv[static_cast<std::size_t>(i) * pc + j];
          }
        }
        col_off += pc;
      }
    }
    finish("concat", parts, out, [axis](const OpRecord& op) {
      const auto& g = op.output.grad();
      const Shape& os = op.output.shape();
      if (op.output.rank() == 1 || axis == 0) {
        std::size_t off = 0;
        for (const Tensor& p : op.inputs) {
          auto& ig = const_cast<Tensor&>(p).grad_buffer();
          for (std::size_t i = 0; i < ig.size(); ++i) ig[i] += g[off + i];
          off += ig.size();
        }
      } else {
        const int rows = os[0], cols = os[1];
        int col_off = 0;
        for (const Tensor& p : op.inputs) {
          const int pc = p.dim(1);
          auto& ig = const_cast<Tensor&>(p).grad_buffer();
          for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < pc; ++j) {
              ig[static_cast<std::size_t>(i) * pc + j] += g[static_cast<std::size_t>(i) * cols + col_off + j];
            }
          }
          col_off += pc;
        }
      }
    });
    return out;
  }

  Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw NumericError("stack_rows: empty input list");
    std::vector<Tensor> as_rows;
    as_rows.reserve(rows.size());
    for (const Tensor& r : rows) {
      if (r.rank() != 1) throw NumericError("stack_rows: expected rank-1 rows, got " + shape_to_string(r.shape()));
      as_rows.push_back(reshape(r, {1, r.dim(0)}));
    }
    return concat(as_rows, 0);
  }

  Tensor slice_rows(const Tensor& a, int begin, int count) {
    check_slice("slice_rows", a, 0, begin, count);
    const int cols = a.dim(1);
    Tensor out = Tensor::zeros({count, cols});
    const auto& av = a.values();
    auto& o = out.values();
    std::copy(av.begin() + static_cast<std::ptrdiff_t>(begin) * cols,
              av.begin() + static_cast<std::ptrdiff_t>(begin + count) * cols, o.begin());
    finish("slice_rows", {a}, out, [begin, count, cols](const OpRecord& op) {
      const auto& g = op.output.grad();
      auto& ig = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      for (int i = 0; i < count; ++i) {
        for (int j = 0; j < cols; ++j) {
          ig[static_cast<std::size_t>(begin + i) * cols + j] += g[static_cast<std::size_t>(i) * cols + j];
        }
      }
    });
    return out;
  }

  Tensor slice_cols(const Tensor& a, int begin, int count) {
    check_slice("slice_cols", a, 1, begin, count);
    const int rows = a.dim(0), cols = a.dim(1);
    Tensor out = Tensor::zeros({rows, count});
    const auto& av = a.values();
    auto& o = out.values();
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < count; ++j) {
        o[static_cast<std::size_t>(i) * count + j] = av[static_cast<std::size_t>(i) * cols + begin + j];
      }
    }
    finish("slice_cols", {a}, out, [begin, count, rows, cols](const OpRecord& op) {
      const auto& g = op.output.grad();
      auto& ig = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < count; ++j) {
          ig[static_cast<std::size_t>(i) * cols + begin + j] += g[static_cast<std::size_t>(i) * count + j];
        }
      }
    });
    return out;
  }

  // Last-layer row extraction: [n,d] -> [d].
  Tensor row(const Tensor& a, int r) { return reshape(slice_rows(a, r, 1), {a.dim(1)}); }

  Tensor diag(const Tensor& a) {
    if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
      throw NumericError("diag: expected square matrix, got " + shape_to_string(a.shape()));
    }
    const int n = a.dim(0);
    Tensor out = Tensor::zeros({n});
    const auto& av = a.values();
    auto& o = out.values();
    for (int i = 0; i < n; ++i) o[i] = av[static_cast<std::size_t>(i) * n + i];
    finish("diag", {a}, out, [n](const OpRecord& op) {
      const auto& g = op.output.grad();
      auto& ig = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      for (int i = 0; i < n; ++i) ig[static_cast<std::size_t>(i) * n + i] += g[i];
    });
    return out;
  }

  Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) {
      throw NumericError("embedding: table must be rank-2, got " + shape_to_string(table.shape()));
    }
    const int vocab = table.dim(0), d = table.dim(1);
    for (int id : ids) {
      if (id < 0 || id >= vocab) {
        throw NumericError("embedding: token id " + std::to_string(id) + " out of range for table " +
                           shape_to_string(table.shape()));
      }
    }
    Tensor out = Tensor::zeros({static_cast<int>(ids.size()), d});
    const auto& tv = table.values();
    auto& o = out.values();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      std::copy(tv.begin() + static_cast<std::ptrdiff_t>(ids[i]) * d,
                tv.begin() + static_cast<std::ptrdiff_t>(ids[i] + 1) * d,
                o.begin() + static_cast<std::ptrdiff_t>(i) * d);
    }
    finish("embedding", {table}, out, [ids, d](const OpRecord& op) {
      const auto& g = op.output.grad();
      auto& ig = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        for (int j = 0; j < d; ++j) {
          ig[static_cast<std::size_t>(ids[i]) * d + j] += g[i * static_cast<std::size_t>(d) + j];
        }
      }
    });
    return out;
  }

  // [n,d] + [d], explicit row-wise bias.
  Tensor add_bias(const Tensor& m, const Tensor& bias) {
    if (m.rank() != 2 || bias.rank() != 1 || m.dim(1) != bias.dim(0)) {
      throw NumericError("add_bias: incompatible shapes " + shape_to_string(m.shape()) + " + " +
                         shape_to_string(bias.shape()));
    }
    const int rows = m.dim(0), d = m.dim(1);
    Tensor out = Tensor::zeros({rows, d});
    const auto& mv = m.values();
    const auto& bv = bias.values();
    auto& o = out.values();
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < d; ++j) {
        o[static_cast<std::size_t>(i) * d + j] = mv[static_cast<std::size_t>(i) * d + j] + bv[j];
      }
    }
    finish("add_bias", {m, bias}, out, [rows, d](const OpRecord& op) {
      const auto& g = op.output.grad();
      auto& gm = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      auto& gb = const_cast<Tensor&>(op.inputs[1]).grad_buffer();
      for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < d; ++j) {
          const double gij = g[static_cast<std::size_t>(i) * d + j];
          gm[static_cast<std::size_t>(i) * d + j] += gij;
          gb[j] += gij;
        }
      }
    });
    return out;
  }

  // Row-wise layer normalization over the last axis; accepts [d] or [n,d].
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    if ((x.rank() != 1 && x.rank() != 2) || gain.rank() != 1 || bias.rank() != 1) {
      throw NumericError("layer_norm: unsupported shapes " + shape_to_string(x.shape()) + ", " +
                         shape_to_string(gain.shape()) + ", " + shape_to_string(bias.shape()));
    }
    const int d = x.rank() == 1 ? x.dim(0) : x.dim(1);
    if (gain.dim(0) != d || bias.dim(0) != d) {
      throw NumericError("layer_norm: feature size mismatch " + shape_to_string(x.shape()) + " vs gain " +
                         shape_to_string(gain.shape()));
    }
    const int rows = x.rank() == 1 ? 1 : x.dim(0);
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    auto& o = out.values();
    for (int r = 0; r < rows; ++r) {
      const std::size_t off = static_cast<std::size_t>(r) * d;
      double mean = 0.0;
      for (int j = 0; j < d; ++j) mean += xv[off + j];
      mean /= d;
      double var = 0.0;
      for (int j = 0; j < d; ++j) {
        const double c = xv[off + j] - mean;
        var += c * c;
      }
      var /= d;
      const double inv = 1.0 / std::sqrt(var + eps);
      for (int j = 0; j < d; ++j) o[off + j] = gv[j] * (xv[off + j] - mean) * inv + bv[j];
    }
    finish("layer_norm", {x, gain, bias}, out, [rows, d, eps](const OpRecord& op) {
      const auto& g = op.output.grad();
      const auto& xv = op.inputs[0].values();
      const auto& gv = op.inputs[1].values();
      auto& gx = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      auto& gg = const_cast<Tensor&>(op.inputs[1]).grad_buffer();
      auto& gb = const_cast<Tensor&>(op.inputs[2]).grad_buffer();
      for (int r = 0; r < rows; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += xv[off + j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
          const double c = xv[off + j] - mean;
          var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int j = 0; j < d; ++j) {
          const double xhat = (xv[off + j] - mean) * inv;
          const double dxhat = g[off + j] * gv[j];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
          gg[j] += g[off + j] * xhat;
          gb[j] += g[off + j];
        }
        for (int j = 0; j < d; ++j) {
          const double xhat = (xv[off + j] - mean) * inv;
          const double dxhat = g[off + j] * gv[j];
          gx[off + j] += inv * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
        }
      }
    });
    return out;
  }

  // Numerically stable softmax along an axis; max-subtraction per slice.
  Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0 || axis >= x.rank()) {
      throw NumericError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(x.shape()));
    }
    const int n = x.dim(axis);
    if (n == 0) throw NumericError("softmax: empty axis in shape " + shape_to_string(x.shape()));
    int outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= x.dim(d);
    for (int d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.values();
    auto& o = out.values();
    for (int ou = 0; ou < outer; ++ou) {
      for (int in = 0; in < inner; ++in) {
        const std::size_t base = static_cast<std::size_t>(ou) * n * inner + in;
        double mx = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < n; ++i) mx = std::max(mx, xv[base + static_cast<std::size_t>(i) * inner]);
        double z = 0.0;
        for (int i = 0; i < n; ++i) {
          const double e = std::exp(xv[base + static_cast<std::size_t>(i) * inner] - mx);
          o[base + static_cast<std::size_t>(i) * inner] = e;
          z += e;
        }
        for (int i = 0; i < n; ++i) o[base + static_cast<std::size_t>(i) * inner] /= z;
      }
    }
    finish("softmax", {x}, out, [n, outer, inner](const OpRecord& op) {
      const auto& g = op.output.grad();
      const auto& y = op.output.values();
      auto& ig = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      for (int ou = 0; ou < outer; ++ou) {
        for (int in = 0; in < inner; ++in) {
          const std::size_t base = static_cast<std::size_t>(ou) * n * inner + in;
          double dot = 0.0;
          for (int i = 0; i < n; ++i) {
            const std::size_t k = base + static_cast<std::size_t>(i) * inner;
            dot += g[k] * y[k];
          }
          for (int i = 0; i < n; ++i) {
            const std::size_t k = base + static_cast<std::size_t>(i) * inner;
            ig[k] += y[k] * (g[k] - dot);
          }
        }
      }
    });
    return out;
  }

  // Adds a large negative constant above the diagonal so a following softmax
  // assigns exactly zero weight to future positions.
  Tensor causal_mask(const Tensor& scores) {
    if (scores.rank() != 2) {
      throw NumericError("causal_mask: expected rank-2 scores, got " + shape_to_string(scores.shape()));
    }
    const int rows = scores.dim(0), cols = scores.dim(1);
    Tensor out = Tensor::zeros({rows, cols});
    const auto& sv = scores.values();
    auto& o = out.values();
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cols; ++j) {
        const std::size_t k = static_cast<std::size_t>(i) * cols + j;
        o[k] = j > i ? sv[k] - 1e30 : sv[k];
      }
    }
    finish("causal_mask", {scores}, out, [](const OpRecord& op) {
      const auto& g = op.output.grad();
      auto& ig = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ig[i] += g[i];
    });
    return out;
  }

  // Mean token-level cross entropy from logits [n, V] against target ids.
  Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.rank() != 2) {
      throw NumericError("cross_entropy: logits must be rank-2, got " + shape_to_string(logits.shape()));
    }
    const int n = logits.dim(0), v = logits.dim(1);
    if (n != static_cast<int>(targets.size())) {
      throw NumericError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_to_string(logits.shape()));
    }
    if (n == 0) throw NumericError("cross_entropy: empty batch");
    for (int t : targets) {
      if (t < 0 || t >= v) {
        throw NumericError("cross_entropy: target id " + std::to_string(t) + " out of range for " +
                           std::to_string(v) + " classes");
      }
    }
    const auto& lv = logits.values();
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * v;
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < v; ++j) mx = std::max(mx, lv[off + j]);
      double z = 0.0;
      for (int j = 0; j < v; ++j) z += std::exp(lv[off + j] - mx);
      total += std::log(z) + mx - lv[off + targets[static_cast<std::size_t>(i)]];
    }
    Tensor out = Tensor::scalar(total / n);
    finish("cross_entropy", {logits}, out, [targets, n, v](const OpRecord& op) {
      const double gout = op.output.grad()[0];
      const auto& lv = op.inputs[0].values();
      auto& ig = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      for (int i = 0; i < n; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * v;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < v; ++j) mx = std::max(mx, lv[off + j]);
        double z = 0.0;
        for (int j = 0; j < v; ++j) z += std::exp(lv[off + j] - mx);
        for (int j = 0; j < v; ++j) {
          const double p = std::exp(lv[off + j] - mx) / z;
          const double onehot = j == targets[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
          ig[off + j] += gout * (p - onehot) / n;
        }
      }
    });
    return out;
  }

  // Mean binary cross entropy from logits [n] against labels in {0,1}.
  Tensor binary_cross_entropy_with_logits(const Tensor& logits, const std::vector<double>& labels) {
    if (logits.rank() != 1 || logits.dim(0) != static_cast<int>(labels.size()) || labels.empty()) {
      throw NumericError("binary_cross_entropy: logits " + shape_to_string(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    }
    const int n = logits.dim(0);
    const auto& lv = logits.values();
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      const double z = lv[static_cast<std::size_t>(i)];
      total += std::max(z, 0.0) - z * labels[static_cast<std::size_t>(i)] + std::log1p(std::exp(-std::fabs(z)));
    }
    Tensor out = Tensor::scalar(total / n);
    finish("binary_cross_entropy", {logits}, out, [labels, n](const OpRecord& op) {
      const double gout = op.output.grad()[0];
      const auto& lv = op.inputs[0].values();
      auto& ig = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      for (int i = 0; i < n; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-lv[static_cast<std::size_t>(i)]));
        ig[static_cast<std::size_t>(i)] += gout * (s - labels[static_cast<std::size_t>(i)]) / n;
      }
    });
    return out;
  }

  Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    Tensor out = Tensor::scalar(s);
    finish("sum", {a}, out, [](const OpRecord& op) {
      const double g = op.output.grad()[0];
      auto& ig = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      for (double& v : ig) v += g;
    });
    return out;
  }

  Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw NumericError("mean: empty tensor");
    double s = 0.0;
    for (double v : a.values()) s += v;
    Tensor out = Tensor::scalar(s / a.size());
    const int n = a.size();
    finish("mean", {a}, out, [n](const OpRecord& op) {
      const double g = op.output.grad()[0] / n;
      auto& ig = const_cast<Tensor&>(op.inputs[0]).grad_buffer();
      for (double& v : ig) v += g;
    });
    return out;
  }

  // Seeds d(loss)/d(loss) = 1 and walks the record backwards, accumulating
  // additively into every reachable input.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) {
      throw NumericError("backward: loss must be scalar, got shape " + shape_to_string(loss.shape()));
    }
    if (ops_.empty()) throw NumericError("backward: tape is empty");
    loss_seed(loss);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      it->backprop(*it);
    }
  }

 private:
  struct OpRecord {
    const char* name;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void(const OpRecord&)> backprop;
  };

  static void loss_seed(const Tensor& loss) { const_cast<Tensor&>(loss).grad_buffer()[0] = 1.0; }

  static void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
      throw NumericError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
    }
  }

  static void check_slice(const char* op, const Tensor& a, int axis, int begin, int count) {
    if (a.rank() != 2 || begin < 0 || count < 0 || begin + count > a.dim(axis)) {
      throw NumericError(std::string(op) + ": range [" + std::to_string(begin) + "," +
                         std::to_string(begin + count) + ") invalid for shape " + shape_to_string(a.shape()));
    }
  }

  static void check_finite(const char* op, const Tensor& out) {
    for (double v : out.values()) {
      if (!std::isfinite(v)) {
        throw NumericError(std::string(op) + ": non-finite value in output of shape " +
                           shape_to_string(out.shape()));
      }
    }
  }

  void finish(const char* name, std::vector<Tensor> inputs, Tensor& out,
              std::function<void(const OpRecord&)> backprop) {
    check_finite(name, out);
    bool any_grad = false;
    for (const Tensor& in : inputs) any_grad = any_grad || in.requires_grad();
    if (recording() && any_grad) {
      out.set_requires_grad(true);
      ops_.push_back(OpRecord{name, std::move(inputs), out, std::move(backprop)});
    }
  }

  std::vector<OpRecord> ops_;
  Mode mode_;
};

}  // namespace storyhead
