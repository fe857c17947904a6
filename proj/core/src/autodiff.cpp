#include "prompt_evolve/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "prompt_evolve/errors.hpp"

namespace prompt_evolve {

const Tensor& Var::value() const { return tape_->value(*this); }
bool Var::requires_grad() const { return tape_ && tape_->requires_grad(*this); }

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (in.tape() != this) throw Error("op mixes variables from different tapes");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  Node node{std::move(value), {}, needs, {}};
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(Var v) const { return nodes_.at(v.id()).value; }

bool Tape::requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }

void Tape::backward(Var scalar_output) {
  if (scalar_output.tape() != this) throw Error("backward() on a foreign variable");
  const std::size_t root = scalar_output.id();
  if (nodes_.at(root).value.size() != 1) {
    throw DimensionError("backward() needs a scalar output, got shape " +
                         shape_string(nodes_[root].value.shape()));
  }
  for (auto& n : nodes_) n.grad.clear();
  if (!nodes_[root].requires_grad) return;
  nodes_[root].grad.assign(1, 1.0);
  for (std::size_t i = root + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || node.grad.empty()) continue;
    const Tensor grad_out(node.value.shape(), node.grad);
    node.backward(*this, grad_out, node.value);
  }
}

Tensor Tape::grad(Var v) const {
  if (v.tape() != this || v.id() >= nodes_.size()) return Tensor::zeros(v.shape());
  const Node& node = nodes_[v.id()];
  if (node.grad.empty()) return Tensor::zeros(node.value.shape());
  return Tensor(node.value.shape(), node.grad);
}

std::span<double> Tape::grad_buffer(Var v) {
  Node& node = nodes_.at(v.id());
  if (!node.requires_grad) return {};
  if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
  return node.grad;
}

void Tape::clear() { nodes_.clear(); }

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(a.shape()));
  }
}

// Splits a shape around `axis` into (outer, axis length, inner) strides.
struct AxisView {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

template <typename F>
Var unary_elementwise(Var x, F&& forward, std::function<double(double, double)> derivative) {
  const Tensor& xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(xv[i]);
  return x.tape()->record(Tensor(xv.shape(), std::move(out)), {x},
                          [x, derivative](Tape& t, const Tensor& g, const Tensor&) {
                            auto gx = t.grad_buffer(x);
                            const Tensor& xv = t.value(x);
                            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * derivative(xv[i], g[i]);
                          });
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(av.shape()) + " and " +
                         shape_string(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  std::vector<double> out(m * n, 0.0);
  const double* A = av.data().data();
  const double* B = bv.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = A[i * k + p];
      if (s == 0.0) continue;
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  return a.tape()->record(Tensor({m, n}, std::move(out)), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g, const Tensor&) {
    const double* G = g.data().data();
    const double* A = t.value(a).data().data();
    const double* B = t.value(b).data().data();
    if (auto ga = t.grad_buffer(a); !ga.empty()) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = G + i * n;
          const double* brow = B + p * n;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (auto gb = t.grad_buffer(b); !gb.empty()) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double s = A[i * k + p];
          if (s == 0.0) continue;
          double* gbrow = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += s * grow[j];
        }
      }
    }
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require_rank("transpose", av, 2);
  const std::size_t r = av.rows(), c = av.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av.at(i, j);
  return a.tape()->record(Tensor({c, r}, std::move(out)), {a}, [a, r, c](Tape& t, const Tensor& g, const Tensor&) {
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape()->record(Tensor(av.shape(), std::move(out)), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    for (Var v : {a, b}) {
      auto gv = t.grad_buffer(v);
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return a.tape()->record(Tensor(av.shape(), std::move(out)), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    auto gb = t.grad_buffer(b);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape()->record(Tensor(av.shape(), std::move(out)), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    auto gb = t.grad_buffer(b);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
  });
}

Var scale(Var a, double factor) {
  const Tensor& av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return a.tape()->record(Tensor(av.shape(), std::move(out)), {a}, [a, factor](Tape& t, const Tensor& g, const Tensor&) {
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * factor;
  });
}

Var add_scalar(Var a, double offset) {
  const Tensor& av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + offset;
  return a.tape()->record(Tensor(av.shape(), std::move(out)), {a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

Var add_rowwise(Var a, Var row) {
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  require_rank("add_rowwise", av, 2);
  const std::size_t n = av.rows(), k = av.cols();
  if (rv.size() != k || (rv.rank() == 2 && rv.rows() != 1)) {
    throw DimensionError("add_rowwise: row " + shape_string(rv.shape()) + " does not fit " +
                         shape_string(av.shape()));
  }
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = av[i * k + j] + rv[j];
  return a.tape()->record(Tensor(av.shape(), std::move(out)), {a, row}, [a, row, n, k](Tape& t, const Tensor& g, const Tensor&) {
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    if (auto gr = t.grad_buffer(row); !gr.empty()) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) gr[j] += g[i * k + j];
    }
  });
}

Var softmax(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_string(xv.shape()));
  }
  const AxisView v = axis_view(xv.shape(), axis);
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.length * v.inner + in;
      double hi = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < v.length; ++k) hi = std::max(hi, xv[base + k * v.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < v.length; ++k) {
        const double e = std::exp(xv[base + k * v.inner] - hi);
        out[base + k * v.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < v.length; ++k) out[base + k * v.inner] /= total;
    }
  }
  return x.tape()->record(Tensor(xv.shape(), std::move(out)), {x}, [x, v](Tape& t, const Tensor& g, const Tensor& y) {
    auto gx = t.grad_buffer(x);
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.length * v.inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < v.length; ++k) dot += g[base + k * v.inner] * y[base + k * v.inner];
        for (std::size_t k = 0; k < v.length; ++k) {
          const std::size_t idx = base + k * v.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Var relu(Var x) {
  return unary_elementwise(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

// Subgradient at 0 is 0.
Var abs(Var x) {
  return unary_elementwise(
      x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var log(Var x) {
  return unary_elementwise(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var pow_scalar(Var x, double exponent) {
  return unary_elementwise(
      x, [exponent](double v) { return std::pow(v, exponent); },
      [exponent](double v, double) { return exponent == 0.0 ? 0.0 : exponent * std::pow(v, exponent - 1.0); });
}

Var concat(Var a, Var b, std::size_t axis) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  bool ok = av.rank() == bv.rank() && axis < av.rank();
  for (std::size_t i = 0; ok && i < av.rank(); ++i) ok = i == axis || av.dim(i) == bv.dim(i);
  if (!ok) {
    throw DimensionError("concat: shapes " + shape_string(av.shape()) + " and " + shape_string(bv.shape()) +
                         " disagree off axis " + std::to_string(axis));
  }
  const AxisView va = axis_view(av.shape(), axis);
  const AxisView vb = axis_view(bv.shape(), axis);
  const std::size_t chunk_a = va.length * va.inner, chunk_b = vb.length * vb.inner;
  Shape shape = av.shape();
  shape[axis] += bv.dim(axis);
  std::vector<double> out;
  out.reserve(av.size() + bv.size());
  for (std::size_t o = 0; o < va.outer; ++o) {
    out.insert(out.end(), av.data().begin() + o * chunk_a, av.data().begin() + (o + 1) * chunk_a);
    out.insert(out.end(), bv.data().begin() + o * chunk_b, bv.data().begin() + (o + 1) * chunk_b);
  }
  const std::size_t outer = va.outer;
  return a.tape()->record(Tensor(std::move(shape), std::move(out)), {a, b},
                          [a, b, outer, chunk_a, chunk_b](Tape& t, const Tensor& g, const Tensor&) {
                            auto ga = t.grad_buffer(a);
                            auto gb = t.grad_buffer(b);
                            for (std::size_t o = 0; o < outer; ++o) {
                              const std::size_t base = o * (chunk_a + chunk_b);
                              if (!ga.empty())
                                for (std::size_t i = 0; i < chunk_a; ++i) ga[o * chunk_a + i] += g[base + i];
                              if (!gb.empty())
                                for (std::size_t i = 0; i < chunk_b; ++i) gb[o * chunk_b + i] += g[base + chunk_a + i];
                            }
                          });
}

Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank() || begin > end || end > xv.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " invalid for " + shape_string(xv.shape()));
  }
  const AxisView v = axis_view(xv.shape(), axis);
  const std::size_t width = (end - begin) * v.inner;
  Shape shape = xv.shape();
  shape[axis] = end - begin;
  std::vector<double> out;
  out.reserve(v.outer * width);
  for (std::size_t o = 0; o < v.outer; ++o) {
    const auto first = xv.data().begin() + o * v.length * v.inner + begin * v.inner;
    out.insert(out.end(), first, first + width);
  }
  return x.tape()->record(Tensor(std::move(shape), std::move(out)), {x},
                          [x, v, begin, width](Tape& t, const Tensor& g, const Tensor&) {
                            auto gx = t.grad_buffer(x);
                            for (std::size_t o = 0; o < v.outer; ++o) {
                              const std::size_t base = o * v.length * v.inner + begin * v.inner;
                              for (std::size_t i = 0; i < width; ++i) gx[base + i] += g[o * width + i];
                            }
                          });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, const Tensor& g, const Tensor&) {
    auto gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
  });
}

Var sum(Var x) {
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  return x.tape()->record(Tensor::scalar(total), {x}, [x](Tape& t, const Tensor& g, const Tensor&) {
    auto gx = t.grad_buffer(x);
    for (double& v : gx) v += g[0];
  });
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var abs_sum(Var x) {
  double total = 0.0;
  for (double v : x.value().data()) total += std::fabs(v);
  return x.tape()->record(Tensor::scalar(total), {x}, [x](Tape& t, const Tensor& g, const Tensor&) {
    auto gx = t.grad_buffer(x);
    const Tensor& xv = t.value(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * (xv[i] > 0.0 ? 1.0 : (xv[i] < 0.0 ? -1.0 : 0.0));
  });
}

Var mean_rows(Var x) {
  const Tensor& xv = x.value();
  require_rank("mean_rows", xv, 2);
  const std::size_t n = xv.rows(), k = xv.cols();
  if (n == 0) throw DimensionError("mean_rows of a tensor with no rows");
  std::vector<double> out(k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[j] += xv[i * k + j];
  const double inv = 1.0 / static_cast<double>(n);
  for (double& v : out) v *= inv;
  return x.tape()->record(Tensor({1, k}, std::move(out)), {x}, [x, n, k, inv](Tape& t, const Tensor& g, const Tensor&) {
    auto gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) gx[i * k + j] += g[j] * inv;
  });
}

Var sum_cols(Var x) {
  const Tensor& xv = x.value();
  require_rank("sum_cols", xv, 2);
  const std::size_t n = xv.rows(), k = xv.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i] += xv[i * k + j];
  return x.tape()->record(Tensor({n, 1}, std::move(out)), {x}, [x, n, k](Tape& t, const Tensor& g, const Tensor&) {
    auto gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) gx[i * k + j] += g[i];
  });
}

}  // namespace prompt_evolve
