#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "prompt_evolve/tensor.hpp"

namespace prompt_evolve {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// owning tape is alive and has not been cleared.
class Var {
 public:
  Var() = default;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode tape. Ops append nodes in execution order; backward() walks
// them in exact reverse order. Gradients accumulate additively, so a value
// used twice receives the sum of both contributions.
class Tape {
 public:
  // Receives the gradient flowing into the node's output and the output itself.
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out, const Tensor& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(Tensor value);
  Var constant(Tensor value);
  // Appends an op result. The backward closure is kept only when at least
  // one input requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;

  void backward(Var scalar_output);
  // Zero tensor of matching shape when nothing flowed into `v`.
  Tensor grad(Var v) const;
  // Mutable gradient storage for use inside backward closures. Returns an
  // empty span when `v` does not require a gradient.
  std::span<double> grad_buffer(Var v);

  void clear();
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

// Op set. Shapes must match exactly; there is no implicit broadcasting.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
// a[n x k] + row[1 x k], the bias-add used by linear heads.
Var add_rowwise(Var a, Var row);
Var softmax(Var x, std::size_t axis);
Var relu(Var x);
Var abs(Var x);
Var log(Var x);
// x^exponent for x >= 0.
Var pow_scalar(Var x, double exponent);
Var concat(Var a, Var b, std::size_t axis);
Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);
Var reshape(Var x, Shape shape);
Var sum(Var x);
Var mean(Var x);
Var abs_sum(Var x);
// [n x k] -> [1 x k] column means.
Var mean_rows(Var x);
// [n x k] -> [n x 1] row sums.
Var sum_cols(Var x);

}  // namespace prompt_evolve
