#pragma once

#include <functional>
#include <string>
#include <vector>

#include "bzf/tensor.hpp"

namespace bzf {

// Per-node payload for ops that need constants (axis sizes, sample grids,
// camera intrinsics, ...). Kept generic so modules can register ops without
// touching the engine.
struct Attrs {
  std::vector<int64_t> iv;
  std::vector<double> fv;
};

// Operation definition. `forward` may stash doubles in `saved` for reuse by
// `backward` (e.g. argmin indices). `backward` accumulates into grad_in; a
// null entry means that input does not require gradients.
struct OpDef {
  std::string name;
  std::function<Shape(const std::vector<Shape>&, const Attrs&)> infer;
  std::function<void(const std::vector<const Tensor*>&, const Attrs&,
                     Tensor& out, std::vector<double>& saved)>
      forward;
  std::function<void(const std::vector<const Tensor*>&, const Attrs&,
                     const Tensor& out, const std::vector<double>& saved,
                     const Tensor& grad_out, const std::vector<Tensor*>& grad_in)>
      backward;
};

// Global op registry. Core ops register on first use; domain modules add
// their own fused ops (projection, chamfer, attention aggregation, ...).
int register_op(OpDef def);
const OpDef& op_def(int op_id);

struct Value {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in topological order by
// construction; evaluation walks forward once, backward once. A Graph is
// single-threaded during eval/backward; distinct graphs are independent.
class Graph {
 public:
  enum class NodeKind { Input, Param, Const, Op };

  struct Node {
    NodeKind kind;
    int op_id = -1;
    std::vector<int> args;
    Shape shape;
    Tensor value;  // leaf nodes only
    Attrs attrs;
    std::string name;  // leaf / output debugging
    bool needs_grad = false;
  };

  Value input(const std::string& name, Tensor value);
  Value param(const std::string& name, Tensor value);
  Value constant(Tensor value);
  Value apply(int op_id, const std::vector<Value>& args, Attrs attrs = {});

  void mark_output(const std::string& name, Value v);

  // Core op sugar.
  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);
  Value div(Value a, Value b);
  Value neg(Value a);
  Value scale(Value a, double s);
  Value add_scalar(Value a, double c);
  Value relu(Value a);
  Value sigmoid(Value a);
  Value exp(Value a);
  Value log(Value a);
  Value sqrt(Value a);
  Value abs(Value a);
  Value square(Value a);
  Value sum(Value a);
  Value mean(Value a);
  Value matmul(Value a, Value b);
  Value transpose(Value a);
  Value add_row(Value m, Value row);
  Value softmax_rows(Value a);
  Value reshape(Value a, Shape s);
  Value concat_rows(const std::vector<Value>& parts);
  Value gather_rows(Value a, const std::vector<int64_t>& rows);
  Value bilinear_sample(Value map, Value loc);

  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  Node& mutable_node(int id) { return nodes_[static_cast<size_t>(id)]; }
  int num_nodes() const { return static_cast<int>(nodes_.size()); }
  const Shape& shape_of(Value v) const;

  const std::map<std::string, int>& params() const { return params_; }
  const std::map<std::string, int>& inputs() const { return inputs_; }
  const std::vector<std::pair<std::string, int>>& outputs() const {
    return outputs_;
  }
  Value output(const std::string& name) const;
  // First marked output; the designated root for backward seeding.
  Value primary_output() const;

 private:
  Value push(Node n);
  std::vector<Node> nodes_;
  std::map<std::string, int> params_;
  std::map<std::string, int> inputs_;
  std::vector<std::pair<std::string, int>> outputs_;
};

// Forward values plus per-node saved scratch. Re-usable across incremental
// evaluations: after appending nodes to the graph, calling eval_forward with
// the same buffers computes only the new suffix.
struct EvalBuffers {
  std::vector<Tensor> values;
  std::vector<std::vector<double>> saved;
  size_t computed = 0;
};

void eval_forward(const Graph& g, const NamedTensors& inputs,
                  const NamedTensors& param_overrides, EvalBuffers& buf);

// Gradients for every node that needs them, seeded at `root` with `seed`.
std::vector<Tensor> backward_from(const Graph& g, const EvalBuffers& buf,
                                  Value root, const Tensor& seed);

struct EvalResult {
  NamedTensors outputs;  // every marked output
  NamedTensors grads;    // every param and every requires_grad input
};

// Deterministic forward + reverse pass. Gradients accumulate additively
// across fan-out. `seed` must match the primary output's shape.
EvalResult eval_and_backward(const Graph& g, const NamedTensors& inputs,
                             const Tensor& seed,
                             const NamedTensors& param_overrides = {});

// Central-difference check of the designated scalar output against every
// parameter and requires_grad input coordinate. Returns
// max |analytic - fd| / max(1, |fd|).
double grad_check(const Graph& g, const NamedTensors& point, double step);

}  // namespace bzf
