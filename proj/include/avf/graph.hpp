// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "avf/tensor.hpp"

namespace avf {

enum class Op : std::uint8_t {
    leaf,
    add,
    sub,
    mul,
    div,
    neg,
    matmul,
    transpose2d,
    reshape,
    broadcast,
    reduce_sum,
    reduce_mean,
    reduce_max,
    slice,
    concat,
    exp,
    log,
    sin,
    cos,
    sqrt,
    rsqrt,
    abs,
    square,
    sigmoid,
    pow_scalar,
    maximum,
    stop_gradient,
    swap_last2,
};

const char* op_name(Op op);

/// Per-node attributes; which fields are meaningful depends on the op.
struct OpAttrs {
    std::vector<std::size_t> shape; // reshape / broadcast target
    std::vector<std::size_t> axes;  // reductions
    bool keepdims = false;
    std::size_t axis = 0;  // slice / concat
    std::size_t start = 0; // slice
    std::size_t length = 0;
    double scalar = 0.0; // pow exponent
};

struct Node {
    Op op = Op::leaf;
    std::vector<std::int32_t> inputs;
    OpAttrs attrs;
    Tensor value;
    Tensor tangent;  // forward-mode dual part, valid iff has_tangent
    Tensor adjoint;  // reverse-mode accumulator, valid iff has_adjoint
    bool has_tangent = false;
    bool has_adjoint = false;
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while the graph
/// it came from is alive.
struct Var {
    Graph* graph = nullptr;
    std::int32_t id = -1;

    const Tensor& value() const;
    Tensor tangent() const; // zeros if the node carries no tangent
    bool has_tangent() const;
    const Tensor::Shape& shape() const { return value().shape(); }
};

/// Append-only computation record. Node ids are topologically ordered by
/// construction, forward values (and forward-mode tangents, where seeded)
/// are computed eagerly, and the reverse pass walks ids backwards.
class Graph {
public:
    Var leaf(Tensor value);
    Var leaf(Tensor value, Tensor tangent);
    Var constant(Tensor value) { return leaf(std::move(value)); }
    Var scalar(double v) { return leaf(Tensor::scalar(v)); }

    std::size_t size() const { return nodes_.size(); }
    const Node& node(std::int32_t id) const { return nodes_[id]; }

    /// Reverse pass from a scalar output. Clears previous adjoints.
    void backward(Var output);
    /// Adjoint of a node after backward(); zeros if none was accumulated.
    Tensor adjoint(Var v) const;

    /// Recompute every node's primal from the leaves via the forward rule
    /// column. Replay must reproduce stored values bit-exactly.
    bool replay_matches() const;

    Var apply(Op op, std::vector<std::int32_t> inputs, OpAttrs attrs = {});

private:
    friend struct Var;
    std::vector<Node> nodes_;
    Tensor zero_like_cache_; // scratch for tangent() on tangent-less nodes
};

// ---- primitive operations -------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var matmul(Var a, Var b);
Var transpose2d(Var a);
Var reshape(Var a, Tensor::Shape shape);
Var broadcast_to(Var a, Tensor::Shape shape);
Var reduce_sum(Var a, std::vector<std::size_t> axes, bool keepdims = false);
Var reduce_mean(Var a, std::vector<std::size_t> axes, bool keepdims = false);
Var reduce_max(Var a, std::vector<std::size_t> axes, bool keepdims = false);
Var sum_all(Var a);
Var mean_all(Var a);
Var slice(Var a, std::size_t axis, std::size_t start, std::size_t length);
Var concat(const std::vector<Var>& parts, std::size_t axis);
std::vector<Var> split(Var a, std::size_t axis, const std::vector<std::size_t>& sizes);
Var exp(Var a);
Var log(Var a);
Var sin(Var a);
Var cos(Var a);
Var sqrt(Var a);
Var rsqrt(Var a);
Var abs(Var a);
Var square(Var a);
Var sigmoid(Var a);
Var silu(Var a); // composite: x * sigmoid(x)
Var pow_scalar(Var a, double exponent);
Var maximum(Var a, Var b);
Var stop_gradient(Var a);
Var softmax_lastdim(Var a); // composite, max-shifted for stability
/// Transpose the last two axes; leading axes act as batch dimensions.
Var swap_last2(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }

Var add_scalar(Var a, double s);
Var mul_scalar(Var a, double s);

// ---- whole-function differentiation ----------------------------------------

using VarFn = std::function<std::vector<Var>(Graph&, const std::vector<Var>&)>;

/// Forward-mode directional derivative: (f(x), J_f(x) . tangent).
std::pair<std::vector<Tensor>, std::vector<Tensor>>
jvp(const VarFn& f, const std::vector<Tensor>& x, const std::vector<Tensor>& tangents);

/// Reverse-mode gradient of a scalar-valued f at params.
std::vector<Tensor> grad(const VarFn& f, const std::vector<Tensor>& params);

// ---- raw-tensor conveniences (no graph surfaced) ---------------------------

Tensor t_add(const Tensor& a, const Tensor& b);
Tensor t_sub(const Tensor& a, const Tensor& b);
Tensor t_mul(const Tensor& a, const Tensor& b);
Tensor t_scale(const Tensor& a, double s);
Tensor t_axpy(double alpha, const Tensor& x, const Tensor& y); // alpha*x + y

} // namespace avf
