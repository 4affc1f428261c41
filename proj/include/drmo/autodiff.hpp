#pragma once

#include "drmo/tensor.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace drmo::ad {

// A trainable tensor with its accumulated gradient.
class Parameter {
public:
    Parameter(std::string name, Tensor init);

    const std::string& name() const noexcept { return name_; }
    std::uint64_t id() const noexcept { return id_; }

    Tensor& value() noexcept { return value_; }
    const Tensor& value() const noexcept { return value_; }
    Tensor& grad() noexcept { return grad_; }
    const Tensor& grad() const noexcept { return grad_; }
    void zero_grad() { grad_.fill(0.0); }

    // Frozen parameters are read as constants and never receive gradient.
    bool frozen() const noexcept { return frozen_; }
    void set_frozen(bool f) noexcept { frozen_ = f; }

private:
    std::string name_;
    std::uint64_t id_;
    Tensor value_;
    Tensor grad_;
    bool frozen_ = false;
};

using ParamPtr = std::shared_ptr<Parameter>;
using ParamList = std::vector<ParamPtr>;

ParamPtr make_param(std::string name, Tensor init);

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    ParamPtr param;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;
};

using NodePtr = std::shared_ptr<Node>;

// Handle to a value in the computation graph.
class Var {
public:
    Var() = default;
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    static Var constant(Tensor value);
    // Leaf that collects its own gradient (readable via grad() after backward).
    static Var leaf(Tensor value);
    static Var of(const ParamPtr& p);

    const Tensor& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
    std::size_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const Tensor& grad() const { return node_->grad; }
    const NodePtr& node() const { return node_; }
    bool valid() const { return static_cast<bool>(node_); }

private:
    NodePtr node_;
};

// Ordered record of the primitive operations applied while it is active.
// Backward walks the record once, newest first, and then the record is spent.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void backward(const Var& loss);

    std::size_t size() const noexcept { return nodes_.size(); }
    bool consumed() const noexcept { return consumed_; }

    // Internal: called by primitives.
    void record(NodePtr node) { nodes_.push_back(std::move(node)); }

private:
    std::vector<NodePtr> nodes_;
    bool consumed_ = false;
};

// Activates a tape on the current thread for the scope's lifetime.
class RecordScope {
public:
    explicit RecordScope(Tape& tape);
    ~RecordScope();
    RecordScope(const RecordScope&) = delete;
    RecordScope& operator=(const RecordScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape() noexcept;

// Gradient buffer of a node (parameter gradient for parameter leaves); allocated on first use.
Tensor& grad_buffer(Node& node);

// Builds the result node of a primitive. `backward` receives the result node, whose
// grad is populated, and must accumulate into its inputs' grad buffers.
Var make_result(Tensor value, std::vector<NodePtr> inputs, std::function<void(Node&)> backward);

// --- primitives --------------------------------------------------------------

// Elementwise with numpy-style broadcasting.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var neg(const Var& a);

Var exp(const Var& a);
Var log(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);
Var relu(const Var& a);
Var silu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);
Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var index_select(const Var& a, std::size_t axis, const std::vector<std::size_t>& indices);

// x: [N, C, H, W], w: [O, C, kh, kw], b: [O] or invalid Var.
Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t padding);
std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding);
// x: [N, C, H, W] -> [N, C, H*f, W*f]
Var upsample_nearest(const Var& x, std::size_t factor);

Var softmax(const Var& a, std::size_t axis);
Var log_softmax(const Var& a, std::size_t axis);

Var sum(const Var& a);
Var mean(const Var& a);
Var sum_axis(const Var& a, std::size_t axis);  // keeps the axis with size 1
Var l1(const Var& a);                          // sum |a|
Var l2(const Var& a);                          // sum a^2
Var mean_abs(const Var& a);

// Rows scaled to unit L2 norm; zero rows stay zero.
Var normalize_rows(const Var& a);

// Gated recurrent unit step. x: [B, I], h: [B, H], w_ih: [3H, I], w_hh: [3H, H],
// b_ih, b_hh: [3H]. Gate order (reset, update, candidate).
Var gru_cell(const Var& x, const Var& h, const Var& w_ih, const Var& w_hh, const Var& b_ih, const Var& b_hh);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, double s) { return mul_scalar(a, s); }
inline Var operator*(double s, const Var& a) { return mul_scalar(a, s); }
inline Var operator+(const Var& a, double s) { return add_scalar(a, s); }

Shape broadcast_shape(const std::string& op, const Shape& a, const Shape& b);

}  // namespace drmo::ad
