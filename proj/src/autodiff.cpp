#include "drmo/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace drmo::ad {

namespace {

std::atomic<std::uint64_t> g_next_param_id{1};
thread_local Tape* g_active_tape = nullptr;

}  // namespace

Parameter::Parameter(std::string name, Tensor init)
    : name_(std::move(name)), id_(g_next_param_id++), value_(std::move(init)), grad_(value_.shape())
{
}

ParamPtr make_param(std::string name, Tensor init) { return std::make_shared<Parameter>(std::move(name), std::move(init)); }

Var Var::constant(Tensor value)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Var(std::move(node));
}

Var Var::leaf(Tensor value)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
}

Var Var::of(const ParamPtr& p)
{
    auto node = std::make_shared<Node>();
    node->value = p->value();
    if (!p->frozen()) {
        node->requires_grad = true;
        node->param = p;
    }
    return Var(std::move(node));
}

Tape* active_tape() noexcept { return g_active_tape; }

RecordScope::RecordScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
RecordScope::~RecordScope() { g_active_tape = previous_; }

void Tape::backward(const Var& loss)
{
    if (consumed_) throw std::logic_error("backward: computation record already consumed");
    if (!loss.valid() || loss.value().size() != 1) {
        throw ShapeError("backward: loss must be a scalar, got " + (loss.valid() ? shape_str(loss.shape()) : "<none>"));
    }
    consumed_ = true;
    if (loss.requires_grad()) {
        grad_buffer(*loss.node())[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node& n = **it;
            if (n.grad.empty() || !n.backward) continue;
            n.backward(n);
        }
    }
    nodes_.clear();
}

Tensor& grad_buffer(Node& node)
{
    if (node.param) return node.param->grad();
    if (node.grad.empty() && node.value.size() > 0) node.grad = Tensor(node.value.shape());
    if (node.grad.shape() != node.value.shape()) node.grad = Tensor(node.value.shape());
    return node.grad;
}

namespace {

void check_finite(const char* op, const Tensor& t)
{
    if (!t.all_finite()) throw std::domain_error(std::string(op) + ": produced a non-finite value");
}

Var make_op(const char* op, Tensor value, std::vector<NodePtr> inputs, std::function<void(Node&)> backward)
{
    check_finite(op, value);
    return make_result(std::move(value), std::move(inputs), std::move(backward));
}

bool wants_grad(const NodePtr& n) { return n && n->requires_grad; }

}  // namespace

Var make_result(Tensor value, std::vector<NodePtr> inputs, std::function<void(Node&)> backward)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    Tape* tape = g_active_tape;
    const bool any = std::any_of(inputs.begin(), inputs.end(), wants_grad);
    if (tape && any) {
        node->requires_grad = true;
        node->inputs = std::move(inputs);
        node->backward = std::move(backward);
        tape->record(node);
    }
    return Var(std::move(node));
}

// --- broadcasting ------------------------------------------------------------

Shape broadcast_shape(const std::string& op, const Shape& a, const Shape& b)
{
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) throw shape_error(op, a, b);
        out[i] = std::max(da, db);
    }
    return out;
}

namespace {

// Per-output-element flat offset into an operand broadcast to `out`.
std::vector<std::size_t> broadcast_offsets(const Shape& out, const Shape& in)
{
    const std::size_t rank = out.size();
    std::size_t lead = 0;
    while (lead < in.size() && in[lead] == 1) ++lead;
    if (std::equal(in.begin() + static_cast<long>(lead), in.end(), out.end() - static_cast<long>(in.size() - lead))) {
        // operand repeats as a contiguous block
        const std::size_t total = shape_numel(out), block = std::max<std::size_t>(shape_numel(in), 1);
        std::vector<std::size_t> offsets(total);
        for (std::size_t flat = 0; flat < total; ++flat) offsets[flat] = flat % block;
        return offsets;
    }
    std::vector<std::size_t> stride(rank, 0);
    std::size_t s = 1;
    for (std::size_t i = rank; i-- > 0;) {
        const std::size_t k = in.size() + i;
        if (k < rank) continue;
        const std::size_t d = in[k - rank];
        stride[i] = d == 1 ? 0 : s;
        s *= d;
    }
    const std::size_t total = shape_numel(out);
    std::vector<std::size_t> offsets(total);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t flat = 0; flat < total; ++flat) {
        offsets[flat] = off;
        for (std::size_t i = rank; i-- > 0;) {
            ++idx[i];
            off += stride[i];
            if (idx[i] < out[i]) break;
            off -= stride[i] * idx[i];
            idx[i] = 0;
        }
    }
    return offsets;
}

template <typename F, typename DA, typename DB>
Var binary(const char* op, const Var& a, const Var& b, F f, DA dfa, DB dfb)
{
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.shape() == B.shape()) {
        Tensor out(A.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(A[i], B[i]);
        return make_op(op, std::move(out), {a.node(), b.node()}, [dfa, dfb](Node& self) {
            const Tensor& g = self.grad;
            const Tensor& x = self.inputs[0]->value;
            const Tensor& y = self.inputs[1]->value;
            if (self.inputs[0]->requires_grad) {
                Tensor& gx = grad_buffer(*self.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfa(x[i], y[i], self.value[i]);
            }
            if (self.inputs[1]->requires_grad) {
                Tensor& gy = grad_buffer(*self.inputs[1]);
                for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i] * dfb(x[i], y[i], self.value[i]);
            }
        });
    }
    Shape shape = broadcast_shape(op, A.shape(), B.shape());
    auto oa = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(shape, A.shape()));
    auto ob = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(shape, B.shape()));
    Tensor out(shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(A[(*oa)[i]], B[(*ob)[i]]);
    return make_op(op, std::move(out), {a.node(), b.node()}, [dfa, dfb, oa, ob](Node& self) {
        const Tensor& g = self.grad;
        const Tensor& x = self.inputs[0]->value;
        const Tensor& y = self.inputs[1]->value;
        if (self.inputs[0]->requires_grad) {
            Tensor& gx = grad_buffer(*self.inputs[0]);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx[(*oa)[i]] += g[i] * dfa(x[(*oa)[i]], y[(*ob)[i]], self.value[i]);
            }
        }
        if (self.inputs[1]->requires_grad) {
            Tensor& gy = grad_buffer(*self.inputs[1]);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gy[(*ob)[i]] += g[i] * dfb(x[(*oa)[i]], y[(*ob)[i]], self.value[i]);
            }
        }
    });
}

template <typename F, typename DF>
Var unary(const char* op, const Var& a, F f, DF df)
{
    const Tensor& A = a.value();
    Tensor out(A.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(A[i]);
    return make_op(op, std::move(out), {a.node()}, [df](Node& self) {
        const Tensor& g = self.grad;
        const Tensor& x = self.inputs[0]->value;
        Tensor& gx = grad_buffer(*self.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(x[i], self.value[i]);
    });
}

double sigmoid_scalar(double x)
{
    if (x >= 0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Var add(const Var& a, const Var& b)
{
    return binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b)
{
    return binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b)
{
    return binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
        [](double x, double, double) { return x; });
}

Var div(const Var& a, const Var& b)
{
    return binary(
        "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double o) { return -o / y; });
}

Var add_scalar(const Var& a, double s)
{
    return unary(
        "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var mul_scalar(const Var& a, double s)
{
    return unary(
        "mul_scalar", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var exp(const Var& a)
{
    return unary(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a)
{
    return unary(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var abs(const Var& a)
{
    return unary(
        "abs", a, [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var square(const Var& a)
{
    return unary(
        "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var relu(const Var& a)
{
    return unary(
        "relu", a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var silu(const Var& a)
{
    return unary(
        "silu", a, [](double x) { return x * sigmoid_scalar(x); },
        [](double x, double) {
            const double s = sigmoid_scalar(x);
            return s * (1.0 + x * (1.0 - s));
        });
}

Var sigmoid(const Var& a)
{
    return unary(
        "sigmoid", a, [](double x) { return sigmoid_scalar(x); }, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& a)
{
    return unary(
        "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

// --- linear algebra ------------------------------------------------------------

Var matmul(const Var& a, const Var& b)
{
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) throw shape_error("matmul", A.shape(), B.shape());
    const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
    Tensor out({m, n});
    gemm(false, false, m, n, k, 1.0, A.data(), B.data(), 0.0, out.data());
    return make_op("matmul", std::move(out), {a.node(), b.node()}, [m, k, n](Node& self) {
        const Tensor& g = self.grad;
        Node& na = *self.inputs[0];
        Node& nb = *self.inputs[1];
        if (na.requires_grad) gemm(false, true, m, k, n, 1.0, g.data(), nb.value.data(), 1.0, grad_buffer(na).data());
        if (nb.requires_grad) gemm(true, false, k, n, m, 1.0, na.value.data(), g.data(), 1.0, grad_buffer(nb).data());
    });
}

Var transpose(const Var& a)
{
    Tensor out = transpose2d(a.value());
    return make_op("transpose", std::move(out), {a.node()}, [](Node& self) {
        Tensor& ga = grad_buffer(*self.inputs[0]);
        ga += transpose2d(self.grad);
    });
}

Var reshape(const Var& a, Shape shape)
{
    Tensor out = a.value().reshape(std::move(shape));
    return make_op("reshape", std::move(out), {a.node()}, [](Node& self) {
        Tensor& ga = grad_buffer(*self.inputs[0]);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    });
}

namespace {

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t dim = 1;
    std::size_t inner = 1;
};

AxisSplit split_axis(const char* op, const Shape& shape, std::size_t axis)
{
    if (axis >= shape.size()) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    }
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.dim = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace

Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end)
{
    const Tensor& A = a.value();
    const AxisSplit s = split_axis("slice", A.shape(), axis);
    if (begin >= end || end > s.dim) {
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                         shape_str(A.shape()));
    }
    Shape shape = A.shape();
    shape[axis] = end - begin;
    Tensor out(shape);
    const std::size_t len = (end - begin) * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(A.data() + (o * s.dim + begin) * s.inner, len, out.data() + o * len);
    }
    return make_op("slice", std::move(out), {a.node()}, [s, begin, len](Node& self) {
        Tensor& ga = grad_buffer(*self.inputs[0]);
        for (std::size_t o = 0; o < s.outer; ++o) {
            double* dst = ga.data() + (o * s.dim + begin) * s.inner;
            const double* src = self.grad.data() + o * len;
            for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
        }
    });
}

Var concat(const std::vector<Var>& parts, std::size_t axis)
{
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts[0].shape();
    Shape shape = first;
    std::size_t total = 0;
    for (const Var& p : parts) {
        const Shape& ps = p.shape();
        if (ps.size() != first.size() || axis >= ps.size()) throw shape_error("concat", first, ps);
        for (std::size_t i = 0; i < ps.size(); ++i) {
            if (i != axis && ps[i] != first[i]) throw shape_error("concat", first, ps);
        }
        total += ps[axis];
    }
    shape[axis] = total;
    const AxisSplit s = split_axis("concat", shape, axis);
    Tensor out(shape);
    std::vector<std::size_t> widths;
    std::vector<NodePtr> inputs;
    std::size_t at = 0;
    for (const Var& p : parts) {
        const std::size_t w = p.shape()[axis] * s.inner;
        for (std::size_t o = 0; o < s.outer; ++o) {
            std::copy_n(p.value().data() + o * w, w, out.data() + o * total * s.inner + at);
        }
        widths.push_back(w);
        inputs.push_back(p.node());
        at += w;
    }
    return make_op("concat", std::move(out), std::move(inputs), [s, widths, total](Node& self) {
        std::size_t at = 0;
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
            const std::size_t w = widths[k];
            if (self.inputs[k]->requires_grad) {
                Tensor& gk = grad_buffer(*self.inputs[k]);
                for (std::size_t o = 0; o < s.outer; ++o) {
                    const double* src = self.grad.data() + o * total * s.inner + at;
                    double* dst = gk.data() + o * w;
                    for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
                }
            }
            at += w;
        }
    });
}

Var index_select(const Var& a, std::size_t axis, const std::vector<std::size_t>& indices)
{
    const Tensor& A = a.value();
    const AxisSplit s = split_axis("index_select", A.shape(), axis);
    for (std::size_t i : indices) {
        if (i >= s.dim) throw ShapeError("index_select: index " + std::to_string(i) + " out of range for " + shape_str(A.shape()));
    }
    Shape shape = A.shape();
    shape[axis] = indices.size();
    Tensor out(shape);
    const std::size_t m = indices.size();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t j = 0; j < m; ++j) {
            std::copy_n(A.data() + (o * s.dim + indices[j]) * s.inner, s.inner, out.data() + (o * m + j) * s.inner);
        }
    }
    return make_op("index_select", std::move(out), {a.node()}, [s, indices, m](Node& self) {
        Tensor& ga = grad_buffer(*self.inputs[0]);
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t j = 0; j < m; ++j) {
                double* dst = ga.data() + (o * s.dim + indices[j]) * s.inner;
                const double* src = self.grad.data() + (o * m + j) * s.inner;
                for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
            }
        }
    });
}

// --- convolution ----------------------------------------------------------------

std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding)
{
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    if (in + 2 * padding < kernel) {
        throw ShapeError("conv2d: kernel " + std::to_string(kernel) + " larger than padded input " +
                         std::to_string(in + 2 * padding));
    }
    return (in + 2 * padding - kernel) / stride + 1;
}

namespace {

struct ConvGeom {
    std::size_t n, c, h, w, o, kh, kw, stride, pad, ho, wo;
    std::size_t col_rows() const { return c * kh * kw; }
    std::size_t col_cols() const { return ho * wo; }
};

void im2col(const ConvGeom& g, const double* x, double* col)
{
    const std::size_t cols = g.col_cols();
    for (std::size_t ci = 0; ci < g.c; ++ci) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                double* row = col + ((ci * g.kh + ky) * g.kw + kx) * cols;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                    double* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                        std::fill_n(dst, g.wo, 0.0);
                        continue;
                    }
                    const double* src = x + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[ix];
                    }
                }
            }
        }
    }
}

void col2im_add(const ConvGeom& g, const double* col, double* x)
{
    const std::size_t cols = g.col_cols();
    for (std::size_t ci = 0; ci < g.c; ++ci) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const double* row = col + ((ci * g.kh + ky) * g.kw + kx) * cols;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    double* dst = x + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
                    const double* src = row + oy * g.wo;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

bool is_pointwise(const ConvGeom& g) { return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0; }

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t padding)
{
    const Tensor& X = x.value();
    const Tensor& W = w.value();
    if (X.rank() != 4 || W.rank() != 4 || X.dim(1) != W.dim(1)) throw shape_error("conv2d", X.shape(), W.shape());
    ConvGeom g{};
    g.n = X.dim(0);
    g.c = X.dim(1);
    g.h = X.dim(2);
    g.w = X.dim(3);
    g.o = W.dim(0);
    g.kh = W.dim(2);
    g.kw = W.dim(3);
    g.stride = stride;
    g.pad = padding;
    g.ho = conv_out_size(g.h, g.kh, stride, padding);
    g.wo = conv_out_size(g.w, g.kw, stride, padding);
    const bool has_bias = b.valid();
    if (has_bias && (b.value().rank() != 1 || b.value().dim(0) != g.o)) throw shape_error("conv2d bias", W.shape(), b.shape());

    const std::size_t rows = g.col_rows();
    const std::size_t cols = g.col_cols();
    const bool keep_cols = active_tape() != nullptr && !is_pointwise(g) && w.requires_grad();
    auto col_cache = std::make_shared<std::vector<double>>();
    std::vector<double> scratch;
    if (!is_pointwise(g)) scratch.resize(rows * cols);
    if (keep_cols) col_cache->resize(g.n * rows * cols);

    Tensor out({g.n, g.o, g.ho, g.wo});
    for (std::size_t n = 0; n < g.n; ++n) {
        const double* xn = X.data() + n * g.c * g.h * g.w;
        const double* col = xn;
        if (!is_pointwise(g)) {
            double* dst = keep_cols ? col_cache->data() + n * rows * cols : scratch.data();
            im2col(g, xn, dst);
            col = dst;
        }
        double* on = out.data() + n * g.o * cols;
        gemm(false, false, g.o, cols, rows, 1.0, W.data(), col, 0.0, on);
        if (has_bias) {
            for (std::size_t oc = 0; oc < g.o; ++oc) {
                const double bv = b.value()[oc];
                for (std::size_t i = 0; i < cols; ++i) on[oc * cols + i] += bv;
            }
        }
    }
    std::vector<NodePtr> inputs{x.node(), w.node()};
    if (has_bias) inputs.push_back(b.node());
    return make_op("conv2d", std::move(out), std::move(inputs), [g, has_bias, keep_cols, col_cache](Node& self) {
        const std::size_t rows = g.col_rows();
        const std::size_t cols = g.col_cols();
        Node& nx = *self.inputs[0];
        Node& nw = *self.inputs[1];
        const Tensor& G = self.grad;
        std::vector<double> scratch;
        if (!is_pointwise(g)) scratch.resize(rows * cols);
        for (std::size_t n = 0; n < g.n; ++n) {
            const double* gn = G.data() + n * g.o * cols;
            if (nw.requires_grad) {
                const double* xn = nx.value.data() + n * g.c * g.h * g.w;
                const double* col = xn;
                if (!is_pointwise(g)) {
                    if (keep_cols) {
                        col = col_cache->data() + n * rows * cols;
                    } else {
                        im2col(g, xn, scratch.data());
                        col = scratch.data();
                    }
                }
                gemm(false, true, g.o, rows, cols, 1.0, gn, col, 1.0, grad_buffer(nw).data());
            }
            if (nx.requires_grad) {
                double* gx = grad_buffer(nx).data() + n * g.c * g.h * g.w;
                if (is_pointwise(g)) {
                    gemm(true, false, rows, cols, g.o, 1.0, nw.value.data(), gn, 1.0, gx);
                } else {
                    gemm(true, false, rows, cols, g.o, 1.0, nw.value.data(), gn, 0.0, scratch.data());
                    col2im_add(g, scratch.data(), gx);
                }
            }
            if (has_bias && self.inputs[2]->requires_grad) {
                Tensor& gb = grad_buffer(*self.inputs[2]);
                for (std::size_t oc = 0; oc < g.o; ++oc) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < cols; ++i) s += gn[oc * cols + i];
                    gb[oc] += s;
                }
            }
        }
    });
}

Var upsample_nearest(const Var& x, std::size_t factor)
{
    const Tensor& X = x.value();
    if (X.rank() != 4 || factor == 0) throw ShapeError("upsample_nearest: expected rank-4 input, got " + shape_str(X.shape()));
    const std::size_t nc = X.dim(0) * X.dim(1), h = X.dim(2), w = X.dim(3);
    const std::size_t H = h * factor, W = w * factor;
    Tensor out({X.dim(0), X.dim(1), H, W});
    for (std::size_t p = 0; p < nc; ++p) {
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t xx = 0; xx < W; ++xx) out[(p * H + y) * W + xx] = X[(p * h + y / factor) * w + xx / factor];
        }
    }
    return make_op("upsample_nearest", std::move(out), {x.node()}, [nc, h, w, H, W, factor](Node& self) {
        Tensor& gx = grad_buffer(*self.inputs[0]);
        for (std::size_t p = 0; p < nc; ++p) {
            for (std::size_t y = 0; y < H; ++y) {
                for (std::size_t xx = 0; xx < W; ++xx) gx[(p * h + y / factor) * w + xx / factor] += self.grad[(p * H + y) * W + xx];
            }
        }
    });
}

// --- softmax ---------------------------------------------------------------------

Var softmax(const Var& a, std::size_t axis)
{
    const Tensor& A = a.value();
    const AxisSplit s = split_axis("softmax", A.shape(), axis);
    Tensor out(A.shape());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.dim * s.inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t d = 0; d < s.dim; ++d) mx = std::max(mx, A[base + d * s.inner]);
            double z = 0.0;
            for (std::size_t d = 0; d < s.dim; ++d) {
                const double e = std::exp(A[base + d * s.inner] - mx);
                out[base + d * s.inner] = e;
                z += e;
            }
            for (std::size_t d = 0; d < s.dim; ++d) out[base + d * s.inner] /= z;
        }
    }
    return make_op("softmax", std::move(out), {a.node()}, [s](Node& self) {
        Tensor& ga = grad_buffer(*self.inputs[0]);
        const Tensor& y = self.value;
        const Tensor& g = self.grad;
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t base = o * s.dim * s.inner + i;
                double dot = 0.0;
                for (std::size_t d = 0; d < s.dim; ++d) dot += g[base + d * s.inner] * y[base + d * s.inner];
                for (std::size_t d = 0; d < s.dim; ++d) {
                    const std::size_t k = base + d * s.inner;
                    ga[k] += y[k] * (g[k] - dot);
                }
            }
        }
    });
}

Var log_softmax(const Var& a, std::size_t axis)
{
    const Tensor& A = a.value();
    const AxisSplit s = split_axis("log_softmax", A.shape(), axis);
    Tensor out(A.shape());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.dim * s.inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t d = 0; d < s.dim; ++d) mx = std::max(mx, A[base + d * s.inner]);
            double z = 0.0;
            for (std::size_t d = 0; d < s.dim; ++d) z += std::exp(A[base + d * s.inner] - mx);
            const double lse = mx + std::log(z);
            for (std::size_t d = 0; d < s.dim; ++d) out[base + d * s.inner] = A[base + d * s.inner] - lse;
        }
    }
    return make_op("log_softmax", std::move(out), {a.node()}, [s](Node& self) {
        Tensor& ga = grad_buffer(*self.inputs[0]);
        const Tensor& y = self.value;
        const Tensor& g = self.grad;
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t base = o * s.dim * s.inner + i;
                double gs = 0.0;
                for (std::size_t d = 0; d < s.dim; ++d) gs += g[base + d * s.inner];
                for (std::size_t d = 0; d < s.dim; ++d) {
                    const std::size_t k = base + d * s.inner;
                    ga[k] += g[k] - std::exp(y[k]) * gs;
                }
            }
        }
    });
}

// --- reductions --------------------------------------------------------------------

Var sum(const Var& a)
{
    return make_op("sum", Tensor::scalar(a.value().sum()), {a.node()}, [](Node& self) {
        Tensor& ga = grad_buffer(*self.inputs[0]);
        const double g = self.grad[0];
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

Var mean(const Var& a)
{
    const double n = static_cast<double>(a.value().size());
    if (n == 0) throw ShapeError("mean: empty tensor");
    return mul_scalar(sum(a), 1.0 / n);
}

Var sum_axis(const Var& a, std::size_t axis)
{
    const Tensor& A = a.value();
    const AxisSplit s = split_axis("sum_axis", A.shape(), axis);
    Shape shape = A.shape();
    shape[axis] = 1;
    Tensor out(shape);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t d = 0; d < s.dim; ++d)
            for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += A[(o * s.dim + d) * s.inner + i];
    return make_op("sum_axis", std::move(out), {a.node()}, [s](Node& self) {
        Tensor& ga = grad_buffer(*self.inputs[0]);
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t d = 0; d < s.dim; ++d)
                for (std::size_t i = 0; i < s.inner; ++i) ga[(o * s.dim + d) * s.inner + i] += self.grad[o * s.inner + i];
    });
}

Var l1(const Var& a)
{
    return make_op("l1", Tensor::scalar(a.value().abs_sum()), {a.node()}, [](Node& self) {
        Tensor& ga = grad_buffer(*self.inputs[0]);
        const Tensor& x = self.inputs[0]->value;
        const double g = self.grad[0];
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * (x[i] > 0 ? 1.0 : (x[i] < 0 ? -1.0 : 0.0));
    });
}

Var l2(const Var& a)
{
    double s = 0.0;
    for (double v : a.value().values()) s += v * v;
    return make_op("l2", Tensor::scalar(s), {a.node()}, [](Node& self) {
        Tensor& ga = grad_buffer(*self.inputs[0]);
        const Tensor& x = self.inputs[0]->value;
        const double g = self.grad[0];
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += 2.0 * g * x[i];
    });
}

Var mean_abs(const Var& a)
{
    const double n = static_cast<double>(a.value().size());
    if (n == 0) throw ShapeError("mean_abs: empty tensor");
    return mul_scalar(l1(a), 1.0 / n);
}

Var normalize_rows(const Var& a)
{
    const Tensor& A = a.value();
    if (A.rank() != 2) throw ShapeError("normalize_rows: expected rank 2, got " + shape_str(A.shape()));
    const std::size_t rows = A.dim(0), cols = A.dim(1);
    if (cols == 0) throw ShapeError("normalize_rows: zero feature channels");
    Tensor out(A.shape());
    auto norms = std::make_shared<std::vector<double>>(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += A[r * cols + c] * A[r * cols + c];
        const double nrm = std::sqrt(s);
        (*norms)[r] = nrm;
        if (nrm > 0.0) {
            for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = A[r * cols + c] / nrm;
        }
    }
    return make_op("normalize_rows", std::move(out), {a.node()}, [rows, cols, norms](Node& self) {
        Tensor& ga = grad_buffer(*self.inputs[0]);
        const Tensor& y = self.value;
        const Tensor& g = self.grad;
        for (std::size_t r = 0; r < rows; ++r) {
            const double nrm = (*norms)[r];
            if (nrm == 0.0) continue;
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += y[r * cols + c] * g[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c) {
                const std::size_t k = r * cols + c;
                ga[k] += (g[k] - y[k] * dot) / nrm;
            }
        }
    });
}

// --- recurrent cell ------------------------------------------------------------------

Var gru_cell(const Var& x, const Var& h, const Var& w_ih, const Var& w_hh, const Var& b_ih, const Var& b_hh)
{
    const Tensor& X = x.value();
    const Tensor& Hs = h.value();
    if (X.rank() != 2 || Hs.rank() != 2 || X.dim(0) != Hs.dim(0)) throw shape_error("gru_cell", X.shape(), Hs.shape());
    const std::size_t B = X.dim(0), I = X.dim(1), H = Hs.dim(1);
    if (w_ih.value().shape() != Shape{3 * H, I}) throw shape_error("gru_cell w_ih", w_ih.shape(), Shape{3 * H, I});
    if (w_hh.value().shape() != Shape{3 * H, H}) throw shape_error("gru_cell w_hh", w_hh.shape(), Shape{3 * H, H});
    if (b_ih.value().shape() != Shape{3 * H}) throw shape_error("gru_cell b_ih", b_ih.shape(), Shape{3 * H});
    if (b_hh.value().shape() != Shape{3 * H}) throw shape_error("gru_cell b_hh", b_hh.shape(), Shape{3 * H});

    auto gi = std::make_shared<std::vector<double>>(B * 3 * H);
    auto gh = std::make_shared<std::vector<double>>(B * 3 * H);
    gemm(false, true, B, 3 * H, I, 1.0, X.data(), w_ih.value().data(), 0.0, gi->data());
    gemm(false, true, B, 3 * H, H, 1.0, Hs.data(), w_hh.value().data(), 0.0, gh->data());
    for (std::size_t bi = 0; bi < B; ++bi) {
        for (std::size_t j = 0; j < 3 * H; ++j) {
            (*gi)[bi * 3 * H + j] += b_ih.value()[j];
            (*gh)[bi * 3 * H + j] += b_hh.value()[j];
        }
    }
    // gates: [r | z | n] per row
    auto gates = std::make_shared<std::vector<double>>(B * 3 * H);
    Tensor out({B, H});
    for (std::size_t bi = 0; bi < B; ++bi) {
        const double* pi = gi->data() + bi * 3 * H;
        const double* ph = gh->data() + bi * 3 * H;
        double* pg = gates->data() + bi * 3 * H;
        for (std::size_t j = 0; j < H; ++j) {
            const double r = sigmoid_scalar(pi[j] + ph[j]);
            const double z = sigmoid_scalar(pi[H + j] + ph[H + j]);
            const double n = std::tanh(pi[2 * H + j] + r * ph[2 * H + j]);
            pg[j] = r;
            pg[H + j] = z;
            pg[2 * H + j] = n;
            out[bi * H + j] = (1.0 - z) * n + z * Hs[bi * H + j];
        }
    }
    return make_op("gru_cell", std::move(out), {x.node(), h.node(), w_ih.node(), w_hh.node(), b_ih.node(), b_hh.node()},
                   [B, I, H, gh, gates](Node& self) {
                       const Tensor& G = self.grad;
                       Node& nx = *self.inputs[0];
                       Node& nh = *self.inputs[1];
                       std::vector<double> dgi(B * 3 * H), dgh(B * 3 * H);
                       std::vector<double> dh_direct(B * H);
                       for (std::size_t bi = 0; bi < B; ++bi) {
                           const double* pg = gates->data() + bi * 3 * H;
                           const double* ph = gh->data() + bi * 3 * H;
                           for (std::size_t j = 0; j < H; ++j) {
                               const double r = pg[j], z = pg[H + j], n = pg[2 * H + j];
                               const double g = G[bi * H + j];
                               const double hprev = nh.value[bi * H + j];
                               const double dz = g * (hprev - n);
                               const double dn = g * (1.0 - z);
                               dh_direct[bi * H + j] = g * z;
                               const double dn_pre = dn * (1.0 - n * n);
                               const double dr = dn_pre * ph[2 * H + j];
                               const double dr_pre = dr * r * (1.0 - r);
                               const double dz_pre = dz * z * (1.0 - z);
                               double* di = dgi.data() + bi * 3 * H;
                               double* dh = dgh.data() + bi * 3 * H;
                               di[j] = dr_pre;
                               di[H + j] = dz_pre;
                               di[2 * H + j] = dn_pre;
                               dh[j] = dr_pre;
                               dh[H + j] = dz_pre;
                               dh[2 * H + j] = dn_pre * r;
                           }
                       }
                       if (nx.requires_grad) {
                           gemm(false, false, B, I, 3 * H, 1.0, dgi.data(), self.inputs[2]->value.data(), 1.0,
                                grad_buffer(nx).data());
                       }
                       if (nh.requires_grad) {
                           Tensor& gh_buf = grad_buffer(nh);
                           for (std::size_t k = 0; k < B * H; ++k) gh_buf[k] += dh_direct[k];
                           gemm(false, false, B, H, 3 * H, 1.0, dgh.data(), self.inputs[3]->value.data(), 1.0, gh_buf.data());
                       }
                       if (self.inputs[2]->requires_grad) {
                           gemm(true, false, 3 * H, I, B, 1.0, dgi.data(), nx.value.data(), 1.0,
                                grad_buffer(*self.inputs[2]).data());
                       }
                       if (self.inputs[3]->requires_grad) {
                           gemm(true, false, 3 * H, H, B, 1.0, dgh.data(), nh.value.data(), 1.0,
                                grad_buffer(*self.inputs[3]).data());
                       }
                       for (int k = 0; k < 2; ++k) {
                           Node& nb = *self.inputs[4 + k];
                           if (!nb.requires_grad) continue;
                           const std::vector<double>& d = k == 0 ? dgi : dgh;
                           Tensor& gb = grad_buffer(nb);
                           for (std::size_t bi = 0; bi < B; ++bi)
                               for (std::size_t j = 0; j < 3 * H; ++j) gb[j] += d[bi * 3 * H + j];
                       }
                   });
}

}  // namespace drmo::ad
