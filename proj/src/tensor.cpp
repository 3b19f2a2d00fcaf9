#include "focalconv/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <thread>
#include <unordered_set>

namespace focalconv {

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

Shape strides_of(const Shape& shape) {
    Shape st(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
        st[static_cast<std::size_t>(i)] =
            st[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
    }
    return st;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

namespace detail {

void Node::accumulate(const std::vector<double>& g) {
    if (!requires_grad) return;
    if (grad.empty()) grad.assign(data.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

}  // namespace detail

using detail::Node;

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw DimensionError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = numel(shape);
    return from_data(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0),
                     requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
    auto n = numel(shape);
    return from_data(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 1.0),
                     requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = numel(shape);
    return from_data(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value),
                     requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data(Shape{}, std::vector<double>{value}, requires_grad);
}

const std::vector<double>& Tensor::grad() const {
    if (node_->grad.empty()) {
        throw DimensionError("tensor: gradient requested but none accumulated");
    }
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (size() != 1) {
        throw DimensionError("tensor: item() requires a single element, shape is " +
                             shape_str(shape()));
    }
    return node_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    const auto& s = shape();
    if (idx.size() != s.size()) {
        throw DimensionError("tensor: index rank " + std::to_string(idx.size()) +
                             " does not match shape " + shape_str(s));
    }
    const Shape st = strides_of(s);
    std::int64_t flat = 0;
    std::size_t ax = 0;
    for (auto i : idx) {
        if (i < 0 || i >= s[ax]) {
            throw DimensionError("tensor: index out of range for shape " + shape_str(s));
        }
        flat += i * st[ax];
        ++ax;
    }
    return node_->data[static_cast<std::size_t>(flat)];
}

Tensor Tensor::detached() const {
    return Tensor::from_data(shape(), data(), false);
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor make_op(Shape out_shape, std::vector<double> out_data, std::vector<Tensor> parents,
               std::function<void(Node&)> backward) {
    bool any_grad = false;
    if (g_grad_enabled) {
        for (const auto& p : parents) any_grad = any_grad || p.requires_grad();
    }
    Tensor out = Tensor::from_data(std::move(out_shape), std::move(out_data), any_grad);
    if (any_grad) {
        auto node = out.node();
        node->parents.reserve(parents.size());
        for (const auto& p : parents) node->parents.push_back(p.node());
        node->backward = std::move(backward);
    }
    return out;
}

void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw DimensionError("backward: loss must be scalar, got shape " +
                             shape_str(loss.shape()));
    }
    auto root = loss.node();
    if (!root->requires_grad) return;

    // Iterative post-order DFS; topo holds every reachable node after its parents.
    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next].get();
            ++next;
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    root->accumulate({1.0});
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* node = *it;
        if (node->backward && !node->grad.empty()) node->backward(*node);
    }
}

// ---- parallel helper --------------------------------------------------------

int worker_threads() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("FOCALCONV_THREADS")) {
        int cap = std::atoi(env);
        if (cap >= 1 && cap < hw) hw = cap;
    }
    return hw;
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body) {
    const int threads = worker_threads();
    if (threads <= 1 || n < 4) {
        body(0, n);
        return;
    }
    const int used = static_cast<int>(std::min<std::int64_t>(threads, n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(used) - 1);
    const std::int64_t chunk = (n + used - 1) / used;
    for (int t = 1; t < used; ++t) {
        const std::int64_t lo = t * chunk;
        const std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    body(0, std::min<std::int64_t>(n, chunk));
    for (auto& th : pool) th.join();
}

// ---- broadcast machinery -----------------------------------------------------

namespace {

struct BroadcastPlan {
    Shape out_shape;
    Shape a_strides;  // 0 where the operand axis is broadcast
    Shape b_strides;
};

BroadcastPlan broadcast_plan(const char* op, const Shape& a, const Shape& b) {
    if (a.size() != b.size()) {
        throw DimensionError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " +
                             shape_str(b));
    }
    BroadcastPlan plan;
    plan.out_shape.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] == b[i] || a[i] == 1 || b[i] == 1) {
            plan.out_shape[i] = std::max(a[i], b[i]);
        } else {
            throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) +
                                 " vs " + shape_str(b));
        }
    }
    const Shape as = strides_of(a);
    const Shape bs = strides_of(b);
    plan.a_strides.resize(a.size());
    plan.b_strides.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        plan.a_strides[i] = (a[i] == 1 && plan.out_shape[i] != 1) ? 0 : as[i];
        plan.b_strides[i] = (b[i] == 1 && plan.out_shape[i] != 1) ? 0 : bs[i];
    }
    return plan;
}

// Calls fn(flat_out, a_off, b_off) over the full output index space.
template <typename Fn>
void for_each_pair(const BroadcastPlan& plan, Fn&& fn) {
    const auto rank = static_cast<int>(plan.out_shape.size());
    const std::int64_t total = numel(plan.out_shape);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
    std::int64_t a_off = 0;
    std::int64_t b_off = 0;
    for (std::int64_t flat = 0; flat < total; ++flat) {
        fn(flat, a_off, b_off);
        for (int ax = rank - 1; ax >= 0; --ax) {
            const auto u = static_cast<std::size_t>(ax);
            ++idx[u];
            a_off += plan.a_strides[u];
            b_off += plan.b_strides[u];
            if (idx[u] < plan.out_shape[u]) break;
            a_off -= plan.a_strides[u] * plan.out_shape[u];
            b_off -= plan.b_strides[u] * plan.out_shape[u];
            idx[u] = 0;
        }
    }
}

enum class BinKind { Add, Sub, Mul };

Tensor binary_op(const char* name, BinKind kind, const Tensor& a, const Tensor& b) {
    BroadcastPlan plan = broadcast_plan(name, a.shape(), b.shape());
    std::vector<double> out(static_cast<std::size_t>(numel(plan.out_shape)));
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for_each_pair(plan, [&](std::int64_t flat, std::int64_t ao, std::int64_t bo) {
        const double x = pa[ao];
        const double y = pb[bo];
        switch (kind) {
            case BinKind::Add: out[static_cast<std::size_t>(flat)] = x + y; break;
            case BinKind::Sub: out[static_cast<std::size_t>(flat)] = x - y; break;
            case BinKind::Mul: out[static_cast<std::size_t>(flat)] = x * y; break;
        }
    });
    Tensor ta = a;
    Tensor tb = b;
    return make_op(plan.out_shape, std::move(out), {a, b}, [ta, tb, plan, kind](Node& o) {
        std::vector<double> ga;
        std::vector<double> gb;
        const bool need_a = ta.requires_grad();
        const bool need_b = tb.requires_grad();
        if (need_a) ga.assign(ta.data().size(), 0.0);
        if (need_b) gb.assign(tb.data().size(), 0.0);
        const double* pa = ta.data().data();
        const double* pb = tb.data().data();
        for_each_pair(plan, [&](std::int64_t flat, std::int64_t ao, std::int64_t bo) {
            const double g = o.grad[static_cast<std::size_t>(flat)];
            switch (kind) {
                case BinKind::Add:
                    if (need_a) ga[static_cast<std::size_t>(ao)] += g;
                    if (need_b) gb[static_cast<std::size_t>(bo)] += g;
                    break;
                case BinKind::Sub:
                    if (need_a) ga[static_cast<std::size_t>(ao)] += g;
                    if (need_b) gb[static_cast<std::size_t>(bo)] -= g;
                    break;
                case BinKind::Mul:
                    if (need_a) ga[static_cast<std::size_t>(ao)] += g * pb[bo];
                    if (need_b) gb[static_cast<std::size_t>(bo)] += g * pa[ao];
                    break;
            }
        });
        if (need_a) ta.node()->accumulate(ga);
        if (need_b) tb.node()->accumulate(gb);
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op("add", BinKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op("sub", BinKind::Sub, a, b); }
Tensor elementwise_mul(const Tensor& a, const Tensor& b) {
    return binary_op("elementwise_mul", BinKind::Mul, a, b);
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    Tensor ta = a;
    return make_op(a.shape(), std::move(out), {a}, [ta, c](Node& o) {
        std::vector<double> g(o.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * c;
        ta.node()->accumulate(g);
    });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor ta = a;
    return make_op(Shape{}, {s}, {a}, [ta](Node& o) {
        ta.node()->accumulate(std::vector<double>(ta.data().size(), o.grad[0]));
    });
}

// ---- matmul_linear -----------------------------------------------------------

Tensor matmul_linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() < 1 || w.rank() != 2 || b.rank() != 1) {
        throw DimensionError("matmul_linear: expected x[...,Cin] " + shape_str(x.shape()) +
                             ", w[Cin,Cout] " + shape_str(w.shape()) + ", b[Cout] " +
                             shape_str(b.shape()));
    }
    const std::int64_t c_in = x.shape().back();
    const std::int64_t c_out = w.dim(1);
    if (w.dim(0) != c_in || b.dim(0) != c_out) {
        throw DimensionError("matmul_linear: inner dimensions disagree: x " +
                             shape_str(x.shape()) + " vs w " + shape_str(w.shape()) + ", b " +
                             shape_str(b.shape()));
    }
    const std::int64_t rows = x.size() / c_in;
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);
    out_shape.push_back(c_out);

    std::vector<double> out(static_cast<std::size_t>(rows * c_out));
    const double* px = x.data().data();
    const double* pw = w.data().data();
    const double* pb = b.data().data();
    parallel_for(rows, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t r = lo; r < hi; ++r) {
            const double* xr = px + r * c_in;
            double* orow = out.data() + r * c_out;
            for (std::int64_t j = 0; j < c_out; ++j) orow[j] = pb[j];
            for (std::int64_t i = 0; i < c_in; ++i) {
                const double xv = xr[i];
                const double* wrow = pw + i * c_out;
                for (std::int64_t j = 0; j < c_out; ++j) orow[j] += xv * wrow[j];
            }
        }
    });

    Tensor tx = x;
    Tensor tw = w;
    Tensor tb = b;
    return make_op(std::move(out_shape), std::move(out), {x, w, b},
                   [tx, tw, tb, rows, c_in, c_out](Node& o) {
        const double* g = o.grad.data();
        const double* px = tx.data().data();
        const double* pw = tw.data().data();
        if (tx.requires_grad()) {
            std::vector<double> gx(tx.data().size(), 0.0);
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* grow = g + r * c_out;
                double* gxr = gx.data() + r * c_in;
                for (std::int64_t i = 0; i < c_in; ++i) {
                    const double* wrow = pw + i * c_out;
                    double acc = 0.0;
                    for (std::int64_t j = 0; j < c_out; ++j) acc += grow[j] * wrow[j];
                    gxr[i] = acc;
                }
            }
            tx.node()->accumulate(gx);
        }
        if (tw.requires_grad()) {
            std::vector<double> gw(tw.data().size(), 0.0);
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* xr = px + r * c_in;
                const double* grow = g + r * c_out;
                for (std::int64_t i = 0; i < c_in; ++i) {
                    double* gwrow = gw.data() + i * c_out;
                    const double xv = xr[i];
                    for (std::int64_t j = 0; j < c_out; ++j) gwrow[j] += xv * grow[j];
                }
            }
            tw.node()->accumulate(gw);
        }
        if (tb.requires_grad()) {
            std::vector<double> gb(static_cast<std::size_t>(c_out), 0.0);
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* grow = g + r * c_out;
                for (std::int64_t j = 0; j < c_out; ++j) gb[static_cast<std::size_t>(j)] += grow[j];
            }
            tb.node()->accumulate(gb);
        }
    });
}

// ---- convolutions -------------------------------------------------------------

namespace {

struct ConvDims {
    std::int64_t n, c_in, h, w, c_out, k, h_out, w_out;
};

ConvDims conv_check(const char* name, const Tensor& x, const Tensor& w, const Tensor& b,
                    int stride, int pad, bool depthwise) {
    if (x.rank() != 4 || w.rank() != 4) {
        throw DimensionError(std::string(name) + ": expected x (N,C,H,W) and 4-d weight, got x " +
                             shape_str(x.shape()) + ", w " + shape_str(w.shape()));
    }
    ConvDims d{};
    d.n = x.dim(0);
    d.c_in = x.dim(1);
    d.h = x.dim(2);
    d.w = x.dim(3);
    d.k = w.dim(2);
    if (w.dim(3) != d.k || d.k % 2 == 0) {
        throw DimensionError(std::string(name) + ": kernel must be square with odd size, got " +
                             shape_str(w.shape()));
    }
    if (depthwise) {
        if (w.dim(0) != d.c_in || w.dim(1) != 1) {
            throw DimensionError(std::string(name) + ": weight " + shape_str(w.shape()) +
                                 " does not match input channels of " + shape_str(x.shape()));
        }
        d.c_out = d.c_in;
    } else {
        if (w.dim(1) != d.c_in) {
            throw DimensionError(std::string(name) + ": weight " + shape_str(w.shape()) +
                                 " does not match input channels of " + shape_str(x.shape()));
        }
        d.c_out = w.dim(0);
    }
    if (b.rank() != 1 || b.dim(0) != d.c_out) {
        throw DimensionError(std::string(name) + ": bias " + shape_str(b.shape()) +
                             " must have shape (" + std::to_string(d.c_out) + ")");
    }
    if (stride < 1 || pad < 0) {
        throw DimensionError(std::string(name) + ": stride must be >=1 and pad >=0");
    }
    d.h_out = (d.h + 2 * pad - d.k) / stride + 1;
    d.w_out = (d.w + 2 * pad - d.k) / stride + 1;
    if (d.h + 2 * pad < d.k || d.w + 2 * pad < d.k || d.h_out < 1 || d.w_out < 1) {
        throw DimensionError(std::string(name) + ": degenerate output shape for input " +
                             shape_str(x.shape()) + ", kernel " + shape_str(w.shape()) +
                             ", stride " + std::to_string(stride) + ", pad " + std::to_string(pad));
    }
    return d;
}

std::vector<double> pad_batch(const std::vector<double>& x, std::int64_t n, std::int64_t c,
                              std::int64_t h, std::int64_t w, int pad) {
    const std::int64_t hp = h + 2 * pad;
    const std::int64_t wp = w + 2 * pad;
    std::vector<double> out(static_cast<std::size_t>(n * c * hp * wp), 0.0);
    for (std::int64_t i = 0; i < n * c; ++i) {
        const double* src = x.data() + i * h * w;
        double* dst = out.data() + i * hp * wp + pad * wp + pad;
        for (std::int64_t row = 0; row < h; ++row) {
            std::copy(src, src + w, dst);
            src += w;
            dst += wp;
        }
    }
    return out;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    const ConvDims d = conv_check("conv2d", x, w, b, stride, pad, false);
    const std::int64_t hp = d.h + 2 * pad;
    const std::int64_t wp = d.w + 2 * pad;

    const std::vector<double>* xin = &x.data();
    std::vector<double> padded;
    if (pad > 0) {
        padded = pad_batch(x.data(), d.n, d.c_in, d.h, d.w, pad);
        xin = &padded;
    }

    std::vector<double> out(static_cast<std::size_t>(d.n * d.c_out * d.h_out * d.w_out));
    const double* px = xin->data();
    const double* pw = w.data().data();
    const double* pb = b.data().data();
    parallel_for(d.n * d.c_out, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t t = lo; t < hi; ++t) {
            const std::int64_t n = t / d.c_out;
            const std::int64_t co = t % d.c_out;
            const double* xn = px + n * d.c_in * hp * wp;
            double* oplane = out.data() + t * d.h_out * d.w_out;
            const double bias = pb[co];
            for (std::int64_t ho = 0; ho < d.h_out; ++ho) {
                for (std::int64_t wo = 0; wo < d.w_out; ++wo) {
                    double acc = bias;
                    for (std::int64_t ci = 0; ci < d.c_in; ++ci) {
                        const double* xc = xn + ci * hp * wp + ho * stride * wp + wo * stride;
                        const double* wc = pw + (co * d.c_in + ci) * d.k * d.k;
                        for (std::int64_t kh = 0; kh < d.k; ++kh) {
                            const double* xr = xc + kh * wp;
                            const double* wr = wc + kh * d.k;
                            for (std::int64_t kw = 0; kw < d.k; ++kw) acc += xr[kw] * wr[kw];
                        }
                    }
                    oplane[ho * d.w_out + wo] = acc;
                }
            }
        }
    });

    Tensor tx = x;
    Tensor tw = w;
    Tensor tb = b;
    Shape out_shape{d.n, d.c_out, d.h_out, d.w_out};
    return make_op(std::move(out_shape), std::move(out), {x, w, b},
                   [tx, tw, tb, d, stride, pad, hp, wp](Node& o) {
        const double* g = o.grad.data();
        const double* pw = tw.data().data();
        const bool need_x = tx.requires_grad();
        const bool need_w = tw.requires_grad();
        const bool need_b = tb.requires_grad();

        std::vector<double> xpad;
        const std::vector<double>* xin = &tx.data();
        if ((need_w) && pad > 0) {
            xpad = pad_batch(tx.data(), d.n, d.c_in, d.h, d.w, pad);
            xin = &xpad;
        }

        std::vector<double> gx_pad;
        if (need_x) gx_pad.assign(static_cast<std::size_t>(d.n * d.c_in * hp * wp), 0.0);
        std::vector<double> gw;
        if (need_w) gw.assign(tw.data().size(), 0.0);
        std::vector<double> gb;
        if (need_b) gb.assign(tb.data().size(), 0.0);

        for (std::int64_t n = 0; n < d.n; ++n) {
            for (std::int64_t co = 0; co < d.c_out; ++co) {
                const double* gplane = g + (n * d.c_out + co) * d.h_out * d.w_out;
                for (std::int64_t ho = 0; ho < d.h_out; ++ho) {
                    for (std::int64_t wo = 0; wo < d.w_out; ++wo) {
                        const double go = gplane[ho * d.w_out + wo];
                        if (go == 0.0) continue;
                        if (need_b) gb[static_cast<std::size_t>(co)] += go;
                        for (std::int64_t ci = 0; ci < d.c_in; ++ci) {
                            const std::int64_t xoff =
                                (n * d.c_in + ci) * hp * wp + ho * stride * wp + wo * stride;
                            const std::int64_t woff = (co * d.c_in + ci) * d.k * d.k;
                            for (std::int64_t kh = 0; kh < d.k; ++kh) {
                                for (std::int64_t kw = 0; kw < d.k; ++kw) {
                                    const std::int64_t xi = xoff + kh * wp + kw;
                                    if (need_x) {
                                        gx_pad[static_cast<std::size_t>(xi)] +=
                                            pw[woff + kh * d.k + kw] * go;
                                    }
                                    if (need_w) {
                                        gw[static_cast<std::size_t>(woff + kh * d.k + kw)] +=
                                            (*xin)[static_cast<std::size_t>(xi)] * go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if (need_x) {
            std::vector<double> gx(tx.data().size());
            for (std::int64_t i = 0; i < d.n * d.c_in; ++i) {
                const double* src = gx_pad.data() + i * hp * wp + pad * wp + pad;
                double* dst = gx.data() + i * d.h * d.w;
                for (std::int64_t row = 0; row < d.h; ++row) {
                    std::copy(src, src + d.w, dst);
                    src += wp;
                    dst += d.w;
                }
            }
            tx.node()->accumulate(gx);
        }
        if (need_w) tw.node()->accumulate(gw);
        if (need_b) tb.node()->accumulate(gb);
    });
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    const ConvDims d = conv_check("depthwise_conv2d", x, w, b, stride, pad, true);
    const std::int64_t hp = d.h + 2 * pad;
    const std::int64_t wp = d.w + 2 * pad;

    const std::vector<double>* xin = &x.data();
    std::vector<double> padded;
    if (pad > 0) {
        padded = pad_batch(x.data(), d.n, d.c_in, d.h, d.w, pad);
        xin = &padded;
    }

    std::vector<double> out(static_cast<std::size_t>(d.n * d.c_in * d.h_out * d.w_out));
    const double* px = xin->data();
    const double* pw = w.data().data();
    const double* pb = b.data().data();
    parallel_for(d.n * d.c_in, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t t = lo; t < hi; ++t) {
            const std::int64_t c = t % d.c_in;
            const double* xc = px + t * hp * wp;
            const double* wc = pw + c * d.k * d.k;
            double* oplane = out.data() + t * d.h_out * d.w_out;
            const double bias = pb[c];
            for (std::int64_t ho = 0; ho < d.h_out; ++ho) {
                for (std::int64_t wo = 0; wo < d.w_out; ++wo) {
                    double acc = bias;
                    const double* xp0 = xc + ho * stride * wp + wo * stride;
                    for (std::int64_t kh = 0; kh < d.k; ++kh) {
                        const double* xr = xp0 + kh * wp;
                        const double* wr = wc + kh * d.k;
                        for (std::int64_t kw = 0; kw < d.k; ++kw) acc += xr[kw] * wr[kw];
                    }
                    oplane[ho * d.w_out + wo] = acc;
                }
            }
        }
    });

    Tensor tx = x;
    Tensor tw = w;
    Tensor tb = b;
    Shape out_shape{d.n, d.c_in, d.h_out, d.w_out};
    return make_op(std::move(out_shape), std::move(out), {x, w, b},
                   [tx, tw, tb, d, stride, pad, hp, wp](Node& o) {
        const double* g = o.grad.data();
        const double* pw = tw.data().data();
        const bool need_x = tx.requires_grad();
        const bool need_w = tw.requires_grad();
        const bool need_b = tb.requires_grad();

        std::vector<double> xpad;
        const std::vector<double>* xin = &tx.data();
        if (need_w && pad > 0) {
            xpad = pad_batch(tx.data(), d.n, d.c_in, d.h, d.w, pad);
            xin = &xpad;
        }

        std::vector<double> gx_pad;
        if (need_x) gx_pad.assign(static_cast<std::size_t>(d.n * d.c_in * hp * wp), 0.0);
        std::vector<double> gw;
        if (need_w) gw.assign(tw.data().size(), 0.0);
        std::vector<double> gb;
        if (need_b) gb.assign(tb.data().size(), 0.0);

        for (std::int64_t t = 0; t < d.n * d.c_in; ++t) {
            const std::int64_t c = t % d.c_in;
            const double* gplane = g + t * d.h_out * d.w_out;
            for (std::int64_t ho = 0; ho < d.h_out; ++ho) {
                for (std::int64_t wo = 0; wo < d.w_out; ++wo) {
                    const double go = gplane[ho * d.w_out + wo];
                    if (go == 0.0) continue;
                    if (need_b) gb[static_cast<std::size_t>(c)] += go;
                    const std::int64_t xoff = t * hp * wp + ho * stride * wp + wo * stride;
                    const std::int64_t woff = c * d.k * d.k;
                    for (std::int64_t kh = 0; kh < d.k; ++kh) {
                        for (std::int64_t kw = 0; kw < d.k; ++kw) {
                            const std::int64_t xi = xoff + kh * wp + kw;
                            if (need_x) {
                                gx_pad[static_cast<std::size_t>(xi)] += pw[woff + kh * d.k + kw] * go;
                            }
                            if (need_w) {
                                gw[static_cast<std::size_t>(woff + kh * d.k + kw)] +=
                                    (*xin)[static_cast<std::size_t>(xi)] * go;
                            }
                        }
                    }
                }
            }
        }
        if (need_x) {
            std::vector<double> gx(tx.data().size());
            for (std::int64_t i = 0; i < d.n * d.c_in; ++i) {
                const double* src = gx_pad.data() + i * hp * wp + pad * wp + pad;
                double* dst = gx.data() + i * d.h * d.w;
                for (std::int64_t row = 0; row < d.h; ++row) {
                    std::copy(src, src + d.w, dst);
                    src += wp;
                    dst += d.w;
                }
            }
            tx.node()->accumulate(gx);
        }
        if (need_w) tw.node()->accumulate(gw);
        if (need_b) tb.node()->accumulate(gb);
    });
}

// ---- activations ---------------------------------------------------------------

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double stable_sigmoid(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}
}  // namespace

Tensor gelu(const Tensor& x) {
    std::vector<double> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.data()[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
    Tensor tx = x;
    return make_op(x.shape(), std::move(out), {x}, [tx](Node& o) {
        std::vector<double> gx(o.grad.size());
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const double v = tx.data()[i];
            const double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            gx[i] = o.grad[i] * (phi + v * pdf);
        }
        tx.node()->accumulate(gx);
    });
}

Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(x.data()[i]);
    Tensor tx = x;
    std::vector<double> saved = out;
    return make_op(x.shape(), std::move(out), {x}, [tx, saved = std::move(saved)](Node& o) {
        std::vector<double> gx(o.grad.size());
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const double s = saved[i];
            gx[i] = o.grad[i] * s * (1.0 - s);
        }
        tx.node()->accumulate(gx);
    });
}

namespace {
struct AxisLines {
    std::int64_t outer, len, inner;
};

AxisLines axis_lines(const char* op, const Shape& shape, int axis) {
    const int rank = static_cast<int>(shape.size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) {
        throw DimensionError(std::string(op) + ": axis out of range for shape " + shape_str(shape));
    }
    AxisLines lines{1, shape[static_cast<std::size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) lines.outer *= shape[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < rank; ++i) lines.inner *= shape[static_cast<std::size_t>(i)];
    return lines;
}
}  // namespace

Tensor softmax(const Tensor& x, int axis) {
    const AxisLines ln = axis_lines("softmax", x.shape(), axis);
    std::vector<double> out(x.data().size());
    const double* px = x.data().data();
    for (std::int64_t o = 0; o < ln.outer; ++o) {
        for (std::int64_t in = 0; in < ln.inner; ++in) {
            const std::int64_t base = o * ln.len * ln.inner + in;
            double mx = px[base];
            for (std::int64_t i = 1; i < ln.len; ++i)
                mx = std::max(mx, px[base + i * ln.inner]);
            double z = 0.0;
            for (std::int64_t i = 0; i < ln.len; ++i) {
                const double e = std::exp(px[base + i * ln.inner] - mx);
                out[static_cast<std::size_t>(base + i * ln.inner)] = e;
                z += e;
            }
            for (std::int64_t i = 0; i < ln.len; ++i)
                out[static_cast<std::size_t>(base + i * ln.inner)] /= z;
        }
    }
    Tensor tx = x;
    std::vector<double> saved = out;
    return make_op(x.shape(), std::move(out), {x}, [tx, ln, saved = std::move(saved)](Node& o) {
        std::vector<double> gx(o.grad.size());
        for (std::int64_t ou = 0; ou < ln.outer; ++ou) {
            for (std::int64_t in = 0; in < ln.inner; ++in) {
                const std::int64_t base = ou * ln.len * ln.inner + in;
                double dot = 0.0;
                for (std::int64_t i = 0; i < ln.len; ++i) {
                    const auto idx = static_cast<std::size_t>(base + i * ln.inner);
                    dot += o.grad[idx] * saved[idx];
                }
                for (std::int64_t i = 0; i < ln.len; ++i) {
                    const auto idx = static_cast<std::size_t>(base + i * ln.inner);
                    gx[idx] = saved[idx] * (o.grad[idx] - dot);
                }
            }
        }
        tx.node()->accumulate(gx);
    });
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) {
        throw DimensionError("global_avg_pool: expected (N,C,H,W), got " + shape_str(x.shape()));
    }
    const std::int64_t planes = x.dim(0) * x.dim(1);
    const std::int64_t hw = x.dim(2) * x.dim(3);
    std::vector<double> out(static_cast<std::size_t>(planes));
    const double* px = x.data().data();
    for (std::int64_t p = 0; p < planes; ++p) {
        double acc = 0.0;
        const double* xp = px + p * hw;
        for (std::int64_t i = 0; i < hw; ++i) acc += xp[i];
        out[static_cast<std::size_t>(p)] = acc / static_cast<double>(hw);
    }
    Tensor tx = x;
    Shape out_shape{x.dim(0), x.dim(1), 1, 1};
    return make_op(std::move(out_shape), std::move(out), {x}, [tx, planes, hw](Node& o) {
        std::vector<double> gx(tx.data().size());
        const double inv = 1.0 / static_cast<double>(hw);
        for (std::int64_t p = 0; p < planes; ++p) {
            const double g = o.grad[static_cast<std::size_t>(p)] * inv;
            double* gp = gx.data() + p * hw;
            for (std::int64_t i = 0; i < hw; ++i) gp[i] = g;
        }
        tx.node()->accumulate(gx);
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps, int axis) {
    const AxisLines ln = axis_lines("layer_norm", x.shape(), axis);
    if (gamma.rank() != 1 || gamma.dim(0) != ln.len || beta.rank() != 1 || beta.dim(0) != ln.len) {
        throw DimensionError("layer_norm: affine shapes " + shape_str(gamma.shape()) + ", " +
                             shape_str(beta.shape()) + " must be (" + std::to_string(ln.len) + ")");
    }
    const double* px = x.data().data();
    const double* pg = gamma.data().data();
    const double* pbta = beta.data().data();
    std::vector<double> out(x.data().size());
    std::vector<double> xhat(x.data().size());
    std::vector<double> inv_std(static_cast<std::size_t>(ln.outer * ln.inner));
    const double inv_len = 1.0 / static_cast<double>(ln.len);
    for (std::int64_t o = 0; o < ln.outer; ++o) {
        for (std::int64_t in = 0; in < ln.inner; ++in) {
            const std::int64_t base = o * ln.len * ln.inner + in;
            double mean = 0.0;
            for (std::int64_t i = 0; i < ln.len; ++i) mean += px[base + i * ln.inner];
            mean *= inv_len;
            double var = 0.0;
            for (std::int64_t i = 0; i < ln.len; ++i) {
                const double dv = px[base + i * ln.inner] - mean;
                var += dv * dv;
            }
            var *= inv_len;
            const double istd = 1.0 / std::sqrt(var + eps);
            inv_std[static_cast<std::size_t>(o * ln.inner + in)] = istd;
            for (std::int64_t i = 0; i < ln.len; ++i) {
                const auto idx = static_cast<std::size_t>(base + i * ln.inner);
                const double xh = (px[idx] - mean) * istd;
                xhat[idx] = xh;
                out[idx] = xh * pg[i] + pbta[i];
            }
        }
    }
    Tensor tx = x;
    Tensor tg = gamma;
    Tensor tb = beta;
    return make_op(x.shape(), std::move(out), {x, gamma, beta},
                   [tx, tg, tb, ln, inv_len, xhat = std::move(xhat),
                    inv_std = std::move(inv_std)](Node& o) {
        const double* pg = tg.data().data();
        const bool need_x = tx.requires_grad();
        const bool need_g = tg.requires_grad();
        const bool need_b = tb.requires_grad();
        std::vector<double> gx;
        if (need_x) gx.assign(tx.data().size(), 0.0);
        std::vector<double> gg;
        if (need_g) gg.assign(static_cast<std::size_t>(ln.len), 0.0);
        std::vector<double> gb;
        if (need_b) gb.assign(static_cast<std::size_t>(ln.len), 0.0);
        for (std::int64_t ou = 0; ou < ln.outer; ++ou) {
            for (std::int64_t in = 0; in < ln.inner; ++in) {
                const std::int64_t base = ou * ln.len * ln.inner + in;
                const double istd = inv_std[static_cast<std::size_t>(ou * ln.inner + in)];
                double m1 = 0.0;
                double m2 = 0.0;
                for (std::int64_t i = 0; i < ln.len; ++i) {
                    const auto idx = static_cast<std::size_t>(base + i * ln.inner);
                    const double g = o.grad[idx];
                    if (need_b) gb[static_cast<std::size_t>(i)] += g;
                    if (need_g) gg[static_cast<std::size_t>(i)] += g * xhat[idx];
                    const double gh = g * pg[i];
                    m1 += gh;
                    m2 += gh * xhat[idx];
                }
                if (need_x) {
                    m1 *= inv_len;
                    m2 *= inv_len;
                    for (std::int64_t i = 0; i < ln.len; ++i) {
                        const auto idx = static_cast<std::size_t>(base + i * ln.inner);
                        const double gh = o.grad[idx] * pg[i];
                        gx[idx] = (gh - m1 - xhat[idx] * m2) * istd;
                    }
                }
            }
        }
        if (need_x) tx.node()->accumulate(gx);
        if (need_g) tg.node()->accumulate(gg);
        if (need_b) tb.node()->accumulate(gb);
    });
}

// ---- shape ops -------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape) {
    if (numel(new_shape) != x.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(new_shape));
    }
    Tensor tx = x;
    return make_op(std::move(new_shape), x.data(), {x},
                   [tx](Node& o) { tx.node()->accumulate(o.grad); });
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    const int rank = x.rank();
    if (static_cast<int>(perm.size()) != rank) {
        throw DimensionError("permute: permutation size " + std::to_string(perm.size()) +
                             " does not match rank of " + shape_str(x.shape()));
    }
    std::vector<bool> seen(static_cast<std::size_t>(rank), false);
    for (int p : perm) {
        if (p < 0 || p >= rank || seen[static_cast<std::size_t>(p)]) {
            throw DimensionError("permute: invalid permutation for shape " + shape_str(x.shape()));
        }
        seen[static_cast<std::size_t>(p)] = true;
    }
    Shape out_shape(static_cast<std::size_t>(rank));
    for (int i = 0; i < rank; ++i)
        out_shape[static_cast<std::size_t>(i)] = x.dim(perm[static_cast<std::size_t>(i)]);

    const Shape in_strides = strides_of(x.shape());
    // stride in the input for each output axis
    Shape walk(static_cast<std::size_t>(rank));
    for (int i = 0; i < rank; ++i)
        walk[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

    const std::int64_t total = x.size();
    std::vector<double> out(static_cast<std::size_t>(total));
    {
        std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
        std::int64_t src = 0;
        const double* px = x.data().data();
        for (std::int64_t flat = 0; flat < total; ++flat) {
            out[static_cast<std::size_t>(flat)] = px[src];
            for (int ax = rank - 1; ax >= 0; --ax) {
                const auto u = static_cast<std::size_t>(ax);
                ++idx[u];
                src += walk[u];
                if (idx[u] < out_shape[u]) break;
                src -= walk[u] * out_shape[u];
                idx[u] = 0;
            }
        }
    }
    Tensor tx = x;
    return make_op(out_shape, std::move(out), {x}, [tx, out_shape, walk, rank, total](Node& o) {
        std::vector<double> gx(tx.data().size(), 0.0);
        std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
        std::int64_t src = 0;
        for (std::int64_t flat = 0; flat < total; ++flat) {
            gx[static_cast<std::size_t>(src)] += o.grad[static_cast<std::size_t>(flat)];
            for (int ax = rank - 1; ax >= 0; --ax) {
                const auto u = static_cast<std::size_t>(ax);
                ++idx[u];
                src += walk[u];
                if (idx[u] < out_shape[u]) break;
                src -= walk[u] * out_shape[u];
                idx[u] = 0;
            }
        }
        tx.node()->accumulate(gx);
    });
}

Tensor narrow(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
    const int rank = x.rank();
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) {
        throw DimensionError("narrow: axis out of range for shape " + shape_str(x.shape()));
    }
    const std::int64_t dim = x.dim(axis);
    if (start < 0 || length < 1 || start + length > dim) {
        throw DimensionError("narrow: window [" + std::to_string(start) + "," +
                             std::to_string(start + length) + ") out of range for shape " +
                             shape_str(x.shape()));
    }
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(axis)] = length;
    std::int64_t outer = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    std::int64_t inner = 1;
    for (int i = axis + 1; i < rank; ++i) inner *= x.dim(i);

    std::vector<double> out(static_cast<std::size_t>(outer * length * inner));
    const double* px = x.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
        const double* src = px + (o * dim + start) * inner;
        double* dst = out.data() + o * length * inner;
        std::copy(src, src + length * inner, dst);
    }
    Tensor tx = x;
    return make_op(std::move(out_shape), std::move(out), {x},
                   [tx, outer, inner, length, dim, start](Node& o) {
        std::vector<double> gx(tx.data().size(), 0.0);
        for (std::int64_t ou = 0; ou < outer; ++ou) {
            const double* src = o.grad.data() + ou * length * inner;
            double* dst = gx.data() + (ou * dim + start) * inner;
            for (std::int64_t i = 0; i < length * inner; ++i) dst[i] += src[i];
        }
        tx.node()->accumulate(gx);
    });
}

Tensor broadcast_to(const Tensor& x, const Shape& target) {
    if (x.rank() != static_cast<int>(target.size())) {
        throw DimensionError("broadcast_to: rank mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(target));
    }
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (x.shape()[i] != target[i] && x.shape()[i] != 1) {
            throw DimensionError("broadcast_to: cannot expand " + shape_str(x.shape()) + " to " +
                                 shape_str(target));
        }
    }
    BroadcastPlan plan;
    plan.out_shape = target;
    const Shape xs = strides_of(x.shape());
    plan.a_strides.resize(target.size());
    plan.b_strides.assign(target.size(), 0);
    for (std::size_t i = 0; i < target.size(); ++i) {
        plan.a_strides[i] = (x.shape()[i] == 1 && target[i] != 1) ? 0 : xs[i];
    }
    std::vector<double> out(static_cast<std::size_t>(numel(target)));
    const double* px = x.data().data();
    for_each_pair(plan, [&](std::int64_t flat, std::int64_t ao, std::int64_t) {
        out[static_cast<std::size_t>(flat)] = px[ao];
    });
    Tensor tx = x;
    return make_op(target, std::move(out), {x}, [tx, plan](Node& o) {
        std::vector<double> gx(tx.data().size(), 0.0);
        for_each_pair(plan, [&](std::int64_t flat, std::int64_t ao, std::int64_t) {
            gx[static_cast<std::size_t>(ao)] += o.grad[static_cast<std::size_t>(flat)];
        });
        tx.node()->accumulate(gx);
    });
}

}  // namespace focalconv
