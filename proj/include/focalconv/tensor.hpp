#ifndef FOCALCONV_TENSOR_HPP
#define FOCALCONV_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "focalconv/errors.hpp"

namespace focalconv {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
Shape strides_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One recorded operation / value in the computation graph. Children hold
// shared_ptrs to parents, so a graph lives exactly as long as its outputs.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized lazily on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this->grad and accumulates into parents; empty for leaves.
    std::function<void(Node&)> backward;

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    void accumulate(const std::vector<double>& g);
};

}  // namespace detail

// Dense row-major f64 tensor; a cheap value handle onto a shared node.
// Immutable once created except for grad accumulation during backward().
class Tensor {
  public:
    Tensor() = default;

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t dim(int axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }
    std::int64_t size() const { return node_->size(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }
    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const;
    void zero_grad();

    double item() const;
    double at(std::initializer_list<std::int64_t> idx) const;

    // Same data buffer viewed as a non-recording constant.
    Tensor detached() const;

    std::shared_ptr<detail::Node> node() const { return node_; }

  private:
    std::shared_ptr<detail::Node> node_;
};

// Registers a computed value in the graph. `backward` reads out.grad and
// accumulates into the parents it captured; pass nullptr for constants.
Tensor make_op(Shape out_shape, std::vector<double> out_data, std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backward);

// Graph recording is on by default; scope a guard around inference-only code
// to skip it. Thread-local, like the graph itself.
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// Reverse-mode sweep from a scalar loss: topological order over the recorded
// graph, each node visited once, gradients accumulate additively across fan-out.
void backward(const Tensor& loss);

// ---- arithmetic -----------------------------------------------------------

// add/sub/elementwise_mul accept equal-rank operands; axes must match or be 1
// on one side (broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor elementwise_mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor sum(const Tensor& a);  // -> scalar (rank 0)

// out[..., j] = sum_i x[..., i] * w[i, j] + b[j]
Tensor matmul_linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Cross-correlation with zero padding. x (N,Cin,H,W), w (Cout,Cin,k,k), b (Cout).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
// Per-channel convolution. x (N,C,H,W), w (C,1,k,k), b (C).
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);

Tensor gelu(const Tensor& x);     // exact erf form x * Phi(x)
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);

Tensor global_avg_pool(const Tensor& x);  // (N,C,H,W) -> (N,C,1,1)

// Normalizes along `axis` (mean 0 / var 1 per line before affine).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps, int axis);

// ---- shape ops ------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor narrow(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
Tensor broadcast_to(const Tensor& x, const Shape& target);  // size-1 axes tile

// ---- parallel helper ------------------------------------------------------

// Deterministic: chunks run a fixed serial loop over disjoint index ranges.
// Thread count = min(hardware, FOCALCONV_THREADS if set).
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body);
int worker_threads();

}  // namespace focalconv

#endif
