#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dpt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One record on the dynamic tape. Non-leaf nodes keep their inputs alive
// through `parents` and know how to push `grad` back into them.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    // Allocates a zero gradient buffer on first use.
    std::vector<double>& ensure_grad();
};

}  // namespace detail

/// Dense row-major float64 array with an optional reverse-mode tape.
///
/// Tensors are cheap handles: copying a Tensor aliases the same storage,
/// like a shared pointer. Use `detach()` for an independent copy.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    // Direct writes are meant for leaves (optimizers, initializers, tests).
    std::span<double> mutable_data();
    std::span<const double> grad() const;
    bool has_grad() const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    void zero_grad();

    double item() const;
    const char* op_name() const;

    // Seeds a scalar root with 1.
    void backward() const;
    void backward(std::span<const double> seed) const;

    Tensor detach() const;

    // Builds a result node. `backward` is only attached when some input
    // requires a gradient and recording is on.
    static Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                              const char* op, std::function<void(detail::Node&)> backward);

    detail::Node* node() const { return node_.get(); }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    std::shared_ptr<detail::Node> node_;

    friend class Graph;
};

/// Disables tape recording on this thread while alive, for inference.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

    static bool recording();

private:
    bool previous_;
};

/// Topologically ordered view of the nodes reachable from a root that take
/// part in differentiation. Inputs always precede their consumers.
class Graph {
public:
    static Graph trace(const Tensor& root);

    std::span<detail::Node* const> nodes() const { return nodes_; }
    // Runs every recorded backward rule once, in reverse order.
    void run_backward() const;

private:
    std::vector<detail::Node*> nodes_;
};

}  // namespace dpt
