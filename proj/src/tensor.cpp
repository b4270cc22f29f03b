#include "dpt/tensor.hpp"

#include <malloc.h>

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "dpt/error.hpp"

namespace dpt {
namespace {

// Tape buffers are large and short-lived. Keeping them on the heap instead
// of fresh mmap pages avoids a page-fault storm on every training step.
[[maybe_unused]] const bool kAllocatorTuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
}();

thread_local bool g_recording = true;

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = previous_; }
bool NoGradGuard::recording() { return g_recording; }

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::vector<double>& detail::Node::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
    }
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
    }
    return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }
std::span<const double> Tensor::grad() const { return node_->grad; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

const char* Tensor::op_name() const { return node_->op; }

void Tensor::backward() const {
    if (numel() != 1) throw DimensionError("backward() without seed needs a scalar, got " + shape_str(shape()));
    const double one = 1.0;
    backward(std::span<const double>(&one, 1));
}

void Tensor::backward(std::span<const double> seed) const {
    if (seed.size() != numel()) {
        throw DimensionError("backward seed of " + std::to_string(seed.size()) + " values for shape " +
                             shape_str(shape()));
    }
    if (!node_->requires_grad) return;
    auto& g = node_->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    Graph::trace(*this).run_backward();
}

Tensor Tensor::detach() const {
    return Tensor(node_->shape, node_->data, false);
}

Tensor Tensor::make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, const char* op,
                           std::function<void(detail::Node&)> backward) {
    Tensor out(std::move(shape), std::move(data), false);
    out.node_->op = op;
    const bool any = g_recording && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
        out.node_->requires_grad = true;
        out.node_->parents.reserve(inputs.size());
        for (auto& t : inputs) out.node_->parents.push_back(t.node_);
        out.node_->backward_fn = std::move(backward);
    }
    return out;
}

Graph Graph::trace(const Tensor& root) {
    Graph graph;
    if (!root.requires_grad()) return graph;
    // Iterative post-order DFS: a node is emitted after all its inputs.
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            graph.nodes_.push_back(node);
            stack.pop_back();
        }
    }
    return graph;
}

void Graph::run_backward() const {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        detail::Node* node = *it;
        if (!node->backward_fn) continue;
        node->ensure_grad();
        node->backward_fn(*node);
    }
}

}  // namespace dpt
