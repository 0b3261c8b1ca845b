#include "groupalign/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace groupalign {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto impl = std::make_shared<detail::TensorImpl>();
    std::size_t n = shape_numel(shape);
    impl->shape = std::move(shape);
    impl->data.assign(n, 0.0);
    Tensor t(std::move(impl));
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.data()) x = value;
    return t;
}

Tensor Tensor::from_vector(std::vector<double> values, std::vector<int> shape,
                           bool requires_grad) {
    if (shape_numel(shape) != values.size())
        throw DimensionError("from_vector: " + std::to_string(values.size()) +
                             " values for shape " + shape_str(shape));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    Tensor t(std::move(impl));
    t.set_requires_grad(requires_grad);
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_vector({value}, {1}, requires_grad);
}

Tensor Tensor::row(std::vector<double> values, bool requires_grad) {
    int n = static_cast<int>(values.size());
    return from_vector(std::move(values), {1, n}, requires_grad);
}

int Tensor::rows() const {
    if (rank() == 1) return 1;
    if (rank() == 2) return impl_->shape[0];
    throw DimensionError("rows: rank > 2 tensor " + shape_str(impl_->shape));
}

int Tensor::cols() const {
    if (rank() == 1) return impl_->shape[0];
    if (rank() == 2) return impl_->shape[1];
    throw DimensionError("cols: rank > 2 tensor " + shape_str(impl_->shape));
}

void Tensor::set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (on)
        impl_->grad.assign(impl_->data.size(), 0.0);
    else
        impl_->grad.clear();
}

std::vector<double>& Tensor::grad() {
    if (!impl_->requires_grad) throw ContractError("grad: tensor does not require grad");
    return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (!impl_->requires_grad) throw ContractError("grad: tensor does not require grad");
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_->requires_grad) impl_->grad.assign(impl_->data.size(), 0.0);
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item: tensor has " + std::to_string(numel()) + " elements");
    return impl_->data[0];
}

void Tensor::backward() const {
    if (numel() != 1) throw ContractError("backward: loss must be a scalar, got " + shape_str(shape()));

    // Iterative DFS post-order over parents gives a deterministic
    // topological order.
    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> seen;
    struct Frame {
        detail::TensorImpl* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    if (seen.insert(impl_.get()).second) stack.push_back({impl_.get(), 0});
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            detail::TensorImpl* p = f.node->parents[f.next_parent].impl();
            ++f.next_parent;
            if (seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    // Interior grads are per-pass scratch; only leaves accumulate across
    // repeated backward calls.
    for (detail::TensorImpl* node : order)
        if (node->backward_fn) node->grad.assign(node->data.size(), 0.0);

    if (!impl_->requires_grad) impl_->grad.assign(1, 0.0);
    impl_->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::TensorImpl* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
    if (!impl_->requires_grad) impl_->grad.clear();

    for (detail::TensorImpl* node : order) {
        for (double g : node->grad)
            if (!std::isfinite(g)) throw NumericalError("backward produced non-finite gradient");
    }
}

Tensor make_op_output(std::vector<int> shape, std::vector<Tensor> parents,
                      std::function<void(detail::TensorImpl&)> backward_fn) {
    Tensor out = Tensor::zeros(std::move(shape));
    bool needs_grad = false;
    if (grad_enabled())
        for (const auto& p : parents)
            if (p.requires_grad() || p.impl()->backward_fn) needs_grad = true;
    if (needs_grad) {
        out.impl()->requires_grad = true;
        out.impl()->grad.assign(out.numel(), 0.0);
        out.impl()->parents = std::move(parents);
        out.impl()->backward_fn = std::move(backward_fn);
    }
    return out;
}

void check_finite(const Tensor& t, const char* where) {
    for (double x : t.data())
        if (!std::isfinite(x)) throw NumericalError(std::string(where) + ": non-finite value");
}

}  // namespace groupalign
