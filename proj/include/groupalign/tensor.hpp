#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "groupalign/errors.hpp"

namespace groupalign {

class Tensor;

namespace detail {

struct TensorImpl {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized like data iff requires_grad
    bool requires_grad = false;

    // Define-by-run graph: set on op outputs while grad mode is on.
    std::vector<Tensor> parents;
    std::function<void(TensorImpl&)> backward_fn;
};

}  // namespace detail

// Thread-local switch; sampling and frozen-model evaluation run with it off
// so no graph is recorded.
bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// Dense row-major array of 64-bit floats, rank 1 or 2, with reverse-mode
// gradients. Copying a Tensor copies the handle, not the storage.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from_vector(std::vector<double> values, std::vector<int> shape,
                              bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    // [1, n] row.
    static Tensor row(std::vector<double> values, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    std::size_t numel() const { return impl_->data.size(); }
    // Row/column view of a rank-1 or rank-2 tensor (rank-1 counts as one row).
    int rows() const;
    int cols() const;

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }
    double& at(int r, int c) { return impl_->data[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return impl_->data[static_cast<std::size_t>(r) * cols() + c]; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on);
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    void zero_grad();

    // Value of a one-element tensor.
    double item() const;

    // Reverse-mode pass from a scalar. Gradients accumulate into every
    // reachable tensor with requires_grad; call zero_grad between passes
    // for fresh values.
    void backward() const;

    detail::TensorImpl* impl() const { return impl_.get(); }

    friend bool same_storage(const Tensor& a, const Tensor& b) { return a.impl_ == b.impl_; }

  private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;

    friend Tensor make_op_output(std::vector<int> shape, std::vector<Tensor> parents,
                                 std::function<void(detail::TensorImpl&)> backward_fn);
};

// Allocates the output of an op and wires it into the graph when grad mode
// is on and some parent requires grad. The forward pass fills data() after.
Tensor make_op_output(std::vector<int> shape, std::vector<Tensor> parents,
                      std::function<void(detail::TensorImpl&)> backward_fn);

// NaN/Inf guard; every op runs its output through this.
void check_finite(const Tensor& t, const char* where);

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

}  // namespace groupalign
