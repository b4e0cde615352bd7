#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "redec/errors.hpp"

namespace redec {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated while the tensor participates in differentiation
    bool requires_grad = false;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};
}  // namespace detail

// Dense N-d array of doubles with shared-storage handle semantics. Copying a
// Tensor aliases the same buffer; ops always allocate fresh outputs.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int64_t numel() const { return impl_ ? impl_->numel() : 0; }

    double* data() { return impl_->data.data(); }
    const double* data() const { return impl_->data.data(); }
    std::vector<double>& vec() { return impl_->data; }
    const std::vector<double>& vec() const { return impl_->data; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    // Gradient buffer; allocated (zero) on demand for differentiable tensors.
    double* grad() {
        impl_->ensure_grad();
        return impl_->grad.data();
    }
    const std::vector<double>& grad_vec() const { return impl_->grad; }
    void zero_grad() {
        if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }

    double item() const;

    // True when both handles share one buffer (weight-sharing checks).
    bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

    // Detached copy of the values; never requires grad.
    Tensor detached_copy() const;

    void check_finite(const std::string& what) const;

    // Release buffers early during backward teardown. The handle stays valid
    // but empty; only the tape uses this.
    void release_buffers() {
        if (impl_) {
            impl_->data.clear();
            impl_->data.shrink_to_fit();
            impl_->grad.clear();
            impl_->grad.shrink_to_fit();
        }
    }

  private:
    std::shared_ptr<detail::TensorImpl> impl_;
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    friend class Tape;
};

// Ordered record of operations. Nodes are appended in execution order, so the
// list is already topological; one reverse sweep propagates all gradients.
class Tape {
  public:
    struct Node {
        std::function<void()> backward;
        Tensor output;  // held so intermediate buffers survive until the sweep
    };

    void record(Tensor output, std::function<void()> backward) {
        nodes_.push_back(Node{std::move(backward), std::move(output)});
    }

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Seeds d(loss)/d(loss)=1 and runs every node's backward rule in reverse
    // order. Each node's buffers are dropped as soon as it has fired, which
    // caps the peak footprint of long unrolled graphs.
    void backward(Tensor& loss);

  private:
    std::vector<Node> nodes_;
};

// Spec surface: backward(loss, tape).
inline void backward(Tensor loss, Tape& tape) { tape.backward(loss); }

}  // namespace redec
