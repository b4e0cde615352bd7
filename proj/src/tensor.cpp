#include "redec/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace redec {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int e : s) {
        if (e <= 0) throw ContractError("tensor extents must be positive, got " + shape_str(s));
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto impl = std::make_shared<detail::TensorImpl>();
    int64_t n = shape_numel(shape);
    impl->shape = std::move(shape);
    impl->data.assign(static_cast<size_t>(n), 0.0);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.vec().begin(), t.vec().end(), value);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    int64_t n = shape_numel(shape);
    if (n != static_cast<int64_t>(values.size()))
        throw ContractError("value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() requires a scalar tensor, shape is " + shape_str(shape()));
    return impl_->data[0];
}

Tensor Tensor::detached_copy() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = false;
    return Tensor(std::move(impl));
}

void Tensor::check_finite(const std::string& what) const {
    for (double v : impl_->data)
        if (!std::isfinite(v)) throw NumericError("non-finite value in " + what);
}

void Tape::backward(Tensor& loss) {
    if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, shape is " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;
    loss.grad()[0] = 1.0;
    for (size_t i = nodes_.size(); i-- > 0;) {
        Node& node = nodes_[i];
        if (node.backward) node.backward();
        node.backward = nullptr;
        if (!node.output.same_storage(loss)) node.output.release_buffers();
        node.output = Tensor();
    }
}

}  // namespace redec
