#include "fedseg/tensor.hpp"

#include <unordered_set>

namespace fedseg {

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    out += "]";
    return out;
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) {
        if (d <= 0) throw TensorError("tensor shape has non-positive extent " + shape_str(s));
        n *= d;
    }
    return n;
}

namespace detail {

void TensorImpl::accumulate(const Eigen::ArrayXd& g) {
    if (grad.size() == 0) {
        grad = g;
    } else {
        grad += g;
    }
}

void TensorImpl::accumulate(Eigen::ArrayXd&& g) {
    if (grad.size() == 0) {
        grad = std::move(g);
    } else {
        grad += g;
    }
}

}  // namespace detail

Tensor::Tensor(Shape shape, bool requires_grad) {
    const std::int64_t n = shape_numel(shape);
    impl_ = std::make_shared<detail::TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->data = Eigen::ArrayXd::Zero(n);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(Shape shape, double value) {
    Tensor t(std::move(shape));
    t.impl_->data.setConstant(value);
    return t;
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    const std::int64_t n = shape_numel(shape);
    if (n != static_cast<std::int64_t>(values.size()))
        throw TensorError("Tensor::from: shape " + shape_str(shape) + " wants " +
                          std::to_string(n) + " values, got " + std::to_string(values.size()));
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < n; ++i) t.impl_->data[i] = values[static_cast<std::size_t>(i)];
    if (!t.impl_->data.allFinite()) throw TensorError("Tensor::from: non-finite value");
    return t;
}

const Shape& Tensor::shape() const {
    if (!impl_) throw TensorError("use of undefined tensor");
    return impl_->shape;
}

std::int64_t Tensor::dim(int i) const {
    const Shape& s = shape();
    if (i < 0 || i >= static_cast<int>(s.size()))
        throw TensorError("dim index " + std::to_string(i) + " out of range for " + shape_str(s));
    return s[static_cast<std::size_t>(i)];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(shape_numel(shape())); }

double* Tensor::data() { return array().data(); }
const double* Tensor::data() const { return array().data(); }

Eigen::ArrayXd& Tensor::array() {
    if (!impl_) throw TensorError("use of undefined tensor");
    return impl_->data;
}

const Eigen::ArrayXd& Tensor::array() const {
    if (!impl_) throw TensorError("use of undefined tensor");
    return impl_->data;
}

double Tensor::item() const {
    if (numel() != 1)
        throw TensorError("item() on tensor of shape " + shape_str(shape()));
    return array()[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
    if (!impl_) throw TensorError("use of undefined tensor");
    impl_->requires_grad = v;
    return *this;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad.size() > 0; }

Eigen::ArrayXd& Tensor::grad() {
    if (!has_grad()) throw TensorError("tensor has no gradient");
    return impl_->grad;
}

const Eigen::ArrayXd& Tensor::grad() const {
    if (!has_grad()) throw TensorError("tensor has no gradient");
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_) impl_->grad.resize(0);
}

Tensor Tensor::clone() const {
    if (!impl_) return Tensor();
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
}

Tensor Tensor::wrap(std::shared_ptr<detail::TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

void Tensor::backward() {
    if (!impl_) throw TensorError("backward() on undefined tensor");
    if (numel() != 1) throw TensorError("backward() requires a scalar, got " + shape_str(shape()));
    backward(Eigen::ArrayXd::Ones(1));
}

void Tensor::backward(const Eigen::ArrayXd& seed_grad) {
    if (!impl_) throw TensorError("backward() on undefined tensor");
    if (seed_grad.size() != numel())
        throw TensorError("backward(): seed gradient has " + std::to_string(seed_grad.size()) +
                          " elements, tensor has " + std::to_string(numel()));

    // iterative post-order DFS; order is fixed by parent list order, so the
    // traversal (and therefore all float accumulation) is deterministic
    std::vector<detail::TensorImpl*> order;
    std::unordered_set<detail::TensorImpl*> seen;
    struct Frame {
        detail::TensorImpl* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({impl_.get(), 0});
    seen.insert(impl_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            detail::TensorImpl* p = f.node->parents[f.next_parent++].get();
            if (seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    impl_->accumulate(seed_grad);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::TensorImpl* node = *it;
        if (node->backward && node->grad.size() > 0) node->backward(node->grad);
    }
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set(bool v) { g_grad_enabled = v; }

}  // namespace fedseg
