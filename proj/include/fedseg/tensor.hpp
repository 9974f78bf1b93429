#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedseg {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

class TensorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

// One node of the compute graph. Tensors share these; ops link an output
// node to its parents and attach a backward rule that scatters the output
// gradient into the parents' gradient buffers.
struct TensorImpl {
    Shape shape;
    Eigen::ArrayXd data;
    bool requires_grad = false;
    Eigen::ArrayXd grad;  // size 0 while absent
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(const Eigen::ArrayXd& grad_out)> backward;

    void accumulate(const Eigen::ArrayXd& g);
    void accumulate(Eigen::ArrayXd&& g);  // steals the buffer when no grad exists yet
};

}  // namespace detail

// Dense row-major float64 tensor with reverse-mode autodiff. Copies share
// the underlying node (grads accumulate through either handle); clone()
// makes an independent value with no graph attached.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, bool requires_grad = false);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor from(Shape shape, std::vector<double> values);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int rank() const { return static_cast<int>(shape().size()); }
    std::int64_t dim(int i) const;
    std::int64_t numel() const;

    double* data();
    const double* data() const;
    Eigen::ArrayXd& array();
    const Eigen::ArrayXd& array() const;
    double item() const;  // requires numel() == 1

    bool requires_grad() const;
    Tensor& set_requires_grad(bool v);

    bool has_grad() const;
    Eigen::ArrayXd& grad();
    const Eigen::ArrayXd& grad() const;
    void zero_grad();  // drops the grad buffer

    // Deep copy of the value only: no parents, no backward, no grad.
    Tensor clone() const;

    // Runs reverse-mode autodiff from this scalar. Visits each reachable
    // node exactly once in reverse topological order.
    void backward();

    // Same, but from an arbitrary-shaped root with an explicit output
    // gradient (flat, row-major, same element count).
    void backward(const Eigen::ArrayXd& seed_grad);

    bool same_shape(const Tensor& other) const { return shape() == other.shape(); }

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
    static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl);

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Thread-local autodiff switch; forwards made under NoGradGuard record
// no graph regardless of requires_grad.
struct GradMode {
    static bool enabled();
    static void set(bool v);
};

struct NoGradGuard {
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

}  // namespace fedseg
