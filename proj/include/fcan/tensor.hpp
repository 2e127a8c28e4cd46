#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fcan {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised for malformed shapes and argument contracts.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a forward or backward pass produces NaN/Inf or a loss diverges.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until the first backward reaches this leaf
    bool requires_grad = false;
    bool tracked = false;      // produced by a recorded op
};
}  // namespace detail

/// Dense row-major array of doubles. Copies are shallow handles onto the same
/// storage; use clone() for an independent copy.
class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value);

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    std::span<double> mutable_data() { return impl_->data; }
    double item() const;
    double operator[](std::size_t i) const { return impl_->data[i]; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
    /// True when the tensor is a gradient leaf or the output of a recorded op.
    bool tracked() const { return impl_->requires_grad || impl_->tracked; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    void zero_grad();

    Tensor clone() const;
    Tensor detach() const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    friend class Tape;
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of the differentiable ops executed while the tape is active.
/// Entries are appended in execution order, which is a topological order of the
/// graph; backward() replays them in reverse, visiting each entry once.
class Tape {
public:
    /// Receives the output gradient and one destination buffer per input
    /// (nullptr for inputs that are not tracked). Must accumulate, not assign.
    using BackwardFn = std::function<void(std::span<const double> grad_out, std::span<double* const> grad_in)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Records an op. Returns the output tensor, marked tracked when any input is.
    Tensor record(const char* op, Tensor output, std::vector<Tensor> inputs, BackwardFn fn);

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into the
    /// grad() of every requires_grad leaf reached.
    void backward(const Tensor& loss);

    std::size_t size() const { return entries_.size(); }
    std::vector<std::string> op_names() const;
    void clear() { entries_.clear(); }

    /// Tape installed on this thread by the innermost TapeScope, or nullptr.
    static Tape* active();

private:
    struct Entry {
        const char* op;
        std::shared_ptr<detail::TensorImpl> output;
        std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
        BackwardFn fn;
    };
    std::vector<Entry> entries_;
    friend class TapeScope;
};

/// Installs a tape as active for the current thread for the scope's lifetime.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

/// Suspends recording (e.g. for inference or finite differences).
class NoTapeScope {
public:
    NoTapeScope();
    ~NoTapeScope();
    NoTapeScope(const NoTapeScope&) = delete;
    NoTapeScope& operator=(const NoTapeScope&) = delete;

private:
    Tape* previous_;
};

/// Runs the active tape backward from loss.
void backward(const Tensor& loss);

/// Central-difference gradient check of a scalar function at x. Returns the
/// max over coordinates of |a-b| / max(1, |a|, |b|).
double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, double h = 1e-6);

}  // namespace fcan
