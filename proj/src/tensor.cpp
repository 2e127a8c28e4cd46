#include "fcan/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace fcan {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->data.assign(1, 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
    for (auto d : shape) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("shape " + shape_str(shape) + " does not match data length " +
                         std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
    }
    return impl_->shape[axis];
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
    return impl_->data[0];
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::clone() const {
    Tensor t(impl_->shape, impl_->data, impl_->requires_grad);
    return t;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

Tensor Tape::record(const char* op, Tensor output, std::vector<Tensor> inputs, BackwardFn fn) {
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.tracked(); });
    if (!any) return output;
    output.impl_->tracked = true;
    Entry e{op, output.impl_, {}, std::move(fn)};
    e.inputs.reserve(inputs.size());
    for (auto& in : inputs) e.inputs.push_back(in.impl_);
    entries_.push_back(std::move(e));
    return output;
}

std::vector<std::string> Tape::op_names() const {
    std::vector<std::string> names;
    names.reserve(entries_.size());
    for (const auto& e : entries_) names.emplace_back(e.op);
    return names;
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    // Gradients of non-leaf values live only for the duration of this sweep.
    std::unordered_map<const detail::TensorImpl*, std::vector<double>> grads;
    auto buffer_for = [&](const std::shared_ptr<detail::TensorImpl>& t) -> std::vector<double>& {
        auto& g = grads[t.get()];
        if (g.empty()) g.assign(t->data.size(), 0.0);
        return g;
    };
    buffer_for(loss.impl_)[0] = 1.0;

    std::vector<double*> grad_in;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        auto found = grads.find(it->output.get());
        if (found == grads.end()) continue;
        const std::vector<double> grad_out = std::move(found->second);
        grads.erase(found);
        grad_in.assign(it->inputs.size(), nullptr);
        for (std::size_t i = 0; i < it->inputs.size(); ++i) {
            const auto& in = it->inputs[i];
            if (in->requires_grad || in->tracked) grad_in[i] = buffer_for(in).data();
        }
        it->fn(grad_out, grad_in);
    }
    for (auto& [ptr, g] : grads) {
        auto* impl = const_cast<detail::TensorImpl*>(ptr);
        if (!impl->requires_grad) continue;
        if (impl->grad.empty()) {
            impl->grad = std::move(g);
        } else {
            for (std::size_t i = 0; i < g.size(); ++i) impl->grad[i] += g[i];
        }
    }
}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoTapeScope::NoTapeScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoTapeScope::~NoTapeScope() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
    Tape* tape = Tape::active();
    if (!tape) {
        throw std::logic_error("backward called without an active tape");
    }
    tape->backward(loss);
}

double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, double h) {
    Tensor probe = x.clone();
    probe.set_requires_grad(true);
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = fn(probe);
        tape.backward(loss);
    }
    std::vector<double> analytic(probe.numel(), 0.0);
    if (probe.has_grad()) std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());

    NoTapeScope no_tape;
    double worst = 0.0;
    auto values = probe.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + h;
        const double plus = fn(probe).item();
        values[i] = saved - h;
        const double minus = fn(probe).item();
        values[i] = saved;
        const double numeric = (plus - minus) / (2.0 * h);
        const double a = analytic[i];
        const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace fcan
