#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace dipt {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Raised when an operation receives operands whose shapes violate its shape rule.
class ShapeError : public std::invalid_argument {
public:
    ShapeError(std::string op, const std::string& expected, const Shape& actual)
        : std::invalid_argument(op + ": expected " + expected + ", got " + to_string(actual)),
          op_(std::move(op)) {}

    const std::string& op() const noexcept { return op_; }

private:
    std::string op_;
};

/// Misuse of the differentiation machinery (non-scalar loss, double backward, ...).
class AutogradError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

namespace detail {

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until a backward pass touches the node
    bool requires_grad = false;
    bool leaf = true;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

}  // namespace detail

/// Dense row-major tensor handle. Copies share storage; use clone() for a deep copy.
template <class T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>()) {
        if (numel(shape) != data.size()) {
            throw ShapeError("tensor", std::to_string(data.size()) + " elements", shape);
        }
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static BasicTensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = numel(shape);
        return BasicTensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static BasicTensor full(Shape shape, T fill, bool requires_grad = false) {
        const auto n = numel(shape);
        return BasicTensor(std::move(shape), std::vector<T>(n, fill), requires_grad);
    }

    static BasicTensor scalar(T v, bool requires_grad = false) {
        return BasicTensor(Shape{}, std::vector<T>{v}, requires_grad);
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t size() const { return node_->value.size(); }

    std::span<const T> data() const { return node_->value; }
    /// Writable view of the values. Intended for leaves (parameters, inputs).
    std::span<T> mutable_data() { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }

    T item() const {
        if (size() != 1) throw ShapeError("item", "a single element", shape());
        return node_->value[0];
    }
    T at(std::size_t flat_index) const { return node_->value.at(flat_index); }

    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->leaf; }

    void set_requires_grad(bool flag) {
        if (!node_->leaf) throw AutogradError("set_requires_grad: only leaf tensors can change flag");
        node_->requires_grad = flag;
        if (!flag) node_->grad.clear();
    }

    bool has_grad() const { return !node_->grad.empty(); }

    /// Gradient buffer; reads as zeros when no backward pass has reached this tensor.
    std::span<const T> grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    std::span<T> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }

    void zero_grad() { node_->grad.clear(); }

    /// Value copy with no gradient history.
    BasicTensor detach() const { return BasicTensor(shape(), node_->value, false); }

    /// Value copy that keeps the requires_grad flag (as a fresh leaf).
    BasicTensor clone() const { return BasicTensor(shape(), node_->value, requires_grad()); }

    const detail::NodePtr<T>& node() const { return node_; }

    static BasicTensor from_node(detail::NodePtr<T> node) {
        BasicTensor t;
        t.node_ = std::move(node);
        return t;
    }

private:
    detail::NodePtr<T> node_;
};

using Tensor = BasicTensor<float>;

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

/// False inside a NoGradGuard: ops then produce untracked outputs and record nothing.
inline bool grad_enabled() { return detail::grad_mode(); }

class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Define-by-run record of differentiable operations, replayed in reverse by backward().
template <class T>
class BasicTape {
public:
    using BackwardFn = std::function<void(const detail::Node<T>& out)>;

    struct Entry {
        std::string_view op;
        detail::NodePtr<T> output;
        std::vector<detail::NodePtr<T>> inputs;
        BackwardFn backward;
    };

    BasicTape() = default;
    BasicTape(const BasicTape&) = delete;
    BasicTape& operator=(const BasicTape&) = delete;

    void record(std::string_view op, detail::NodePtr<T> output, std::vector<detail::NodePtr<T>> inputs,
                BackwardFn fn) {
        if (consumed_) throw AutogradError(std::string(op) + ": recording on a consumed tape; call reset()");
        output->leaf = false;
        entries_.push_back(Entry{op, std::move(output), std::move(inputs), std::move(fn)});
    }

    /// Accumulates d(loss)/d(leaf) into every requires_grad leaf recorded on this tape.
    void backward(const BasicTensor<T>& loss) {
        if (loss.size() != 1) throw AutogradError("backward: loss must be a scalar, got " + to_string(loss.shape()));
        if (consumed_) throw AutogradError("backward: tape already consumed; call reset() before a second pass");
        consumed_ = true;

        for (const auto& e : entries_) {
            for (const auto& in : e.inputs) {
                if (in->leaf && in->requires_grad) in->ensure_grad();
            }
        }
        if (!loss.requires_grad()) return;

        auto& root = *loss.node();
        root.ensure_grad();
        root.grad[0] += T(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (it->output->grad.empty()) continue;  // not on a path to the loss
            it->backward(*it->output);
        }
    }

    void reset() {
        entries_.clear();
        consumed_ = false;
    }

    std::size_t size() const noexcept { return entries_.size(); }
    bool consumed() const noexcept { return consumed_; }
    const std::vector<Entry>& entries() const noexcept { return entries_; }

    /// The innermost tape opened on this thread, or a per-thread default.
    static BasicTape& current() {
        auto& stack = scope_stack();
        if (!stack.empty()) return *stack.back();
        thread_local BasicTape fallback;
        return fallback;
    }

private:
    template <class>
    friend class BasicTapeScope;

    static std::vector<BasicTape*>& scope_stack() {
        thread_local std::vector<BasicTape*> stack;
        return stack;
    }

    std::vector<Entry> entries_;
    bool consumed_ = false;
};

/// Makes `tape` the current recording target until the scope ends.
template <class T>
class BasicTapeScope {
public:
    explicit BasicTapeScope(BasicTape<T>& tape) { BasicTape<T>::scope_stack().push_back(&tape); }
    ~BasicTapeScope() { BasicTape<T>::scope_stack().pop_back(); }
    BasicTapeScope(const BasicTapeScope&) = delete;
    BasicTapeScope& operator=(const BasicTapeScope&) = delete;
};

using Tape = BasicTape<float>;
using TapeScope = BasicTapeScope<float>;

/// Backward pass on the thread's current tape.
template <class T>
void backward(const BasicTensor<T>& loss) {
    BasicTape<T>::current().backward(loss);
}

}  // namespace dipt
