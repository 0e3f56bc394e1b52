#pragma once

#include <functional>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "nlmf/tensor.hpp"

namespace nlmf {

// Handle to a value slot on a tape.
struct Value {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape: an ordered record of executed operations over immutable
// value slots. Backward replays the record in exact reverse execution order.
// A tape is confined to one thread; recorded tensors are never mutated.
// Double-backward is not supported.
template <class T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape<T>&, Value out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Value leaf(TensorT<T> value, bool requires_grad) { return push(std::move(value), requires_grad); }

    Value constant(TensorT<T> value) { return leaf(std::move(value), false); }

    const TensorT<T>& val(Value v) const { return slot(v).value; }

    bool requires_grad(Value v) const { return slot(v).requires_grad; }

    // Gradient of a slot after backward(); zeros if nothing flowed into it.
    const TensorT<T>& grad(Value v) { return grad_accum(v); }

    // Accumulation buffer used by backward closures.
    TensorT<T>& grad_accum(Value v) {
        Slot& s = slot(v);
        if (!s.grad_set) {
            s.grad = TensorT<T>(s.value.shape);
            s.grad_set = true;
        }
        return s.grad;
    }

    bool has_grad(Value v) const { return slot(v).grad_set; }

    // Record an op output. `backward` runs when the tape is replayed; it
    // receives the output handle and must accumulate into the grads of the op
    // inputs via grad_accum().
    Value record(TensorT<T> out, bool requires_grad, BackwardFn backward) {
        Value v = push(std::move(out), requires_grad);
        if (requires_grad) nodes_.push_back(Node{v, std::move(backward)});
        return v;
    }

    void backward(Value loss) {
        Slot& s = slot(loss);
        if (s.value.size() != 1)
            throw std::invalid_argument("backward requires a scalar loss, got shape " + shape_str(s.value.shape));
        if (!s.requires_grad)
            throw std::invalid_argument("backward on a loss that does not require gradients");
        grad_accum(loss).data[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
            if (has_grad(it->out)) it->fn(*this, it->out);
    }

    // Minimum distance of any forward evaluation to a non-differentiable kink
    // (activation zeros, bilinear cell boundaries, |.| in the L1 loss).
    double min_kink_distance() const { return min_kink_; }
    void note_kink(double dist) {
        if (dist < min_kink_) min_kink_ = dist;
    }

    std::size_t num_slots() const { return slots_.size(); }

private:
    struct Slot {
        TensorT<T> value;
        TensorT<T> grad;
        bool requires_grad = false;
        bool grad_set = false;
    };
    struct Node {
        Value out;
        BackwardFn fn;
    };

    Value push(TensorT<T> value, bool requires_grad) {
        slots_.push_back(Slot{std::move(value), {}, requires_grad, false});
        return Value{static_cast<int>(slots_.size()) - 1};
    }

    Slot& slot(Value v) {
        if (!v.valid() || v.id >= static_cast<int>(slots_.size()))
            throw std::invalid_argument("invalid tape value handle");
        return slots_[static_cast<std::size_t>(v.id)];
    }
    const Slot& slot(Value v) const { return const_cast<Tape*>(this)->slot(v); }

    std::vector<Slot> slots_;
    std::vector<Node> nodes_;
    double min_kink_ = std::numeric_limits<double>::infinity();
};

} // namespace nlmf
