#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nlmf/rng.hpp"
#include "nlmf/tape.hpp"
#include "nlmf/tensor.hpp"

namespace nlmf {

// A learnable tensor with its gradient and Adam moment buffers.
template <class T>
struct ParamEntry {
    TensorT<T> value;
    TensorT<T> grad;
    TensorT<T> m;
    TensorT<T> v;
};

// Named, ordered collection of learnables. Iteration order equals
// registration order and is deterministic. Single writer during training;
// read-only snapshots may be shared across threads.
template <class T>
class ParamStoreT {
public:
    ParamEntry<T>& add(const std::string& name, TensorT<T> value) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        index_.emplace(name, entries_.size());
        names_.push_back(name);
        const Shape s = value.shape;
        entries_.push_back(ParamEntry<T>{std::move(value), TensorT<T>(s), TensorT<T>(s), TensorT<T>(s)});
        return entries_.back();
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    ParamEntry<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
        return entries_[it->second];
    }
    const ParamEntry<T>& at(const std::string& name) const { return const_cast<ParamStoreT*>(this)->at(name); }

    const std::vector<std::string>& names() const { return names_; }
    std::size_t count() const { return entries_.size(); }

    std::int64_t scalar_count() const {
        std::int64_t n = 0;
        for (const auto& e : entries_) n += e.value.size();
        return n;
    }

    void zero_grads() {
        for (auto& e : entries_)
            std::fill(e.grad.data.begin(), e.grad.data.end(), T(0));
    }

private:
    std::vector<std::string> names_;
    std::vector<ParamEntry<T>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

using ParamStore = ParamStoreT<float>;

// Values are cast exactly; grads and moments start fresh.
template <class To, class From>
ParamStoreT<To> cast_store(const ParamStoreT<From>& src) {
    ParamStoreT<To> out;
    for (const auto& name : src.names()) out.add(name, cast<To>(src.at(name).value));
    return out;
}

// ---------------------------------------------------------------------------
// Parameter declaration sinks. Network structure is declared once through a
// sink callback; the same traversal drives initialization, counting, and
// binding onto a tape, so shapes and ordering can never diverge.
// ---------------------------------------------------------------------------

struct ParamInit {
    enum Kind { kaiming_uniform, zero } kind = zero;
    int fan_in = 0;
};

template <class T>
struct InitSink {
    ParamStoreT<T>& store;
    Rng& rng;

    Value operator()(const std::string& name, const Shape& shape, ParamInit init) {
        TensorT<T> t(shape);
        if (init.kind == ParamInit::kaiming_uniform) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(init.fan_in));
            for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
        }
        store.add(name, std::move(t));
        return Value{};
    }
};

struct CountSink {
    std::int64_t total = 0;

    Value operator()(const std::string&, const Shape& shape, ParamInit) {
        total += numel(shape);
        return Value{};
    }
};

template <class T>
struct BindSink {
    Tape<T>& tape;
    const ParamStoreT<T>& store;
    std::vector<std::pair<std::string, Value>>& bound;
    bool requires_grad = true;

    Value operator()(const std::string& name, const Shape& shape, ParamInit) {
        const ParamEntry<T>& e = store.at(name);
        if (e.value.shape != shape)
            throw std::invalid_argument("parameter " + name + " has shape " + shape_str(e.value.shape) +
                                        ", expected " + shape_str(shape));
        Value v = tape.leaf(e.value, requires_grad);
        bound.emplace_back(name, v);
        return v;
    }
};

// Accumulate tape gradients back into the store after backward().
template <class T>
void pull_gradients(Tape<T>& tape, const std::vector<std::pair<std::string, Value>>& bound, ParamStoreT<T>& store) {
    for (const auto& [name, v] : bound) {
        if (!tape.has_grad(v)) continue;
        const TensorT<T>& g = tape.grad(v);
        TensorT<T>& dst = store.at(name).grad;
        for (std::int64_t i = 0; i < g.size(); ++i)
            dst.data[static_cast<std::size_t>(i)] += g.data[static_cast<std::size_t>(i)];
    }
}

} // namespace nlmf
