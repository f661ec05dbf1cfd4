#pragma once

#include "alp/numcore/tensor.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace alp::num {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    Tape& tape() const { return *tape_; }
    std::uint32_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::uint32_t id_ = 0;
};

/// Reverse-mode tape of tensor primitives.
///
/// Nodes are appended in evaluation order, so replaying them backwards is a reverse
/// topological traversal. A tape is single-use (one backward pass) and must stay on one
/// thread. With `record_gradients == false` it only evaluates values, running the exact
/// same arithmetic as a recording tape.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

    explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const noexcept { return recording_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    Var constant(Tensor value);
    /// Non-owning constant; `value` must outlive the tape.
    Var constant_view(const Tensor& value);
    Var leaf(Tensor value);
    /// Non-owning differentiable leaf; `value` must outlive the tape.
    Var leaf_view(const Tensor& value);

    /// Records the result of a primitive. `fn` is kept only when recording and at least
    /// one parent requires a gradient.
    Var push(Tensor value, std::initializer_list<Var> parents, BackwardFn fn, std::string_view op);
    Var push(Tensor value, std::span<const Var> parents, BackwardFn fn, std::string_view op);

    const Tensor& value(std::uint32_t id) const;
    bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
    bool requires_grad(Var v) const { return requires_grad(v.id()); }

    /// Gradient accumulator of a node, zero-initialised on first access. Only valid
    /// inside a backward pass.
    Tensor& adjoint(std::uint32_t id);

    void backward(Var output, const Tensor& seed);
    void backward(std::span<const std::pair<Var, Tensor>> seeds);

    /// Gradient of the seeded objective with respect to `v` (zeros if unreached).
    Tensor grad(Var v) const;

    /// Node ids in the order the backward pass visited them.
    const std::vector<std::uint32_t>& visit_order() const noexcept { return visited_; }

private:
    struct Node {
        Tensor owned;
        const Tensor* view = nullptr;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Var add_node(Node node);
    void check_owner(Var v, std::string_view context) const;

    bool recording_;
    bool consumed_ = false;
    std::deque<Node> nodes_;
    std::vector<Tensor> adjoints_;
    std::vector<std::uint32_t> visited_;
};

} // namespace alp::num
