#include "alp/numcore/tape.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace alp::num {

const Tensor& Var::value() const
{
    if (tape_ == nullptr) {
        throw std::logic_error("value() on an unbound Var");
    }
    return tape_->value(id_);
}

Var Tape::add_node(Node node)
{
    if (consumed_) {
        throw std::logic_error("tape already ran backward; tapes are single-use");
    }
    nodes_.push_back(std::move(node));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::constant(Tensor value)
{
    Node n;
    n.owned = std::move(value);
    return add_node(std::move(n));
}

Var Tape::constant_view(const Tensor& value)
{
    Node n;
    n.view = &value;
    return add_node(std::move(n));
}

Var Tape::leaf(Tensor value)
{
    Node n;
    n.owned = std::move(value);
    n.requires_grad = recording_;
    return add_node(std::move(n));
}

Var Tape::leaf_view(const Tensor& value)
{
    Node n;
    n.view = &value;
    n.requires_grad = recording_;
    return add_node(std::move(n));
}

void Tape::check_owner(Var v, std::string_view context) const
{
    if (v.tape_ != this) {
        throw std::invalid_argument(std::string(context) + ": variable belongs to another tape");
    }
}

Var Tape::push(Tensor value, std::initializer_list<Var> parents, BackwardFn fn, std::string_view op)
{
    return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn), op);
}

Var Tape::push(Tensor value, std::span<const Var> parents, BackwardFn fn, std::string_view op)
{
    require_finite(value.data(), op);
    bool needs = false;
    for (const Var& p : parents) {
        check_owner(p, op);
        needs = needs || nodes_[p.id()].requires_grad;
    }
    Node n;
    n.owned = std::move(value);
    n.requires_grad = recording_ && needs;
    if (n.requires_grad) {
        n.backward = std::move(fn);
    }
    return add_node(std::move(n));
}

const Tensor& Tape::value(std::uint32_t id) const
{
    const Node& n = nodes_.at(id);
    return n.view != nullptr ? *n.view : n.owned;
}

Tensor& Tape::adjoint(std::uint32_t id)
{
    Tensor& a = adjoints_.at(id);
    if (a.empty() && value(id).size() != 0) {
        a = Tensor::zeros(value(id).shape());
    }
    return a;
}

void Tape::backward(Var output, const Tensor& seed)
{
    const std::pair<Var, Tensor> s{output, seed};
    backward(std::span<const std::pair<Var, Tensor>>(&s, 1));
}

void Tape::backward(std::span<const std::pair<Var, Tensor>> seeds)
{
    if (!recording_) {
        throw std::logic_error("backward on a tape that does not record gradients");
    }
    if (nodes_.empty() || seeds.empty()) {
        throw std::logic_error("backward before forward: nothing recorded");
    }
    if (consumed_) {
        throw std::logic_error("tape already ran backward; tapes are single-use");
    }
    adjoints_.assign(nodes_.size(), Tensor());
    std::uint32_t top = 0;
    for (const auto& [var, seed] : seeds) {
        check_owner(var, "backward");
        require_same_shape(value(var.id()), seed, "backward seed");
        require_finite(seed.data(), "backward seed");
        Tensor& a = adjoint(var.id());
        for (std::size_t i = 0; i < a.size(); ++i) {
            a[i] += seed[i];
        }
        top = std::max(top, var.id());
    }
    consumed_ = true;
    visited_.clear();
    for (std::int64_t id = top; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        Tensor& g = adjoints_[static_cast<std::size_t>(id)];
        if (!n.backward || g.empty()) {
            continue;
        }
        visited_.push_back(static_cast<std::uint32_t>(id));
        n.backward(*this, g);
    }
    for (const Tensor& a : adjoints_) {
        require_finite(a.data(), "backward adjoint");
    }
}

Tensor Tape::grad(Var v) const
{
    check_owner(v, "grad");
    if (!consumed_) {
        throw std::logic_error("grad() before backward()");
    }
    const Tensor& a = adjoints_.at(v.id());
    return a.empty() ? Tensor::zeros(value(v.id()).shape()) : a;
}

} // namespace alp::num
