// corrpool/tape.hpp

// Copyright 2026  The corrpool Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <optional>

#include "corrpool/tensor.hpp"

namespace corrpool {

template <Real T>
class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
template <Real T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  /// Gradient accumulated by the last backward pass (zeros if none reached).
  const Tensor<T>& grad() const;

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records op applications in execution order and replays their backward
/// rules in exact reverse order. One tape per training computation; not
/// shared between threads.
template <Real T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false, std::string name = "leaf") {
    nodes_.push_back(Node{std::move(value), std::nullopt, requires_grad, {}, std::move(name)});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false, "const"); }
  Var<T> param(Tensor<T> value, std::string name = "param") {
    return leaf(std::move(value), true, std::move(name));
  }

  /// Adds an op output. The backward rule is dropped when no input needs a
  /// gradient, so constant subgraphs cost nothing in backward().
  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn backward,
                std::string name) {
    bool needs = false;
    for (const auto& v : inputs) {
      if (&v.tape() != this || v.id() >= nodes_.size())
        throw Error("op input of '" + name + "' belongs to another tape");
      needs = needs || nodes_[v.id()].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), std::nullopt, needs,
                          needs ? std::move(backward) : BackwardFn{}, std::move(name)});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward,
                std::string name) {
    return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                  std::move(backward), std::move(name));
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::string& name(std::size_t id) const { return nodes_.at(id).name; }
  std::size_t size() const { return nodes_.size(); }

  bool has_grad(std::size_t id) const { return nodes_.at(id).grad.has_value(); }

  /// Mutable gradient slot, zero-initialized on first access.
  Tensor<T>& grad(std::size_t id) {
    auto& n = nodes_.at(id);
    if (!n.grad) n.grad.emplace(n.value.shape());
    return *n.grad;
  }

  /// Seeds d(root)/d(root) = 1 and runs backward rules newest-first. The root
  /// must hold a single element.
  void backward(const Var<T>& root) {
    if (root.value().size() != 1)
      throw ShapeError("backward() needs a scalar root, got shape " + shape_str(root.shape()));
    for (auto& n : nodes_) n.grad.reset();
    grad(root.id())[0] = T(1);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.backward && n.grad) n.backward(*this, i);
    }
  }

  /// Index of the first recorded node whose values contain NaN/Inf.
  std::optional<std::size_t> first_non_finite() const {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (!nodes_[i].value.all_finite()) return i;
    return std::nullopt;
  }

 private:
  struct Node {
    Tensor<T> value;
    std::optional<Tensor<T>> grad;
    bool requires_grad = false;
    BackwardFn backward;
    std::string name;
  };
  std::vector<Node> nodes_;
};

template <Real T>
const Tensor<T>& Var<T>::value() const { return tape_->value(id_); }

template <Real T>
bool Var<T>::requires_grad() const { return tape_->requires_grad(id_); }

template <Real T>
const Tensor<T>& Var<T>::grad() const { return tape_->grad(id_); }

}  // namespace corrpool
