// corrpool/params.hpp

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

#include <unordered_map>

#include "corrpool/tape.hpp"

namespace corrpool {

/// Puts parameter tensors on a tape, once each. With `trainable` set they
/// become gradient-tracking leaves whose gradients can be read back after
/// backward(); otherwise they are constants.
template <Real T>
class ParamBinder {
 public:
  ParamBinder(Tape<T>& tape, bool trainable) : tape_(tape), trainable_(trainable) {}

  Var<T> operator()(const Tensor<T>& t) {
    auto it = vars_.find(&t);
    if (it != vars_.end()) return it->second;
    Var<T> v = trainable_ ? tape_.param(t) : tape_.constant(t);
    vars_.emplace(&t, v);
    return v;
  }

  /// Binds `t` to an existing variable instead of a new leaf.
  void alias(const Tensor<T>& t, const Var<T>& v) { vars_.insert_or_assign(&t, v); }

  /// Gradient for a bound tensor, or nullptr when it never reached the tape.
  const Tensor<T>* grad(const Tensor<T>& t) const {
    auto it = vars_.find(&t);
    if (it == vars_.end() || !tape_.has_grad(it->second.id())) return nullptr;
    return &it->second.grad();
  }

  Tape<T>& tape() { return tape_; }
  bool trainable() const { return trainable_; }

 private:
  Tape<T>& tape_;
  bool trainable_;
  std::unordered_map<const Tensor<T>*, Var<T>> vars_;
};

}  // namespace corrpool
