// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

// Parameter initialization helpers shared by the networks.

#pragma once

#include "morphdiff/ops.hpp"
#include "morphdiff/rng.hpp"

namespace morphdiff::nn {

using ad::ParamSet;
using ad::Var;

template <typename T>
Tensor<T> normal_tensor(const Shape& shape, double stddev, Rng& rng) {
  Tensor<T> t(shape);
  for (auto& v : t.data) v = static_cast<T>(stddev * rng.normal());
  return t;
}

/// He-normal initialization for a weight whose fan-in is `fan_in`.
template <typename T>
Var<T> he_param(ParamSet<T>& ps, const std::string& name, const Shape& shape, Index fan_in, Rng& rng) {
  return ps.add(name, normal_tensor<T>(shape, std::sqrt(2.0 / static_cast<double>(fan_in)), rng));
}

template <typename T>
Var<T> zero_param(ParamSet<T>& ps, const std::string& name, const Shape& shape) {
  return ps.add(name, Tensor<T>(shape));
}

/// Group count for group normalization: at most 8 groups of at least 4 channels.
inline Index norm_groups(Index channels) {
  for (Index g = 8; g > 1; --g) {
    if (channels % g == 0 && channels / g >= 4) return g;
  }
  return 1;
}

template <typename T>
Var<T> constant(const Tensor<T>& t) {
  return Var<T>::constant(t);
}

}  // namespace morphdiff::nn
