#pragma once

// Prototype-guided feature enhancement.
//
//   S   = l2(F) . l2(P)          cosine similarity per position, over channels
//   E_m = relu6(S * sqrt(d))     enhancement matrix in [0, 6]
//   F*  = E_m o F + F            E_m broadcast across channels

#include <cmath>
#include <stdexcept>
#include <utility>

#include "afss/ops.hpp"

namespace afss {

class ZeroPrototypeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
Var<T> similarity_map(const Var<T>& features, const Var<T>& prototype) {
  T sq = 0;
  for (T v : prototype.value().values()) sq += v * v;
  if (!(sq > T(0))) throw ZeroPrototypeError("similarity_map: prototype is zero (uninitialised bank slot?)");
  return channel_dot(l2_normalize(features, 1), l2_normalize(prototype, 0));
}

template <typename T>
Var<T> enhancement_matrix(const Var<T>& similarity, std::size_t d) {
  if (d == 0) throw std::invalid_argument("enhancement_matrix: d must be >= 1");
  return relu6(scale(similarity, static_cast<T>(std::sqrt(static_cast<double>(d)))));
}

template <typename T>
Var<T> enhance(const Var<T>& features, const Var<T>& enhancement) {
  return add(spatial_mul(features, enhancement), features);
}

// Both streams with the same prototype; each gets its own similarity map.
template <typename T>
std::pair<Var<T>, Var<T>> enhance_pair(const Var<T>& support, const Var<T>& query, const Var<T>& prototype) {
  if (support.dim(1) != query.dim(1)) throw ShapeError("enhance_pair: support/query channel mismatch");
  const std::size_t d = support.dim(1);
  auto es = enhancement_matrix(similarity_map(support, prototype), d);
  auto eq = enhancement_matrix(similarity_map(query, prototype), d);
  return {enhance(support, es), enhance(query, eq)};
}

}  // namespace afss
