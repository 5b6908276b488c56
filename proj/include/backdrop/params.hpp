/*
 * Copyright 2026 the backdrop authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef BACKDROP_PARAMS_HPP
#define BACKDROP_PARAMS_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "backdrop/rng.hpp"
#include "backdrop/tensor.hpp"

namespace backdrop {

// Named parameter tree. std::map keeps iteration (and therefore hashing
// and serialization) in a fixed order.
template <class S>
struct ParamStoreT {
  std::map<std::string, TensorT<S>> params;

  TensorT<S>& create(const std::string& name, Shape shape) {
    if (params.count(name)) fail("parameter already exists: " + name);
    TensorT<S> t = TensorT<S>::zeros(std::move(shape));
    t.set_requires_grad(true).set_name(name);
    return params.emplace(name, std::move(t)).first->second;
  }

  TensorT<S>& at(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) fail("unknown parameter: " + name);
    return it->second;
  }

  const TensorT<S>& at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) fail("unknown parameter: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return params.count(name) != 0; }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& [name, t] : params) n += t.size();
    return n;
  }
};

using ParamStore = ParamStoreT<float>;

namespace detail {

inline void fnv1a(uint64_t& h, const void* bytes, size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
}

}  // namespace detail

// Order-stable hash over names and raw value bits of every parameter
// whose name starts with `prefix` (empty prefix = all).
template <class S>
uint64_t params_hash(const ParamStoreT<S>& store, const std::string& prefix = "") {
  uint64_t h = 1469598103934665603ull;
  for (const auto& [name, t] : store.params) {
    if (name.rfind(prefix, 0) != 0) continue;
    detail::fnv1a(h, name.data(), name.size());
    detail::fnv1a(h, t.data().data(), t.data().size() * sizeof(S));
  }
  return h;
}

template <class S>
void fill_normal(TensorT<S>& t, Rng& rng, double stddev) {
  for (S& v : t.raw_data()) v = static_cast<S>(rng.normal() * stddev);
}

// float -> double copy of a parameter store (used by the gradient-check
// instantiations of the model code)
inline ParamStoreT<double> to_double(const ParamStoreT<float>& store) {
  ParamStoreT<double> out;
  for (const auto& [name, t] : store.params) {
    std::vector<double> values(t.data().begin(), t.data().end());
    TensorT<double> d = TensorT<double>::from(t.shape(), std::move(values));
    d.set_requires_grad(t.requires_grad()).set_name(name);
    out.params.emplace(name, std::move(d));
  }
  return out;
}

}  // namespace backdrop

#endif  // BACKDROP_PARAMS_HPP
