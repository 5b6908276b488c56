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

#ifndef BACKDROP_GRAD_CHECK_HPP
#define BACKDROP_GRAD_CHECK_HPP

#include <cmath>
#include <functional>

#include "backdrop/tensor.hpp"

namespace backdrop {

// Compares the reverse-mode gradient of fn at `point` against central
// finite differences computed coordinate by coordinate. Returns
// max_i |analytic_i - numeric_i| / max(1, |numeric_i|). The numeric side
// is the independent oracle; run it at double precision.
template <class S>
S grad_check(const std::function<TensorT<S>(const TensorT<S>&)>& fn, const TensorT<S>& point,
             S step = S(1e-4)) {
  TensorT<S> x = TensorT<S>::from(point.shape(), point.data());
  x.set_requires_grad(true);

  TensorT<S> loss = fn(x);
  if (loss.size() != 1) fail("grad_check: fn must return a scalar");
  if (!std::isfinite(loss.item())) fail("grad_check: fn returned a non-finite value");

  GradMapT<S> grads = backward(loss);
  const TensorT<S>* analytic = grads.find(x);
  std::vector<S> a = analytic ? analytic->data() : std::vector<S>(x.data().size(), S(0));

  S worst = S(0);
  std::vector<S> values = point.data();
  for (size_t i = 0; i < values.size(); ++i) {
    S orig = values[i];
    auto eval_at = [&](S v) {
      values[i] = v;
      TensorT<S> probe = TensorT<S>::from(point.shape(), values);
      NoGradGuard ng;
      TensorT<S> out = fn(probe);
      if (out.size() != 1) fail("grad_check: fn must return a scalar");
      S y = out.item();
      if (!std::isfinite(y)) fail("grad_check: fn returned a non-finite value");
      return y;
    };
    S plus = eval_at(orig + step);
    S minus = eval_at(orig - step);
    values[i] = orig;
    S numeric = (plus - minus) / (S(2) * step);
    S err = std::abs(a[i] - numeric) / std::max(S(1), std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace backdrop

#endif  // BACKDROP_GRAD_CHECK_HPP
