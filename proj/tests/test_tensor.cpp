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

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "backdrop/grad_check.hpp"
#include "backdrop/rng.hpp"
#include "backdrop/tensor.hpp"

using namespace backdrop;

namespace {

template <class S>
TensorT<S> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<S> v(static_cast<size_t>(numel(shape)));
  for (auto& x : v) x = static_cast<S>(rng.normal() * scale);
  return TensorT<S>::from(std::move(shape), std::move(v));
}

using DTensor = TensorT<double>;

}  // namespace

TEST_CASE("matmul shape algebra and errors") {
  Rng rng(1);
  auto a = random_tensor<float>({2, 3}, rng);
  auto b = random_tensor<float>({3, 4}, rng);
  auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 4});

  auto bad = random_tensor<float>({5, 4}, rng);
  REQUIRE_THROWS_WITH(matmul(a, bad), Catch::Matchers::ContainsSubstring("matmul") &&
                                          Catch::Matchers::ContainsSubstring("[2,3]") &&
                                          Catch::Matchers::ContainsSubstring("[5,4]"));
}

TEST_CASE("matmul against a hand-rolled triple loop") {
  Rng rng(2);
  auto a = random_tensor<float>({4, 5}, rng);
  auto b = random_tensor<float>({5, 3}, rng);
  auto c = matmul(a, b);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 3; ++j) {
      float acc = 0.0f;
      for (int k = 0; k < 5; ++k) acc += a.data()[i * 5 + k] * b.data()[k * 3 + j];
      CHECK(c.data()[i * 3 + j] == Catch::Approx(acc).margin(1e-5));
    }
  }
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(3);
  auto x = random_tensor<float>({7, 11}, rng, 3.0);
  auto y = softmax(x);
  for (int r = 0; r < 7; ++r) {
    float s = 0.0f;
    for (int c = 0; c < 11; ++c) s += y.data()[r * 11 + c];
    CHECK(s == Catch::Approx(1.0f).margin(1e-6));
  }
}

TEST_CASE("layer_norm standardizes each row before affine") {
  Rng rng(4);
  auto x = random_tensor<float>({5, 64}, rng, 2.0);
  auto y = layer_norm(x);
  for (int r = 0; r < 5; ++r) {
    double mean = 0.0, var = 0.0;
    for (int c = 0; c < 64; ++c) mean += y.data()[r * 64 + c];
    mean /= 64.0;
    for (int c = 0; c < 64; ++c) {
      double d = y.data()[r * 64 + c] - mean;
      var += d * d;
    }
    var /= 64.0;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("concat along channel axis") {
  auto a = Tensor::filled({16, 16, 4}, 1.0f);
  auto b = Tensor::filled({16, 16, 4}, 2.0f);
  auto c = concat<float>({a, b}, 2);
  REQUIRE(c.shape() == Shape{16, 16, 8});
  // each (i,j) cell holds a's channels then b's
  CHECK(c.data()[0] == 1.0f);
  CHECK(c.data()[4] == 2.0f);
  CHECK(c.data()[7] == 2.0f);

  auto bad = Tensor::filled({15, 16, 4}, 0.0f);
  REQUIRE_THROWS_WITH(concat<float>({a, bad}, 2), Catch::Matchers::ContainsSubstring("concat"));
}

TEST_CASE("forward results are deterministic") {
  Rng rng(5);
  auto a = random_tensor<float>({8, 8}, rng);
  auto b = random_tensor<float>({8, 8}, rng);
  auto c1 = matmul(gelu(a), softmax(b));
  auto c2 = matmul(gelu(a), softmax(b));
  CHECK(c1.data() == c2.data());
}

TEST_CASE("non-finite op results are reported, not propagated") {
  auto big = Tensor::filled({2, 2}, 3e38f);
  REQUIRE_THROWS_WITH(mul(big, big), Catch::Matchers::ContainsSubstring("non-finite"));
}

TEST_CASE("backward of sum is ones") {
  auto x = Tensor::from({3}, {1.0f, 2.0f, 3.0f});
  x.set_requires_grad(true).set_name("x");
  auto loss = sum(x);
  auto grads = backward(loss);
  REQUIRE(grads.named.count("x") == 1);
  CHECK(grads.named.at("x").data() == std::vector<float>{1.0f, 1.0f, 1.0f});
}

TEST_CASE("backward of sum of squares is 2x") {
  auto x = Tensor::from({3}, {1.0f, 2.0f, 3.0f});
  x.set_requires_grad(true).set_name("x");
  auto loss = sum(mul(x, x));
  auto grads = backward(loss);
  CHECK(grads.named.at("x").data() == std::vector<float>{2.0f, 4.0f, 6.0f});
}

TEST_CASE("backward rejects non-scalar loss") {
  auto x = Tensor::from({2}, {1.0f, 2.0f});
  x.set_requires_grad(true);
  auto y = mul(x, x);
  REQUIRE_THROWS_WITH(backward(y), Catch::Matchers::ContainsSubstring("scalar"));
}

TEST_CASE("grad_check on sum of squares is tight") {
  Rng rng(6);
  auto point = random_tensor<double>({5}, rng);
  double err = grad_check<double>([](const DTensor& x) { return sum(mul(x, x)); }, point);
  CHECK(err < 1e-6);
}

TEST_CASE("grad_check rejects non-finite functions") {
  auto point = DTensor::from({1}, {2.0});
  REQUIRE_THROWS(grad_check<double>(
      [](const DTensor& x) {
        auto big = DTensor::filled({1}, 1e308);
        return mul(mul(x, big), big);
      },
      point));
}

// Every op kind passes a seeded finite-difference check at 10 random points.
TEST_CASE("gradient check across op kinds") {
  struct OpCase {
    const char* name;
    Shape shape;
    std::function<DTensor(const DTensor&)> fn;
  };
  Rng shape_rng(7);
  auto aux = random_tensor<double>({6, 4}, shape_rng);
  auto aux_vec = random_tensor<double>({4}, shape_rng);
  auto weights = DTensor::from({3, 4}, {1, 1, 0.5, 0.5, 1, 1, 0.5, 0.5, 0.5, 0.5, 1, 1});

  std::vector<OpCase> cases = {
      {"matmul", {3, 6}, [&](const DTensor& x) { return sum(matmul(x, aux)); }},
      {"matmul_nt", {3, 4}, [&](const DTensor& x) { return sum(matmul(x, aux, false, true)); }},
      {"matmul_tn", {6, 3}, [&](const DTensor& x) { return sum(matmul(x, aux, true, false)); }},
      {"add", {4, 4}, [](const DTensor& x) { return sum(add(x, x)); }},
      {"sub", {4, 4}, [](const DTensor& x) { return sum(mul(sub(x, gelu(x)), x)); }},
      {"mul", {4, 4}, [](const DTensor& x) { return sum(mul(x, x)); }},
      {"scale", {4, 4}, [](const DTensor& x) { return sum(scale(x, 3.5)); }},
      {"add_const", {4, 4}, [](const DTensor& x) { return sum(mul(add_const(x, 2.0), x)); }},
      {"row_add", {5, 4}, [&](const DTensor& x) { return sum(mul(row_add(x, aux_vec), x)); }},
      {"row_add_vec", {4}, [&](const DTensor& v) { auto m = slice_rows(aux, 0, 5); return sum(mul(row_add(m, v), m)); }},
      {"row_mul", {5, 4}, [&](const DTensor& x) { return sum(row_mul(x, aux_vec)); }},
      {"row_mul_vec", {4}, [&](const DTensor& v) { auto m = slice_rows(aux, 0, 5); return sum(mul(row_mul(m, v), m)); }},
      {"gelu", {4, 4}, [](const DTensor& x) { return sum(gelu(x)); }},
      {"softmax", {3, 4}, [](const DTensor& x) { return sum(mul(softmax(x), x)); }},
      {"softmax_weighted", {3, 4}, [&](const DTensor& x) { return sum(mul(softmax(x, &weights), x)); }},
      {"layer_norm", {3, 8}, [](const DTensor& x) { return sum(mul(layer_norm(x), x)); }},
      {"concat", {3, 4}, [&](const DTensor& x) { return sum(mul(concat<double>({x, x}, 0), concat<double>({x, x}, 0))); }},
      {"slice_rows", {5, 4}, [](const DTensor& x) { return sum(mul(slice_rows(x, 1, 3), slice_rows(x, 2, 3))); }},
      {"slice_cols", {5, 4}, [](const DTensor& x) { return sum(mul(slice_cols(x, 1, 2), slice_cols(x, 0, 2))); }},
      {"reshape", {3, 4}, [](const DTensor& x) { return sum(mul(reshape(x, {4, 3}), reshape(x, {4, 3}))); }},
      {"embedding", {3, 4}, [](const DTensor& x) { return sum(mul(embedding(x, 1), embedding(x, 1))); }},
      {"sum", {4, 4}, [](const DTensor& x) { return sum(x); }},
      {"mean", {4, 4}, [](const DTensor& x) { return mean(mul(x, x)); }},
      {"mse", {4, 4}, [&](const DTensor& x) { return mse(x, slice_cols(slice_rows(aux, 0, 4), 0, 4)); }},
  };

  for (const auto& op : cases) {
    INFO(op.name);
    for (int trial = 0; trial < 10; ++trial) {
      Rng rng(mix_seed(100, static_cast<uint64_t>(trial), std::hash<std::string>{}(op.name)));
      auto point = random_tensor<double>(op.shape, rng);
      double err = grad_check<double>(op.fn, point);
      CHECK(err < 1e-3);
    }
  }
}

TEST_CASE("no-grad guard suppresses graph recording") {
  auto x = Tensor::from({2}, {1.0f, 2.0f});
  x.set_requires_grad(true);
  Tensor y;
  {
    NoGradGuard ng;
    y = mul(x, x);
  }
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("gradients accumulate across fan-out") {
  auto x = Tensor::from({2}, {3.0f, -1.0f});
  x.set_requires_grad(true).set_name("x");
  auto y = add(mul(x, x), x);  // d/dx = 2x + 1
  auto grads = backward(sum(y));
  CHECK(grads.named.at("x").data()[0] == Catch::Approx(7.0f));
  CHECK(grads.named.at("x").data()[1] == Catch::Approx(-1.0f));
}
