#include <cmath>
#include <functional>
#include <numbers>

#include "ami/autodiff.hpp"
#include "ami/rng.hpp"
#include "doctest.h"

using namespace ami;
using ad::Tape;
using ad::Var;
using Vars = std::map<std::string, Var>;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Reduces a tensor-valued node to a scalar with fixed random weights so every
// output coordinate contributes to the gradient.
Var weighted_sum(Tape& tape, Var y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = random_tensor(rng, Shape{y.value().size()});
  return ad::dot(y, tape.constant(w));
}

struct PrimitiveCase {
  const char* name;
  std::function<NamedTensors(Rng&)> inputs;
  std::function<Var(Tape&, const Vars&)> body;
};

std::vector<PrimitiveCase> primitive_cases() {
  auto vec = [](std::size_t n, double lo = -1.0, double hi = 1.0) {
    return [=](Rng& r) { return NamedTensors{{"a", random_tensor(r, Shape{n}, lo, hi)}, {"b", random_tensor(r, Shape{n}, lo, hi)}}; };
  };
  auto away_from_zero = [](std::size_t n) {
    return [=](Rng& r) {
      Tensor t = random_tensor(r, Shape{n});
      for (double& v : t.data()) v += v >= 0 ? 0.05 : -0.05;
      return NamedTensors{{"a", t}};
    };
  };
  std::vector<PrimitiveCase> cases;
  cases.push_back({"add", vec(4), [](Tape& t, const Vars& v) { return weighted_sum(t, ad::add(v.at("a"), v.at("b")), 1); }});
  cases.push_back({"sub", vec(4), [](Tape& t, const Vars& v) { return weighted_sum(t, ad::sub(v.at("a"), v.at("b")), 2); }});
  cases.push_back({"mul", vec(4), [](Tape& t, const Vars& v) { return weighted_sum(t, ad::mul(v.at("a"), v.at("b")), 3); }});
  cases.push_back({"scale", vec(4), [](Tape& t, const Vars& v) { return weighted_sum(t, ad::scale(v.at("a"), -1.7), 4); }});
  cases.push_back({"shift", vec(4), [](Tape& t, const Vars& v) { return weighted_sum(t, ad::shift(v.at("a"), 0.3), 5); }});
  cases.push_back({"matvec",
                   [](Rng& r) { return NamedTensors{{"m", random_tensor(r, Shape{3, 4})}, {"x", random_tensor(r, Shape{4})}}; },
                   [](Tape& t, const Vars& v) { return weighted_sum(t, ad::matvec(v.at("m"), v.at("x")), 6); }});
  cases.push_back({"matvec_t",
                   [](Rng& r) { return NamedTensors{{"m", random_tensor(r, Shape{3, 4})}, {"x", random_tensor(r, Shape{3})}}; },
                   [](Tape& t, const Vars& v) { return weighted_sum(t, ad::matvec_t(v.at("m"), v.at("x")), 7); }});
  cases.push_back({"matmul",
                   [](Rng& r) { return NamedTensors{{"a", random_tensor(r, Shape{2, 3})}, {"b", random_tensor(r, Shape{3, 2})}}; },
                   [](Tape& t, const Vars& v) {
                     Var c = ad::matmul(v.at("a"), v.at("b"));
                     Var r0 = ad::row(c, 0), r1 = ad::row(c, 1);
                     return weighted_sum(t, ad::concat(r0, r1), 8);
                   }});
  cases.push_back({"tanh", vec(5, -2, 2), [](Tape& t, const Vars& v) { return weighted_sum(t, ad::tanh(v.at("a")), 9); }});
  cases.push_back({"sigmoid", vec(5, -3, 3), [](Tape& t, const Vars& v) { return weighted_sum(t, ad::sigmoid(v.at("a")), 10); }});
  cases.push_back({"relu", away_from_zero(5), [](Tape& t, const Vars& v) { return weighted_sum(t, ad::relu(v.at("a")), 11); }});
  cases.push_back({"softplus", vec(5, -4, 4), [](Tape& t, const Vars& v) { return weighted_sum(t, ad::softplus(v.at("a")), 12); }});
  cases.push_back({"exp", vec(5, -2, 2), [](Tape& t, const Vars& v) { return weighted_sum(t, ad::exp(v.at("a")), 13); }});
  cases.push_back({"log", vec(5, 0.2, 3.0), [](Tape& t, const Vars& v) { return weighted_sum(t, ad::log(v.at("a")), 14); }});
  cases.push_back({"softmax", vec(5, -2, 2), [](Tape& t, const Vars& v) { return weighted_sum(t, ad::softmax(v.at("a")), 15); }});
  cases.push_back({"log_softmax", vec(5, -2, 2), [](Tape& t, const Vars& v) { return weighted_sum(t, ad::log_softmax(v.at("a")), 16); }});
  cases.push_back({"concat", vec(3), [](Tape& t, const Vars& v) { return weighted_sum(t, ad::concat(v.at("a"), v.at("b")), 17); }});
  cases.push_back({"slice", vec(6), [](Tape& t, const Vars& v) { return weighted_sum(t, ad::slice(v.at("a"), 2, 3), 18); }});
  cases.push_back({"row",
                   [](Rng& r) { return NamedTensors{{"m", random_tensor(r, Shape{3, 4})}}; },
                   [](Tape& t, const Vars& v) { return weighted_sum(t, ad::row(v.at("m"), 1), 19); }});
  cases.push_back({"gather", vec(5), [](Tape& t, const Vars& v) { return weighted_sum(t, ad::gather(v.at("a"), {4, 0, 4, 2}), 20); }});
  cases.push_back({"stack", vec(3), [](Tape& t, const Vars& v) {
                     std::vector<Var> rows{v.at("a"), v.at("b"), v.at("a")};
                     Var m = ad::stack(rows);
                     return weighted_sum(t, ad::matvec(m, t.constant(Tensor::vector({0.3, -1.2, 0.7}))), 21);
                   }});
  cases.push_back({"sum", vec(4), [](Tape&, const Vars& v) { return ad::scale(ad::sum(v.at("a")), 1.3); }});
  cases.push_back({"mean", vec(4), [](Tape&, const Vars& v) { return ad::scale(ad::mean(v.at("a")), -0.4); }});
  cases.push_back({"l2norm", vec(4), [](Tape&, const Vars& v) { return ad::l2norm(v.at("a")); }});
  cases.push_back({"dot", vec(4), [](Tape&, const Vars& v) { return ad::dot(v.at("a"), v.at("b")); }});
  return cases;
}

}  // namespace

TEST_CASE("square has value 9 and gradient 6 at x=3") {
  ad::ScalarFunction f = [](Tape&, const Vars& v) { return ad::mul(v.at("x"), v.at("x")); };
  auto r = ad::evaluate_with_grad(f, {{"x", Tensor::scalar(3.0)}});
  CHECK(r.value == doctest::Approx(9.0));
  CHECK(r.gradients.at("x").item() == doctest::Approx(6.0));
}

TEST_CASE("softplus at zero is ln 2 with slope one half") {
  ad::ScalarFunction f = [](Tape&, const Vars& v) { return ad::sum(ad::softplus(v.at("x"))); };
  auto r = ad::evaluate_with_grad(f, {{"x", Tensor::vector({0.0})}});
  CHECK(r.value == doctest::Approx(std::numbers::ln2).epsilon(1e-12));
  CHECK(r.gradients.at("x")[0] == doctest::Approx(0.5));
}

TEST_CASE("softplus stays finite for large magnitudes") {
  Tape t;
  Var y = ad::softplus(t.constant(Tensor::vector({-800.0, 800.0})));
  CHECK(y.value()[0] >= 0.0);
  CHECK(y.value()[0] < 1e-300);
  CHECK(y.value()[1] == doctest::Approx(800.0));
}

TEST_CASE("softmax of zeros is uniform") {
  Tape t;
  Var y = ad::softmax(t.constant(Tensor::vector({0.0, 0.0, 0.0})));
  for (double p : y.value().data()) CHECK(p == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("constant output gives zero gradients") {
  ad::ScalarFunction f = [](Tape& t, const Vars&) { return t.constant(2.5); };
  auto r = ad::evaluate_with_grad(f, {{"w", Tensor::vector({1.0, 2.0})}});
  CHECK(r.gradients.at("w")[0] == 0.0);
  CHECK(r.gradients.at("w")[1] == 0.0);
}

TEST_CASE("unused parameters receive zero gradient") {
  ad::ScalarFunction f = [](Tape&, const Vars& v) { return ad::sum(ad::tanh(v.at("used"))); };
  auto r = ad::evaluate_with_grad(f, {{"used", Tensor::vector({0.1})}, {"unused", Tensor::vector({1.0, 2.0})}});
  CHECK(r.gradients.at("unused")[0] == 0.0);
  CHECK(r.gradients.at("unused")[1] == 0.0);
}

TEST_CASE("gradient of the L2 norm at (3,4) is (0.6,0.8)") {
  ad::ScalarFunction f = [](Tape&, const Vars& v) { return ad::l2norm(v.at("v")); };
  auto r = ad::evaluate_with_grad(f, {{"v", Tensor::vector({3.0, 4.0})}});
  CHECK(r.value == doctest::Approx(5.0));
  CHECK(r.gradients.at("v")[0] == doctest::Approx(0.6));
  CHECK(r.gradients.at("v")[1] == doctest::Approx(0.8));
}

TEST_CASE("L2 norm gradient at zero is zero") {
  ad::ScalarFunction f = [](Tape&, const Vars& v) { return ad::l2norm(v.at("v")); };
  auto r = ad::evaluate_with_grad(f, {{"v", Tensor::vector({0.0, 0.0})}});
  CHECK(r.gradients.at("v")[0] == 0.0);
  CHECK(r.gradients.at("v")[1] == 0.0);
}

TEST_CASE("two-layer tanh network matches finite differences") {
  Rng rng(42);
  NamedTensors params{{"W1", random_tensor(rng, Shape{5, 3})},
                      {"b1", random_tensor(rng, Shape{5})},
                      {"W2", random_tensor(rng, Shape{2, 5})},
                      {"b2", random_tensor(rng, Shape{2})}};
  const Tensor x = random_tensor(rng, Shape{3});
  ad::ScalarFunction f = [&](Tape& t, const Vars& v) {
    Var h = ad::tanh(ad::add(ad::matvec(v.at("W1"), t.constant(x)), v.at("b1")));
    Var y = ad::tanh(ad::add(ad::matvec(v.at("W2"), h), v.at("b2")));
    return ad::sum(ad::mul(y, y));
  };
  CHECK(ad::finite_diff_check(f, params, 1e-5) < 1e-4);
}

TEST_CASE("finite_diff_check conventions") {
  SUBCASE("linear function is exact") {
    ad::ScalarFunction f = [](Tape& t, const Vars& v) {
      return ad::dot(v.at("w"), t.constant(Tensor::vector({2.0, -3.0, 0.5})));
    };
    CHECK(ad::finite_diff_check(f, {{"w", Tensor::vector({0.1, 0.2, 0.3})}}, 1e-5) < 1e-8);
  }
  SUBCASE("sin at 1 against the closed-form cosine") {
    auto value = [](const NamedTensors& p) { return std::sin(p.at("x").item()); };
    NamedTensors analytic{{"x", Tensor::scalar(std::cos(1.0))}};
    CHECK(ad::finite_diff_check(value, analytic, {{"x", Tensor::scalar(1.0)}}, 1e-5) < 1e-6);
  }
  SUBCASE("zero parameters give zero") {
    ad::ScalarFunction f = [](Tape& t, const Vars&) { return t.constant(1.0); };
    CHECK(ad::finite_diff_check(f, {}, 1e-5) == 0.0);
  }
  SUBCASE("non-finite probe is an error") {
    auto value = [](const NamedTensors& p) { return p.at("x").item() > 0.5 ? std::nan("") : 0.0; };
    NamedTensors analytic{{"x", Tensor::scalar(0.0)}};
    CHECK_THROWS_AS(ad::finite_diff_check(value, analytic, {{"x", Tensor::scalar(0.5)}}, 1e-3), NumericError);
  }
}

TEST_CASE("every primitive matches central differences on 100 seeded instances") {
  for (const auto& c : primitive_cases()) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(seed);
      const NamedTensors inputs = c.inputs(rng);
      worst = std::max(worst, ad::finite_diff_check(c.body, inputs, 1e-5));
    }
    INFO(c.name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("evaluation and gradients are bit-identical across runs") {
  Rng rng(5);
  NamedTensors params{{"m", random_tensor(rng, Shape{4, 4})}, {"x", random_tensor(rng, Shape{4})}};
  ad::ScalarFunction f = [](Tape&, const Vars& v) {
    Var h = ad::softmax(ad::tanh(ad::matvec(v.at("m"), v.at("x"))));
    return ad::l2norm(ad::log_softmax(h));
  };
  auto a = ad::evaluate_with_grad(f, params);
  auto b = ad::evaluate_with_grad(f, params);
  CHECK(a.value == b.value);
  CHECK(a.gradients == b.gradients);
}

TEST_CASE("gradient of a sum is the sum of gradients on random tapes") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    NamedTensors params{{"m", random_tensor(rng, Shape{3, 3})}, {"x", random_tensor(rng, Shape{3})}};
    ad::ScalarFunction f = [](Tape&, const Vars& v) { return ad::sum(ad::sigmoid(ad::matvec(v.at("m"), v.at("x")))); };
    ad::ScalarFunction g = [](Tape&, const Vars& v) {
      return ad::dot(ad::tanh(v.at("x")), ad::softplus(ad::matvec_t(v.at("m"), v.at("x"))));
    };
    ad::ScalarFunction fg = [&](Tape& t, const Vars& v) { return ad::add(f(t, v), g(t, v)); };
    auto a = ad::evaluate_with_grad(f, params);
    auto b = ad::evaluate_with_grad(g, params);
    auto c = ad::evaluate_with_grad(fg, params);
    for (const auto& [name, grad] : c.gradients) {
      for (std::size_t i = 0; i < grad.size(); ++i) {
        CHECK(grad[i] == doctest::Approx(a.gradients.at(name)[i] + b.gradients.at(name)[i]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("shape mismatch names the node") {
  Tape t;
  Var a = t.constant(Tensor::vector({1.0, 2.0}));
  Var b = t.constant(Tensor::vector({1.0, 2.0, 3.0}));
  CHECK_THROWS_WITH_AS(ad::add(a, b), doctest::Contains("add (node 2)"), ShapeError);
  Var m = t.constant(Tensor(Shape{2, 2}));
  CHECK_THROWS_AS(ad::matvec(m, b), ShapeError);
}

TEST_CASE("backward of a non-scalar output is an error") {
  Tape t;
  Var a = t.param("a", Tensor::vector({1.0, 2.0}));
  CHECK_THROWS_AS(t.backward(ad::tanh(a)), std::invalid_argument);
}

TEST_CASE("log of a non-positive value is a numeric error") {
  Tape t;
  CHECK_THROWS_AS(ad::log(t.constant(Tensor::vector({1.0, 0.0}))), NumericError);
}
