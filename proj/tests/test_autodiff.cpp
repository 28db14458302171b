#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_support.hpp"

using namespace caps;
using doctest::Approx;

TEST_CASE("backward of a sum fills the gradient with ones") {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>({2, 3}, {1, -2, 3, 0, 5, -6}), true);
  t.backward(sum_all(x));
  for (int i = 0; i < 6; ++i) CHECK(x.grad()[i] == 1.0);
}

TEST_CASE("backward of sum of squares doubles the input") {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>({2}, {1, -2}), true);
  t.backward(sum_all(square(x)));
  CHECK(x.grad()[0] == Approx(2.0));
  CHECK(x.grad()[1] == Approx(-4.0));
}

TEST_CASE("backward rejects non-scalar losses") {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>({3}, {1, 2, 3}), true);
  CHECK_THROWS_AS(t.backward(square(x)), ContractError);
}

TEST_CASE("repeated backward accumulates into grads") {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>({2}, {1, -2}), true);
  auto loss = sum_all(square(x));
  t.backward(loss);
  t.backward(loss);
  CHECK(x.grad()[0] == Approx(4.0));
  CHECK(x.grad()[1] == Approx(-8.0));
  t.zero_grads();
  t.backward(loss);
  CHECK(x.grad()[0] == Approx(2.0));
}

TEST_CASE("grad_check on exactly linear functions is tiny") {
  Rng rng(5);
  Tensor<double> x({3, 3});
  for (int i = 0; i < 9; ++i) x[i] = rng.normal();
  const double err = grad_check(
      [](Tape<double>&, Var<double> v) { return sum_all(v); }, x);
  CHECK(err < 1e-10);
}

TEST_CASE("grad_check covers squash-length and routed norms") {
  Rng rng(6);
  Tensor<double> x({2, 4});
  for (int i = 0; i < 8; ++i) x[i] = rng.normal();
  const double err = grad_check(
      [](Tape<double>&, Var<double> v) { return sum_all(l2_norm_axis(squash(v), -1)); },
      x);
  CHECK(err < 1e-5);

  Tensor<double> votes({2, 2, 2});
  for (int i = 0; i < 8; ++i) votes[i] = rng.normal();
  const double rerr = grad_check(
      [](Tape<double>& t, Var<double> v) {
        auto rr = dynamic_routing(t, v, 3);
        return sum_all(caps_logits(rr.capsules));
      },
      votes);
  CHECK(rerr < 1e-4);
}

TEST_CASE("matmul gradient matches central differences") {
  Rng rng(17);
  Tensor<double> a({3, 3}), b({3, 3});
  for (int i = 0; i < 9; ++i) {
    a[i] = rng.normal();
    b[i] = rng.normal();
  }
  const double err = grad_check(
      [&](Tape<double>& t, Var<double> av) {
        return sum_all(matmul(av, t.leaf(b)));
      },
      a);
  CHECK(err < 1e-5);
}

TEST_CASE("conv2d gradients match central differences") {
  Rng rng(18);
  Tensor<double> x({2, 5, 5}), k({3, 2, 3, 3});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = rng.normal();
  for (std::int64_t i = 0; i < k.numel(); ++i) k[i] = rng.normal();
  const double ex = grad_check(
      [&](Tape<double>& t, Var<double> xv) {
        return sum_all(square(conv2d(xv, t.leaf(k), 1)));
      },
      x);
  const double ek = grad_check(
      [&](Tape<double>& t, Var<double> kv) {
        return sum_all(square(conv2d(t.leaf(x), kv, 2)));
      },
      k);
  CHECK(ex < 1e-5);
  CHECK(ek < 1e-5);
}

TEST_CASE("every registered op passes grad_check over random inputs") {
  Rng rng(41);
  const auto sample = [&](Shape s, double lo = -2, double hi = 2) {
    Tensor<double> t(std::move(s));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
  };

  using Fn = std::function<Var<double>(Tape<double>&, Var<double>)>;
  struct OpCase {
    const char* name;
    Fn fn;
    double lo, hi;
  };
  Tensor<double> aux = sample({2, 3});
  const std::vector<OpCase> cases = {
      {"add", [&](Tape<double>& t, Var<double> v) { return sum_all(square(add(v, t.leaf(aux)))); }, -2, 2},
      {"sub", [&](Tape<double>& t, Var<double> v) { return sum_all(square(sub(v, t.leaf(aux)))); }, -2, 2},
      {"mul", [&](Tape<double>& t, Var<double> v) { return sum_all(square(mul(v, t.leaf(aux)))); }, -2, 2},
      {"div", [&](Tape<double>& t, Var<double> v) { return sum_all(divide(t.leaf(aux), v)); }, 0.5, 2.5},
      {"neg", [](Tape<double>&, Var<double> v) { return sum_all(square(neg(v))); }, -2, 2},
      {"relu", [](Tape<double>&, Var<double> v) { return sum_all(square(relu(v))); }, -2, 2},
      {"sigmoid", [](Tape<double>&, Var<double> v) { return sum_all(square(sigmoid(v))); }, -3, 3},
      {"log", [](Tape<double>&, Var<double> v) { return sum_all(square(log_op(v))); }, 0.2, 3},
      {"exp", [](Tape<double>&, Var<double> v) { return sum_all(square(exp_op(v))); }, -2, 1},
      {"scale", [](Tape<double>&, Var<double> v) { return sum_all(square(scale(v, 1.7))); }, -2, 2},
      {"clamp_min", [](Tape<double>&, Var<double> v) { return sum_all(square(clamp_min(v, 0.5))); }, 0.6, 3},
      {"softmax", [](Tape<double>&, Var<double> v) { return sum_all(square(softmax_axis(v, 1))); }, -2, 2},
      {"log_softmax", [](Tape<double>&, Var<double> v) { return sum_all(square(log_softmax_axis(v, 1))); }, -2, 2},
      {"l2_norm", [](Tape<double>&, Var<double> v) { return sum_all(l2_norm_axis(v, 1)); }, 0.3, 2},
      {"squash", [](Tape<double>&, Var<double> v) { return sum_all(square(squash(v))); }, -2, 2},
      {"sum_axis", [](Tape<double>&, Var<double> v) { return sum_all(square(sum_axis(v, 0))); }, -2, 2},
      {"reshape", [](Tape<double>&, Var<double> v) { return sum_all(square(reshape(v, {3, 2}))); }, -2, 2},
      {"permute", [](Tape<double>&, Var<double> v) { return sum_all(square(permute(v, {1, 0}))); }, -2, 2},
  };
  for (const auto& c : cases) {
    double worst = 0;
    for (int rep = 0; rep < 100; ++rep)
      worst = std::max(worst, grad_check(c.fn, sample({2, 3}, c.lo, c.hi)));
    INFO(c.name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("composite model loss gradient matches central differences") {
  // A complete capsule pipeline small enough for coordinate-wise differences:
  // conv -> primary capsules -> votes -> routing -> margin-style loss.
  using testsup::micro_config;
  CapsNetConfig cfg = micro_config(2);
  Model<double> model = init_model<double>(cfg, 3);
  Tensor<double> image = testsup::random_image({1, 1, 8, 8}, 5).cast<double>();
  const std::vector<int> label = {1};

  // gradient with respect to every parameter, one at a time
  for (const auto& p : model.params) {
    Tensor<double> x0 = p.value;
    const std::string name = p.name;
    const double err = grad_check(
        [&](Tape<double>& t, Var<double> v) {
          BoundModel<double> bm;
          bm.model = &model;
          bm.tape = &t;
          for (const auto& q : model.params)
            bm.vars.emplace(q.name, q.name == name ? v : t.leaf(q.value));
          auto votes = compute_votes(bm, extract_primary(bm, t.leaf(image)));
          auto routed = dynamic_routing(t, votes, cfg.routing_iters);
          return cross_entropy_with_logits(caps_logits(routed.capsules), label);
        },
        x0, 1e-5);
    INFO(name);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("tape visits nodes once and reports op kinds") {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>({2, 2}, {1, 2, 3, 4}), true);
  auto y = softmax_axis(x, 1);
  auto loss = sum_all(mul(y, y));
  t.backward(loss);
  CHECK(t.contains_kind(OpKind::Softmax));
  CHECK_FALSE(t.contains_kind(OpKind::Conv2d));
  CHECK(x.grad().numel() == 4);
}
