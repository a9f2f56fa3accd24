#include "cpdg/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "cpdg/params.hpp"
#include "oracles.hpp"

using namespace cpdg;

namespace {

using DTape = Tape<double>;

Tensor<double> randvec(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  StreamRng rng(seed, 0);
  std::vector<double> d(n);
  for (auto& v : d) v = rng.uniform_range(-scale, scale);
  return Tensor<double>::vec(std::move(d));
}

Tensor<double> randmat(std::size_t m, std::size_t n, std::uint64_t seed,
                       double scale = 1.0) {
  StreamRng rng(seed, 1);
  Tensor<double> t({m, n});
  for (auto& v : t.data) v = rng.uniform_range(-scale, scale);
  return t;
}

// FD check of a scalar graph built from a single leaf tensor.
double leaf_grad_check(const Tensor<double>& x0,
                       const std::function<Var(DTape&, Var)>& build,
                       double eps = 1e-6) {
  DTape tape;
  Var x = tape.leaf(x0, true);
  Var y = build(tape, x);
  tape.backward(y);
  auto analytic = tape.grad(x);

  double max_rel = 0;
  for (std::size_t i = 0; i < x0.numel(); ++i) {
    auto run = [&](double delta) {
      Tensor<double> xp = x0;
      xp.data[i] += delta;
      DTape t2;
      Var xv = t2.leaf(xp, false);
      return t2.scalar_value(build(t2, xv));
    };
    double numeric = (run(eps) - run(-eps)) / (2 * eps);
    double rel = std::abs(analytic[i] - numeric) /
                 std::max({std::abs(analytic[i]), std::abs(numeric), 1.0});
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace

TEST(TensorOps, SigmoidAtZero) {
  DTape t;
  Var x = t.leaf(Tensor<double>::scalar(0.0), false);
  EXPECT_DOUBLE_EQ(t.scalar_value(t.sigmoid(x)), 0.5);
}

TEST(TensorOps, EuclideanDistanceIdentityAndGradient) {
  DTape t;
  Var x = t.leaf(randvec(4, 7), true);
  Var same = t.leaf(t.tensor_of(x), false);
  Var d = t.euclidean_distance(x, same);
  EXPECT_DOUBLE_EQ(t.scalar_value(d), 0.0);
  t.backward(d);
  for (double g : t.grad(x)) EXPECT_DOUBLE_EQ(g, 0.0);  // subgradient 0 at d=0

  // gradient of d(x,y) wrt x is (x-y)/d away from the kink
  DTape t2;
  Var a = t2.leaf(Tensor<double>::vec({3.0, 0.0}), true);
  Var b = t2.leaf(Tensor<double>::vec({0.0, 4.0}), false);
  Var dist = t2.euclidean_distance(a, b);
  EXPECT_DOUBLE_EQ(t2.scalar_value(dist), 5.0);
  t2.backward(dist);
  EXPECT_NEAR(t2.grad(a)[0], 3.0 / 5.0, 1e-15);
  EXPECT_NEAR(t2.grad(a)[1], -4.0 / 5.0, 1e-15);
}

TEST(TensorOps, GruZeroFixedPoint) {
  // all-zero state, input, and biases: z = 0.5, n = 0, h' = 0
  const std::size_t in = 3, d = 2;
  DTape t;
  auto zeros = [&](std::vector<std::size_t> s) {
    return t.leaf(Tensor<double>::zeros(std::move(s)), false);
  };
  GruParamVars<double> p{zeros({in, d}), zeros({d, d}), zeros({d}),
                         zeros({in, d}), zeros({d, d}), zeros({d}),
                         zeros({in, d}), zeros({d, d}), zeros({d})};
  Var h = gru_cell(t, zeros({in}), zeros({d}), p);
  for (double v : t.value(h)) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(TensorOps, GruMatchesReference) {
  const std::size_t in = 4, d = 3;
  StreamRng rng(55, 0);
  auto rv = [&](std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform_range(-1, 1);
    return v;
  };
  auto x = rv(in), h = rv(d);
  auto w_r = rv(in * d), u_r = rv(d * d), b_r = rv(d);
  auto w_z = rv(in * d), u_z = rv(d * d), b_z = rv(d);
  auto w_n = rv(in * d), u_n = rv(d * d), b_n = rv(d);

  DTape t;
  auto leaf_m = [&](const std::vector<double>& v, std::size_t r, std::size_t c) {
    return t.leaf(Tensor<double>({r, c}, v), false);
  };
  auto leaf_v = [&](const std::vector<double>& v) {
    return t.leaf(Tensor<double>::vec(v), false);
  };
  GruParamVars<double> p{leaf_m(w_r, in, d), leaf_m(u_r, d, d), leaf_v(b_r),
                         leaf_m(w_z, in, d), leaf_m(u_z, d, d), leaf_v(b_z),
                         leaf_m(w_n, in, d), leaf_m(u_n, d, d), leaf_v(b_n)};
  Var out = gru_cell(t, leaf_v(x), leaf_v(h), p);
  auto want = oracle::gru_reference(x, h, w_r, u_r, b_r, w_z, u_z, b_z, w_n, u_n, b_n);
  for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(t.value(out)[j], want[j], 1e-14);
}

TEST(TensorOps, SoftmaxNormalizedAndPermutationEquivariant) {
  auto x = randvec(9, 3, 4.0);
  DTape t;
  auto y = t.value(t.softmax(t.leaf(x, false)));
  double sum = 0;
  for (double v : y) sum += v;
  EXPECT_NEAR(sum, 1.0, 1e-12);

  // permuting inputs permutes outputs
  Tensor<double> xp = x;
  std::swap(xp.data[2], xp.data[6]);
  DTape t2;
  auto yp = t2.value(t2.softmax(t2.leaf(xp, false)));
  EXPECT_DOUBLE_EQ(yp[2], y[6]);
  EXPECT_DOUBLE_EQ(yp[6], y[2]);
  EXPECT_DOUBLE_EQ(yp[0], y[0]);
}

TEST(TensorOps, ConcatSliceGradientRoundTrip) {
  auto a0 = randvec(3, 11);
  auto b0 = randvec(5, 12);
  DTape t;
  Var a = t.leaf(a0, true);
  Var b = t.leaf(b0, true);
  Var c = t.concat({a, b});
  Var sa = t.slice(c, 0, 3);
  Var sb = t.slice(c, 3, 8);
  // sum(slice_a * 2) + sum(slice_b * 3): grads route losslessly back
  Var loss = t.add(t.scale(t.sum(sa), 2.0), t.scale(t.sum(sb), 3.0));
  t.backward(loss);
  for (double g : t.grad(a)) EXPECT_DOUBLE_EQ(g, 2.0);
  for (double g : t.grad(b)) EXPECT_DOUBLE_EQ(g, 3.0);
}

TEST(TensorOps, TripletMarginCases) {
  DTape t;
  Var dp = t.leaf(Tensor<double>::scalar(1.0), false);
  Var dn = t.leaf(Tensor<double>::scalar(2.0), false);
  EXPECT_DOUBLE_EQ(t.scalar_value(t.triplet_margin(dp, dn, 0.5)), 0.0);

  Var dp2 = t.leaf(Tensor<double>::scalar(2.0), true);
  Var dn2 = t.leaf(Tensor<double>::scalar(1.0), true);
  Var l = t.triplet_margin(dp2, dn2, 0.5);
  EXPECT_DOUBLE_EQ(t.scalar_value(l), 1.5);
  t.backward(l);
  EXPECT_DOUBLE_EQ(t.grad(dp2)[0], 1.0);
  EXPECT_DOUBLE_EQ(t.grad(dn2)[0], -1.0);

  // inactive margin: flat region, zero gradient
  DTape t2;
  Var dp3 = t2.leaf(Tensor<double>::scalar(0.1), true);
  Var dn3 = t2.leaf(Tensor<double>::scalar(5.0), true);
  Var l2 = t2.triplet_margin(dp3, dn3, 0.5);
  t2.backward(l2);
  EXPECT_DOUBLE_EQ(t2.scalar_value(l2), 0.0);
  EXPECT_DOUBLE_EQ(t2.grad(dp3)[0], 0.0);
  EXPECT_DOUBLE_EQ(t2.grad(dn3)[0], 0.0);
}

TEST(TensorOps, BceWithLogitsStableAndCorrect) {
  DTape t;
  Var zero = t.leaf(Tensor<double>::scalar(0.0), false);
  EXPECT_NEAR(t.scalar_value(t.bce_with_logits(zero, 1.0)) +
                  t.scalar_value(t.bce_with_logits(zero, 0.0)),
              2 * std::log(2.0), 1e-14);

  Var big = t.leaf(Tensor<double>::scalar(20.0), false);
  Var small = t.leaf(Tensor<double>::scalar(-20.0), false);
  EXPECT_LT(t.scalar_value(t.bce_with_logits(big, 1.0)) +
                t.scalar_value(t.bce_with_logits(small, 0.0)),
            1e-8);

  // extreme logits do not overflow
  Var huge = t.leaf(Tensor<double>::scalar(1000.0), false);
  EXPECT_DOUBLE_EQ(t.scalar_value(t.bce_with_logits(huge, 1.0)), 0.0);
  Var nhuge = t.leaf(Tensor<double>::scalar(-1000.0), false);
  EXPECT_DOUBLE_EQ(t.scalar_value(t.bce_with_logits(nhuge, 0.0)), 0.0);

  StreamRng rng(6, 0);
  for (int i = 0; i < 50; ++i) {
    double lp = rng.uniform_range(-4, 4), ln = rng.uniform_range(-4, 4);
    DTape t3;
    Var a = t3.leaf(Tensor<double>::scalar(lp), false);
    Var b = t3.leaf(Tensor<double>::scalar(ln), false);
    double got = t3.scalar_value(t3.bce_with_logits(a, 1.0)) +
                 t3.scalar_value(t3.bce_with_logits(b, 0.0));
    EXPECT_NEAR(got, oracle::bce_pair(lp, ln), 1e-10);
  }
}

TEST(TensorOps, ShapeMismatchNamesOp) {
  DTape t;
  Var a = t.leaf(randvec(3, 1), false);
  Var b = t.leaf(randvec(4, 2), false);
  try {
    t.add(a, b);
    FAIL();
  } catch (const Error& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("(3)"), std::string::npos);
    EXPECT_NE(msg.find("(4)"), std::string::npos);
  }
}

TEST(TensorOps, NonFiniteOutputNamesOp) {
  DTape t;
  Var a = t.leaf(Tensor<double>::scalar(1e308), false);
  try {
    t.add(a, a);  // overflows to inf
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
  }
}

TEST(GradCheckOps, NormSquaredClosedForm) {
  // f = ||x||^2, x = [1,2]: grad = [2,4]
  ParameterStore<double> store(1);
  auto& p = store.add("x", {2}, Init::Zero);
  p.value.data = {1.0, 2.0};
  auto eval = [&](bool with_grad) {
    Tape<double> tape;
    auto lease = store.lease(tape);
    Var x = lease["x"];
    Var loss = tape.dot(x, x);
    if (with_grad) {
      tape.backward(loss);
      store.absorb_grads(tape, lease);
    }
    return tape.scalar_value(loss);
  };
  auto rep = grad_check(store, eval, 1e-5);
  EXPECT_LT(rep.max_rel_err, 1e-8);
  EXPECT_NEAR(store.at("x").grad.data[0], 2.0, 1e-12);
  EXPECT_NEAR(store.at("x").grad.data[1], 4.0, 1e-12);
}

TEST(GradCheckOps, EveryOpRandomInputs) {
  // each registered op under a scalarizing head, 50 random trials total
  struct Case {
    const char* name;
    std::function<Var(DTape&, Var)> build;
    std::size_t n;
  };
  auto vec_cases = std::vector<Case>{
      {"sigmoid", [](DTape& t, Var x) { return t.sum(t.sigmoid(x)); }, 6},
      {"tanh", [](DTape& t, Var x) { return t.sum(t.tanh_(x)); }, 6},
      {"relu", [](DTape& t, Var x) { return t.sum(t.mul(x, t.relu(x))); }, 6},
      {"cos", [](DTape& t, Var x) { return t.sum(t.cos_(x)); }, 6},
      {"softmax",
       [](DTape& t, Var x) {
         Var s = t.softmax(x);
         return t.dot(s, s);
       },
       5},
      {"mean", [](DTape& t, Var x) { return t.mean(t.mul(x, x)); }, 7},
      {"slice_concat",
       [](DTape& t, Var x) {
         Var a = t.slice(x, 0, 2);
         Var b = t.slice(x, 2, 5);
         return t.sum(t.mul(t.concat({b, a}), t.concat({b, a})));
       },
       5},
  };
  StreamRng seeds(2024, 0);
  for (const auto& c : vec_cases) {
    for (int trial = 0; trial < 5; ++trial) {
      auto x = randvec(c.n, seeds.next_u64());
      EXPECT_LT(leaf_grad_check(x, c.build), 1e-6) << c.name;
    }
  }

  // matmul / transpose / mean_rows / stack_rows / attention over a matrix leaf
  for (int trial = 0; trial < 5; ++trial) {
    auto m0 = randmat(3, 4, seeds.next_u64());
    EXPECT_LT(leaf_grad_check(m0,
                              [](DTape& t, Var x) {
                                Var mt = t.transpose(x);
                                Var prod = t.matmul(x, mt);  // (3,3)
                                return t.sum(t.mean_rows(prod));
                              }),
              1e-6)
        << "matmul";

    auto q0 = randvec(4, seeds.next_u64());
    EXPECT_LT(leaf_grad_check(q0,
                              [&m0](DTape& t, Var q) {
                                Var keys = t.leaf(m0, false);
                                Var vals = t.leaf(m0, false);
                                Var o = scaled_dot_attention(t, q, keys, vals);
                                return t.dot(o, o);
                              }),
              1e-6)
        << "attention_query";

    EXPECT_LT(leaf_grad_check(m0,
                              [&q0](DTape& t, Var kv) {
                                Var q = t.leaf(q0, false);
                                Var o = scaled_dot_attention(t, q, kv, kv);
                                return t.dot(o, o);
                              }),
              1e-6)
        << "attention_keys_values";

    auto v0 = randvec(3, seeds.next_u64());
    EXPECT_LT(leaf_grad_check(v0,
                              [](DTape& t, Var v) {
                                Var m = t.stack_rows({v, t.scale(v, 2.0), v});
                                Var r = t.row(m, 1);
                                return t.dot(r, t.mean_rows(m));
                              }),
              1e-6)
        << "stack_rows_row";
  }

  // distance / triplet / bce away from kinks
  for (int trial = 0; trial < 5; ++trial) {
    auto x = randvec(4, seeds.next_u64());
    EXPECT_LT(leaf_grad_check(x,
                              [](DTape& t, Var v) {
                                Var shifted = t.add_const(v, 3.0);
                                Var d = t.euclidean_distance(v, shifted);
                                Var d2 = t.euclidean_distance(
                                    v, t.scale(t.add_const(v, 1.0), 2.0));
                                return t.triplet_margin(d2, d, 4.0);
                              }),
              1e-6)
        << "triplet_distance";

    auto s = randvec(1, seeds.next_u64());
    EXPECT_LT(leaf_grad_check(s,
                              [](DTape& t, Var v) {
                                Var l = t.sum(v);
                                return t.add(t.bce_with_logits(l, 1.0),
                                             t.bce_with_logits(t.scale(l, -2.0), 0.0));
                              }),
              1e-6)
        << "bce";
  }

  // gru / rnn cells over parameters
  for (int trial = 0; trial < 3; ++trial) {
    ParameterStore<double> store(seeds.next_u64());
    store.add("w", {3, 2});
    store.add("u", {2, 2});
    store.add("b", {2});
    auto x0 = randvec(3, seeds.next_u64(), 0.8);
    auto h0 = randvec(2, seeds.next_u64(), 0.8);
    auto eval = [&](bool with_grad) {
      Tape<double> tape;
      auto lease = store.lease(tape);
      RnnParamVars<double> p{lease["w"], lease["u"], lease["b"]};
      Var out = rnn_cell(tape, tape.leaf(x0, false), tape.leaf(h0, false), p);
      Var loss = tape.dot(out, out);
      if (with_grad) {
        tape.backward(loss);
        store.absorb_grads(tape, lease);
      }
      return tape.scalar_value(loss);
    };
    auto rep = grad_check(store, eval, 1e-5);
    EXPECT_LT(rep.max_rel_err, 1e-6) << "rnn_cell " << rep.worst_param;
  }
}

TEST(ParameterStore, AdamAndSgdStepDirections) {
  ParameterStore<double> store(3);
  auto& p = store.add("w", {2}, Init::Zero);
  p.value.data = {1.0, -1.0};
  p.grad.data = {0.5, -0.5};
  OptimizerConfig sgd;
  sgd.kind = OptimizerConfig::Kind::Sgd;
  sgd.lr = 0.1;
  store.step(sgd);
  EXPECT_NEAR(store.at("w").value.data[0], 0.95, 1e-12);
  EXPECT_NEAR(store.at("w").value.data[1], -0.95, 1e-12);

  ParameterStore<double> store2(3);
  auto& p2 = store2.add("w", {1}, Init::Zero);
  p2.value.data = {1.0};
  p2.grad.data = {2.0};
  OptimizerConfig adam;
  adam.lr = 0.1;
  store2.step(adam);
  // first adam step moves by ~lr in the gradient direction
  EXPECT_NEAR(store2.at("w").value.data[0], 1.0 - 0.1, 1e-6);
}

TEST(ParameterStore, CheckpointRoundTrip) {
  ParameterStore<double> store(17);
  store.add("a", {3, 2});
  store.add("b", {4});
  auto path = std::filesystem::temp_directory_path() / "cpdg_par_test.cpar";
  store.save(path.string());

  ParameterStore<double> other(99);
  other.add("a", {3, 2});
  other.add("b", {4});
  other.load(path.string());
  EXPECT_EQ(other.at("a").value.data, store.at("a").value.data);
  EXPECT_EQ(other.at("b").value.data, store.at("b").value.data);

  ParameterStore<double> wrong(1);
  wrong.add("a", {2, 3});
  EXPECT_THROW(wrong.load(path.string()), Error);
}
