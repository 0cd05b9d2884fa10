#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "metaflow/tensor.hpp"
#include "testutil.hpp"

using namespace metaflow;
using mftest::fd_grad;
using mftest::max_rel_err;
using mftest::random_tensor;
using mftest::rel_err;

TEST_CASE("elementwise values") {
  Tensor a = Tensor::from_data({2}, {1, 2});
  Tensor b = Tensor::from_data({2}, {3, 4});
  Tensor s = add(a, b);
  CHECK(s.data()[0] == 4.0);
  CHECK(s.data()[1] == 6.0);

  CHECK(exp(Tensor::from_data({1}, {-1.0})).data()[0] ==
        doctest::Approx(0.36787944117144233).epsilon(1e-12));

  CHECK(elu(Tensor::scalar(0.0)).item() == 0.0);
  CHECK(elu(Tensor::scalar(2.5)).item() == 2.5);
  CHECK(elu(Tensor::scalar(-1.0)).item() ==
        doctest::Approx(-0.6321205588285577).epsilon(1e-12));

  Tensor d = div(Tensor::from_data({2}, {6, 9}), Tensor::from_data({2}, {2, 3}));
  CHECK(d.data()[0] == 3.0);
  CHECK(d.data()[1] == 3.0);

  // scalar broadcast both sides
  Tensor t = mul(Tensor::scalar(3.0), Tensor::from_data({3}, {1, 2, 3}));
  CHECK(t.data()[2] == 9.0);
  Tensor u = sub(Tensor::from_data({3}, {1, 2, 3}), Tensor::scalar(1.0));
  CHECK(u.data()[0] == 0.0);
}

TEST_CASE("apply_elementwise dispatch and errors") {
  Tensor a = Tensor::from_data({2}, {1, 2});
  Tensor b = Tensor::from_data({3}, {1, 2, 3});
  CHECK(apply_elementwise(EltOp::Add, a, a).data()[1] == 4.0);
  CHECK(apply_elementwise(EltOp::Square, a).data()[1] == 4.0);
  CHECK_THROWS_AS(apply_elementwise(EltOp::Add, a, b), TensorError);
  CHECK_THROWS_AS(apply_elementwise(EltOp::Exp, a, a), TensorError);
  CHECK_THROWS_AS(apply_elementwise(EltOp::Add, a), TensorError);
}

TEST_CASE("mul by zero tensor has zero gradient") {
  Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
  Tensor z = Tensor::zeros({3});
  Tensor y = sum(mul(x, z));
  CHECK(y.item() == 0.0);
  auto g = grad(y, {x});
  for (double v : g[0].data()) CHECK(v == 0.0);
}

TEST_CASE("matmul values") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor r = matmul(eye, m);
  CHECK(r.data() == m.data());

  Tensor row = Tensor::from_data({1, 2}, {1, 2});
  Tensor col = Tensor::from_data({2, 1}, {3, 4});
  CHECK(matmul(row, col).item() == 11.0);

  CHECK_THROWS_AS(matmul(row, row), TensorError);
}

TEST_CASE("matmul gradient matches finite differences") {
  std::mt19937_64 rng(7);
  Tensor a = random_tensor({3, 3}, rng);
  Tensor b = random_tensor({3, 3}, rng);
  auto value = [&] {
    NoGradGuard ng;
    return sum(matmul(a, b)).item();
  };
  auto ga = grad(sum(matmul(a, b)), {a})[0];
  CHECK(max_rel_err(ga.data(), fd_grad(value, a)) < 1e-6);
}

TEST_CASE("simple analytic gradients") {
  Tensor x = Tensor::scalar(3.0, true);
  auto g = grad(sum(square(x)), {x});
  CHECK(g[0].item() == doctest::Approx(6.0).epsilon(1e-12));

  // d2(x^3)/dx2 at 2 = 12 via grad of grad
  Tensor x2 = Tensor::scalar(2.0, true);
  Tensor y = mul(square(x2), x2);
  auto g1 = grad(y, {x2}, /*create_record=*/true);
  auto g2 = grad(sum(g1[0]), {x2});
  CHECK(g2[0].item() == doctest::Approx(12.0).epsilon(1e-10));
}

TEST_CASE("reductions") {
  CHECK(sum(Tensor::from_data({3}, {1, 2, 3})).item() == 6.0);
  CHECK(mean(Tensor::from_data({2}, {2, 4})).item() == 3.0);

  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  auto g = grad(mean(square(x)), {x})[0];
  CHECK(g.data()[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(g.data()[1] == doctest::Approx(2.0).epsilon(1e-12));

  Tensor m = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor c = reduce(ReduceOp::Sum, m, 0);
  CHECK(c.shape() == Shape{3});
  CHECK(c.data()[0] == 5.0);
  Tensor r = reduce(ReduceOp::Mean, m, 1);
  CHECK(r.shape() == Shape{2});
  CHECK(r.data()[1] == 5.0);
  CHECK_THROWS_AS(reduce(ReduceOp::Sum, m, 2), TensorError);
}

TEST_CASE("two layer perceptron gradient vs finite differences") {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({4, 3}, rng, -1, 1, false);
  Tensor t = random_tensor({4, 2}, rng, -1, 1, false);
  Tensor w1 = random_tensor({3, 5}, rng, -1, 1);
  Tensor w2 = random_tensor({5, 2}, rng, -1, 1);
  auto loss = [&]() {
    return mean(square(sub(matmul(elu(matmul(x, w1)), w2), t)));
  };
  auto value = [&] {
    NoGradGuard ng;
    return loss().item();
  };
  auto gs = grad(loss(), {w1, w2});
  CHECK(max_rel_err(gs[0].data(), fd_grad(value, w1)) < 1e-5);
  CHECK(max_rel_err(gs[1].data(), fd_grad(value, w2)) < 1e-5);
}

TEST_CASE("first order finite difference property suite") {
  std::mt19937_64 rng(1234);
  int cases = 0;
  for (int rep = 0; rep < 20; ++rep) {
    Tensor a = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({2, 3}, rng);
    Tensor v = random_tensor({3}, rng);
    Tensor m = random_tensor({3, 2}, rng);

    struct Case {
      const char* name;
      std::function<Tensor()> f;
    };
    const std::vector<Case> suite = {
        {"add", [&] { return sum(add(a, b)); }},
        {"sub", [&] { return mean(sub(a, b)); }},
        {"mul", [&] { return sum(mul(a, b)); }},
        {"div", [&] { return sum(div(a, add(square(b), 1.0))); }},
        {"neg", [&] { return sum(neg(a)); }},
        {"exp", [&] { return sum(exp(a)); }},
        {"square", [&] { return sum(square(a)); }},
        {"elu", [&] { return sum(elu(a)); }},
        {"matmul", [&] { return sum(matmul(a, m)); }},
        {"transpose", [&] { return sum(mul(transpose(a), m)); }},
        {"reshape", [&] { return sum(square(reshape(a, {3, 2}))); }},
        {"reduce0", [&] { return sum(square(reduce(ReduceOp::Sum, a, 0))); }},
        {"reduce1", [&] { return sum(square(reduce(ReduceOp::Mean, a, 1))); }},
        {"add_rowvec", [&] { return sum(square(add_rowvec(a, v))); }},
        {"mul_rowvec", [&] { return sum(square(mul_rowvec(a, v))); }},
        {"concat", [&] { return sum(square(concat_cols(a, b))); }},
        {"slice", [&] { return sum(square(slice_cols(a, 1, 3))); }},
        {"mixed", [&] { return mean(elu(mul(a, exp(mul(b, 0.3))))); }},
    };
    for (const auto& c : suite) {
      for (Tensor* leaf : {&a, &b, &v, &m}) {
        auto out = c.f();
        // skip leaves the case does not touch
        std::vector<Tensor> ins{*leaf};
        Tensor g;
        try {
          g = grad(out, ins)[0];
        } catch (const TensorError&) {
          continue;
        }
        auto value = [&] {
          NoGradGuard ng;
          return c.f().item();
        };
        const double err = max_rel_err(g.data(), fd_grad(value, *leaf));
        INFO(c.name);
        CHECK(err < 1e-5);
        ++cases;
      }
    }
  }
  CHECK(cases >= 100);
}

TEST_CASE("second order matches finite differences of first gradient") {
  std::mt19937_64 rng(99);
  for (int rep = 0; rep < 10; ++rep) {
    Tensor a = random_tensor({2, 2}, rng, -1.5, 1.5);
    Tensor m = random_tensor({2, 2}, rng, -1.5, 1.5);
    auto scalar_fn = [&] {
      return mean(square(elu(matmul(a, m))));
    };
    // engine second derivative: d/da_i of g_sum where g_sum = sum(grad(f, a))
    auto g1 = grad(scalar_fn(), {a}, true)[0];
    auto g2 = grad(sum(g1), {a})[0];
    auto value = [&] {
      // value of sum(grad f) at current a
      auto g = grad(scalar_fn(), {a}, false)[0];
      return sum(g).item();
    };
    const double err = max_rel_err(g2.data(), fd_grad(value, a, 1e-5));
    CHECK(err < 1e-4);
  }
}

TEST_CASE("second order through exp and reduce") {
  std::mt19937_64 rng(5);
  Tensor a = random_tensor({4}, rng, -1, 1);
  auto f = [&] { return sum(exp(mul(square(a), 0.5))); };
  auto g1 = grad(f(), {a}, true)[0];
  auto g2 = grad(sum(g1), {a})[0];
  auto value = [&] { return sum(grad(f(), {a}, false)[0]).item(); };
  CHECK(max_rel_err(g2.data(), fd_grad(value, a)) < 1e-4);
}

TEST_CASE("gradient linearity") {
  std::mt19937_64 rng(21);
  Tensor x = random_tensor({5}, rng);
  auto f = [&] { return sum(square(x)); };
  auto g = [&] { return sum(exp(mul(x, 0.5))); };
  const double ca = 1.7, cb = -0.6;
  auto combined = grad(add(mul(f(), ca), mul(g(), cb)), {x})[0];
  auto gf = grad(f(), {x})[0];
  auto gg = grad(g(), {x})[0];
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double want = ca * gf.data()[i] + cb * gg.data()[i];
    CHECK(std::abs(combined.data()[i] - want) < 1e-12);
  }
}

TEST_CASE("operations do not mutate inputs") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4}, true);
  const auto snapshot = a.data();
  Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  (void)add(a, b);
  (void)mul(a, b);
  (void)matmul(a, b);
  (void)elu(a);
  (void)reduce(ReduceOp::Mean, a, 1);
  auto g = grad(sum(square(a)), {a});
  CHECK(a.data() == snapshot);
}

TEST_CASE("grad error contract") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  Tensor y = Tensor::from_data({2}, {3, 4}, true);
  Tensor out = square(x);
  CHECK_THROWS_AS(grad(out, {x}), TensorError);  // non-scalar output
  Tensor s = sum(out);
  CHECK_THROWS_AS(grad(s, {y}), TensorError);  // y not in record
  Tensor c = Tensor::from_data({2}, {1, 1}, false);
  CHECK_THROWS_AS(grad(s, {c}), TensorError);  // constants have no gradient
  // output == input is fine
  Tensor z = Tensor::scalar(4.0, true);
  CHECK(grad(z, {z})[0].item() == 1.0);
}

TEST_CASE("gather and scatter are adjoint and match finite differences") {
  std::mt19937_64 rng(31);
  auto idx = std::make_shared<std::vector<std::uint32_t>>(
      std::vector<std::uint32_t>{2, 0, 2, 1});
  Tensor x = random_tensor({3, 2}, rng);
  Tensor w = random_tensor({4, 2}, rng, -1, 1, false);

  auto f = [&] { return sum(mul(gather_rows(x, idx, 1, 3), w)); };
  auto g = grad(f(), {x})[0];
  auto value = [&] {
    NoGradGuard ng;
    return f().item();
  };
  CHECK(max_rel_err(g.data(), fd_grad(value, x)) < 1e-6);

  Tensor y = random_tensor({4, 2}, rng);
  auto f2 = [&] { return sum(square(scatter_add_rows(y, idx, 1, 3))); };
  auto g2 = grad(f2(), {y})[0];
  auto value2 = [&] {
    NoGradGuard ng;
    return f2().item();
  };
  CHECK(max_rel_err(g2.data(), fd_grad(value2, y)) < 1e-6);

  // batched blocks
  Tensor xb = random_tensor({6, 2}, rng);
  auto fb = [&] { return sum(square(gather_rows(xb, idx, 2, 3))); };
  auto gb = grad(fb(), {xb})[0];
  auto valueb = [&] {
    NoGradGuard ng;
    return fb().item();
  };
  CHECK(max_rel_err(gb.data(), fd_grad(valueb, xb)) < 1e-6);
}

TEST_CASE("monet_agg matches a naive loop and finite differences") {
  std::mt19937_64 rng(41);
  const std::size_t n = 5, k = 3, f = 2, blocks = 2;
  auto src = std::make_shared<std::vector<std::uint32_t>>(
      std::vector<std::uint32_t>{0, 1, 2, 3, 4, 1, 0});
  auto dst = std::make_shared<std::vector<std::uint32_t>>(
      std::vector<std::uint32_t>{1, 0, 1, 2, 3, 4, 0});
  Tensor feats = random_tensor({blocks * n, f}, rng);
  Tensor w = random_tensor({src->size(), k}, rng);

  Tensor out = monet_agg(feats, w, src, dst, blocks, n);
  // naive reference
  std::vector<double> ref(blocks * n * k * f, 0.0);
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t e = 0; e < src->size(); ++e)
      for (std::size_t kk = 0; kk < k; ++kk)
        for (std::size_t j = 0; j < f; ++j)
          ref[(b * n + (*dst)[e]) * k * f + kk * f + j] +=
              w.data()[e * k + kk] * feats.data()[(b * n + (*src)[e]) * f + j];
  for (std::size_t i = 0; i < ref.size(); ++i)
    CHECK(out.data()[i] == doctest::Approx(ref[i]).epsilon(1e-13));

  Tensor probe = random_tensor({blocks * n, k * f}, rng, -1, 1, false);
  auto loss = [&] { return sum(mul(monet_agg(feats, w, src, dst, blocks, n), probe)); };
  auto gs = grad(loss(), {feats, w});
  auto value = [&] {
    NoGradGuard ng;
    return loss().item();
  };
  CHECK(max_rel_err(gs[0].data(), fd_grad(value, feats)) < 1e-6);
  CHECK(max_rel_err(gs[1].data(), fd_grad(value, w)) < 1e-6);
}

TEST_CASE("monet_agg_t and monet_edge_dot match finite differences") {
  std::mt19937_64 rng(43);
  const std::size_t n = 4, k = 2, f = 3, blocks = 1;
  auto src = std::make_shared<std::vector<std::uint32_t>>(
      std::vector<std::uint32_t>{0, 1, 2, 3, 2});
  auto dst = std::make_shared<std::vector<std::uint32_t>>(
      std::vector<std::uint32_t>{1, 2, 3, 0, 0});
  Tensor big = random_tensor({n, k * f}, rng);
  Tensor w = random_tensor({src->size(), k}, rng);
  Tensor x = random_tensor({n, f}, rng);

  auto loss_t = [&] { return sum(square(monet_agg_t(big, w, src, dst, blocks, n))); };
  auto gs = grad(loss_t(), {big, w});
  auto value_t = [&] {
    NoGradGuard ng;
    return loss_t().item();
  };
  CHECK(max_rel_err(gs[0].data(), fd_grad(value_t, big)) < 1e-6);
  CHECK(max_rel_err(gs[1].data(), fd_grad(value_t, w)) < 1e-6);

  auto loss_d = [&] { return sum(square(monet_edge_dot(big, x, src, dst, blocks, n))); };
  auto gd = grad(loss_d(), {big, x});
  auto value_d = [&] {
    NoGradGuard ng;
    return loss_d().item();
  };
  CHECK(max_rel_err(gd[0].data(), fd_grad(value_d, big)) < 1e-6);
  CHECK(max_rel_err(gd[1].data(), fd_grad(value_d, x)) < 1e-6);
}

TEST_CASE("gauss_weights values and derivatives") {
  // one edge at mu gives weight 1
  Tensor eattr = Tensor::from_data({2, 2}, {0.3, -0.4, 1.0, 0.0});
  Tensor mu = Tensor::from_data({1, 2}, {0.3, -0.4}, true);
  Tensor ls = Tensor::zeros({1, 2}, true);
  Tensor w = gauss_weights(eattr, mu, ls);
  CHECK(w.data()[0] == doctest::Approx(1.0).epsilon(1e-15));
  // second edge: distance (0.7, 0.4) -> exp(-0.5*(0.49+0.16))
  CHECK(w.data()[1] == doctest::Approx(std::exp(-0.5 * 0.65)).epsilon(1e-12));

  std::mt19937_64 rng(53);
  Tensor e2 = random_tensor({6, 2}, rng, -1, 1, false);
  Tensor mu2 = random_tensor({3, 2}, rng, -0.5, 0.5);
  Tensor ls2 = random_tensor({3, 2}, rng, -0.3, 0.3);
  auto loss = [&] { return sum(square(gauss_weights(e2, mu2, ls2))); };
  auto gs = grad(loss(), {mu2, ls2});
  auto value = [&] {
    NoGradGuard ng;
    return loss().item();
  };
  CHECK(max_rel_err(gs[0].data(), fd_grad(value, mu2)) < 1e-6);
  CHECK(max_rel_err(gs[1].data(), fd_grad(value, ls2)) < 1e-6);

  // second order through the gaussian
  auto g1 = grad(loss(), {mu2}, true)[0];
  auto g2 = grad(sum(g1), {mu2})[0];
  auto value2 = [&] { return sum(grad(loss(), {mu2}, false)[0]).item(); };
  CHECK(max_rel_err(g2.data(), fd_grad(value2, mu2)) < 1e-4);
}

TEST_CASE("scale_rows applies constant per-row factors") {
  auto s = std::make_shared<std::vector<double>>(std::vector<double>{2.0, 0.0, -1.0});
  Tensor x = Tensor::from_data({3, 2}, {1, 1, 5, 5, 2, 3}, true);
  Tensor y = scale_rows(x, s);
  CHECK(y.data()[0] == 2.0);
  CHECK(y.data()[2] == 0.0);
  CHECK(y.data()[5] == -3.0);
  auto g = grad(sum(y), {x})[0];
  CHECK(g.data()[0] == 2.0);
  CHECK(g.data()[3] == 0.0);
  CHECK(g.data()[4] == -1.0);

  // tiled across two blocks
  Tensor xb = Tensor::ones({6, 1});
  Tensor yb = scale_rows(xb, s);
  CHECK(yb.data()[3] == 2.0);
}

TEST_CASE("no graph nodes leak after tensors are dropped") {
  const std::size_t before = live_op_nodes();
  {
    std::mt19937_64 rng(61);
    Tensor x = random_tensor({8, 8}, rng);
    Tensor acc = x;
    for (int i = 0; i < 200; ++i) acc = elu(matmul(acc, x));
    auto g = grad(mean(square(acc)), {x}, true);
    auto g2 = grad(sum(g[0]), {x});
    CHECK(g2[0].numel() == 64);
  }
  CHECK(live_op_nodes() == before);
}

TEST_CASE("deep graphs tear down without stack overflow") {
  const std::size_t before = live_op_nodes();
  {
    Tensor x = Tensor::scalar(1.0, true);
    Tensor acc = x;
    for (int i = 0; i < 200000; ++i) acc = mul(acc, 1.0000001);
    CHECK(acc.item() > 1.0);
  }
  CHECK(live_op_nodes() == before);
}
