#include <doctest.h>
#include <memory>

#include <cmath>

#include "oracle_utils.hpp"
#include "stp/ops.hpp"

using namespace stp;

TEST_CASE("matmul identity and hand-checked product") {
  auto eye = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
  auto a = Tensor<double>::from_data({2, 2}, {1, 2, 3, 4});
  auto prod = matmul(eye, a);
  for (int i = 0; i < 4; ++i) CHECK(prod.at(i) == a.at(i));

  auto b = Tensor<double>::from_data({2, 1}, {5, 6});
  auto c = matmul(a, b);
  CHECK(c.at(0) == doctest::Approx(17.0));
  CHECK(c.at(1) == doctest::Approx(39.0));
}

TEST_CASE("matmul matches the naive oracle on random shapes") {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const int m = 1 + rng.uniform_int(6), k = 1 + rng.uniform_int(6), n = 1 + rng.uniform_int(6);
    auto a = oracle::random_tensor<double>({m, k}, rng, 1.0, false);
    auto b = oracle::random_tensor<double>({k, n}, rng, 1.0, false);
    const auto expect = oracle::naive_matmul(
        std::vector<double>(a.values()), std::vector<double>(b.values()), m, k, n);
    auto got = matmul(a, b);
    for (int64_t i = 0; i < got.size(); ++i)
      CHECK(got.at(i) == doctest::Approx(expect[static_cast<size_t>(i)]).epsilon(1e-12));
  }
}

TEST_CASE("matmul shape error names both shapes") {
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({2, 3});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("(2,3)"), ShapeError);
}

TEST_CASE("matmul backward against finite differences") {
  Rng rng(11);
  auto a = oracle::random_tensor<double>({3, 4}, rng);
  auto b = oracle::random_tensor<double>({4, 2}, rng);
  const double worst = oracle::check_gradients<double>(
      [&]() { return sum(matmul(a, b)); }, {a, b}, 6, rng);
  CHECK(worst < 1e-5);
}

TEST_CASE("layer_norm constant row is zeroed by the eps guard") {
  auto x = Tensor<double>::filled({2, 5}, 3.7);
  auto gamma = Tensor<double>::filled({5}, 1.0);
  auto beta = Tensor<double>::zeros({5});
  auto y = layer_norm(x, gamma, beta, 1e-6);
  for (int64_t i = 0; i < y.size(); ++i) CHECK(y.at(i) == doctest::Approx(0.0));
}

TEST_CASE("layer_norm two-point row normalizes to -1, 1") {
  auto x = Tensor<double>::from_data({1, 2}, {1, 3});
  auto gamma = Tensor<double>::filled({2}, 1.0);
  auto beta = Tensor<double>::zeros({2});
  auto y = layer_norm(x, gamma, beta, 1e-12);
  CHECK(y.at(0) == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(y.at(1) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("layer_norm matches the naive oracle rowwise") {
  Rng rng(21);
  auto x = oracle::random_tensor<double>({4, 7}, rng, 2.0, false);
  auto gamma = Tensor<double>::filled({7}, 1.0);
  auto beta = Tensor<double>::zeros({7});
  auto y = layer_norm(x, gamma, beta, 1e-6);
  for (int r = 0; r < 4; ++r) {
    std::vector<double> row(x.data() + r * 7, x.data() + (r + 1) * 7);
    const auto expect = oracle::naive_layer_norm_row(row, 1e-6);
    for (int c = 0; c < 7; ++c)
      CHECK(y.at(r * 7 + c) == doctest::Approx(expect[static_cast<size_t>(c)]).epsilon(1e-10));
  }
}

TEST_CASE("layer_norm gradient against finite differences") {
  Rng rng(31);
  auto x = oracle::random_tensor<double>({3, 6}, rng);
  auto gamma = oracle::random_tensor<double>({6}, rng, 0.5);
  auto beta = oracle::random_tensor<double>({6}, rng, 0.5);
  auto weights = oracle::random_tensor<double>({3, 6}, rng, 1.0, false);
  const double worst = oracle::check_gradients<double>(
      [&]() { return sum(mul(layer_norm(x, gamma, beta, 1e-6), weights)); }, {x, gamma, beta}, 6,
      rng);
  CHECK(worst < 1e-5);
}

TEST_CASE("softmax uniform row, hand case, and shift invariance") {
  auto u = softmax(Tensor<double>::filled({1, 4}, 0.3));
  for (int i = 0; i < 4; ++i) CHECK(u.at(i) == doctest::Approx(0.25));

  auto x = Tensor<double>::from_data({1, 2}, {0.0, std::log(3.0)});
  auto y = softmax(x);
  CHECK(y.at(0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(y.at(1) == doctest::Approx(0.75).epsilon(1e-12));

  // dyadic inputs + dyadic shift keep x + c exact, so invariance is bitwise
  Rng rng(41);
  std::vector<double> vals(15);
  for (auto& v : vals) v = static_cast<double>(rng.uniform_int(16384) - 8192) / 1024.0;
  auto a = Tensor<double>::from_data({3, 5}, std::vector<double>(vals));
  for (auto& v : vals) v += 13.25;
  auto b = Tensor<double>::from_data({3, 5}, std::move(vals));
  auto sa = softmax(a), sb = softmax(b);
  for (int64_t i = 0; i < sa.size(); ++i) CHECK(sa.at(i) == sb.at(i));
}

TEST_CASE("softmax rows sum to one and stay inside (0,1)") {
  Rng rng(43);
  auto x = oracle::random_tensor<double>({8, 9}, rng, 3.0, false);
  auto y = softmax(x);
  for (int r = 0; r < 8; ++r) {
    double sum = 0;
    for (int c = 0; c < 9; ++c) {
      const double v = y.at(r * 9 + c);
      CHECK(v > 0.0);
      CHECK(v < 1.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("softmax along a non-trailing axis") {
  auto x = Tensor<double>::from_data({2, 3}, {1, 5, 2, 3, 5, 0});
  auto y = softmax(x, 0);  // columns
  for (int c = 0; c < 3; ++c) {
    const auto col = oracle::naive_softmax_row({x.at(c), x.at(3 + c)});
    CHECK(y.at(c) == doctest::Approx(col[0]).epsilon(1e-12));
    CHECK(y.at(3 + c) == doctest::Approx(col[1]).epsilon(1e-12));
  }
}

TEST_CASE("softmax gradient against finite differences") {
  Rng rng(47);
  auto x = oracle::random_tensor<double>({2, 6}, rng);
  auto w = oracle::random_tensor<double>({2, 6}, rng, 1.0, false);
  const double worst = oracle::check_gradients<double>(
      [&]() { return sum(mul(softmax(x), w)); }, {x}, 8, rng);
  CHECK(worst < 1e-5);
}

TEST_CASE("gelu anchors and asymptotes (tanh approximation)") {
  auto x = Tensor<double>::from_data({3}, {0.0, -10.0, 10.0});
  auto y = gelu(x);
  CHECK(y.at(0) == 0.0);
  CHECK(std::abs(y.at(1)) < 1e-6);
  CHECK(y.at(2) == doctest::Approx(10.0).epsilon(1e-6));
}

TEST_CASE("gelu gradient against finite differences") {
  Rng rng(53);
  auto x = oracle::random_tensor<double>({10}, rng, 2.0);
  const double worst = oracle::check_gradients<double>([&]() { return sum(gelu(x)); }, {x}, 10, rng);
  CHECK(worst < 1e-4);
}

TEST_CASE("attention with a single key returns the value row for every query") {
  Rng rng(61);
  auto q = oracle::random_tensor<double>({2, 3, 4}, rng, 1.0, false);
  auto k = oracle::random_tensor<double>({2, 1, 4}, rng, 1.0, false);
  auto v = oracle::random_tensor<double>({2, 1, 4}, rng, 1.0, false);
  auto out = attention(q, k, v);
  for (int h = 0; h < 2; ++h)
    for (int i = 0; i < 3; ++i)
      for (int d = 0; d < 4; ++d)
        CHECK(out.at((h * 3 + i) * 4 + d) == doctest::Approx(v.at(h * 4 + d)));
}

TEST_CASE("attention with identical keys averages the values") {
  Rng rng(67);
  auto q = oracle::random_tensor<double>({1, 2, 3}, rng, 1.0, false);
  std::vector<double> krow{0.3, -1.2, 0.7};
  std::vector<double> kbuf;
  for (int j = 0; j < 4; ++j) kbuf.insert(kbuf.end(), krow.begin(), krow.end());
  auto k = Tensor<double>::from_data({1, 4, 3}, std::move(kbuf));
  auto v = oracle::random_tensor<double>({1, 4, 3}, rng, 1.0, false);
  auto out = attention(q, k, v);
  for (int i = 0; i < 2; ++i)
    for (int d = 0; d < 3; ++d) {
      double mean = 0;
      for (int j = 0; j < 4; ++j) mean += v.at(j * 3 + d);
      mean /= 4;
      CHECK(out.at(i * 3 + d) == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("attention two-token case matches the manual oracle") {
  Rng rng(71);
  auto q = oracle::random_tensor<double>({1, 2, 2}, rng, 1.0, false);
  auto k = oracle::random_tensor<double>({1, 2, 2}, rng, 1.0, false);
  auto v = oracle::random_tensor<double>({1, 2, 2}, rng, 1.0, false);
  const auto expect = oracle::naive_attention(std::vector<double>(q.values()),
                                              std::vector<double>(k.values()),
                                              std::vector<double>(v.values()), 2, 2, 2);
  auto out = attention(q, k, v);
  for (int64_t i = 0; i < out.size(); ++i)
    CHECK(out.at(i) == doctest::Approx(expect[static_cast<size_t>(i)]).epsilon(1e-12));
}

TEST_CASE("attention gradients against finite differences at 10 random points") {
  Rng rng(73);
  auto q = oracle::random_tensor<double>({2, 3, 4}, rng, 0.7);
  auto k = oracle::random_tensor<double>({2, 5, 4}, rng, 0.7);
  auto v = oracle::random_tensor<double>({2, 5, 4}, rng, 0.7);
  auto w = oracle::random_tensor<double>({2, 3, 4}, rng, 1.0, false);
  const double worst = oracle::check_gradients<double>(
      [&]() { return sum(mul(attention(q, k, v), w)); }, {q, k, v}, 10, rng);
  CHECK(worst < 1e-5);
}

TEST_CASE("split/merge heads round-trip and differentiate") {
  Rng rng(79);
  auto x = oracle::random_tensor<double>({5, 6}, rng);
  auto rt = merge_heads(split_heads(x, 3));
  for (int64_t i = 0; i < x.size(); ++i) CHECK(rt.at(i) == x.at(i));
  auto w = oracle::random_tensor<double>({3, 5, 2}, rng, 1.0, false);
  const double worst = oracle::check_gradients<double>(
      [&]() { return sum(mul(split_heads(x, 3), w)); }, {x}, 8, rng);
  CHECK(worst < 1e-5);
}

TEST_CASE("gather/concat/repeat rows: forward and duplicate-index gradients") {
  Rng rng(83);
  auto x = oracle::random_tensor<double>({4, 3}, rng);
  auto g = gather_rows(x, {2, 0, 2});
  for (int c = 0; c < 3; ++c) {
    CHECK(g.at(c) == x.at(2 * 3 + c));
    CHECK(g.at(3 + c) == x.at(c));
    CHECK(g.at(6 + c) == x.at(2 * 3 + c));
  }
  auto loss = sum(gather_rows(x, {2, 0, 2}));
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(1.0));
  CHECK(x.grad()[2 * 3] == doctest::Approx(2.0));  // duplicated row accumulates twice
  CHECK(x.grad()[1 * 3] == doctest::Approx(0.0));

  auto a = oracle::random_tensor<double>({2, 3}, rng);
  auto b = oracle::random_tensor<double>({1, 3}, rng);
  auto cat = concat_rows(a, repeat_row(b, 4));
  CHECK(cat.dim(0) == 6);
  auto w = oracle::random_tensor<double>({6, 3}, rng, 1.0, false);
  const double worst = oracle::check_gradients<double>(
      [&]() { return sum(mul(concat_rows(a, repeat_row(b, 4)), w)); }, {a, b}, 6, rng);
  CHECK(worst < 1e-5);
}

TEST_CASE("gather_rows rejects out-of-range indices") {
  auto x = Tensor<float>::zeros({3, 2});
  CHECK_THROWS_AS(gather_rows(x, {3}), ShapeError);
}

TEST_CASE("backward of sum gives ones; mse mean-reduction hand case") {
  auto x = Tensor<double>::from_data({2, 2}, {1, 2, 3, 4}, true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  // loss = mean((x - 0)^2), x = [1, 2]  =>  grad = 2x/n = [1, 2]
  auto x2 = Tensor<double>::from_data({2}, {1, 2}, true);
  auto zero = Tensor<double>::zeros({2});
  backward(mse(x2, zero));
  CHECK(x2.grad()[0] == doctest::Approx(1.0));
  CHECK(x2.grad()[1] == doctest::Approx(2.0));
}

TEST_CASE("backward rejects non-scalar losses") {
  auto x = Tensor<double>::from_data({2}, {1, 2}, true);
  auto y = scale(x, 2.0);
  CHECK_THROWS_AS(backward(y), ValueError);
}

TEST_CASE("backward visits shared subgraphs once and accumulates correctly") {
  auto x = Tensor<double>::from_data({3}, {1.0, -2.0, 0.5}, true);
  backward(sum(mul(x, x)));  // d/dx sum(x^2) = 2x
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(-4.0));
  CHECK(x.grad()[2] == doctest::Approx(1.0));
}

TEST_CASE("backward is bit-deterministic across repeated runs") {
  Rng rng(89);
  auto make_inputs = [](uint64_t seed) {
    Rng r(seed);
    return std::pair(oracle::random_tensor<float>({4, 4}, r), oracle::random_tensor<float>({4, 4}, r));
  };
  auto [a1, b1] = make_inputs(5);
  auto [a2, b2] = make_inputs(5);
  auto run = [](Tensor<float>& a, Tensor<float>& b) {
    auto gamma = Tensor<float>::filled({4}, 1.0f);
    auto beta = Tensor<float>::zeros({4});
    auto loss = mean(mul(gelu(layer_norm(matmul(a, b), gamma, beta, 1e-6f)), matmul(a, b)));
    backward(loss);
  };
  run(a1, b1);
  run(a2, b2);
  for (size_t i = 0; i < a1.grad().size(); ++i) CHECK(a1.grad()[i] == a2.grad()[i]);
  for (size_t i = 0; i < b1.grad().size(); ++i) CHECK(b1.grad()[i] == b2.grad()[i]);
}

TEST_CASE("non-finite op outputs are surfaced as errors, not propagated") {
  auto big = Tensor<float>::filled({2, 2}, 3e38f);
  CHECK_THROWS_AS(add(big, big), ValueError);
  auto a = Tensor<float>::filled({1, 2}, 1e30f);
  auto b = Tensor<float>::filled({2, 1}, 1e30f);
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("matmul"), ValueError);
}

TEST_CASE("softmax_cross_entropy value and gradient") {
  Rng rng(97);
  auto logits = oracle::random_tensor<double>({3, 5}, rng);
  std::vector<int> labels{1, 4, 0};
  auto loss = softmax_cross_entropy(logits, labels);
  double expect = 0;
  for (int r = 0; r < 3; ++r) {
    std::vector<double> row(logits.data() + r * 5, logits.data() + (r + 1) * 5);
    expect -= std::log(oracle::naive_softmax_row(row)[static_cast<size_t>(labels[static_cast<size_t>(r)])]);
  }
  expect /= 3;
  CHECK(loss.value() == doctest::Approx(expect).epsilon(1e-12));
  const double worst = oracle::check_gradients<double>(
      [&]() { return softmax_cross_entropy(logits, labels); }, {logits}, 10, rng);
  CHECK(worst < 1e-5);
}

TEST_CASE("NoGradGuard suppresses graph recording") {
  auto x = Tensor<double>::from_data({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = sum(mul(x, x));
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("forward and backward are independent of heap buffer alignment") {
  // Reductions must not round differently when buffers land on different
  // addresses; this is what makes training reproducible run to run.
  auto run = [](int scramble) {
    std::vector<std::unique_ptr<char[]>> junk;
    for (int i = 0; i < scramble; ++i) junk.push_back(std::make_unique<char[]>(4 + i * 12));
    Rng rng(303);
    auto x = Tensor<float>::randn({9, 24}, rng, 1.0, true);
    auto v = Tensor<float>::randn({24}, rng, 1.0, true);
    auto gamma = Tensor<float>::filled({24}, 1.0f, true);
    auto beta = Tensor<float>::zeros({24}, true);
    auto w = Tensor<float>::randn({9, 24}, rng, 1.0, false);
    auto q = Tensor<float>::randn({2, 9, 12}, rng, 1.0, true);
    auto h = layer_norm(add_rowvec(x, v), gamma, beta, 1e-6f);
    auto att = merge_heads(attention(split_heads(h, 2), q, q));
    auto loss = mean(mul(gelu(att), w));
    backward(loss);
    std::vector<float> out{loss.value()};
    for (const auto& t : {x, v, gamma, beta, q})
      out.insert(out.end(), t.grad().begin(), t.grad().end());
    return out;
  };
  const auto base = run(0);
  for (int s : {1, 5, 17, 31}) {
    const auto other = run(s);
    REQUIRE(other.size() == base.size());
    for (size_t i = 0; i < base.size(); ++i) CHECK(other[i] == base[i]);
  }
}

TEST_CASE("elementwise ops differentiate (property over 10 random points)") {
  Rng rng(101);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = oracle::random_tensor<double>({3, 3}, rng);
    auto b = oracle::random_tensor<double>({3, 3}, rng);
    const double worst = oracle::check_gradients<double>(
        [&]() { return mean(mul(gelu(sub(add(a, b), scale(b, 0.5))), a)); }, {a, b}, 3, rng);
    CHECK(worst < 1e-5);
  }
}
