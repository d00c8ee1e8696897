#include <doctest.h>

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "jl1/ops.hpp"
#include "jl1/params.hpp"
#include "jl1/rng.hpp"
#include "jl1/tape.hpp"
#include "jl1/tensor.hpp"

using namespace jl1;
using jl1::testing::gradcheck;

namespace {

using DTensor = TensorT<double>;
using DTape = TapeT<double>;

template <typename T>
TensorT<T> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  auto t = TensorT<T>::zeros(std::move(s));
  for (auto& v : t.data) v = static_cast<T>(rng.next_range(lo, hi));
  return t;
}

// Direct-loop convolution, the oracle the GEMM path is checked against.
template <typename T>
TensorT<T> conv2d_ref(const TensorT<T>& x, const TensorT<T>& k,
                      std::int64_t s, std::int64_t p) {
  auto n = x.shape[0], ci = x.shape[1], h = x.shape[2], w = x.shape[3];
  auto co = k.shape[0], kh = k.shape[2], kw = k.shape[3];
  auto ho = (h + 2 * p - kh) / s + 1, wo = (w + 2 * p - kw) / s + 1;
  auto y = TensorT<T>::zeros({n, co, ho, wo});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t o = 0; o < co; ++o)
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          T acc = 0;
          for (std::int64_t c = 0; c < ci; ++c)
            for (std::int64_t ky = 0; ky < kh; ++ky)
              for (std::int64_t kx = 0; kx < kw; ++kx) {
                auto iy = oy * s - p + ky, ix = ox * s - p + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += x.at({b, c, iy, ix}) * k.at({o, c, ky, kx});
              }
          y.at({b, o, oy, ox}) = acc;
        }
  return y;
}

// Direct-loop transposed convolution (scatter form).
template <typename T>
TensorT<T> conv_transpose2d_ref(const TensorT<T>& x, const TensorT<T>& k,
                                std::int64_t s, std::int64_t p,
                                std::int64_t op) {
  auto n = x.shape[0], ci = x.shape[1], h = x.shape[2], w = x.shape[3];
  auto co = k.shape[1], kh = k.shape[2], kw = k.shape[3];
  auto ho = (h - 1) * s - 2 * p + kh + op, wo = (w - 1) * s - 2 * p + kw + op;
  auto y = TensorT<T>::zeros({n, co, ho, wo});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t c = 0; c < ci; ++c)
      for (std::int64_t iy = 0; iy < h; ++iy)
        for (std::int64_t ix = 0; ix < w; ++ix)
          for (std::int64_t o = 0; o < co; ++o)
            for (std::int64_t ky = 0; ky < kh; ++ky)
              for (std::int64_t kx = 0; kx < kw; ++kx) {
                auto oy = iy * s - p + ky, ox = ix * s - p + kx;
                if (oy < 0 || oy >= ho || ox < 0 || ox >= wo) continue;
                y.at({b, o, oy, ox}) +=
                    x.at({b, c, iy, ix}) * k.at({c, o, ky, kx});
              }
  return y;
}

template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape mechanics.

TEST_CASE("requires_grad propagates from parents") {
  Tape tape;
  Tensor a = Tensor::full({2}, 1.0f);
  Tensor b = Tensor::full({2}, 2.0f);
  tape.watch(a, true);
  tape.watch(b, false);
  Tensor c = add(&tape, a, b);
  CHECK(tape.requires_grad(c.node));
  Tensor d = mul(&tape, b, b);  // only dead parents
  CHECK_FALSE(tape.requires_grad(d.node));
}

TEST_CASE("backward consumes the tape") {
  Tape tape;
  Tensor a = Tensor::scalar(3.0f);
  tape.watch(a, true);
  Tensor y = mul(&tape, a, a);
  tape.backward(y.node);
  CHECK(tape.consumed());
  CHECK(tape.grad(a.node)[0] == doctest::Approx(6.0f));
  CHECK_THROWS_AS(tape.backward(y.node), contract_error);
  Tensor b = Tensor::scalar(1.0f);
  CHECK_THROWS_AS(tape.watch(b), contract_error);
}

TEST_CASE("backward root must be scalar-shaped") {
  Tape tape;
  Tensor a = Tensor::full({3}, 1.0f);
  tape.watch(a, true);
  Tensor y = scale(&tape, a, 2.0f);
  CHECK_THROWS_AS(tape.backward(y.node), contract_error);
}

TEST_CASE("untouched leaves report zero gradient") {
  Tape tape;
  Tensor a = Tensor::scalar(2.0f);
  Tensor b = Tensor::scalar(5.0f);
  tape.watch(a, true);
  tape.watch(b, true);
  Tensor y = mul(&tape, a, a);
  tape.backward(y.node);
  CHECK(tape.grad(b.node)[0] == 0.0f);
}

TEST_CASE("tensors from another tape are treated as constants") {
  Tape old_tape;
  Tensor a = Tensor::scalar(2.0f);
  old_tape.watch(a, true);  // a.node now points into old_tape

  Tape tape;
  Tensor b = Tensor::scalar(3.0f);
  tape.watch(b, true);
  Tensor y = mul(&tape, a, b);  // a's stale node id must not be trusted
  tape.backward(y.node);
  CHECK(tape.grad(b.node)[0] == doctest::Approx(2.0f));
}

TEST_CASE("each adjoint runs once even with fan-out") {
  // y = (a+a) + (a*a): gradient 2 + 2a, exercised through shared parents.
  Tape tape;
  Tensor a = Tensor::scalar(3.0f);
  tape.watch(a, true);
  Tensor s = add(&tape, a, a);
  Tensor m = mul(&tape, a, a);
  Tensor y = add(&tape, s, m);
  tape.backward(y.node);
  CHECK(tape.grad(a.node)[0] == doctest::Approx(2.0f + 2.0f * 3.0f));
}

// ---------------------------------------------------------------------------
// Forward oracles.

TEST_CASE("elementwise forward values") {
  Tensor a({2, 2}, {1, -2, 3, -4});
  Tensor b({2, 2}, {5, 6, 7, 8});
  CHECK(add<float>(nullptr, a, b).data == std::vector<float>{6, 4, 10, 4});
  CHECK(sub<float>(nullptr, a, b).data == std::vector<float>{-4, -8, -4, -12});
  CHECK(mul<float>(nullptr, a, b).data == std::vector<float>{5, -12, 21, -32});
  CHECK(scale<float>(nullptr, a, 2.0f).data == std::vector<float>{2, -4, 6, -8});
  CHECK(add_scalar<float>(nullptr, a, 1.0f).data == std::vector<float>{2, -1, 4, -3});
  CHECK(jl1::abs<float>(nullptr, a).data == std::vector<float>{1, 2, 3, 4});
  CHECK(relu<float>(nullptr, a).data == std::vector<float>{1, 0, 3, 0});
  CHECK(clamp<float>(nullptr, a, -2.5f, 2.5f).data ==
        std::vector<float>{1, -2, 2.5f, -2.5f});
  CHECK_THROWS_AS(add<float>(nullptr, a, Tensor::zeros({3})), dimension_error);
  CHECK_THROWS_AS(clamp<float>(nullptr, a, 1.0f, 1.0f), contract_error);
}

TEST_CASE("sigmoid is stable in both tails") {
  Tensor x({4}, {0.0f, 1.0f, 500.0f, -500.0f});
  Tensor y = sigmoid<float>(nullptr, x);
  CHECK(y[0] == doctest::Approx(0.5));
  CHECK(y[1] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
  CHECK(y[2] == 1.0f);
  CHECK(y[3] == 0.0f);
}

TEST_CASE("non-finite op outputs raise numeric_error") {
  Tensor big = Tensor::scalar(1000.0f);
  CHECK_THROWS_AS(jl1::exp<float>(nullptr, big), numeric_error);  // overflows float
  Tensor zero = Tensor::scalar(0.0f);
  CHECK_THROWS_AS(jl1::log<float>(nullptr, zero), numeric_error);
  Tensor neg = Tensor::scalar(-1.0f);
  CHECK_THROWS_AS(jl1::log<float>(nullptr, neg), numeric_error);
}

TEST_CASE("matmul matches hand values") {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b({3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor c = matmul<float>(nullptr, a, b);
  CHECK(c.shape == Shape{2, 2});
  CHECK(c.data == std::vector<float>{58, 64, 139, 154});
  CHECK_THROWS_AS(matmul<float>(nullptr, a, a), dimension_error);
}

TEST_CASE("reductions and biases") {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(reduce_sum<float>(nullptr, x).data == std::vector<float>{21});
  CHECK(reduce_sum_rows<float>(nullptr, x).data == std::vector<float>{6, 15});
  Tensor b({3}, {10, 20, 30});
  CHECK(add_row_bias<float>(nullptr, x, b).data ==
        std::vector<float>{11, 22, 33, 14, 25, 36});
  Tensor img({1, 2, 1, 2}, {1, 2, 3, 4});
  Tensor cb({2}, {10, 20});
  CHECK(add_channel_bias<float>(nullptr, img, cb).data ==
        std::vector<float>{11, 12, 23, 24});
  Tensor r = reshape<float>(nullptr, x, {3, 2});
  CHECK(r.shape == Shape{3, 2});
  CHECK(r.data == x.data);
  CHECK_THROWS_AS(reshape<float>(nullptr, x, {4, 2}), dimension_error);
}

TEST_CASE("conv2d all-ones 4x4 stride 2 pad 1 gives 9 everywhere") {
  // Each 4x4 window anchored at stride-2 positions with pad 1 clips to a
  // 3x3 in-bounds patch, so every output is 9.
  Tensor x = Tensor::full({1, 1, 4, 4}, 1.0f);
  Tensor k = Tensor::full({1, 1, 4, 4}, 1.0f);
  Tensor y = conv2d<float>(nullptr, x, k, 2, 1);
  CHECK(y.shape == Shape{1, 1, 2, 2});
  CHECK(y.data == std::vector<float>{9, 9, 9, 9});
  CHECK(max_abs_diff(y, conv2d_ref(x, k, 2, 1)) == 0.0);
}

TEST_CASE("conv2d matches direct loops on random cases") {
  Rng rng(11);
  struct Case { std::int64_t n, ci, co, h, w, k, s, p; };
  for (auto c : {Case{2, 2, 3, 5, 5, 3, 2, 1}, Case{1, 3, 2, 8, 8, 4, 2, 1},
                 Case{2, 1, 4, 7, 9, 3, 1, 0}, Case{1, 2, 2, 6, 6, 3, 3, 1}}) {
    auto x = random_tensor<float>({c.n, c.ci, c.h, c.w}, rng);
    auto k = random_tensor<float>({c.co, c.ci, c.k, c.k}, rng);
    auto y = conv2d<float>(nullptr, x, k, c.s, c.p);
    auto ref = conv2d_ref(x, k, c.s, c.p);
    CHECK(y.shape == ref.shape);
    CHECK(max_abs_diff(y, ref) < 1e-5);
  }
}

TEST_CASE("conv_transpose2d matches direct loops and shape formula") {
  Rng rng(12);
  struct Case { std::int64_t n, ci, co, h, w, k, s, p, op; };
  for (auto c : {Case{2, 2, 3, 4, 4, 4, 2, 1, 0}, Case{1, 3, 2, 4, 4, 3, 2, 1, 1},
                 Case{2, 2, 1, 5, 5, 3, 1, 1, 0}, Case{1, 1, 2, 3, 5, 3, 3, 0, 2}}) {
    auto x = random_tensor<float>({c.n, c.ci, c.h, c.w}, rng);
    auto k = random_tensor<float>({c.ci, c.co, c.k, c.k}, rng);
    auto y = conv_transpose2d<float>(nullptr, x, k, c.s, c.p, c.op);
    CHECK(y.shape[2] == (c.h - 1) * c.s - 2 * c.p + c.k + c.op);
    CHECK(max_abs_diff(y, conv_transpose2d_ref(x, k, c.s, c.p, c.op)) < 1e-5);
  }
  // 16x16 decoder tail uses out_pad to exactly double 4 -> 8 -> 16
  Tensor x = Tensor::zeros({1, 1, 4, 4});
  Tensor k = Tensor::zeros({1, 1, 3, 3});
  CHECK(conv_transpose2d<float>(nullptr, x, k, 2, 1, 1).shape ==
        Shape{1, 1, 8, 8});
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
  // <conv(x,K), y> == <x, convT(y, K viewed as [Co,Ci,kh,kw])>
  Rng rng(13);
  auto x = random_tensor<float>({2, 3, 8, 8}, rng);
  auto k = random_tensor<float>({4, 3, 4, 4}, rng);  // conv layout [Co,Ci]
  auto cx = conv2d<float>(nullptr, x, k, 2, 1);      // -> [2,4,4,4]
  auto y = random_tensor<float>({2, 4, 4, 4}, rng);
  // Same buffer, reinterpreted as a convT kernel [Cin=4, Cout=3].
  Tensor kt({4, 3, 4, 4}, k.data);
  auto cty = conv_transpose2d<float>(nullptr, y, kt, 2, 1, 0);  // -> [2,3,8,8]
  double lhs = 0, rhs = 0;
  for (std::int64_t i = 0; i < cx.numel(); ++i) lhs += cx[i] * y[i];
  for (std::int64_t i = 0; i < x.numel(); ++i) rhs += x[i] * cty[i];
  CHECK(std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1.0}) <
        1e-4);
}

TEST_CASE("fd_columns forward values") {
  // N=1, L=2, P=2: rows are g(z), g(z+e0), g(z+e1); eps = 0.5
  Tensor x({3, 2}, {1.0f, 2.0f, 2.0f, 2.5f, 0.0f, 3.0f});
  Tensor j = fd_columns<float>(nullptr, x, 2, 0.5f);
  CHECK(j.shape == Shape{1, 4});
  CHECK(j.data == std::vector<float>{2.0f, 1.0f, -2.0f, 2.0f});
  CHECK_THROWS_AS(fd_columns<float>(nullptr, x, 3, 0.5f), dimension_error);
}

TEST_CASE("fd_columns_from_base matches fd_columns on interleaved rows") {
  // Same quotients as above but with base rows and perturbed rows split
  // into the two-tensor layout: base [N,P], pert [N*L,P].
  Tensor base({1, 2}, {1.0f, 2.0f});
  Tensor pert({2, 2}, {2.0f, 2.5f, 0.0f, 3.0f});
  Tensor j = fd_columns_from_base<float>(nullptr, base, pert, 0.5f);
  CHECK(j.shape == Shape{1, 4});
  CHECK(j.data == std::vector<float>{2.0f, 1.0f, -2.0f, 2.0f});

  // N=2, L=2: random values, checked against the single-tensor op.
  Rng rng(14);
  auto b2 = random_tensor<float>({2, 3}, rng);
  auto p2 = random_tensor<float>({4, 3}, rng);
  Tensor stacked = Tensor::zeros({6, 3});
  for (std::int64_t n = 0; n < 2; ++n) {
    for (std::int64_t c = 0; c < 3; ++c)
      stacked[(n * 3 + 0) * 3 + c] = b2[n * 3 + c];
    for (std::int64_t r = 0; r < 2; ++r)
      for (std::int64_t c = 0; c < 3; ++c)
        stacked[(n * 3 + 1 + r) * 3 + c] = p2[(n * 2 + r) * 3 + c];
  }
  auto ja = fd_columns_from_base<float>(nullptr, b2, p2, 0.25f);
  auto jb = fd_columns<float>(nullptr, stacked, 2, 0.25f);
  CHECK(ja.shape == jb.shape);
  CHECK(ja.data == jb.data);

  // widths must agree, pert rows must be a multiple of base rows, eps > 0
  Tensor bad_w({2, 3}, std::vector<float>(6, 0.0f));
  CHECK_THROWS_AS(fd_columns_from_base<float>(nullptr, base, bad_w, 0.5f),
                  dimension_error);
  Tensor base2({2, 2}, std::vector<float>(4, 0.0f));
  Tensor bad_r({3, 2}, std::vector<float>(6, 0.0f));
  CHECK_THROWS_AS(fd_columns_from_base<float>(nullptr, base2, bad_r, 0.5f),
                  dimension_error);
  CHECK_THROWS_AS(fd_columns_from_base<float>(nullptr, base, pert, 0.0f),
                  contract_error);
}

TEST_CASE("fused conv blocks equal the unfused chain bitwise") {
  // conv2d_block / conv_transpose2d_block share the lowering and the
  // elementwise formulas with conv + add_channel_bias + activation, so
  // outputs must match exactly, not just approximately.
  Rng rng(15);
  auto x = random_tensor<float>({2, 2, 5, 5}, rng);
  auto k = random_tensor<float>({3, 2, 3, 3}, rng);
  auto b = random_tensor<float>({3}, rng);
  for (Act act : {Act::none, Act::relu, Act::sigmoid}) {
    auto fused = conv2d_block<float>(nullptr, x, k, b, 2, 1, act);
    auto ref = add_channel_bias<float>(
        nullptr, conv2d<float>(nullptr, x, k, 2, 1), b);
    if (act == Act::relu) ref = relu<float>(nullptr, ref);
    if (act == Act::sigmoid) ref = sigmoid<float>(nullptr, ref);
    CHECK(fused.shape == ref.shape);
    CHECK(fused.data == ref.data);
  }
  auto xt = random_tensor<float>({2, 3, 4, 4}, rng);
  auto kt = random_tensor<float>({3, 2, 3, 3}, rng);  // convT layout [Ci,Co]
  auto bt = random_tensor<float>({2}, rng);
  for (Act act : {Act::none, Act::relu, Act::sigmoid}) {
    auto fused = conv_transpose2d_block<float>(nullptr, xt, kt, bt, 2, 1, 1, act);
    auto ref = add_channel_bias<float>(
        nullptr, conv_transpose2d<float>(nullptr, xt, kt, 2, 1, 1), bt);
    if (act == Act::relu) ref = relu<float>(nullptr, ref);
    if (act == Act::sigmoid) ref = sigmoid<float>(nullptr, ref);
    CHECK(fused.shape == ref.shape);
    CHECK(fused.data == ref.data);
  }
  // bias length must match the output channel count
  CHECK_THROWS_AS(
      conv2d_block<float>(nullptr, x, k, random_tensor<float>({2}, rng), 2, 1,
                          Act::none),
      dimension_error);
  CHECK_THROWS_AS(
      conv_transpose2d_block<float>(nullptr, xt, kt,
                                    random_tensor<float>({3}, rng), 2, 1, 1,
                                    Act::none),
      dimension_error);
}

// ---------------------------------------------------------------------------
// Gradient checks (double precision, central differences).

TEST_CASE("gradcheck elementwise chain") {
  Rng rng(21);
  auto a = random_tensor<double>({2, 3}, rng, 0.2, 1.5);
  auto b = random_tensor<double>({2, 3}, rng, 0.2, 1.5);
  auto f = [](DTape* t, std::vector<DTensor>& xs) {
    auto m = mul(t, xs[0], xs[1]);
    auto e = jl1::exp(t, scale(t, m, 0.3));
    auto l = jl1::log(t, add_scalar(t, jl1::abs(t, xs[1]), 0.5));
    return reduce_sum(t, add(t, e, l));
  };
  CHECK(gradcheck<double>(f, {a, b}, 1e-4) < 1e-7);
}

TEST_CASE("gradcheck sub, relu, sigmoid, clamp away from kinks") {
  Rng rng(22);
  auto a = random_tensor<double>({8}, rng, -2.0, 2.0);
  // keep probes away from relu/clamp kinks
  for (auto& v : a.data)
    if (std::abs(v) < 0.05 || std::abs(std::abs(v) - 1.0) < 0.05) v += 0.1;
  auto b = random_tensor<double>({8}, rng, -2.0, 2.0);
  auto f = [](DTape* t, std::vector<DTensor>& xs) {
    auto r = relu(t, xs[0]);
    auto s = sigmoid(t, sub(t, xs[0], xs[1]));
    auto c = clamp(t, xs[0], -1.0, 1.0);
    return reduce_sum(t, add(t, add(t, r, s), mul(t, c, c)));
  };
  CHECK(gradcheck<double>(f, {a, b}, 1e-5) < 1e-7);
}

TEST_CASE("gradcheck matmul and biases") {
  Rng rng(23);
  auto a = random_tensor<double>({3, 4}, rng);
  auto b = random_tensor<double>({4, 2}, rng);
  auto bias = random_tensor<double>({2}, rng);
  auto f = [](DTape* t, std::vector<DTensor>& xs) {
    auto y = add_row_bias(t, matmul(t, xs[0], xs[1]), xs[2]);
    return reduce_sum(t, mul(t, y, y));
  };
  CHECK(gradcheck<double>(f, {a, b, bias}, 1e-4) < 1e-7);
}

TEST_CASE("gradcheck channel bias and reductions") {
  Rng rng(24);
  auto x = random_tensor<double>({2, 3, 2, 2}, rng);
  auto b = random_tensor<double>({3}, rng);
  auto f = [](DTape* t, std::vector<DTensor>& xs) {
    auto y = add_channel_bias(t, xs[0], xs[1]);
    auto rows = reduce_sum_rows(t, mul(t, y, y));  // [N]
    return reduce_sum(t, rows);
  };
  CHECK(gradcheck<double>(f, {x, b}, 1e-4) < 1e-7);
}

TEST_CASE("gradcheck conv2d wrt input and kernel") {
  Rng rng(25);
  auto x = random_tensor<double>({2, 2, 5, 5}, rng);
  auto k = random_tensor<double>({3, 2, 3, 3}, rng);
  auto f = [](DTape* t, std::vector<DTensor>& xs) {
    auto y = conv2d(t, xs[0], xs[1], 2, 1);
    return reduce_sum(t, mul(t, y, y));
  };
  CHECK(gradcheck<double>(f, {x, k}, 1e-4) < 1e-7);
}

TEST_CASE("gradcheck conv_transpose2d wrt input and kernel") {
  Rng rng(26);
  auto x = random_tensor<double>({2, 2, 3, 3}, rng);
  auto k = random_tensor<double>({2, 3, 4, 4}, rng);
  auto f = [](DTape* t, std::vector<DTensor>& xs) {
    auto y = conv_transpose2d(t, xs[0], xs[1], 2, 1, 0);
    return reduce_sum(t, mul(t, y, y));
  };
  CHECK(gradcheck<double>(f, {x, k}, 1e-4) < 1e-7);
  // with output padding
  auto g = [](DTape* t, std::vector<DTensor>& xs) {
    auto y = conv_transpose2d(t, xs[0], xs[1], 2, 1, 1);
    return reduce_sum(t, mul(t, y, y));
  };
  CHECK(gradcheck<double>(g, {x, k}, 1e-4) < 1e-7);
}

TEST_CASE("gradcheck fd_columns flows to base and perturbed rows") {
  Rng rng(27);
  auto x = random_tensor<double>({6, 4}, rng);  // N=2 groups of L+1=3 rows
  auto f = [](DTape* t, std::vector<DTensor>& xs) {
    auto j = fd_columns(t, xs[0], 2, 0.25);
    return reduce_sum(t, mul(t, j, j));
  };
  CHECK(gradcheck<double>(f, {x}, 1e-5) < 1e-7);
}

TEST_CASE("gradcheck fd_columns_from_base flows to both tensors") {
  Rng rng(28);
  auto base = random_tensor<double>({2, 4}, rng);
  auto pert = random_tensor<double>({6, 4}, rng);  // L=3 rows per base row
  auto f = [](DTape* t, std::vector<DTensor>& xs) {
    auto j = fd_columns_from_base(t, xs[0], xs[1], 0.25);
    return reduce_sum(t, mul(t, j, j));
  };
  CHECK(gradcheck<double>(f, {base, pert}, 1e-5) < 1e-7);
}

TEST_CASE("gradcheck conv2d_block wrt input, kernel, bias") {
  Rng rng(29);
  auto x = random_tensor<double>({2, 2, 5, 5}, rng);
  auto k = random_tensor<double>({3, 2, 3, 3}, rng);
  auto b = random_tensor<double>({3}, rng);
  for (Act act : {Act::none, Act::sigmoid}) {
    auto f = [act](DTape* t, std::vector<DTensor>& xs) {
      auto y = conv2d_block(t, xs[0], xs[1], xs[2], 2, 1, act);
      return reduce_sum(t, mul(t, y, y));
    };
    CHECK(gradcheck<double>(f, {x, k, b}, 1e-4) < 1e-7);
  }
}

TEST_CASE("gradcheck conv2d_block relu away from kinks") {
  // All-positive inputs, kernel, and bias keep every pre-activation
  // strictly positive, so central differences never cross the relu kink.
  Rng rng(30);
  auto x = random_tensor<double>({2, 2, 5, 5}, rng, 0.2, 1.0);
  auto k = random_tensor<double>({3, 2, 3, 3}, rng, 0.05, 0.3);
  auto b = random_tensor<double>({3}, rng, 0.1, 0.4);
  auto f = [](DTape* t, std::vector<DTensor>& xs) {
    auto y = conv2d_block(t, xs[0], xs[1], xs[2], 2, 1, Act::relu);
    return reduce_sum(t, mul(t, y, y));
  };
  CHECK(gradcheck<double>(f, {x, k, b}, 1e-4) < 1e-7);
  // Fully masked region: a large negative bias kills every channel, so the
  // analytic gradient and the finite differences must both be zero.
  auto bneg = DTensor::full({3}, -100.0);
  CHECK(gradcheck<double>(f, {x, k, bneg}, 1e-4) < 1e-7);
}

TEST_CASE("gradcheck conv_transpose2d_block wrt input, kernel, bias") {
  Rng rng(31);
  auto x = random_tensor<double>({2, 3, 3, 3}, rng);
  auto k = random_tensor<double>({3, 2, 3, 3}, rng);  // convT layout [Ci,Co]
  auto b = random_tensor<double>({2}, rng);
  for (Act act : {Act::none, Act::sigmoid}) {
    for (std::int64_t op : {std::int64_t{0}, std::int64_t{1}}) {
      auto f = [act, op](DTape* t, std::vector<DTensor>& xs) {
        auto y = conv_transpose2d_block(t, xs[0], xs[1], xs[2], 2, 1, op, act);
        return reduce_sum(t, mul(t, y, y));
      };
      CHECK(gradcheck<double>(f, {x, k, b}, 1e-4) < 1e-7);
    }
  }
}

TEST_CASE("gradcheck conv_transpose2d_block relu away from kinks") {
  // Positive taps plus a bias of at least 0.1 bound every pre-activation
  // away from zero even at outputs that receive no taps.
  Rng rng(32);
  auto x = random_tensor<double>({2, 3, 3, 3}, rng, 0.2, 1.0);
  auto k = random_tensor<double>({3, 2, 3, 3}, rng, 0.05, 0.3);
  auto b = random_tensor<double>({2}, rng, 0.1, 0.4);
  auto f = [](DTape* t, std::vector<DTensor>& xs) {
    auto y =
        conv_transpose2d_block(t, xs[0], xs[1], xs[2], 2, 1, 1, Act::relu);
    return reduce_sum(t, mul(t, y, y));
  };
  CHECK(gradcheck<double>(f, {x, k, b}, 1e-4) < 1e-7);
}

TEST_CASE("repeat_rows forward and gradcheck") {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor r = repeat_rows<float>(nullptr, x, 2);
  CHECK(r.shape == Shape{4, 3});
  CHECK(r.data == std::vector<float>{1, 2, 3, 1, 2, 3, 4, 5, 6, 4, 5, 6});

  Rng rng(29);
  auto a = random_tensor<double>({2, 3}, rng);
  auto w = random_tensor<double>({6, 3}, rng);  // distinct weight per out row
  auto f = [&w](DTape* t, std::vector<DTensor>& xs) {
    auto y = mul(t, repeat_rows(t, xs[0], 3), w);
    return reduce_sum(t, mul(t, y, y));
  };
  CHECK(gradcheck<double>(f, {a}, 1e-4) < 1e-7);
}

TEST_CASE("gradcheck reshape and reduce_sum_rows") {
  Rng rng(28);
  auto x = random_tensor<double>({2, 6}, rng);
  auto f = [](DTape* t, std::vector<DTensor>& xs) {
    auto y = reshape(t, xs[0], {4, 3});
    return reduce_sum(t, mul(t, reduce_sum_rows(t, y), reduce_sum_rows(t, y)));
  };
  CHECK(gradcheck<double>(f, {x}, 1e-4) < 1e-7);
}

// ---------------------------------------------------------------------------
// Parameters and Adam.

TEST_CASE("params keep insertion order and reject duplicates") {
  ModelParams p;
  p.add("w1", Tensor::zeros({2, 2}));
  p.add("b1", Tensor::zeros({2}), true);
  p.add("frozen", Tensor::zeros({2}), false);
  CHECK(p.entries[0].name == "w1");
  CHECK(p.entries[1].name == "b1");
  CHECK(p.trainable_count() == 2);
  CHECK(p.trainable_numel() == 6);
  CHECK_THROWS_AS(p.add("w1", Tensor::zeros({1})), contract_error);
  CHECK_THROWS_AS(p.at("nope"), contract_error);
}

TEST_CASE("adam first step moves by ~lr against the gradient sign") {
  ModelParams p;
  p.add("w", Tensor({2}, {0.0f, 1.0f}));
  auto adam = AdamState::init(p, 0.01f);
  std::vector<Tensor> grads{Tensor({2}, {1.0f, -2.0f})};
  adam_step(p, adam, grads);
  // m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps) ~= lr * sign(g)
  CHECK(p.at("w")[0] == doctest::Approx(-0.01f).epsilon(1e-4));
  CHECK(p.at("w")[1] == doctest::Approx(1.0f + 0.01f).epsilon(1e-4));
  CHECK(adam.step == 1);
}

TEST_CASE("adam matches a hand-stepped double reference over 3 steps") {
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double w = 0.5, m = 0, v = 0;
  std::vector<double> gs{0.3, -0.7, 0.2};
  for (int t = 1; t <= 3; ++t) {
    double g = gs[static_cast<std::size_t>(t - 1)];
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    double mh = m / (1 - std::pow(b1, t));
    double vh = v / (1 - std::pow(b2, t));
    w -= lr * mh / (std::sqrt(vh) + eps);
  }

  ModelParams p;
  p.add("w", Tensor({1}, {0.5f}));
  auto adam = AdamState::init(p, 0.1f);
  for (auto g : gs)
    adam_step(p, adam, {Tensor({1}, {static_cast<float>(g)})});
  CHECK(p.at("w")[0] == doctest::Approx(w).epsilon(1e-5));
}

TEST_CASE("collect_grads returns zeros for untouched params") {
  ModelParams p;
  p.add("used", Tensor::scalar(2.0f));
  p.add("unused", Tensor::scalar(3.0f));
  Tape tape;
  p.watch_all(tape);
  Tensor y = mul(&tape, p.at("used"), p.at("used"));
  tape.backward(y.node);
  auto grads = collect_grads(p, tape);
  REQUIRE(grads.size() == 2);
  CHECK(grads[0][0] == doctest::Approx(4.0f));
  CHECK(grads[1][0] == 0.0f);
}

TEST_CASE("collect_grads rejects params never watched on the tape") {
  ModelParams p;
  p.add("w", Tensor::scalar(1.0f));
  Tape tape;
  Tensor c = Tensor::scalar(1.0f);
  tape.watch(c, true);
  Tensor y = mul(&tape, c, c);
  tape.backward(y.node);
  CHECK_THROWS_AS(collect_grads(p, tape), contract_error);
}
