#include <cmath>

#include "doctest.h"
#include "lmt/conv.hpp"
#include "lmt/gradcheck.hpp"
#include "lmt/ops.hpp"
#include "test_util.hpp"

using namespace lmt;
using testutil::rand_tensor;

TEST_CASE("conv3d identity kernel") {
    Rng rng(11);
    auto x = rand_tensor<double>({1, 2, 3, 4, 5}, rng);
    // 1x1x1 kernel carrying the channel identity
    auto w = Tensor64::from_data({2, 2, 1, 1, 1}, {1, 0, 0, 1});
    auto y = conv3d(x, w, {1, 1, 1}, {0, 0, 0});
    CHECK(y.shape() == x.shape());
    CHECK(testutil::max_abs_diff(y.data(), x.data()) == 0.0);
}

TEST_CASE("conv3d all-ones sums the window") {
    auto x = Tensor64::full({1, 2, 4, 4, 4}, 1.0);
    auto w = Tensor64::full({1, 2, 2, 2, 2}, 1.0);
    auto y = conv3d(x, w, {2, 2, 2}, {0, 0, 0});
    CHECK(y.shape() == Shape{1, 1, 2, 2, 2});
    for (double v : y.data()) CHECK(v == 16.0);
}

TEST_CASE("conv3d matches the six-nested-loop oracle") {
    Rng rng(7);
    auto x = rand_tensor<double>({1, 3, 4, 8, 8}, rng);
    auto w = rand_tensor<double>({2, 3, 2, 3, 3}, rng);
    for (Dim3 stride : {Dim3{1, 1, 1}, Dim3{2, 2, 2}, Dim3{1, 2, 2}}) {
        for (Dim3 pad : {Dim3{0, 0, 0}, Dim3{1, 1, 1}}) {
            Shape oshape;
            auto expect = testutil::conv3d_loop_oracle(x.data(), x.shape(), w.data(), w.shape(),
                                                       stride, pad, oshape);
            auto y = conv3d(x, w, stride, pad);
            REQUIRE(y.shape() == oshape);
            CHECK(testutil::max_abs_diff(y.data(), expect) < 1e-12);
        }
    }
}

TEST_CASE("conv3d rejects channel mismatch naming the axis") {
    auto x = Tensor64::zeros({1, 3, 4, 4, 4});
    auto w = Tensor64::zeros({2, 4, 1, 1, 1});
    CHECK_THROWS_WITH_AS(conv3d(x, w, {1, 1, 1}, {0, 0, 0}),
                         doctest::Contains("axis 1"), ShapeError);
}

TEST_CASE("conv_transpose3d unit kernel is the identity") {
    Rng rng(3);
    auto x = rand_tensor<double>({1, 2, 3, 3, 3}, rng);
    auto w = Tensor64::from_data({2, 2, 1, 1, 1}, {1, 0, 0, 1});
    auto y = conv_transpose3d(x, w, {1, 1, 1}, {0, 0, 0});
    CHECK(y.shape() == x.shape());
    CHECK(testutil::max_abs_diff(y.data(), x.data()) == 0.0);
}

TEST_CASE("conv_transpose3d doubles extents at stride 2") {
    Rng rng(5);
    auto x = rand_tensor<double>({1, 3, 4, 8, 8}, rng);
    auto w = rand_tensor<double>({3, 2, 4, 4, 4}, rng);
    auto y = conv_transpose3d(x, w, {2, 2, 2}, {1, 1, 1});
    CHECK(y.shape() == Shape{1, 2, 8, 16, 16});
}

TEST_CASE("conv_transpose3d matches the scatter-accumulate oracle") {
    Rng rng(9);
    auto x = rand_tensor<double>({2, 3, 3, 4, 4}, rng);
    auto w = rand_tensor<double>({3, 2, 2, 3, 3}, rng);
    for (Dim3 stride : {Dim3{1, 1, 1}, Dim3{2, 2, 2}}) {
        for (Dim3 pad : {Dim3{0, 0, 0}, Dim3{1, 1, 1}}) {
            Shape oshape;
            auto expect = testutil::conv_transpose3d_loop_oracle(x.data(), x.shape(), w.data(),
                                                                 w.shape(), stride, pad, oshape);
            auto y = conv_transpose3d(x, w, stride, pad);
            REQUIRE(y.shape() == oshape);
            CHECK(testutil::max_abs_diff(y.data(), expect) < 1e-10);
        }
    }
}

TEST_CASE("conv_transpose3d inverts conv3d extents") {
    Rng rng(13);
    auto x = rand_tensor<double>({1, 2, 8, 8, 8}, rng);
    auto wd = rand_tensor<double>({4, 2, 4, 4, 4}, rng, 0.2);
    auto down = conv3d(x, wd, {2, 2, 2}, {1, 1, 1});
    CHECK(down.shape() == Shape{1, 4, 4, 4, 4});
    auto wu = rand_tensor<double>({4, 2, 4, 4, 4}, rng, 0.2);
    auto up = conv_transpose3d(down, wu, {2, 2, 2}, {1, 1, 1});
    CHECK(up.shape() == x.shape());
}

TEST_CASE("softmax basics") {
    auto c = softmax(Tensor64::full({4}, 3.25));
    for (double v : c.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

    auto t = softmax(Tensor64::from_data({2}, {0.0, std::log(3.0)}));
    CHECK(t.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(t.data()[1] == doctest::Approx(0.75).epsilon(1e-12));

    // one entry 1e6 above the rest: no overflow, one-hot within 1e-12
    auto spike = softmax(Tensor64::from_data({3}, {1e6, 0.0, -3.0}));
    CHECK(spike.data()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(spike.data()[1] + spike.data()[2] < 1e-12);
}

TEST_CASE("softmax rows sum to one for magnitudes up to 1e6") {
    Rng rng(21);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> d(8);
        for (auto &v : d) v = rng.uniform(-1e6, 1e6);
        auto p = softmax(Tensor64::from_data({2, 4}, d), -1);
        for (int r = 0; r < 2; ++r) {
            double s = 0;
            for (int j = 0; j < 4; ++j) s += p.data()[size_t(r * 4 + j)];
            CHECK(std::abs(s - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("cross_entropy closed forms") {
    const int64_t k = 1024;
    auto logits = Tensor64::zeros({2, k});
    auto ce = cross_entropy(logits, {3, 700});
    CHECK(ce.item() == doctest::Approx(std::log(1024.0)).epsilon(1e-12));

    // logits one-hot-scaled: +20 on the target drives the loss to ~0
    auto sharp = cross_entropy(Tensor64::from_data({1, 2}, {0.0, 20.0}), {1});
    CHECK(sharp.item() < 1e-8);

    CHECK_THROWS_AS(cross_entropy(logits, {3, 1024}), IndexError);
}

TEST_CASE("cross_entropy matches a long-double log-sum-exp oracle") {
    Rng rng(31);
    const int64_t n = 5, k = 17;
    auto logits = rand_tensor<double>({n, k}, rng, 3.0);
    std::vector<int64_t> targets;
    for (int64_t i = 0; i < n; ++i) targets.push_back(rng.uniform_int(k));
    long double acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        long double lse = 0;
        for (int64_t j = 0; j < k; ++j)
            lse += expl((long double)(logits.data()[size_t(i * k + j)]));
        acc += logl(lse) - (long double)(logits.data()[size_t(i * k + targets[size_t(i)])]);
    }
    acc /= n;
    auto ce = cross_entropy(logits, targets);
    CHECK(std::abs(double(acc) - ce.item()) < 1e-12);
}

TEST_CASE("backward fills gradients") {
    Rng rng(41);
    auto x = rand_tensor<double>({3, 4}, rng, 1.0, true);
    sum(x).backward();
    for (double g : x.grad()) CHECK(g == 1.0);

    auto x2 = rand_tensor<double>({5}, rng, 1.0, true);
    sum(mul(x2, x2)).backward();
    for (size_t i = 0; i < 5; ++i)
        CHECK(x2.grad()[i] == doctest::Approx(2.0 * x2.data()[i]).epsilon(1e-14));

    CHECK_THROWS_AS(x2.backward(), ContractError);  // non-scalar loss
}

TEST_CASE("shared input accumulates the sum of per-path gradients") {
    auto x = Tensor64::from_data({3}, {1.0, 2.0, 3.0}, true);
    auto y = add(mul(x, x), scale(x, 4.0));  // d/dx = 2x + 4
    sum(y).backward();
    for (size_t i = 0; i < 3; ++i)
        CHECK(x.grad()[i] == doctest::Approx(2.0 * x.data()[i] + 4.0).epsilon(1e-14));
}

TEST_CASE("composite conv-softmax-cross_entropy graph passes finite differences") {
    Rng rng(51);
    auto w0 = rand_tensor<double>({2, 2, 2, 2, 2}, rng, 0.5);
    std::function<Tensor64(const Tensor64 &)> f = [&](const Tensor64 &x) {
        auto h = conv3d(x, w0, {1, 1, 1}, {0, 0, 0});
        auto flat = reshape(h, {2, h.numel() / 2});
        return cross_entropy(flat, {0, 1});
    };
    auto x = rand_tensor<double>({1, 2, 3, 3, 3}, rng, 0.5);
    CHECK(finite_diff_check<double>(f, x) < 1e-4);
}

TEST_CASE("finite_diff_check on linear and smooth functions") {
    Rng rng(61);
    std::function<Tensor64(const Tensor64 &)> fsum = [](const Tensor64 &x) { return sum(x); };
    // integer data with a power-of-two step keeps every difference exact
    auto xi = Tensor64::from_data({4}, {1.0, -2.0, 3.0, 5.0});
    CHECK(finite_diff_check<double>(fsum, xi, 1.0 / 131072.0) == 0.0);

    auto x = rand_tensor<double>({4}, rng);
    std::function<Tensor64(const Tensor64 &)> fsin = [](const Tensor64 &x) {
        return sum(sin_op(x));
    };
    CHECK(finite_diff_check<double>(fsin, x) < 1e-6);
    // analytic cosine oracle on the same point
    Tensor64 xg = Tensor64::from_data(x.shape(), x.data(), true);
    sum(sin_op(xg)).backward();
    for (size_t i = 0; i < 4; ++i)
        CHECK(xg.grad()[i] == doctest::Approx(std::cos(x.data()[i])).epsilon(1e-14));
}

TEST_CASE("finite_diff_check rejects a non-deterministic function") {
    Rng rng(71);
    auto noisy_rng = std::make_shared<Rng>(123);
    std::function<Tensor64(const Tensor64 &)> f = [noisy_rng](const Tensor64 &x) {
        return add_scalar(sum(x), noisy_rng->normal());
    };
    auto x = rand_tensor<double>({3}, rng);
    CHECK_THROWS_AS(finite_diff_check<double>(f, x), ContractError);
}

TEST_CASE("non-finite forward results are rejected") {
    auto x = Tensor64::from_data({2}, {-1.0, 2.0});
    CHECK_THROWS_AS(log_op(x), NumericError);
}

TEST_CASE("primitive gradient spot checks") {
    Rng rng(81);
    const double tol = 1e-4;
    using F = std::function<Tensor64(const Tensor64 &)>;

    auto other = rand_tensor<double>({3, 4}, rng);
    CHECK(finite_diff_check<double>(F([&](const Tensor64 &x) { return mean(mul(x, other)); }),
                                    rand_tensor<double>({3, 4}, rng)) < tol);
    CHECK(finite_diff_check<double>(
              F([&](const Tensor64 &x) { return sum(divide(other, add_scalar(x, 4.0))); }),
              rand_tensor<double>({3, 4}, rng)) < tol);
    CHECK(finite_diff_check<double>(F([](const Tensor64 &x) { return sum(gelu(x)); }),
                                    rand_tensor<double>({6}, rng)) < tol);
    CHECK(finite_diff_check<double>(F([](const Tensor64 &x) { return sum(softplus(x)); }),
                                    rand_tensor<double>({6}, rng)) < tol);
    CHECK(finite_diff_check<double>(F([](const Tensor64 &x) { return sum(tanh_op(x)); }),
                                    rand_tensor<double>({6}, rng)) < tol);

    auto b = rand_tensor<double>({4, 5}, rng);
    CHECK(finite_diff_check<double>(F([&](const Tensor64 &x) { return sum(matmul(x, b)); }),
                                    rand_tensor<double>({2, 3, 4}, rng)) < tol);
    auto bt = rand_tensor<double>({5, 4}, rng);
    CHECK(finite_diff_check<double>(F([&](const Tensor64 &x) { return sum(matmul_nt(x, bt)); }),
                                    rand_tensor<double>({3, 4}, rng)) < tol);

    auto gamma = rand_tensor<double>({6}, rng, 0.3);
    auto beta = rand_tensor<double>({6}, rng, 0.3);
    CHECK(finite_diff_check<double>(
              F([&](const Tensor64 &x) {
                  return mean(group_norm(x, 2, gamma, beta));
              }),
              rand_tensor<double>({2, 6, 3}, rng)) < tol);

    auto smw = rand_tensor<double>({3, 5}, rng);
    CHECK(finite_diff_check<double>(
              F([&](const Tensor64 &x) { return sum(mul(softmax(x, -1), smw)); }),
              rand_tensor<double>({3, 5}, rng)) < tol);
    CHECK(finite_diff_check<double>(
              F([](const Tensor64 &x) {
                  return mean(permute(reshape(x, {2, 3, 4}), {2, 0, 1}));
              }),
              rand_tensor<double>({24}, rng)) < tol);
    CHECK(finite_diff_check<double>(
              F([](const Tensor64 &x) { return sum(gather_rows(x, {1, 0, 1, 2})); }),
              rand_tensor<double>({3, 4}, rng)) < tol);
}

TEST_CASE("forward results are deterministic given the seed") {
    auto run = [] {
        Rng rng(99);
        auto x = rand_tensor<float>({2, 3, 4, 4, 4}, rng, 1.0);
        auto w = rand_tensor<float>({2, 3, 3, 3, 3}, rng, 0.5);
        auto y = conv3d(x, w, {1, 2, 2}, {1, 1, 1});
        return y.data();
    };
    auto a = run();
    auto b = run();
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}
