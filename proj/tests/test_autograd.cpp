#include "support.hpp"

#include "dpclip/autograd.hpp"
#include "dpclip/errors.hpp"
#include "dpclip/rng.hpp"

#include <doctest.h>

using namespace dpclip;
using dpclip::testing::check_gradient;

namespace {

Mat randn(Rng& rng, Eigen::Index r, Eigen::Index c) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

// Weighted sum so every output entry contributes a distinct gradient.
Var reduce(const Var& y, const Mat& w) { return ops::sum(ops::mul(y, constant(w))); }

void expect_grad(const std::function<Var(const Var&)>& f, Var x, Rng& rng) {
    const Mat probe = f(x).value();
    const Mat w = randn(rng, probe.rows(), probe.cols());
    auto loss = [&] { return reduce(f(x), w); };
    const auto worst = check_gradient(loss, x, 12, rng);
    CHECK(worst.relative_error() < 1e-6);
}

}  // namespace

TEST_CASE("op gradients match central differences") {
    Rng rng(11);
    auto leaf = [&](Eigen::Index r, Eigen::Index c) { return Var::leaf(randn(rng, r, c), true); };
    const Var b = leaf(4, 5);
    const Var w = leaf(6, 4);
    const Var bias = leaf(1, 6);
    const Var row = leaf(1, 4);
    const Var gamma = leaf(1, 4);
    const Var beta = leaf(1, 4);

    SUBCASE("matmul") { expect_grad([&](const Var& x) { return ops::matmul(x, b); }, leaf(3, 4), rng); }
    SUBCASE("matmul_nt") { expect_grad([&](const Var& x) { return ops::matmul_nt(x, w); }, leaf(3, 4), rng); }
    SUBCASE("linear input") { expect_grad([&](const Var& x) { return ops::linear(x, w, &bias); }, leaf(3, 4), rng); }
    SUBCASE("linear weight") {
        const Var x = leaf(3, 4);
        expect_grad([&](const Var& wt) { return ops::linear(x, wt, &bias); }, leaf(6, 4), rng);
    }
    SUBCASE("mul / add_row / mul_row") {
        const Var y = leaf(3, 4);
        expect_grad([&](const Var& x) { return ops::mul_row(ops::add_row(ops::mul(x, y), row), row); }, leaf(3, 4), rng);
    }
    SUBCASE("row broadcast operand") {
        const Var y = leaf(3, 4);
        expect_grad([&](const Var& r) { return ops::mul_row(y, r); }, leaf(1, 4), rng);
    }
    SUBCASE("layer_norm") {
        expect_grad([&](const Var& x) { return ops::layer_norm(x, gamma, beta); }, leaf(3, 4), rng);
    }
    SUBCASE("layer_norm affine") {
        const Var x = leaf(3, 4);
        expect_grad([&](const Var& g) { return ops::layer_norm(x, g, beta); }, leaf(1, 4), rng);
    }
    SUBCASE("softmax with mask") {
        Mat mask = Mat::Zero(3, 3);
        mask(0, 1) = mask(0, 2) = mask(1, 2) = -1e9;
        expect_grad([&](const Var& x) { return ops::softmax_rows(x, &mask); }, leaf(3, 3), rng);
    }
    SUBCASE("quick_gelu / relu / sqrt") {
        expect_grad([&](const Var& x) { return ops::quick_gelu(x); }, leaf(3, 4), rng);
        expect_grad([&](const Var& x) { return ops::relu(x); }, leaf(3, 4), rng);
        expect_grad([&](const Var& x) { return ops::sqrt(ops::add_scalar(ops::mul(x, x), 0.5)); }, leaf(3, 4), rng);
    }
    SUBCASE("slicing, gathering, concatenation") {
        const std::vector<int> idx{2, 0, 2};
        expect_grad([&](const Var& x) { return ops::gather_rows(x, idx); }, leaf(3, 4), rng);
        expect_grad([&](const Var& x) { return ops::slice_cols(ops::slice_rows(x, 1, 2), 1, 2); }, leaf(3, 4), rng);
        expect_grad(
            [&](const Var& x) {
                std::vector<Var> parts{x, ops::scale(x, 2.0)};
                std::vector<Var> cols{ops::concat_rows(parts), ops::concat_rows(parts)};
                return ops::concat_cols(cols);
            },
            leaf(2, 3), rng);
        expect_grad([&](const Var& x) { return ops::transpose(x); }, leaf(2, 3), rng);
        expect_grad([&](const Var& x) { return ops::element(x, 1, 2); }, leaf(2, 3), rng);
    }
    SUBCASE("reductions and normalisation") {
        expect_grad([&](const Var& x) { return ops::mean(x); }, leaf(3, 4), rng);
        expect_grad([&](const Var& x) { return ops::l2_normalize_rows(x); }, leaf(3, 4), rng);
    }
}

TEST_CASE("shared leaves accumulate gradients from every use") {
    Var x = Var::leaf(Mat::Constant(1, 1, 3.0), true);
    Var y = ops::mul(x, x) + x;  // dy/dx = 2x + 1
    y.backward();
    CHECK(x.grad()(0, 0) == doctest::Approx(7.0));
}

TEST_CASE("no-grad guard records no graph") {
    Var x = Var::leaf(Mat::Ones(2, 2), true);
    Var y;
    {
        NoGradGuard guard;
        CHECK_FALSE(grad_enabled());
        y = ops::scale(x, 2.0);
    }
    CHECK(grad_enabled());
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("l2 normalisation rejects zero rows") {
    const Var z = constant(Mat::Zero(1, 3));
    CHECK_THROWS_AS(ops::l2_normalize_rows(z), NumericError);
}

TEST_CASE("shape mismatches are reported") {
    const Var a = constant(Mat::Ones(2, 3));
    const Var b = constant(Mat::Ones(2, 3));
    CHECK_THROWS_AS(ops::matmul(a, b), ShapeError);
    CHECK_THROWS_AS(ops::element(a, 5, 0), ShapeError);
}
