#include <catch2/catch_amalgamated.hpp>

#include "relgate/matrix.hpp"
#include "relgate/ops.hpp"
#include "relgate/rng.hpp"

using namespace relgate;

namespace {

// Naive triple-loop oracle, deliberately kept independent of ops.hpp.
Matrix matmul_oracle(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            c(i, j) = s;
        }
    return c;
}

Matrix random_matrix(std::size_t r, std::size_t c, RngState& rng) {
    Matrix m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.normal();
    return m;
}

}  // namespace

TEST_CASE("matmul identity and hand cases", "[numerics]") {
    const Matrix i2 = Matrix::from_rows({{1, 0}, {0, 1}});
    const Matrix b = Matrix::from_rows({{3, 4}, {5, 6}});
    REQUIRE(matmul(i2, b) == b);
    REQUIRE(matmul(b, i2) == b);

    const Matrix row = Matrix::from_rows({{1, 2}});
    const Matrix col = Matrix::from_rows({{3}, {4}});
    const Matrix prod = matmul(row, col);
    REQUIRE(prod.rows() == 1);
    REQUIRE(prod.cols() == 1);
    REQUIRE(prod(0, 0) == 11.0);
}

TEST_CASE("matmul equals naive oracle exactly", "[numerics]") {
    RngState rng(42);
    const Matrix a = random_matrix(7, 5, rng);
    const Matrix b = random_matrix(5, 3, rng);
    REQUIRE(matmul(a, b) == matmul_oracle(a, b));
}

TEST_CASE("matmul transpose helpers match plain products", "[numerics]") {
    RngState rng(7);
    const Matrix a = random_matrix(4, 6, rng);
    const Matrix b = random_matrix(4, 3, rng);
    const Matrix c = random_matrix(3, 6, rng);
    const Matrix atb = matmul_at_b(a, b);
    const Matrix ref1 = matmul_oracle(transpose(a), b);
    for (std::size_t i = 0; i < atb.size(); ++i)
        REQUIRE(atb[i] == Catch::Approx(ref1[i]).margin(1e-14));
    const Matrix abt = matmul_a_bt(a, c);
    const Matrix ref2 = matmul_oracle(a, transpose(c));
    for (std::size_t i = 0; i < abt.size(); ++i)
        REQUIRE(abt[i] == Catch::Approx(ref2[i]).margin(1e-14));
}

TEST_CASE("matmul dimension mismatch names both shapes", "[numerics]") {
    const Matrix a(2, 3), b(4, 2);
    try {
        matmul(a, b);
        FAIL("expected shape error");
    } catch (const Error& e) {
        REQUIRE(e.kind() == ErrorKind::shape);
        REQUIRE(std::string(e.what()).find("2x3") != std::string::npos);
        REQUIRE(std::string(e.what()).find("4x2") != std::string::npos);
    }
}

TEST_CASE("stable_div hand cases", "[numerics]") {
    const Matrix one = Matrix::from_rows({{1}});
    const Matrix two = Matrix::from_rows({{2}});
    const Matrix zero = Matrix::from_rows({{0}});
    REQUIRE(stable_div(one, two, 1e-12)(0, 0) == Catch::Approx(0.5).epsilon(1e-9));
    REQUIRE(stable_div(one, zero, 1e-12)(0, 0) == Catch::Approx(1e12).epsilon(1e-12));

    const Matrix three = Matrix::from_rows({{3}});
    const Matrix neg_two = Matrix::from_rows({{-2}});
    REQUIRE(stable_div(three, neg_two, 1e-12)(0, 0) == Catch::Approx(-1.5).epsilon(1e-9));
}

TEST_CASE("stable_div recovers exact ratios for safe denominators", "[numerics]") {
    RngState rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const double x = rng.normal() * 10.0;
        double d = rng.normal();
        if (std::abs(d) < 1e-6) d = 1e-6;
        const Matrix num = Matrix::from_rows({{x * d}});
        const Matrix den = Matrix::from_rows({{d}});
        const double eps = 1e-9;
        const double got = stable_div(num, den, eps)(0, 0);
        const double tol = std::abs(x) * (eps / std::abs(d)) + 1e-12;
        REQUIRE(std::abs(got - x) <= tol);
    }
}

TEST_CASE("softmax rows: symmetry, normalization, shift invariance", "[numerics]") {
    const Matrix sym = softmax_rows(Matrix::from_rows({{0, 0}}));
    REQUIRE(sym(0, 0) == Catch::Approx(0.5).margin(1e-15));
    REQUIRE(sym(0, 1) == Catch::Approx(0.5).margin(1e-15));

    RngState rng(11);
    const Matrix x = random_matrix(5, 9, rng);
    const Matrix y = softmax_rows(x);
    for (std::size_t i = 0; i < y.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < y.cols(); ++j) s += y(i, j);
        REQUIRE(std::abs(s - 1.0) <= 1e-12);
    }

    Matrix shifted = x;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double c = rng.normal() * 3.0;
        for (std::size_t j = 0; j < x.cols(); ++j) shifted(i, j) += c;
    }
    const Matrix y2 = softmax_rows(shifted);
    for (std::size_t i = 0; i < y.size(); ++i) REQUIRE(std::abs(y[i] - y2[i]) <= 1e-10);
}

TEST_CASE("causal softmax zeroes the upper triangle and normalizes rows", "[numerics]") {
    RngState rng(13);
    const Matrix e = random_matrix(6, 6, rng);
    const Matrix a = causal_softmax_rows(e);
    for (std::size_t i = 0; i < 6; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 6; ++j) {
            if (j > i) REQUIRE(a(i, j) == 0.0);
            s += a(i, j);
        }
        REQUIRE(std::abs(s - 1.0) <= 1e-12);
    }
}

TEST_CASE("layer_norm of a constant row is zero", "[numerics]") {
    const Matrix gain(1, 4, 1.0);
    const Matrix bias(1, 4, 0.0);
    const Matrix x(3, 4, 2.5);
    const Matrix y = layer_norm(x, gain, bias);
    for (std::size_t i = 0; i < y.size(); ++i) REQUIRE(y[i] == 0.0);
}

TEST_CASE("gelu fixed points", "[numerics]") {
    REQUIRE(gelu_scalar(0.0) == 0.0);
    // gelu(x) -> x for large positive x, -> 0 for large negative x
    REQUIRE(gelu_scalar(10.0) == Catch::Approx(10.0).epsilon(1e-12));
    REQUIRE(std::abs(gelu_scalar(-10.0)) <= 1e-12);
}

TEST_CASE("rng streams are reproducible per seed", "[numerics]") {
    RngState a(123456), b(123456), c(99);
    bool all_equal = true;
    bool any_diff_from_c = false;
    for (int i = 0; i < 1000; ++i) {
        const auto va = a.next_u64();
        const auto vb = b.next_u64();
        if (va != vb) all_equal = false;
        if (va != c.next_u64()) any_diff_from_c = true;
    }
    REQUIRE(all_equal);
    REQUIRE(any_diff_from_c);

    RngState d(77), e(77);
    for (int i = 0; i < 200; ++i) {
        const double x = d.truncated_normal(0.02);
        REQUIRE(x == e.truncated_normal(0.02));
        REQUIRE(std::abs(x) <= 0.04);
    }
}

TEST_CASE("rng forks are label-dependent and stable", "[numerics]") {
    RngState root(5);
    RngState f1 = root.fork("init");
    RngState f2 = root.fork("init");
    RngState f3 = root.fork("data");
    REQUIRE(f1.next_u64() == f2.next_u64());
    RngState f1b = root.fork("init");
    REQUIRE(f1b.next_u64() != f3.next_u64());
}
