#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "polar/linalg.hpp"

using namespace polar;

namespace {

Matrix random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
    Matrix m(rows, cols);
    for (float& v : m.data) v = static_cast<float>(rng.next_gaussian() * scale);
    return m;
}

// Independent reference: plain triple loop, f32 accumulation in ikj order to
// mirror the kernel's summation order exactly.
Matrix matmul_reference(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int p = 0; p < a.cols; ++p) {
            for (int j = 0; j < b.cols; ++j) {
                c.at(i, j) += a.at(i, p) * b.at(p, j);
            }
        }
    }
    return c;
}

}  // namespace

TEST_SUITE_BEGIN("linalg");

TEST_CASE("matmul identity leaves the operand unchanged") {
    Rng rng(1);
    const Matrix m = random_matrix(rng, 2, 2);
    const Matrix out = matmul(Matrix::identity(2), m);
    CHECK(out == m);
}

TEST_CASE("matmul matches a hand-computed product") {
    Matrix a(2, 2, {1, 2, 3, 4});
    Matrix b(2, 1, {5, 6});
    const Matrix c = matmul(a, b);
    CHECK(c.at(0, 0) == 17.0f);
    CHECK(c.at(1, 0) == 39.0f);
}

TEST_CASE("matmul matches the triple-loop reference elementwise") {
    Rng rng(7);
    const Matrix a = random_matrix(rng, 8, 8);
    const Matrix b = random_matrix(rng, 8, 8);
    const Matrix got = matmul(a, b);
    const Matrix want = matmul_reference(a, b);
    for (size_t i = 0; i < got.data.size(); ++i) CHECK(got.data[i] == want.data[i]);
}

TEST_CASE("matmul transpose flags agree with explicit transposition") {
    Rng rng(11);
    const Matrix a = random_matrix(rng, 3, 5);
    const Matrix b = random_matrix(rng, 4, 5);
    const Matrix c = random_matrix(rng, 3, 7);
    const Matrix d = random_matrix(rng, 7, 3);

    const Matrix nt = matmul(a, b, false, true);
    const Matrix nt_ref = matmul(a, transpose(b));
    for (size_t i = 0; i < nt.data.size(); ++i) CHECK(nt.data[i] == doctest::Approx(nt_ref.data[i]).epsilon(1e-6));

    const Matrix tn = matmul(a, c, true, false);
    const Matrix tn_ref = matmul(transpose(a), c);
    for (size_t i = 0; i < tn.data.size(); ++i) CHECK(tn.data[i] == doctest::Approx(tn_ref.data[i]).epsilon(1e-6));

    const Matrix tt = matmul(a, d, true, true);
    const Matrix tt_ref = matmul(transpose(a), transpose(d));
    for (size_t i = 0; i < tt.data.size(); ++i) CHECK(tt.data[i] == doctest::Approx(tt_ref.data[i]).epsilon(1e-6));
}

TEST_CASE("matmul is associative within tolerance") {
    Rng rng(13);
    for (int trial = 0; trial < 5; ++trial) {
        const Matrix a = random_matrix(rng, 6, 5);
        const Matrix b = random_matrix(rng, 5, 7);
        const Matrix c = random_matrix(rng, 7, 4);
        const Matrix left = matmul(matmul(a, b), c);
        const Matrix right = matmul(a, matmul(b, c));
        const double err = frobenius_norm(sub(left, right)) / std::max(1e-12, frobenius_norm(left));
        CHECK(err < 1e-4);
    }
}

TEST_CASE("matmul rejects mismatched dimensions") {
    Matrix a(2, 3);
    Matrix b(2, 2);
    CHECK_THROWS_AS((void)matmul(a, b), std::invalid_argument);
}

TEST_CASE("l2_normalize hand case and identity") {
    const std::vector<float> v = {3.0f, 4.0f};
    const auto out = l2_normalize(v);
    CHECK(out[0] == doctest::Approx(0.6).epsilon(1e-6));
    CHECK(out[1] == doctest::Approx(0.8).epsilon(1e-6));

    const std::vector<float> unit = {1.0f, 0.0f, 0.0f};
    const auto same = l2_normalize(unit);
    CHECK(same == unit);
}

TEST_CASE("l2_normalize output has unit norm") {
    Rng rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<float> v(9);
        for (auto& x : v) x = static_cast<float>(rng.next_gaussian() * 3.0);
        const auto out = l2_normalize(v);
        CHECK(std::abs(l2_norm(out) - 1.0) < 1e-6);
    }
}

TEST_CASE("l2_normalize rejects the zero vector") {
    const std::vector<float> z = {0.0f, 0.0f};
    CHECK_THROWS_AS((void)l2_normalize(z), std::invalid_argument);
}

TEST_CASE("cosine_sim basic identities") {
    const std::vector<float> v = {0.3f, -1.2f, 2.0f};
    CHECK(cosine_sim(v, v) == doctest::Approx(1.0).epsilon(1e-6));

    const std::vector<float> e1 = {1.0f, 0.0f};
    const std::vector<float> e2 = {0.0f, 1.0f};
    CHECK(cosine_sim(e1, e2) == doctest::Approx(0.0).epsilon(1e-7));

    const std::vector<float> d = {1.0f, 1.0f};
    CHECK(cosine_sim(e1, d) == doctest::Approx(0.70710678).epsilon(1e-6));
}

TEST_CASE("cosine_sim error paths") {
    const std::vector<float> v = {1.0f, 2.0f};
    const std::vector<float> z = {0.0f, 0.0f};
    const std::vector<float> w = {1.0f};
    CHECK_THROWS_AS((void)cosine_sim(v, z), std::invalid_argument);
    CHECK_THROWS_AS((void)cosine_sim(v, w), std::invalid_argument);
}

TEST_CASE("softmax symmetry and overflow stability") {
    const std::vector<float> flat = {0.0f, 0.0f};
    const auto s = softmax_row(flat);
    CHECK(s[0] == doctest::Approx(0.5).epsilon(1e-7));
    CHECK(s[1] == doctest::Approx(0.5).epsilon(1e-7));

    const std::vector<float> big = {1000.0f, 1000.0f, 1000.0f};
    const auto sb = softmax_row(big);
    for (float x : sb) {
        CHECK(std::isfinite(x));
        CHECK(x == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
    }
}

TEST_CASE("softmax matches the direct formula") {
    const std::vector<float> v = {1.0f, 2.0f, 3.0f};
    const auto got = softmax_row(v);
    double denom = 0.0;
    for (float x : v) denom += std::exp(static_cast<double>(x));
    double sum = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        CHECK(std::abs(got[i] - std::exp(static_cast<double>(v[i])) / denom) < 1e-7);
        sum += got[i];
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
}

TEST_CASE("rng streams reproduce from the seed") {
    Rng a(12345);
    Rng b(12345);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng c(12345);
    Rng d(54321);
    bool differs = false;
    for (int i = 0; i < 10; ++i) differs |= (c.next_u64() != d.next_u64());
    CHECK(differs);
}

TEST_CASE("rng gaussian and unit vectors are deterministic and sane") {
    Rng a(9);
    Rng b(9);
    for (int i = 0; i < 20; ++i) CHECK(a.next_gaussian() == b.next_gaussian());

    Rng c(10);
    const auto v = c.unit_vector(16);
    CHECK(std::abs(l2_norm(v) - 1.0) < 1e-6);
}

TEST_CASE("rng doubles stay in [0,1) and next_below in range") {
    Rng rng(4);
    for (int i = 0; i < 1000; ++i) {
        const double u = rng.next_double();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        CHECK(rng.next_below(7) < 7);
    }
}

TEST_CASE("fnv1a64 is stable and order-sensitive") {
    const char a[] = "abc";
    const char b[] = "acb";
    CHECK(fnv1a64(a, 3) == fnv1a64(a, 3));
    CHECK(fnv1a64(a, 3) != fnv1a64(b, 3));
    CHECK(hash_hex(fnv1a64(a, 3)).size() == 16);
}

TEST_SUITE_END();
