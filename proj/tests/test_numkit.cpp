#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "oracles.hpp"
#include "psd/numkit.hpp"

using namespace psd;

namespace {

Matrix random_stochastic(Index r, Index c, Rng& rng) {
    Matrix m = uniform_matrix(r, c, 0.05, 1.0, rng);
    for (Index i = 0; i < r; ++i) {
        double s = 0.0;
        for (double x : m.row(i)) s += x;
        for (double& x : m.row(i)) x /= s;
    }
    return m;
}

} // namespace

TEST_CASE("softmax of a zero row is uniform") {
    const Matrix p = softmax_rows(Matrix{{0.0, 0.0}}, 1.0);
    CHECK(p(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(p(0, 1) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("softmax tiny scale approaches uniform") {
    const Matrix p = softmax_rows(Matrix{{5.0, 1.0}}, 1e-9);
    CHECK(std::abs(p(0, 0) - 0.5) < 1e-6);
    CHECK(std::abs(p(0, 1) - 0.5) < 1e-6);
}

TEST_CASE("softmax matches scalar recomputation") {
    const Matrix p = softmax_rows(Matrix{{1.0, 0.0}}, 2.0);
    const double e2 = std::exp(2.0);
    CHECK(std::abs(p(0, 0) - e2 / (e2 + 1.0)) < 1e-15);
    CHECK(std::abs(p(0, 1) - 1.0 / (e2 + 1.0)) < 1e-15);
    CHECK(std::abs(p(0, 0) - 0.880797) < 1e-6);
}

TEST_CASE("softmax rejects non-finite input and bad scale") {
    Matrix m{{1.0, NAN}};
    CHECK_THROWS_AS(softmax_rows(m, 1.0), Error);
    try {
        softmax_rows(m, 1.0);
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::invalid_input);
    }
    CHECK_THROWS_AS(softmax_rows(Matrix{{1.0, 2.0}}, 0.0), Error);
    CHECK_THROWS_AS(softmax_rows(Matrix{{1.0, INFINITY}}, 1.0), Error);
}

TEST_CASE("softmax rows sum to one across scales and are shift invariant") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const Index r = 1 + rng.below(6), c = 1 + rng.below(9);
        Matrix m = gaussian_matrix(r, c, 0.0, 3.0, rng);
        const double scale = std::pow(10.0, rng.uniform(-9.0, 4.0));
        const Matrix p = softmax_rows(m, scale);
        for (Index i = 0; i < r; ++i) {
            double s = 0.0;
            for (double x : p.row(i)) {
                CHECK(x >= 0.0);
                s += x;
            }
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
        Matrix shifted = m;
        for (Index i = 0; i < r; ++i) {
            const double c = rng.uniform(-4.0, 4.0);
            for (double& x : shifted.row(i)) x += c;
        }
        const Matrix q = softmax_rows(shifted, scale);
        for (Index k = 0; k < p.size(); ++k) CHECK(std::abs(p.data()[k] - q.data()[k]) < 1e-12);
    }
}

TEST_CASE("cross entropy of identity against uniform is ln 2") {
    const Matrix t = Matrix::identity(2);
    const Matrix p{{0.5, 0.5}, {0.5, 0.5}};
    CHECK(std::abs(cross_entropy_rows(t, p) - std::log(2.0)) < 1e-15);
}

TEST_CASE("cross entropy of a distribution with itself is its entropy") {
    Rng rng(3);
    const Matrix p = random_stochastic(5, 7, rng);
    CHECK(std::abs(cross_entropy_rows(p, p) - mean_row_entropy(p)) < 1e-12);
}

TEST_CASE("cross entropy matches double loop and handles empty input") {
    Rng rng(5);
    const Matrix t = random_stochastic(3, 3, rng);
    const Matrix p = random_stochastic(3, 3, rng);
    double expect = 0.0;
    for (Index i = 0; i < 3; ++i)
        for (Index j = 0; j < 3; ++j) expect -= t(i, j) * std::log(p(i, j));
    expect /= 3.0;
    CHECK(std::abs(cross_entropy_rows(t, p) - expect) < 1e-12);
    CHECK(cross_entropy_rows(Matrix(0, 4), Matrix(0, 4)) == 0.0);
    CHECK_THROWS_AS(cross_entropy_rows(Matrix(2, 2), Matrix(2, 3)), Error);
}

TEST_CASE("cross entropy respects Gibbs inequality") {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const Index r = 1 + rng.below(5), c = 2 + rng.below(6);
        const Matrix t = random_stochastic(r, c, rng);
        const Matrix p = random_stochastic(r, c, rng);
        CHECK(cross_entropy_rows(t, p) >= mean_row_entropy(t) - 1e-10);
    }
}

TEST_CASE("cross entropy floors zero probabilities") {
    const Matrix t{{1.0, 0.0}};
    const Matrix p{{0.0, 1.0}};
    const double h = cross_entropy_rows(t, p);
    CHECK(std::isfinite(h));
    CHECK(std::abs(h + std::log(1e-300)) < 1e-9);
}

TEST_CASE("normalize rows") {
    const Matrix n = normalize_rows_l2(Matrix{{3.0, 4.0}});
    CHECK(std::abs(n(0, 0) - 0.6) < 1e-15);
    CHECK(std::abs(n(0, 1) - 0.8) < 1e-15);
    const Matrix unit{{0.6, 0.8}, {1.0, 0.0}};
    const Matrix again = normalize_rows_l2(unit);
    for (Index k = 0; k < unit.size(); ++k) CHECK(std::abs(again.data()[k] - unit.data()[k]) < 1e-15);

    Rng rng(2);
    const Matrix r = normalize_rows_l2(gaussian_matrix(20, 6, 0.0, 5.0, rng));
    for (Index i = 0; i < r.rows(); ++i) CHECK(std::abs(std::sqrt(dot(r.row(i), r.row(i))) - 1.0) < 1e-12);
}

TEST_CASE("normalize rejects zero rows naming the index") {
    try {
        normalize_rows_l2(Matrix{{1.0, 0.0}, {0.0, 0.0}});
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::degenerate_input);
        CHECK(std::string(e.what()).find('1') != std::string::npos);
    }
}

TEST_CASE("rng is deterministic and seeds differ") {
    Rng a(42), b(42), c(43);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const auto x = a.next_u64();
        CHECK(x == b.next_u64());
        differs |= x != c.next_u64();
    }
    CHECK(differs);
}

TEST_CASE("rng reference values are pinned") {
    // splitmix64 seeding + xoshiro256**: the first outputs for seed 0 never change.
    Rng a(0);
    const std::uint64_t first = a.next_u64();
    Rng b(0);
    CHECK(b.next_u64() == first);
    // Independent splitmix64 computation of the first state word.
    std::uint64_t z = 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    z ^= z >> 31;
    CHECK(a.state().words[0] != 0);
    CHECK(Rng(0).state().words[0] == z);
}

TEST_CASE("rng state restore replays the stream") {
    Rng a(9);
    a.gaussian();
    const auto s = a.state();
    const double x = a.gaussian(), y = a.uniform();
    Rng b(1);
    b.restore(s);
    CHECK(b.gaussian() == x);
    CHECK(b.uniform() == y);
}

TEST_CASE("rng uniform and bounded draws stay in range") {
    Rng rng(77);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 70000; ++i) {
        const double u = rng.uniform();
        CHECK((u >= 0.0 && u < 1.0));
        ++counts[rng.below(7)];
    }
    for (int c : counts) CHECK(std::abs(c - 10000) < 500);
}

TEST_CASE("gaussian moments") {
    Rng rng(123);
    double s = 0.0, s2 = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double g = rng.gaussian();
        s += g;
        s2 += g * g;
    }
    CHECK(std::abs(s / n) < 0.01);
    CHECK(std::abs(s2 / n - 1.0) < 0.02);
}

TEST_CASE("fisher-yates yields reproducible permutations") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng a(seed), b(seed);
        const Index n = 1 + seed * 3;
        IndexList p = permutation(n, a);
        CHECK(p == permutation(n, b));
        std::sort(p.begin(), p.end());
        for (Index i = 0; i < n; ++i) CHECK(p[i] == i);
    }
}

TEST_CASE("derive_seed separates streams") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t s = 0; s < 20; ++s)
        for (std::uint64_t k = 0; k < 20; ++k) seen.insert(derive_seed(s, k));
    CHECK(seen.size() == 400);
    CHECK(derive_seed(5, 3) == derive_seed(5, 3));
}

TEST_CASE("matmul family agrees with loops") {
    Rng rng(4);
    const Matrix a = gaussian_matrix(3, 4, 0.0, 1.0, rng);
    const Matrix b = gaussian_matrix(4, 5, 0.0, 1.0, rng);
    const Matrix c = gaussian_matrix(5, 4, 0.0, 1.0, rng);
    const Matrix ab = matmul(a, b);
    const Matrix act = matmul_transposed(a, c);
    const Matrix atb = transposed_matmul(a, a);
    for (Index i = 0; i < 3; ++i)
        for (Index j = 0; j < 5; ++j) {
            double s = 0.0, t = 0.0;
            for (Index k = 0; k < 4; ++k) {
                s += a(i, k) * b(k, j);
                t += a(i, k) * c(j, k);
            }
            CHECK(std::abs(ab(i, j) - s) < 1e-13);
            CHECK(std::abs(act(i, j) - t) < 1e-13);
        }
    for (Index i = 0; i < 4; ++i)
        for (Index j = 0; j < 4; ++j) {
            double s = 0.0;
            for (Index k = 0; k < 3; ++k) s += a(k, i) * a(k, j);
            CHECK(std::abs(atb(i, j) - s) < 1e-13);
        }
    CHECK(transpose(transpose(a)) == a);
    CHECK_THROWS_AS(matmul(a, a), Error);
}

TEST_CASE("selection and elementwise helpers") {
    const Matrix m{{1, 2, 3}, {4, 5, 6}};
    const IndexList rows{1, 0, 1};
    const Matrix r = select_rows(m, rows);
    CHECK(r.rows() == 3);
    CHECK(r(0, 2) == 6.0);
    CHECK(r(1, 0) == 1.0);
    const IndexList cols{2};
    const Matrix c = select_cols(m, cols);
    CHECK(c == Matrix{{3}, {6}});
    CHECK(add(m, m) == scaled(m, 2.0));
    CHECK(subtract(m, m) == Matrix(2, 3));
    CHECK(hadamard(m, m)(1, 1) == 25.0);
    Matrix acc = m;
    axpy(acc, -1.0, m);
    CHECK(acc == Matrix(2, 3));
    CHECK(frobenius_dot(m, m) == 91.0);
    const IndexList bad{5};
    CHECK_THROWS_AS(select_rows(m, bad), Error);
}
