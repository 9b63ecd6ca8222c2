#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

#include "psd/error.hpp"

namespace psd {

using Index = std::size_t;
using IndexList = std::vector<Index>;

/// Row-major dense matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(Index rows, Index cols, double fill = 0.0);
    Matrix(Index rows, Index cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(Index n);

    Index rows() const noexcept { return rows_; }
    Index cols() const noexcept { return cols_; }
    Index size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(Index r, Index c) noexcept { return data_[r * cols_ + c]; }
    double operator()(Index r, Index c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(Index r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(Index r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    bool all_finite() const noexcept;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    Index rows_ = 0;
    Index cols_ = 0;
    std::vector<double> data_;
};

/// xoshiro256** seeded through splitmix64. Fixed constants, no platform RNG.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t next_u64() noexcept;
    /// Uniform on [0, 1) with 53 bits of resolution.
    double uniform() noexcept;
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
    /// Uniform integer on [0, bound), bound >= 1; rejection-sampled so there is no modulo bias.
    std::uint64_t below(std::uint64_t bound) noexcept;
    /// Standard normal via Box-Muller; the spare deviate is cached.
    double gaussian() noexcept;
    double gaussian(double mean, double stddev) noexcept { return mean + stddev * gaussian(); }

    std::uint64_t seed() const noexcept { return seed_; }

    struct State {
        std::uint64_t seed;
        std::uint64_t words[4];
        bool has_spare;
        double spare;
    };
    State state() const noexcept;
    void restore(const State& state) noexcept;

private:
    std::uint64_t seed_;
    std::uint64_t s_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Deterministic sub-stream seed, e.g. one per epoch or per purpose.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept;

// Probability kernels.

/// Row-wise softmax of scale * M, with per-row max subtraction.
Matrix softmax_rows(const Matrix& m, double scale = 1.0);
/// Mean over rows of -sum_j targets(i,j) * log(probs(i,j)); log argument floored at 1e-300.
double cross_entropy_rows(const Matrix& targets, const Matrix& probs);
Matrix normalize_rows_l2(const Matrix& m);
/// Mean row entropy of a row-stochastic matrix (0 log 0 = 0).
double mean_row_entropy(const Matrix& p);

inline constexpr double kLogFloor = 1e-300;

// Linear algebra plumbing.

Matrix matmul(const Matrix& a, const Matrix& b);
/// a * b^T without materializing the transpose.
Matrix matmul_transposed(const Matrix& a, const Matrix& b);
/// a^T * b.
Matrix transposed_matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix select_rows(const Matrix& m, std::span<const Index> idx);
Matrix select_cols(const Matrix& m, std::span<const Index> idx);

Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scaled(const Matrix& a, double s);
Matrix hadamard(const Matrix& a, const Matrix& b);
/// a += s * b
void axpy(Matrix& a, double s, const Matrix& b);
double frobenius_dot(const Matrix& a, const Matrix& b);
inline double dot(std::span<const double> a, std::span<const double> b) noexcept {
    double s = 0.0;
    for (Index k = 0; k < a.size(); ++k) {
        s += a[k] * b[k];
    }
    return s;
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what);
void require_finite(const Matrix& m, const char* what);

// Sampling.

Matrix gaussian_matrix(Index rows, Index cols, double mean, double stddev, Rng& rng);
Matrix uniform_matrix(Index rows, Index cols, double lo, double hi, Rng& rng);
/// In-place Fisher-Yates.
void shuffle(std::span<Index> values, Rng& rng);
IndexList permutation(Index n, Rng& rng);

} // namespace psd
