#include "psd/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

namespace psd {

const char* error_code_name(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::invalid_input: return "invalid-input";
    case ErrorCode::degenerate_input: return "degenerate-input";
    case ErrorCode::empty_batch: return "empty-batch";
    case ErrorCode::non_finite: return "non-finite";
    case ErrorCode::divergence: return "divergence";
    case ErrorCode::bad_magic: return "bad-magic";
    case ErrorCode::version_mismatch: return "version-mismatch";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::dimension_overflow: return "dimension-overflow";
    case ErrorCode::io: return "io";
    case ErrorCode::config: return "config";
    }
    return "unknown";
}

Matrix::Matrix(Index rows, Index cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(Index rows, Index cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, ErrorCode::invalid_input,
            "matrix data length " + std::to_string(data_.size()) + " != " +
                std::to_string(rows_) + "x" + std::to_string(cols_));
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        require(r.size() == cols_, ErrorCode::invalid_input, "ragged matrix literal");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(Index n) {
    Matrix m(n, n);
    for (Index i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Rng

namespace {

std::uint64_t splitmix64(std::uint64_t& x) noexcept {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
}

} // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& w : s_) {
        w = splitmix64(x);
    }
}

std::uint64_t Rng::next_u64() noexcept {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t bound) noexcept {
    if (bound <= 1) {
        return 0;
    }
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % bound;
}

double Rng::gaussian() noexcept {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

Rng::State Rng::state() const noexcept {
    return State{seed_, {s_[0], s_[1], s_[2], s_[3]}, has_spare_, spare_};
}

void Rng::restore(const State& state) noexcept {
    seed_ = state.seed;
    std::copy(std::begin(state.words), std::end(state.words), s_);
    has_spare_ = state.has_spare;
    spare_ = state.spare;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
    std::uint64_t x = seed ^ rotl(stream * 0xD1B54A32D192ED03ULL, 17);
    splitmix64(x);
    return splitmix64(x);
}

// ---------------------------------------------------------------------------
// Probability kernels

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::invalid_input,
            std::string(what) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                std::to_string(b.cols()));
}

void require_finite(const Matrix& m, const char* what) {
    require(m.all_finite(), ErrorCode::invalid_input, std::string(what) + ": non-finite entry");
}

Matrix softmax_rows(const Matrix& m, double scale) {
    require_finite(m, "softmax_rows");
    require(std::isfinite(scale) && scale > 0.0, ErrorCode::invalid_input,
            "softmax_rows: scale must be positive and finite");
    Matrix out(m.rows(), m.cols());
    for (Index i = 0; i < m.rows(); ++i) {
        const auto in = m.row(i);
        auto o = out.row(i);
        if (in.empty()) {
            continue;
        }
        const double peak = *std::max_element(in.begin(), in.end());
        double total = 0.0;
        for (Index j = 0; j < in.size(); ++j) {
            o[j] = std::exp(scale * (in[j] - peak));
            total += o[j];
        }
        for (double& x : o) {
            x /= total;
        }
    }
    return out;
}

double cross_entropy_rows(const Matrix& targets, const Matrix& probs) {
    require_same_shape(targets, probs, "cross_entropy_rows");
    if (targets.rows() == 0) {
        return 0.0;
    }
    double total = 0.0;
    for (Index i = 0; i < targets.rows(); ++i) {
        double row = 0.0;
        for (Index j = 0; j < targets.cols(); ++j) {
            const double t = targets(i, j);
            if (t != 0.0) {
                row -= t * std::log(std::max(probs(i, j), kLogFloor));
            }
        }
        total += row;
    }
    return total / static_cast<double>(targets.rows());
}

double mean_row_entropy(const Matrix& p) {
    if (p.rows() == 0) {
        return 0.0;
    }
    double total = 0.0;
    for (double x : p.data()) {
        if (x > 0.0) {
            total -= x * std::log(x);
        }
    }
    return total / static_cast<double>(p.rows());
}

Matrix normalize_rows_l2(const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    for (Index i = 0; i < m.rows(); ++i) {
        const auto in = m.row(i);
        const double norm = std::sqrt(dot(in, in));
        require(norm >= 1e-12, ErrorCode::degenerate_input,
                "normalize_rows_l2: row " + std::to_string(i) + " has near-zero norm");
        auto o = out.row(i);
        for (Index j = 0; j < in.size(); ++j) {
            o[j] = in[j] / norm;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

Matrix matmul(const Matrix& a, const Matrix& b) {
    require(a.cols() == b.rows(), ErrorCode::invalid_input, "matmul: inner dimension mismatch");
    Matrix out(a.rows(), b.cols());
    for (Index i = 0; i < a.rows(); ++i) {
        auto o = out.row(i);
        for (Index k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) {
                continue;
            }
            const auto brow = b.row(k);
            for (Index j = 0; j < b.cols(); ++j) {
                o[j] += aik * brow[j];
            }
        }
    }
    return out;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
    require(a.cols() == b.cols(), ErrorCode::invalid_input,
            "matmul_transposed: inner dimension mismatch");
    Matrix out(a.rows(), b.rows());
    for (Index i = 0; i < a.rows(); ++i) {
        const auto arow = a.row(i);
        for (Index j = 0; j < b.rows(); ++j) {
            out(i, j) = dot(arow, b.row(j));
        }
    }
    return out;
}

Matrix transposed_matmul(const Matrix& a, const Matrix& b) {
    require(a.rows() == b.rows(), ErrorCode::invalid_input,
            "transposed_matmul: inner dimension mismatch");
    Matrix out(a.cols(), b.cols());
    for (Index k = 0; k < a.rows(); ++k) {
        const auto arow = a.row(k);
        const auto brow = b.row(k);
        for (Index i = 0; i < a.cols(); ++i) {
            const double aki = arow[i];
            if (aki == 0.0) {
                continue;
            }
            auto o = out.row(i);
            for (Index j = 0; j < b.cols(); ++j) {
                o[j] += aki * brow[j];
            }
        }
    }
    return out;
}

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols(), m.rows());
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            out(j, i) = m(i, j);
        }
    }
    return out;
}

Matrix select_rows(const Matrix& m, std::span<const Index> idx) {
    Matrix out(idx.size(), m.cols());
    for (Index r = 0; r < idx.size(); ++r) {
        require(idx[r] < m.rows(), ErrorCode::invalid_input, "select_rows: index out of range");
        const auto src = m.row(idx[r]);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

Matrix select_cols(const Matrix& m, std::span<const Index> idx) {
    Matrix out(m.rows(), idx.size());
    for (Index c = 0; c < idx.size(); ++c) {
        require(idx[c] < m.cols(), ErrorCode::invalid_input, "select_cols: index out of range");
    }
    for (Index r = 0; r < m.rows(); ++r) {
        for (Index c = 0; c < idx.size(); ++c) {
            out(r, c) = m(r, idx[c]);
        }
    }
    return out;
}

namespace {

template <typename Op>
Matrix zip(const Matrix& a, const Matrix& b, const char* what, Op op) {
    require_same_shape(a, b, what);
    Matrix out(a.rows(), a.cols());
    for (Index k = 0; k < a.size(); ++k) {
        out.data()[k] = op(a.data()[k], b.data()[k]);
    }
    return out;
}

} // namespace

Matrix add(const Matrix& a, const Matrix& b) {
    return zip(a, b, "add", [](double x, double y) { return x + y; });
}

Matrix subtract(const Matrix& a, const Matrix& b) {
    return zip(a, b, "subtract", [](double x, double y) { return x - y; });
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    return zip(a, b, "hadamard", [](double x, double y) { return x * y; });
}

Matrix scaled(const Matrix& a, double s) {
    Matrix out = a;
    for (double& x : out.data()) {
        x *= s;
    }
    return out;
}

void axpy(Matrix& a, double s, const Matrix& b) {
    require_same_shape(a, b, "axpy");
    for (Index k = 0; k < a.size(); ++k) {
        a.data()[k] += s * b.data()[k];
    }
}

double frobenius_dot(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "frobenius_dot");
    return dot(a.data(), b.data());
}

// ---------------------------------------------------------------------------
// Sampling

Matrix gaussian_matrix(Index rows, Index cols, double mean, double stddev, Rng& rng) {
    Matrix out(rows, cols);
    for (double& x : out.data()) {
        x = rng.gaussian(mean, stddev);
    }
    return out;
}

Matrix uniform_matrix(Index rows, Index cols, double lo, double hi, Rng& rng) {
    Matrix out(rows, cols);
    for (double& x : out.data()) {
        x = rng.uniform(lo, hi);
    }
    return out;
}

void shuffle(std::span<Index> values, Rng& rng) {
    for (Index i = values.size(); i > 1; --i) {
        const Index j = rng.below(i);
        std::swap(values[i - 1], values[j]);
    }
}

IndexList permutation(Index n, Rng& rng) {
    IndexList out(n);
    std::iota(out.begin(), out.end(), Index{0});
    shuffle(out, rng);
    return out;
}

} // namespace psd
