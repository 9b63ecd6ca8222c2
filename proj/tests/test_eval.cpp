#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "psd/eval.hpp"

using namespace psd;

namespace {

Matrix unit_rows(Index n, Index d, Rng& rng) {
    return normalize_rows_l2(gaussian_matrix(n, d, 0.0, 1.0, rng));
}

} // namespace

TEST_CASE("diagonal-dominant retrieval is perfect") {
    // V T^T = [[0.9, 0.1], [0.2, 0.8]]: with V = I the text rows are the similarity columns.
    const Matrix v = Matrix::identity(2);
    const Matrix t{{0.9, 0.2}, {0.1, 0.8}};
    const RetrievalPair r = retrieval_eval(v, t, {1, 2});
    for (const auto* rep : {&r.image_to_text, &r.text_to_image}) {
        CHECK(rep->recall_at.at(1) == 100.0);
        CHECK(rep->mean_rank == 1.0);
    }
}

TEST_CASE("anti-diagonal retrieval") {
    const Matrix v = Matrix::identity(2);
    const Matrix t{{0.1, 0.8}, {0.9, 0.2}};
    const RetrievalPair r = retrieval_eval(v, t, {1, 2});
    for (const auto* rep : {&r.image_to_text, &r.text_to_image}) {
        CHECK(rep->recall_at.at(1) == 0.0);
        CHECK(rep->recall_at.at(2) == 100.0);
        CHECK(rep->mean_rank == 2.0);
    }
}

TEST_CASE("retrieval matches the brute-force oracle") {
    Rng rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        const Index n = 5 + rng.below(46), d = 2 + rng.below(6);
        const Matrix v = unit_rows(n, d, rng), t = unit_rows(n, d, rng);
        const IndexList ks{1, 5, n};
        const RetrievalPair r = retrieval_eval(v, t, ks);
        const auto i2t = oracle::ranks(oracle::to_mat(v), oracle::to_mat(t));
        const auto t2i = oracle::ranks(oracle::to_mat(t), oracle::to_mat(v));
        for (Index i = 0; i < n; ++i) {
            CHECK(r.image_to_text.ranks[i] == i2t[i]);
            CHECK(r.text_to_image.ranks[i] == t2i[i]);
        }
        for (Index k : ks) {
            CHECK(r.image_to_text.recall_at.at(k) == oracle::recall_at(i2t, k));
            CHECK(r.text_to_image.recall_at.at(k) == oracle::recall_at(t2i, k));
        }
        CHECK(std::abs(r.image_to_text.mean_rank - oracle::mean_rank(i2t)) < 1e-10);
        CHECK(std::abs(r.text_to_image.mean_rank - oracle::mean_rank(t2i)) < 1e-10);
    }
}

TEST_CASE("retrieval ties go to the lower index") {
    // Every similarity equal: each query's partner ranks at its own index + 1.
    Matrix v(4, 2), t(4, 2);
    for (Index i = 0; i < 4; ++i) v(i, 0) = t(i, 0) = 1.0;
    const RetrievalPair r = retrieval_eval(v, t, {1});
    CHECK(r.image_to_text.ranks == IndexList{1, 2, 3, 4});
    CHECK(r.image_to_text.mean_rank == 2.5);
}

TEST_CASE("recall is monotone in K, complete at N, and relabeling-invariant") {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const Index n = 3 + rng.below(30);
        const Matrix v = unit_rows(n, 4, rng), t = unit_rows(n, 4, rng);
        IndexList ks(n);
        for (Index k = 0; k < n; ++k) ks[k] = k + 1;
        const RetrievalPair r = retrieval_eval(v, t, ks);
        for (Index k = 1; k < n; ++k) CHECK(r.text_to_image.recall_at.at(k) <= r.text_to_image.recall_at.at(k + 1));
        CHECK(r.image_to_text.recall_at.at(n) == 100.0);
        const IndexList perm = permutation(n, rng);
        const RetrievalPair p = retrieval_eval(select_rows(v, perm), select_rows(t, perm), ks);
        CHECK(p.image_to_text.recall_at == r.image_to_text.recall_at);
        CHECK(p.text_to_image.mean_rank == doctest::Approx(r.text_to_image.mean_rank).epsilon(1e-12));
    }
}

TEST_CASE("retrieval K out of range") {
    const Matrix v = Matrix::identity(3);
    CHECK_THROWS_AS(retrieval_eval(v, v, {4}), Error);
    CHECK_THROWS_AS(retrieval_eval(v, v, {0}), Error);
    CHECK_THROWS_AS(retrieval_eval(v, Matrix::identity(2), {1}), Error);
}

TEST_CASE("zero-shot trivial cases") {
    Rng rng(3);
    const Matrix v = unit_rows(6, 8, rng);
    CHECK(zero_shot_top1(v, v, {0, 1, 2, 3, 4, 5}) == 100.0);
    const Matrix protos = Matrix::identity(3);
    const Matrix same{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {0, 1, 0}};
    CHECK(zero_shot_top1(same, protos, {0, 1, 2, 1}) == 100.0);
    CHECK(zero_shot_top1(same, protos, {1, 2, 0, 0}) == 0.0);
    CHECK_THROWS_AS(zero_shot_top1(same, protos, {0, 1, 3, 1}), Error);
    CHECK_THROWS_AS(zero_shot_top1(same, protos, {0, 1}), Error);
}

TEST_CASE("zero-shot matches the argmax oracle") {
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const Index n = 10 + rng.below(41), k = 2 + rng.below(8);
        const Matrix v = unit_rows(n, 5, rng), p = unit_rows(k, 5, rng);
        std::vector<std::uint32_t> labels(n);
        for (auto& l : labels) l = static_cast<std::uint32_t>(rng.below(k));
        CHECK(zero_shot_top1(v, p, labels) == oracle::zero_shot(oracle::to_mat(v), oracle::to_mat(p), labels));
    }
}

TEST_CASE("histogram matches the binning oracle") {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> xs(500);
        for (double& x : xs) x = rng.uniform(-1.0, 1.0);
        xs.push_back(1.0);
        xs.push_back(-1.0);
        const Index bins = 1 + rng.below(30);
        const Histogram h = make_histogram(xs, bins);
        CHECK(h.counts == oracle::histogram(xs, bins, -1.0, 1.0));
    }
    CHECK(make_histogram({1.0}, 4).counts.back() == 1);
    CHECK_THROWS_AS(make_histogram({0.0}, 0), Error);
}

TEST_CASE("histogram csv") {
    const Histogram h = make_histogram({-0.9, 0.1, 0.2}, 2);
    CHECK(histogram_csv(h) == "bin_center,count\n-0.5,1\n0.5,2\n");
}

TEST_CASE("similarity stats") {
    const Matrix id = Matrix::identity(4);
    const SimilarityStats s = similarity_stats(id, id, 10);
    CHECK(s.positive_scores.size() == 4);
    CHECK(s.negative_scores.size() == 12);
    for (double x : s.positive_scores) CHECK(x == 1.0);
    for (double x : s.negative_scores) CHECK(x == 0.0);
    CHECK(s.mean_positive() == 1.0);
    CHECK(s.mean_negative() == 0.0);
    CHECK_THROWS_AS(similarity_stats(id, id, 0), Error);

    Rng rng(6);
    const Matrix v = unit_rows(20, 6, rng), t = unit_rows(20, 6, rng);
    const SimilarityStats r = similarity_stats(v, t, 16);
    std::uint64_t pos = 0, neg = 0;
    for (auto c : r.positive_hist.counts) pos += c;
    for (auto c : r.negative_hist.counts) neg += c;
    CHECK(pos == 20);
    CHECK(neg == 380);
    CHECK(r.negative_hist.counts == oracle::histogram(r.negative_scores, 16, -1.0, 1.0));
    for (double x : r.negative_scores) CHECK((x >= -1.0 - 1e-9 && x <= 1.0 + 1e-9));
}

TEST_CASE("probe loss is ln K at zero weights") {
    Rng rng(7);
    const Matrix x = gaussian_matrix(12, 3, 0.0, 1.0, rng);
    const std::vector<std::uint32_t> y{0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3};
    const ProbeObjective obj{x, y, 4, 1e-4};
    std::vector<double> g;
    CHECK(std::abs(obj.loss_and_grad(std::vector<double>(obj.parameter_count(), 0.0), g) - std::log(4.0)) < 1e-14);
    const ProbeResult r = linear_probe(x, y, x, y, 4);
    CHECK(std::abs(r.initial_loss - std::log(4.0)) < 1e-14);
}

TEST_CASE("probe gradient matches finite differences") {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const Index n = 5 + rng.below(10), d = 1 + rng.below(6), k = 2 + rng.below(4);
        const Matrix x = gaussian_matrix(n, d, 0.0, 1.0, rng);
        std::vector<std::uint32_t> y(n);
        for (auto& l : y) l = static_cast<std::uint32_t>(rng.below(k));
        const ProbeObjective obj{x, y, k, 0.01};
        std::vector<double> w(obj.parameter_count()), g, scratch;
        for (double& p : w) p = rng.gaussian();
        obj.loss_and_grad(w, g);
        for (Index i = 0; i < w.size(); ++i) {
            const double num = oracle::central_difference(w, i, 1e-6, [&] { return obj.loss_and_grad(w, scratch); });
            CHECK(oracle::rel_error(g[i], num) < 1e-5);
        }
    }
}

TEST_CASE("probe separates a separable toy set") {
    Matrix x(40, 2);
    std::vector<std::uint32_t> y(40);
    Rng rng(9);
    for (Index i = 0; i < 40; ++i) {
        y[i] = i % 2;
        x(i, 0) = (y[i] ? 1.0 : -1.0) + rng.uniform(-0.5, 0.5);
        x(i, 1) = rng.uniform(-3.0, 3.0);
    }
    ProbeOptions opt;
    const ProbeResult r = linear_probe(x, y, x, y, 2, opt);
    CHECK(r.train_accuracy == 100.0);
    CHECK(r.test_accuracy == 100.0);
    CHECK(r.iterations <= 1000);
    for (Index i = 1; i < r.loss_history.size(); ++i) CHECK(r.loss_history[i] <= r.loss_history[i - 1]);
}

TEST_CASE("probe is deterministic and monotone on noisy data") {
    Rng rng(10);
    const Matrix x = gaussian_matrix(200, 8, 0.0, 1.0, rng);
    std::vector<std::uint32_t> y(200);
    for (Index i = 0; i < 200; ++i) y[i] = static_cast<std::uint32_t>((x(i, 0) + 0.5 * x(i, 1) > 0) + 2 * (rng.uniform() < 0.3));
    const ProbeResult a = linear_probe(x, y, x, y, 4);
    const ProbeResult b = linear_probe(x, y, x, y, 4);
    CHECK(a.loss_history == b.loss_history);
    CHECK(a.final_loss < a.initial_loss);
    for (Index i = 1; i < a.loss_history.size(); ++i) CHECK(a.loss_history[i] <= a.loss_history[i - 1]);
    CHECK_THROWS_AS(linear_probe(x, y, x, y, 1), Error);
}
