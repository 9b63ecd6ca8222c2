#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "psd/model.hpp"

using namespace psd;

namespace {

double probe(const ParamSet& p, const Matrix& x, const Matrix& de) {
    return frobenius_dot(de, encode(p, x).embedding);
}

double worst_param_fd(const EncoderSpec& spec, std::uint64_t seed) {
    Rng rng(seed);
    ParamSet p = init_params(spec, rng);
    for (auto& l : p.layers)
        for (double& b : l.bias) b = rng.gaussian(0.0, 0.1);
    Matrix x = gaussian_matrix(5, spec.input_dim, 0.0, 1.0, rng);
    const Encoded enc = encode(p, x);
    if (spec.activation == Activation::relu) {
        for (const auto& pre : enc.cache.pre_activations)
            for (double v : pre.data())
                if (std::abs(v) < 1e-3) return -1.0;  // too close to a kink, caller skips
    }
    const Matrix de = gaussian_matrix(5, spec.embed_dim, 0.0, 1.0, rng);
    const EncoderGrad g = encode_backward(p, enc.cache, de);
    std::vector<double> flat = p.flatten();
    const std::vector<double> d = g.d_params.flatten();
    ParamSet q = p;
    double worst = 0.0;
    for (Index k = 0; k < flat.size(); ++k) {
        const double num = oracle::central_difference(flat, k, 1e-6, [&] {
            q.assign(flat);
            return probe(q, x, de);
        });
        worst = std::max(worst, oracle::rel_error(d[k], num));
    }
    for (Index k = 0; k < x.size(); ++k) {
        const double num = oracle::central_difference(x.data(), k, 1e-6, [&] { return probe(p, x, de); });
        worst = std::max(worst, oracle::rel_error(g.d_input.data()[k], num));
    }
    return worst;
}

} // namespace

TEST_CASE("init is deterministic and shaped") {
    const EncoderSpec spec{8, {}, 4, Activation::tanh};
    Rng a(5), b(5);
    const ParamSet p = init_params(spec, a);
    CHECK(p == init_params(spec, b));
    REQUIRE(p.layers.size() == 1);
    CHECK(p.layers[0].weight.rows() == 8);
    CHECK(p.layers[0].weight.cols() == 4);
    CHECK(p.layers[0].bias.size() == 4);
    for (double x : p.layers[0].bias) CHECK(x == 0.0);
    CHECK(p.parameter_count() == 36);
}

TEST_CASE("init std is 1/sqrt(fan_in)") {
    const EncoderSpec spec{256, {}, 40, Activation::tanh};
    Rng rng(6);
    const ParamSet p = init_params(spec, rng);
    double s2 = 0.0;
    for (double x : p.layers[0].weight.data()) s2 += x * x;
    const double sd = std::sqrt(s2 / static_cast<double>(p.layers[0].weight.size()));
    CHECK(std::abs(sd - 1.0 / 16.0) < 0.2 / 16.0);
}

TEST_CASE("spec validation") {
    CHECK_THROWS_AS((EncoderSpec{0, {}, 4, Activation::tanh}.validate()), Error);
    CHECK_THROWS_AS((EncoderSpec{3, {0}, 4, Activation::tanh}.validate()), Error);
    CHECK_THROWS_AS((EncoderSpec{3, {}, 0, Activation::tanh}.validate()), Error);
    CHECK(parse_activation("relu") == Activation::relu);
    CHECK(parse_activation(to_string(Activation::tanh)) == Activation::tanh);
    CHECK_THROWS_AS(parse_activation("gelu"), Error);
}

TEST_CASE("flatten and assign are inverse") {
    const EncoderSpec spec{5, {7, 3}, 4, Activation::relu};
    Rng rng(7);
    const ParamSet p = init_params(spec, rng);
    ParamSet q = p.zeros_like();
    q.assign(p.flatten());
    CHECK(q == p);
    const auto mask = p.weight_mask();
    CHECK(mask.size() == p.parameter_count());
    Index weights = 0;
    for (auto m : mask) weights += m;
    CHECK(weights == 5 * 7 + 7 * 3 + 3 * 4);
    CHECK_THROWS_AS(q.assign(std::vector<double>(3)), Error);
}

TEST_CASE("identity linear encoder only normalizes") {
    const EncoderSpec spec{2, {}, 2, Activation::tanh};
    Rng rng(1);
    ParamSet p = init_params(spec, rng);
    p.layers[0].weight = Matrix::identity(2);
    const Matrix e = encode(p, Matrix{{3.0, 4.0}}).embedding;
    CHECK(std::abs(e(0, 0) - 0.6) < 1e-15);
    CHECK(std::abs(e(0, 1) - 0.8) < 1e-15);
}

TEST_CASE("encode is pure and outputs unit rows") {
    const EncoderSpec spec{6, {9, 5}, 4, Activation::tanh};
    Rng rng(2);
    const ParamSet p = init_params(spec, rng);
    Matrix x(3, 6);
    const Matrix row = gaussian_matrix(1, 6, 0.0, 1.0, rng);
    for (Index i = 0; i < 3; ++i)
        for (Index j = 0; j < 6; ++j) x(i, j) = row(0, j);
    const Matrix e = encode(p, x).embedding;
    for (Index j = 0; j < 4; ++j) {
        CHECK(e(0, j) == e(1, j));
        CHECK(e(0, j) == e(2, j));
    }
    const Matrix r = encode(p, gaussian_matrix(30, 6, 0.0, 1.0, rng)).embedding;
    for (Index i = 0; i < r.rows(); ++i) CHECK(std::abs(std::sqrt(dot(r.row(i), r.row(i))) - 1.0) < 1e-12);
}

TEST_CASE("encode rejects zero outputs and bad shapes") {
    const EncoderSpec spec{2, {}, 2, Activation::tanh};
    Rng rng(1);
    const ParamSet p = init_params(spec, rng);
    try {
        encode(p, Matrix{{0.0, 0.0}});
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::degenerate_input);
    }
    CHECK_THROWS_AS(encode(p, Matrix{{1.0, 2.0, 3.0}}), Error);
}

TEST_CASE("linear encoder without bias ignores input scale") {
    const EncoderSpec spec{5, {}, 3, Activation::tanh};
    Rng rng(3);
    const ParamSet p = init_params(spec, rng);
    const Matrix x = gaussian_matrix(4, 5, 0.0, 1.0, rng);
    const Matrix e = encode(p, x).embedding;
    for (double c : {0.01, 3.0, 250.0}) {
        const Matrix ec = encode(p, scaled(x, c)).embedding;
        for (Index k = 0; k < e.size(); ++k) CHECK(std::abs(e.data()[k] - ec.data()[k]) < 1e-9);
    }
}

TEST_CASE("zero upstream gradient gives zero gradients") {
    const EncoderSpec spec{4, {6}, 3, Activation::tanh};
    Rng rng(4);
    const ParamSet p = init_params(spec, rng);
    const Encoded enc = encode(p, gaussian_matrix(3, 4, 0.0, 1.0, rng));
    const EncoderGrad g = encode_backward(p, enc.cache, Matrix(3, 3));
    for (double x : g.d_params.flatten()) CHECK(x == 0.0);
    for (double x : g.d_input.data()) CHECK(x == 0.0);
    CHECK_THROWS_AS(encode_backward(p, enc.cache, Matrix(2, 3)), Error);
}

TEST_CASE("radial upstream gradient is annihilated") {
    const EncoderSpec spec{4, {6}, 3, Activation::tanh};
    Rng rng(5);
    const ParamSet p = init_params(spec, rng);
    const Encoded enc = encode(p, gaussian_matrix(3, 4, 0.0, 1.0, rng));
    const Matrix de = scaled(enc.embedding, 2.5);
    const EncoderGrad g = encode_backward(p, enc.cache, de);
    for (double x : g.d_input.data()) CHECK(std::abs(x) < 1e-12);
    for (double x : g.d_params.flatten()) CHECK(std::abs(x) < 1e-12);
}

TEST_CASE("2-hidden tanh backward matches finite differences") {
    CHECK(worst_param_fd(EncoderSpec{6, {5, 4}, 3, Activation::tanh}, 77) < 1e-5);
}

TEST_CASE("backward passes finite differences across specs and seeds") {
    const EncoderSpec specs[] = {
        {5, {}, 3, Activation::tanh},
        {5, {}, 3, Activation::relu},
        {4, {6, 5}, 3, Activation::tanh},
        {4, {6, 5}, 3, Activation::relu},
    };
    for (const auto& spec : specs) {
        Index checked = 0;
        double worst = 0.0;
        for (std::uint64_t seed = 0; checked < 50; ++seed) {
            const double w = worst_param_fd(spec, seed);
            if (w < 0.0) continue;
            worst = std::max(worst, w);
            ++checked;
        }
        CAPTURE(to_string(spec.activation));
        CAPTURE(spec.hidden_dims.size());
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("PSDW round trip and format errors") {
    const EncoderSpec spec{5, {7, 3}, 4, Activation::relu};
    Rng rng(8);
    const ParamSet p = init_params(spec, rng);
    std::stringstream buf;
    write_params(buf, p);
    const std::string bytes = buf.str();
    CHECK(bytes.substr(0, 4) == "PSDW");
    std::stringstream in(bytes);
    CHECK(read_params(in) == p);

    auto code_of = [](const std::string& b) {
        std::stringstream s(b);
        try {
            read_params(s);
        } catch (const Error& e) {
            return e.code();
        }
        return ErrorCode::config;  // sentinel: no error
    };
    std::string bad = bytes;
    bad[0] = 'X';
    CHECK(code_of(bad) == ErrorCode::bad_magic);
    std::string ver = bytes;
    ver[4] = 9;
    CHECK(code_of(ver) == ErrorCode::version_mismatch);
    CHECK(code_of(bytes.substr(0, bytes.size() - 8)) == ErrorCode::truncated);

    // a stream reader stops at the payload; the file loader rejects anything after it
    const std::string path = (std::filesystem::temp_directory_path() / "psd_test_trailing.psdw").string();
    std::ofstream(path, std::ios::binary) << bytes << 'x';
    try {
        load_params(path);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::invalid_input);
    }
    std::filesystem::remove(path);
}
