#include "psd/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "binary_io.hpp"

namespace psd {

std::string_view to_string(Activation a) noexcept {
    return a == Activation::relu ? "relu" : "tanh";
}

Activation parse_activation(std::string_view text) {
    if (text == "tanh") return Activation::tanh;
    if (text == "relu") return Activation::relu;
    fail(ErrorCode::invalid_input, "unknown activation '" + std::string(text) + "'");
}

void EncoderSpec::validate() const {
    require(input_dim >= 1 && embed_dim >= 1, ErrorCode::invalid_input,
            "EncoderSpec: dimensions must be >= 1");
    for (Index h : hidden_dims) {
        require(h >= 1, ErrorCode::invalid_input, "EncoderSpec: hidden dimensions must be >= 1");
    }
}

Index ParamSet::parameter_count() const noexcept {
    Index total = 0;
    for (const auto& l : layers) {
        total += l.weight.size() + l.bias.size();
    }
    return total;
}

std::vector<double> ParamSet::flatten() const {
    std::vector<double> flat;
    flat.reserve(parameter_count());
    for (const auto& l : layers) {
        flat.insert(flat.end(), l.weight.data().begin(), l.weight.data().end());
        flat.insert(flat.end(), l.bias.begin(), l.bias.end());
    }
    return flat;
}

void ParamSet::assign(std::span<const double> flat) {
    require(flat.size() == parameter_count(), ErrorCode::invalid_input,
            "ParamSet::assign: expected " + std::to_string(parameter_count()) + " values, got " +
                std::to_string(flat.size()));
    auto it = flat.begin();
    for (auto& l : layers) {
        std::copy_n(it, l.weight.size(), l.weight.data().begin());
        it += static_cast<std::ptrdiff_t>(l.weight.size());
        std::copy_n(it, l.bias.size(), l.bias.begin());
        it += static_cast<std::ptrdiff_t>(l.bias.size());
    }
}

ParamSet ParamSet::zeros_like() const {
    ParamSet out{spec, {}};
    out.layers.reserve(layers.size());
    for (const auto& l : layers) {
        out.layers.push_back(
            Layer{Matrix(l.weight.rows(), l.weight.cols()), std::vector<double>(l.bias.size())});
    }
    return out;
}

std::vector<std::uint8_t> ParamSet::weight_mask() const {
    std::vector<std::uint8_t> mask;
    mask.reserve(parameter_count());
    for (const auto& l : layers) {
        mask.insert(mask.end(), l.weight.size(), 1);
        mask.insert(mask.end(), l.bias.size(), 0);
    }
    return mask;
}

namespace {

std::vector<Index> layer_dims(const EncoderSpec& spec) {
    std::vector<Index> dims{spec.input_dim};
    dims.insert(dims.end(), spec.hidden_dims.begin(), spec.hidden_dims.end());
    dims.push_back(spec.embed_dim);
    return dims;
}

double activate(Activation a, double x) noexcept {
    return a == Activation::tanh ? std::tanh(x) : std::max(x, 0.0);
}

// Derivative from the pre-activation value.
double activate_grad(Activation a, double pre) noexcept {
    if (a == Activation::tanh) {
        const double t = std::tanh(pre);
        return 1.0 - t * t;
    }
    return pre > 0.0 ? 1.0 : 0.0;
}

Matrix affine(const Matrix& x, const Layer& layer) {
    Matrix out = matmul(x, layer.weight);
    for (Index i = 0; i < out.rows(); ++i) {
        auto r = out.row(i);
        for (Index j = 0; j < r.size(); ++j) {
            r[j] += layer.bias[j];
        }
    }
    return out;
}

} // namespace

ParamSet init_params(const EncoderSpec& spec, Rng& rng) {
    spec.validate();
    const auto dims = layer_dims(spec);
    ParamSet params{spec, {}};
    for (Index l = 0; l + 1 < dims.size(); ++l) {
        const double stddev = 1.0 / std::sqrt(static_cast<double>(dims[l]));
        params.layers.push_back(Layer{gaussian_matrix(dims[l], dims[l + 1], 0.0, stddev, rng),
                                      std::vector<double>(dims[l + 1], 0.0)});
    }
    return params;
}

Encoded encode(const ParamSet& params, const Matrix& x) {
    require(x.cols() == params.spec.input_dim, ErrorCode::invalid_input,
            "encode: input has " + std::to_string(x.cols()) + " columns, encoder expects " +
                std::to_string(params.spec.input_dim));
    require_finite(x, "encode input");

    ForwardCache cache;
    Matrix h = x;
    const Index last = params.layers.size() - 1;
    for (Index l = 0; l < params.layers.size(); ++l) {
        Matrix a = affine(h, params.layers[l]);
        cache.inputs.push_back(std::move(h));
        if (l == last) {
            cache.output = std::move(a);
            break;
        }
        h = Matrix(a.rows(), a.cols());
        for (Index k = 0; k < a.size(); ++k) {
            h.data()[k] = activate(params.spec.activation, a.data()[k]);
        }
        cache.pre_activations.push_back(std::move(a));
    }

    const Matrix& z = cache.output;
    cache.norms.resize(z.rows());
    cache.embedding = Matrix(z.rows(), z.cols());
    for (Index i = 0; i < z.rows(); ++i) {
        const double norm = std::sqrt(dot(z.row(i), z.row(i)));
        require(norm >= 1e-12, ErrorCode::degenerate_input,
                "encode: pre-normalization output row " + std::to_string(i) + " is zero");
        cache.norms[i] = norm;
        auto e = cache.embedding.row(i);
        const auto zr = z.row(i);
        for (Index j = 0; j < zr.size(); ++j) {
            e[j] = zr[j] / norm;
        }
    }
    Matrix embedding = cache.embedding;
    return Encoded{std::move(embedding), std::move(cache)};
}

EncoderGrad encode_backward(const ParamSet& params, const ForwardCache& cache,
                            const Matrix& d_embedding) {
    require_same_shape(cache.embedding, d_embedding, "encode_backward");
    require(cache.inputs.size() == params.layers.size(), ErrorCode::invalid_input,
            "encode_backward: cache does not match parameter set");

    // Through the normalization Jacobian.
    Matrix g(d_embedding.rows(), d_embedding.cols());
    for (Index i = 0; i < g.rows(); ++i) {
        const auto e = cache.embedding.row(i);
        const auto de = d_embedding.row(i);
        const double radial = dot(e, de);
        auto gr = g.row(i);
        for (Index j = 0; j < gr.size(); ++j) {
            gr[j] = (de[j] - radial * e[j]) / cache.norms[i];
        }
    }

    EncoderGrad out{params.zeros_like(), Matrix()};
    for (Index l = params.layers.size(); l-- > 0;) {
        auto& dl = out.d_params.layers[l];
        dl.weight = transposed_matmul(cache.inputs[l], g);
        for (Index i = 0; i < g.rows(); ++i) {
            const auto gr = g.row(i);
            for (Index j = 0; j < gr.size(); ++j) {
                dl.bias[j] += gr[j];
            }
        }
        Matrix dh = matmul_transposed(g, params.layers[l].weight);
        if (l == 0) {
            out.d_input = std::move(dh);
            break;
        }
        const Matrix& pre = cache.pre_activations[l - 1];
        for (Index k = 0; k < dh.size(); ++k) {
            dh.data()[k] *= activate_grad(params.spec.activation, pre.data()[k]);
        }
        g = std::move(dh);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

std::uint32_t narrow_dim(Index v) {
    require(v <= std::numeric_limits<std::uint32_t>::max(), ErrorCode::dimension_overflow,
            "dimension does not fit in u32");
    return static_cast<std::uint32_t>(v);
}

// Guards against headers whose dimensions would multiply past any sane allocation.
constexpr std::uint64_t kMaxDim = 1u << 24;

} // namespace

void write_params(std::ostream& out, const ParamSet& params) {
    binio::Writer w(out);
    w.magic("PSDW");
    w.u32(kParamFormatVersion);
    w.u32(narrow_dim(params.spec.input_dim));
    w.u32(narrow_dim(params.spec.hidden_dims.size()));
    for (Index h : params.spec.hidden_dims) {
        w.u32(narrow_dim(h));
    }
    w.u32(narrow_dim(params.spec.embed_dim));
    w.u32(params.spec.activation == Activation::relu ? 1u : 0u);
    w.f64s(params.flatten());
    w.check("PSDW");
}

ParamSet read_params(std::istream& in, const std::string& what) {
    binio::Reader r(in, what);
    r.expect_magic("PSDW");
    r.expect_version(kParamFormatVersion);
    EncoderSpec spec;
    const auto dim = [&](const char* field) {
        const std::uint64_t v = r.u32();
        require(v >= 1 && v <= kMaxDim, ErrorCode::dimension_overflow,
                what + ": " + field + " = " + std::to_string(v) + " out of range");
        return static_cast<Index>(v);
    };
    spec.input_dim = dim("input_dim");
    const std::uint32_t hidden = r.u32();
    require(hidden <= 64, ErrorCode::dimension_overflow, what + ": too many hidden layers");
    for (std::uint32_t k = 0; k < hidden; ++k) {
        spec.hidden_dims.push_back(dim("hidden_dim"));
    }
    spec.embed_dim = dim("embed_dim");
    const std::uint32_t act = r.u32();
    require(act <= 1, ErrorCode::invalid_input, what + ": unknown activation code");
    spec.activation = act == 1 ? Activation::relu : Activation::tanh;

    ParamSet params{spec, {}};
    const auto dims = layer_dims(spec);
    std::uint64_t count = 0;
    for (Index l = 0; l + 1 < dims.size(); ++l) {
        count += static_cast<std::uint64_t>(dims[l]) * dims[l + 1] + dims[l + 1];
        params.layers.push_back(
            Layer{Matrix(dims[l], dims[l + 1]), std::vector<double>(dims[l + 1])});
    }
    params.assign(r.f64s(count));
    return params;
}

void save_params(const ParamSet& params, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::io, "cannot open '" + path + "' for writing");
    write_params(out, params);
}

ParamSet load_params(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::io, "cannot open '" + path + "'");
    ParamSet p = read_params(in, path);
    binio::Reader(in, path).expect_end();
    return p;
}

} // namespace psd
