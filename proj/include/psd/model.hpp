#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "psd/numkit.hpp"

namespace psd {

enum class Activation { tanh, relu };

std::string_view to_string(Activation a) noexcept;
Activation parse_activation(std::string_view text);

/// Shape of one modality encoder: input -> hidden... -> embed, then l2-normalized.
struct EncoderSpec {
    Index input_dim = 1;
    std::vector<Index> hidden_dims;
    Index embed_dim = 32;
    Activation activation = Activation::tanh;

    void validate() const;
    friend bool operator==(const EncoderSpec&, const EncoderSpec&) = default;
};

/// Weights stored as fan_in x fan_out, so a layer computes y = x W + b.
struct Layer {
    Matrix weight;
    std::vector<double> bias;

    friend bool operator==(const Layer&, const Layer&) = default;
};

/// Flattening order: for each layer, weight (row-major) then bias.
struct ParamSet {
    EncoderSpec spec;
    std::vector<Layer> layers;

    Index parameter_count() const noexcept;
    std::vector<double> flatten() const;
    void assign(std::span<const double> flat);
    /// Zero-filled set with the same shape.
    ParamSet zeros_like() const;
    /// 1 for weight entries, 0 for biases, in flattening order.
    std::vector<std::uint8_t> weight_mask() const;

    friend bool operator==(const ParamSet&, const ParamSet&) = default;
};

ParamSet init_params(const EncoderSpec& spec, Rng& rng);

struct ForwardCache {
    std::vector<Matrix> inputs;       // input to each layer
    std::vector<Matrix> pre_activations;
    Matrix output;                    // final layer output before normalization
    std::vector<double> norms;        // row norms of `output`
    Matrix embedding;                 // normalized output
};

struct Encoded {
    Matrix embedding;
    ForwardCache cache;
};

/// Forward pass. Throws degenerate-input if an output row has (near) zero norm.
Encoded encode(const ParamSet& params, const Matrix& x);

struct EncoderGrad {
    ParamSet d_params;
    Matrix d_input;
};

/// Backprop of dE through normalization (I - e e^T) / |z| and the layers.
EncoderGrad encode_backward(const ParamSet& params, const ForwardCache& cache, const Matrix& d_embedding);

// PSDW: "PSDW", u32 version, spec fields, params in flattening order as f64 (all little-endian).
inline constexpr std::uint32_t kParamFormatVersion = 1;

void write_params(std::ostream& out, const ParamSet& params);
ParamSet read_params(std::istream& in, const std::string& what = "PSDW");
void save_params(const ParamSet& params, const std::string& path);
ParamSet load_params(const std::string& path);

} // namespace psd
