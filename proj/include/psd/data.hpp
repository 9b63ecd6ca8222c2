#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "psd/numkit.hpp"

namespace psd {

/// Knobs of the synthetic paired-data generator.
///
/// Each class c owns a latent mean mu_c ~ N(0, I). An image draws z ~ N(mu_c, within_class_std^2 I);
/// its feature is W_v z + noise and each of its captions is W_t z + independent noise, where the
/// noise has std feature_noise_sigma and W_v, W_t are fixed random projections.
struct SyntheticSpec {
    Index num_classes = 10;
    Index latent_dim = 16;
    Index image_dim = 32;
    Index text_dim = 32;
    Index samples_per_class = 200;
    double within_class_std = 0.5;
    double feature_noise_sigma = 0.1;
    double mismatch_rate = 0.0;
    Index captions_per_image = 1;

    void validate() const;
};

struct PairedDataset {
    Matrix image_features;                   // n x image_dim
    Matrix text_features;                    // (n * m) x text_dim
    std::vector<std::vector<Index>> pairing; // per image, its m caption rows
    std::vector<std::uint32_t> labels;       // per image
    std::vector<std::uint8_t> corrupted;     // per image: caption list belongs to another image
    Index num_classes = 0;

    Index size() const noexcept { return image_features.rows(); }
    Index captions_per_image() const noexcept { return pairing.empty() ? 0 : pairing.front().size(); }
    Index corrupted_count() const noexcept;

    void validate() const;
    friend bool operator==(const PairedDataset&, const PairedDataset&) = default;
};

/// Exactly floor(eta * n) images get a caption list from another corrupted image (cyclic shift).
/// A corrupted set of size 1 cannot be deranged and is rejected.
PairedDataset generate(const SyntheticSpec& spec, Rng& rng);

struct SplitDataset {
    PairedDataset train;
    PairedDataset heldout;
};

/// `train` is identical to generate(spec, rng); `heldout` is sampled afterwards from the same
/// classes and projections, with holdout_per_class images per class and no corruption.
SplitDataset generate_split(const SyntheticSpec& spec, Index holdout_per_class, Rng& rng);

/// One caption row per image, uniform over its m candidates.
IndexList select_captions(const PairedDataset& ds, Rng& rng);

/// Subset of images (and their captions) in the given order.
PairedDataset subset(const PairedDataset& ds, std::span<const Index> images);

// PSDD: "PSDD", u32 version, u32 n, m, image_dim, text_dim, K, then image features and text
// features as f64, then pairing (n*m u32), labels (n u32), corrupted (n u8). Little-endian.
inline constexpr std::uint32_t kDatasetFormatVersion = 1;

void write_pairs(std::ostream& out, const PairedDataset& ds);
PairedDataset read_pairs(std::istream& in, const std::string& what = "PSDD");
void save_pairs(const PairedDataset& ds, const std::string& path);
PairedDataset load_pairs(const std::string& path);

} // namespace psd
