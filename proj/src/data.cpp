#include "psd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "binary_io.hpp"

namespace psd {

void SyntheticSpec::validate() const {
    require(num_classes >= 1 && latent_dim >= 1 && image_dim >= 1 && text_dim >= 1 &&
                samples_per_class >= 1 && captions_per_image >= 1,
            ErrorCode::invalid_input, "SyntheticSpec: counts and dimensions must be >= 1");
    require(within_class_std >= 0.0 && feature_noise_sigma >= 0.0, ErrorCode::invalid_input,
            "SyntheticSpec: noise levels must be non-negative");
    require(mismatch_rate >= 0.0 && mismatch_rate <= 1.0, ErrorCode::invalid_input,
            "SyntheticSpec: mismatch_rate must lie in [0, 1]");
}

Index PairedDataset::corrupted_count() const noexcept {
    return static_cast<Index>(std::count(corrupted.begin(), corrupted.end(), std::uint8_t{1}));
}

void PairedDataset::validate() const {
    const Index n = size();
    require(pairing.size() == n && labels.size() == n && corrupted.size() == n,
            ErrorCode::invalid_input, "PairedDataset: per-image tables disagree with n");
    const Index m = captions_per_image();
    require(n == 0 || m >= 1, ErrorCode::invalid_input, "PairedDataset: m must be >= 1");
    require(text_features.rows() == n * m, ErrorCode::invalid_input,
            "PairedDataset: caption rows must equal n * m");
    std::vector<char> seen(text_features.rows(), 0);
    for (const auto& caps : pairing) {
        require(caps.size() == m, ErrorCode::invalid_input, "PairedDataset: ragged pairing");
        for (Index c : caps) {
            require(c < seen.size() && !seen[c], ErrorCode::invalid_input,
                    "PairedDataset: pairing must cover each caption row exactly once");
            seen[c] = 1;
        }
    }
    for (auto label : labels) {
        require(label < num_classes, ErrorCode::invalid_input, "PairedDataset: label out of range");
    }
}

namespace {

struct World {
    Matrix class_means;  // K x latent
    Matrix image_proj;   // latent x image_dim
    Matrix text_proj;    // latent x text_dim
};

World make_world(const SyntheticSpec& spec, Rng& rng) {
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(spec.latent_dim));
    World w;
    w.class_means = gaussian_matrix(spec.num_classes, spec.latent_dim, 0.0, 1.0, rng);
    w.image_proj = gaussian_matrix(spec.latent_dim, spec.image_dim, 0.0, proj_std, rng);
    w.text_proj = gaussian_matrix(spec.latent_dim, spec.text_dim, 0.0, proj_std, rng);
    return w;
}

void add_noise(Matrix& m, double sigma, Rng& rng) {
    if (sigma == 0.0) {
        return;
    }
    for (double& x : m.data()) {
        x += rng.gaussian(0.0, sigma);
    }
}

PairedDataset sample(const World& world, const SyntheticSpec& spec, Index per_class,
                     double mismatch_rate, Rng& rng) {
    const Index k = spec.num_classes;
    const Index n = k * per_class;
    const Index m = spec.captions_per_image;

    Matrix latent(n, spec.latent_dim);
    PairedDataset ds;
    ds.num_classes = k;
    ds.labels.resize(n);
    for (Index i = 0; i < n; ++i) {
        const Index c = i / per_class;
        ds.labels[i] = static_cast<std::uint32_t>(c);
        auto z = latent.row(i);
        const auto mu = world.class_means.row(c);
        for (Index d = 0; d < z.size(); ++d) {
            z[d] = mu[d] + rng.gaussian(0.0, spec.within_class_std);
        }
    }

    ds.image_features = matmul(latent, world.image_proj);
    add_noise(ds.image_features, spec.feature_noise_sigma, rng);

    Matrix caption_latent(n * m, spec.latent_dim);
    for (Index i = 0; i < n; ++i) {
        for (Index c = 0; c < m; ++c) {
            std::copy_n(latent.row(i).begin(), spec.latent_dim,
                        caption_latent.row(i * m + c).begin());
        }
    }
    ds.text_features = matmul(caption_latent, world.text_proj);
    add_noise(ds.text_features, spec.feature_noise_sigma, rng);

    ds.pairing.resize(n);
    for (Index i = 0; i < n; ++i) {
        for (Index c = 0; c < m; ++c) {
            ds.pairing[i].push_back(i * m + c);
        }
    }
    ds.corrupted.assign(n, 0);

    const auto n_bad =
        static_cast<Index>(std::floor(mismatch_rate * static_cast<double>(n)));
    require(n_bad != 1, ErrorCode::invalid_input,
            "generate: floor(eta * n) = 1, a single corrupted pair cannot be swapped");
    if (n_bad >= 2) {
        const IndexList order = permutation(n, rng);
        const auto original = ds.pairing;
        for (Index r = 0; r < n_bad; ++r) {
            const Index img = order[r];
            ds.pairing[img] = original[order[(r + 1) % n_bad]];
            ds.corrupted[img] = 1;
        }
    }
    return ds;
}

} // namespace

PairedDataset generate(const SyntheticSpec& spec, Rng& rng) {
    spec.validate();
    const World world = make_world(spec, rng);
    return sample(world, spec, spec.samples_per_class, spec.mismatch_rate, rng);
}

SplitDataset generate_split(const SyntheticSpec& spec, Index holdout_per_class, Rng& rng) {
    spec.validate();
    const World world = make_world(spec, rng);
    SplitDataset out;
    out.train = sample(world, spec, spec.samples_per_class, spec.mismatch_rate, rng);
    if (holdout_per_class > 0) {
        out.heldout = sample(world, spec, holdout_per_class, 0.0, rng);
    }
    return out;
}

IndexList select_captions(const PairedDataset& ds, Rng& rng) {
    IndexList out(ds.size());
    for (Index i = 0; i < ds.size(); ++i) {
        const auto& caps = ds.pairing[i];
        out[i] = caps[rng.below(caps.size())];
    }
    return out;
}

PairedDataset subset(const PairedDataset& ds, std::span<const Index> images) {
    const Index m = ds.captions_per_image();
    PairedDataset out;
    out.num_classes = ds.num_classes;
    out.image_features = select_rows(ds.image_features, images);
    IndexList caption_rows;
    caption_rows.reserve(images.size() * m);
    for (Index r = 0; r < images.size(); ++r) {
        const Index i = images[r];
        std::vector<Index> caps;
        for (Index c : ds.pairing[i]) {
            caps.push_back(caption_rows.size());
            caption_rows.push_back(c);
        }
        out.pairing.push_back(std::move(caps));
        out.labels.push_back(ds.labels[i]);
        out.corrupted.push_back(ds.corrupted[i]);
    }
    out.text_features = select_rows(ds.text_features, caption_rows);
    return out;
}

// ---------------------------------------------------------------------------
// PSDD

namespace {

std::uint32_t to_u32(Index v, const char* field) {
    require(v <= std::numeric_limits<std::uint32_t>::max(), ErrorCode::dimension_overflow,
            std::string("PSDD: ") + field + " does not fit in u32");
    return static_cast<std::uint32_t>(v);
}

} // namespace

void write_pairs(std::ostream& out, const PairedDataset& ds) {
    ds.validate();
    binio::Writer w(out);
    w.magic("PSDD");
    w.u32(kDatasetFormatVersion);
    w.u32(to_u32(ds.size(), "n"));
    w.u32(to_u32(ds.captions_per_image(), "m"));
    w.u32(to_u32(ds.image_features.cols(), "image_dim"));
    w.u32(to_u32(ds.text_features.cols(), "text_dim"));
    w.u32(to_u32(ds.num_classes, "K"));
    w.f64s(ds.image_features.data());
    w.f64s(ds.text_features.data());
    for (const auto& caps : ds.pairing) {
        for (Index c : caps) {
            w.u32(to_u32(c, "caption index"));
        }
    }
    for (auto label : ds.labels) {
        w.u32(label);
    }
    for (auto flag : ds.corrupted) {
        w.u8(flag);
    }
    w.check("PSDD");
}

PairedDataset read_pairs(std::istream& in, const std::string& what) {
    binio::Reader r(in, what);
    r.expect_magic("PSDD");
    r.expect_version(kDatasetFormatVersion);
    const std::uint64_t n = r.u32();
    const std::uint64_t m = r.u32();
    const std::uint64_t image_dim = r.u32();
    const std::uint64_t text_dim = r.u32();
    const std::uint64_t k = r.u32();

    // Sizes are products of u32 fields; anything beyond 2^40 elements is refused outright.
    constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 40;
    const auto product = [&](std::uint64_t a, std::uint64_t b, const char* field) {
        require(b == 0 || a <= kMaxElements / b, ErrorCode::dimension_overflow,
                what + ": " + field + " overflows");
        return a * b;
    };
    require(m >= 1 || n == 0, ErrorCode::invalid_input, what + ": m must be >= 1");
    const std::uint64_t captions = product(n, m, "n * m");
    const std::uint64_t image_values = product(n, image_dim, "n * image_dim");
    const std::uint64_t text_values = product(captions, text_dim, "n * m * text_dim");

    // Whole payload must be present before allocating.
    const std::uint64_t payload = product(image_values + text_values, 8, "payload") +
                                  product(captions + n, 4, "tables") + n;
    r.require_remaining(payload, 1);

    PairedDataset ds;
    ds.num_classes = k;
    ds.image_features = Matrix(n, image_dim, r.f64s(image_values));
    ds.text_features = Matrix(captions, text_dim, r.f64s(text_values));
    ds.pairing.resize(n);
    for (auto& caps : ds.pairing) {
        caps.resize(m);
        for (auto& c : caps) {
            c = r.u32();
        }
    }
    ds.labels.resize(n);
    for (auto& label : ds.labels) {
        label = r.u32();
    }
    ds.corrupted.resize(n);
    for (auto& flag : ds.corrupted) {
        flag = r.u8();
        require(flag <= 1, ErrorCode::invalid_input, what + ": corruption flag must be 0 or 1");
    }
    ds.validate();
    return ds;
}

void save_pairs(const PairedDataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::io, "cannot open '" + path + "' for writing");
    write_pairs(out, ds);
}

PairedDataset load_pairs(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::io, "cannot open '" + path + "'");
    PairedDataset ds = read_pairs(in, path);
    binio::Reader(in, path).expect_end();
    return ds;
}

} // namespace psd
