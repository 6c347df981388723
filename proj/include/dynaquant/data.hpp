#pragma once

// Image sets for training and evaluation: seeded synthetic images, PNG/PPM files,
// and random-crop batching.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dynaquant/autodiff.hpp"

namespace dynaquant {

/// RGB image, channel-major (3, H, W), values in [0, 1].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> pixels;
    std::string name;

    Tensor tensor() const;  ///< (3, H, W)
};

using ImageSet = std::vector<Image>;

enum class SyntheticKind { Gradients, GaussianBlobs, BandLimitedNoise };

const char* to_string(SyntheticKind kind);
/// Accepts "gradients", "gaussian-blobs", "band-limited-noise". Throws ParameterError.
SyntheticKind parse_synthetic_kind(const std::string& name);

struct SyntheticSpec {
    std::size_t count = 16;
    std::size_t size = 64;
    std::vector<SyntheticKind> kinds{SyntheticKind::Gradients, SyntheticKind::GaussianBlobs,
                                     SyntheticKind::BandLimitedNoise};
    std::uint64_t seed = 0;
};

/// Deterministic in its argument. Image i has kind kinds[i % kinds.size()]. Throws
/// ParameterError unless size is a positive multiple of 8.
ImageSet synthetic_dataset(const SyntheticSpec& spec);

/// Reads an 8-bit RGB PNG or a binary PPM (P6), chosen by the file's magic bytes.
/// Throws DataError.
Image read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);
void write_ppm(const std::filesystem::path& path, const Image& image);

/// All .png/.ppm files of a directory in name order. Files that fail to decode are
/// skipped and their names (with the reason) appended to `skipped`.
ImageSet load_image_dir(const std::filesystem::path& dir, std::vector<std::string>* skipped = nullptr);

/// (batch, 3, crop, crop) of random crops from random images.
Tensor random_crops(const ImageSet& images, std::size_t batch, std::size_t crop, Rng& rng);

}  // namespace dynaquant
