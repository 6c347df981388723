#include "dynaquant/data.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>

namespace dynaquant {

Tensor Image::tensor() const { return Tensor::from({3, height, width}, pixels); }

const char* to_string(SyntheticKind kind) {
    switch (kind) {
        case SyntheticKind::Gradients: return "gradients";
        case SyntheticKind::GaussianBlobs: return "gaussian-blobs";
        case SyntheticKind::BandLimitedNoise: return "band-limited-noise";
    }
    return "?";
}

SyntheticKind parse_synthetic_kind(const std::string& name) {
    for (auto k : {SyntheticKind::Gradients, SyntheticKind::GaussianBlobs, SyntheticKind::BandLimitedNoise})
        if (name == to_string(k)) return k;
    throw ParameterError("unknown synthetic kind '" + name + "' (gradients, gaussian-blobs, band-limited-noise)");
}

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

Image blank(std::size_t size, std::string name) {
    return Image{size, size, std::vector<float>(3 * size * size), std::move(name)};
}

void make_gradient(Image& img, Rng& rng) {
    const double angle = uniform(rng, 0.0, kTwoPi);
    const double dx = std::cos(angle), dy = std::sin(angle);
    double from[3], to[3];
    for (int c = 0; c < 3; ++c) {
        from[c] = uniform(rng, 0.2, 0.8);
        to[c] = uniform(rng, 0.2, 0.8);
    }
    const double n = static_cast<double>(img.width);
    for (std::size_t i = 0; i < img.height; ++i)
        for (std::size_t j = 0; j < img.width; ++j) {
            // Projection onto the direction, mapped to [0, 1] over the image diagonal.
            const double t = 0.5 + ((j + 0.5) / n - 0.5) * dx * 0.70710678 + ((i + 0.5) / n - 0.5) * dy * 0.70710678;
            for (int c = 0; c < 3; ++c)
                img.pixels[(c * img.height + i) * img.width + j] = static_cast<float>(from[c] + (to[c] - from[c]) * t);
        }
}

void make_blobs(Image& img, Rng& rng) {
    const double n = static_cast<double>(img.width);
    double background[3];
    for (auto& b : background) b = uniform(rng, 0.1, 0.9);
    struct Blob {
        double cy, cx, sigma, color[3];
    };
    std::vector<Blob> blobs(3 + rng() % 4);
    for (auto& b : blobs) {
        b.cy = uniform(rng, 0.0, n);
        b.cx = uniform(rng, 0.0, n);
        b.sigma = uniform(rng, n / 16.0, n / 4.0);
        for (auto& c : b.color) c = uniform(rng, 0.0, 1.0);
    }
    for (std::size_t i = 0; i < img.height; ++i)
        for (std::size_t j = 0; j < img.width; ++j) {
            double v[3] = {background[0], background[1], background[2]};
            for (const auto& b : blobs) {
                const double d2 = (i + 0.5 - b.cy) * (i + 0.5 - b.cy) + (j + 0.5 - b.cx) * (j + 0.5 - b.cx);
                const double w = std::exp(-d2 / (2.0 * b.sigma * b.sigma));
                for (int c = 0; c < 3; ++c) v[c] += w * (b.color[c] - v[c]);
            }
            for (int c = 0; c < 3; ++c)
                img.pixels[(c * img.height + i) * img.width + j] = static_cast<float>(std::clamp(v[c], 0.0, 1.0));
        }
}

void make_noise(Image& img, Rng& rng) {
    constexpr int kWaves = 24;
    const double n = static_cast<double>(img.width);
    for (int c = 0; c < 3; ++c) {
        struct Wave {
            double fy, fx, phase;
        };
        std::vector<Wave> waves(kWaves);
        for (auto& w : waves) {
            const double freq = uniform(rng, 2.0, n / 4.0) / n;
            const double dir = uniform(rng, 0.0, kTwoPi);
            w = {freq * std::sin(dir), freq * std::cos(dir), uniform(rng, 0.0, kTwoPi)};
        }
        const double norm = std::sqrt(2.0 / kWaves);
        for (std::size_t i = 0; i < img.height; ++i)
            for (std::size_t j = 0; j < img.width; ++j) {
                double s = 0.0;
                for (const auto& w : waves) s += std::sin(kTwoPi * (w.fy * i + w.fx * j) + w.phase);
                img.pixels[(c * img.height + i) * img.width + j] =
                    static_cast<float>(0.5 + 0.5 * std::tanh(1.5 * norm * s));
            }
    }
}

}  // namespace

ImageSet synthetic_dataset(const SyntheticSpec& spec) {
    if (spec.size == 0 || spec.size % 8 != 0)
        throw ParameterError("synthetic image size must be a positive multiple of 8, got " + std::to_string(spec.size));
    if (spec.kinds.empty()) throw ParameterError("synthetic dataset needs at least one kind");
    Rng rng(spec.seed);
    ImageSet out;
    out.reserve(spec.count);
    for (std::size_t i = 0; i < spec.count; ++i) {
        const auto kind = spec.kinds[i % spec.kinds.size()];
        auto img = blank(spec.size, std::string(to_string(kind)) + "-" + std::to_string(i));
        switch (kind) {
            case SyntheticKind::Gradients: make_gradient(img, rng); break;
            case SyntheticKind::GaussianBlobs: make_blobs(img, rng); break;
            case SyntheticKind::BandLimitedNoise: make_noise(img, rng); break;
        }
        out.push_back(std::move(img));
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

Image from_interleaved(const unsigned char* rgb, std::size_t height, std::size_t width, std::string name) {
    Image img{height, width, std::vector<float>(3 * height * width), std::move(name)};
    for (std::size_t i = 0; i < height * width; ++i)
        for (std::size_t c = 0; c < 3; ++c) img.pixels[c * height * width + i] = rgb[i * 3 + c] / 255.0f;
    return img;
}

std::vector<unsigned char> to_interleaved(const Image& img) {
    const std::size_t plane = img.height * img.width;
    if (img.pixels.size() != 3 * plane) throw ShapeError("image pixel buffer does not match 3 x H x W");
    std::vector<unsigned char> rgb(3 * plane);
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c)
            rgb[i * 3 + c] =
                static_cast<unsigned char>(std::lround(std::clamp(img.pixels[c * plane + i], 0.0f, 1.0f) * 255.0f));
    return rgb;
}

Image read_png(const std::filesystem::path& path) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw DataError("cannot decode PNG " + path.string() + ": " + image.message);
    image.format = PNG_FORMAT_RGB;
    std::vector<unsigned char> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
        const std::string msg = image.message;
        png_image_free(&image);
        throw DataError("cannot decode PNG " + path.string() + ": " + msg);
    }
    return from_interleaved(buffer.data(), image.height, image.width, path.filename().string());
}

/// Next PPM header token, skipping whitespace and # comments.
std::string ppm_token(std::istream& in) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {}
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok;
}

Image read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (ppm_token(in) != "P6") throw DataError(path.string() + ": not a binary PPM (P6)");
    std::size_t width = 0, height = 0, maxval = 0;
    try {
        width = std::stoul(ppm_token(in));
        height = std::stoul(ppm_token(in));
        maxval = std::stoul(ppm_token(in));
    } catch (const std::logic_error&) {
        throw DataError(path.string() + ": malformed PPM header");
    }
    if (width == 0 || height == 0 || maxval != 255)
        throw DataError(path.string() + ": only 8-bit (maxval 255) PPM images are supported");
    std::vector<unsigned char> rgb(3 * width * height);
    in.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (in.gcount() != static_cast<std::streamsize>(rgb.size())) throw DataError(path.string() + ": truncated PPM data");
    return from_interleaved(rgb.data(), height, width, path.filename().string());
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image " + path.string());
    char magic[8] = {};
    in.read(magic, sizeof magic);
    if (in.gcount() >= 2 && magic[0] == 'P' && magic[1] == '6') return read_ppm(path);
    if (in.gcount() == 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(magic), 0, 8) == 0) return read_png(path);
    throw DataError(path.string() + ": neither PNG nor binary PPM");
}

void write_png(const std::filesystem::path& path, const Image& image) {
    const auto rgb = to_interleaved(image);
    png_image out{};
    out.version = PNG_IMAGE_VERSION;
    out.width = static_cast<png_uint_32>(image.width);
    out.height = static_cast<png_uint_32>(image.height);
    out.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&out, path.c_str(), 0, rgb.data(), 0, nullptr))
        throw DataError("cannot write PNG " + path.string() + ": " + out.message);
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
    const auto rgb = to_interleaved(image);
    std::ofstream out(path, std::ios::binary);
    out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!out) throw DataError("cannot write " + path.string());
}

ImageSet load_image_dir(const std::filesystem::path& dir, std::vector<std::string>* skipped) {
    if (!std::filesystem::is_directory(dir)) throw DataError("image directory not found: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        auto ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png" || ext == ".ppm") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    ImageSet images;
    for (const auto& f : files) {
        try {
            images.push_back(read_image(f));
        } catch (const DataError& e) {
            std::cerr << "warning: skipping " << f.filename().string() << ": " << e.what() << '\n';
            if (skipped) skipped->push_back(f.filename().string() + ": " + e.what());
        }
    }
    return images;
}

Tensor random_crops(const ImageSet& images, std::size_t batch, std::size_t crop, Rng& rng) {
    if (images.empty()) throw DataError("cannot draw crops from an empty image set");
    if (batch == 0 || crop == 0) throw ParameterError("batch size and crop size must be positive");
    std::vector<float> out(batch * 3 * crop * crop);
    for (std::size_t b = 0; b < batch; ++b) {
        const auto& img = images[rng() % images.size()];
        if (img.height < crop || img.width < crop)
            throw DataError("image " + img.name + " (" + std::to_string(img.height) + "x" + std::to_string(img.width) +
                            ") is smaller than the crop size " + std::to_string(crop));
        const std::size_t top = rng() % (img.height - crop + 1);
        const std::size_t left = rng() % (img.width - crop + 1);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < crop; ++i) {
                const float* src = &img.pixels[(c * img.height + top + i) * img.width + left];
                std::copy(src, src + crop, &out[((b * 3 + c) * crop + i) * crop]);
            }
    }
    return Tensor::from({batch, 3, crop, crop}, std::move(out));
}

}  // namespace dynaquant
