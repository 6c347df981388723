#pragma once

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynaquant/autodiff.hpp"
#include "dynaquant/model.hpp"

namespace dynaquant {

/// PSNR returned when the reconstruction is exact.
inline constexpr double kPsnrCap = 100.0;

/// 10 log10(peak^2 / MSE), capped at kPsnrCap.
double psnr(std::span<const float> x, std::span<const float> x_hat, double peak = 1.0);
double psnr(const Tensor& x, const Tensor& x_hat, double peak = 1.0);

struct LayerBits {
    std::string name;
    std::size_t params = 0;
    int bits = 32;
    bool dynamic = false;
};

/// Bit-width of every stored parameter tensor of the coder. Quantizer (s, z) and
/// selector weights are not part of the profile; they are counted as overhead.
struct BitProfile {
    std::vector<LayerBits> layers;
    std::size_t overhead_params = 0;

    std::size_t overhead_bytes() const { return overhead_params * 4; }
};

enum class BitScope { DynamicLayers, WholeModel };

/// Builds a profile from the inventory and the bits chosen for each dynamic layer
/// (ToyCodec::layer_bits order).
BitProfile make_bit_profile(const std::vector<InventoryEntry>& inventory, const std::vector<int>& dynamic_bits);

/// Parameter-count-weighted mean bit-width over the scope.
double avg_bitwidth(const BitProfile& profile, BitScope scope);
/// Profile size in MB (2^20 bytes).
double profile_size_mb(const BitProfile& profile);

double model_size(double fp32_size_mb, double avg_bits);
double theoretical_speedup(double avg_bits);

struct RDPoint {
    double bpp = 0.0;
    double psnr_db = 0.0;
};

/// Malformed RD-curve CSV input, with the 1-based line it was found on.
class CsvFormatError : public std::runtime_error {
public:
    CsvFormatError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

/// Rate-distortion points with strictly increasing bpp and finite PSNR.
class RDCurve {
public:
    RDCurve() = default;
    explicit RDCurve(std::vector<RDPoint> points);

    /// Header "bpp,psnr_db" then one point per line.
    static RDCurve parse_csv(const std::string& text);
    static RDCurve read_csv(const std::filesystem::path& path);
    std::string to_csv() const;

    const std::vector<RDPoint>& points() const { return points_; }
    std::size_t size() const { return points_.size(); }

private:
    std::vector<RDPoint> points_;
};

/// Classic Bjøntegaard delta rate in percent: cubic least-squares fits of log10(bpp)
/// over PSNR, integrated over the shared PSNR interval. Positive means `test` needs
/// more rate than `anchor` for the same quality.
double bd_rate(const RDCurve& anchor, const RDCurve& test);

}  // namespace dynaquant
