#include "dynaquant/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace dynaquant {

double psnr(std::span<const float> x, std::span<const float> x_hat, double peak) {
    if (x.size() != x_hat.size())
        throw ShapeError("psnr: " + std::to_string(x.size()) + " vs " + std::to_string(x_hat.size()) + " elements");
    if (x.empty()) throw ShapeError("psnr: empty input");
    double se = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = static_cast<double>(x[i]) - x_hat[i];
        se += d * d;
    }
    const double mse = se / static_cast<double>(x.size());
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

double psnr(const Tensor& x, const Tensor& x_hat, double peak) {
    if (x.shape() != x_hat.shape())
        throw ShapeError("psnr: shapes " + shape_str(x.shape()) + " and " + shape_str(x_hat.shape()) + " differ");
    return psnr(x.data(), x_hat.data(), peak);
}

BitProfile make_bit_profile(const std::vector<InventoryEntry>& inventory, const std::vector<int>& dynamic_bits) {
    BitProfile profile;
    for (const auto& e : inventory) {
        if (e.role == ParamRole::Quantizer || e.role == ParamRole::Selector) {
            profile.overhead_params += e.params;
            continue;
        }
        LayerBits layer{e.name, e.params, 32, false};
        if (e.source == BitSource::Fixed8) {
            layer.bits = 8;
        } else if (e.source == BitSource::Dynamic) {
            const std::size_t idx = e.dynamic_layer.value();
            if (idx >= dynamic_bits.size())
                throw ContractError("bit profile: no bits for dynamic layer " + std::to_string(idx));
            layer.bits = dynamic_bits[idx];
            layer.dynamic = true;
        }
        profile.layers.push_back(std::move(layer));
    }
    return profile;
}

double avg_bitwidth(const BitProfile& profile, BitScope scope) {
    double weighted = 0.0, count = 0.0;
    for (const auto& l : profile.layers) {
        if (scope == BitScope::DynamicLayers && !l.dynamic) continue;
        weighted += static_cast<double>(l.params) * l.bits;
        count += static_cast<double>(l.params);
    }
    if (count == 0.0) throw ContractError("avg_bitwidth: profile has no parameters in scope");
    return weighted / count;
}

double profile_size_mb(const BitProfile& profile) {
    double bits = 0.0;
    for (const auto& l : profile.layers) bits += static_cast<double>(l.params) * l.bits;
    return bits / 8.0 / (1024.0 * 1024.0);
}

double model_size(double fp32_size_mb, double avg_bits) {
    if (!(fp32_size_mb > 0.0) || !(avg_bits > 0.0)) throw ParameterError("model_size: inputs must be positive");
    return fp32_size_mb * avg_bits / 32.0;
}

double theoretical_speedup(double avg_bits) {
    if (!(avg_bits > 0.0)) throw ParameterError("theoretical_speedup: bit-width must be positive");
    return 32.0 / avg_bits;
}

// ---------------------------------------------------------------------------

RDCurve::RDCurve(std::vector<RDPoint> points) : points_(std::move(points)) {
    for (std::size_t i = 0; i < points_.size(); ++i) {
        const auto& p = points_[i];
        if (!std::isfinite(p.bpp) || !std::isfinite(p.psnr_db) || p.bpp <= 0.0)
            throw DataError("RD point " + std::to_string(i) + " must have finite PSNR and positive bpp");
        if (i > 0 && !(p.bpp > points_[i - 1].bpp))
            throw DataError("RD curve bpp must be strictly increasing (point " + std::to_string(i) + ")");
    }
}

RDCurve RDCurve::parse_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    std::vector<RDPoint> points;
    bool header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        if (!header) {
            if (line != "bpp,psnr_db") throw CsvFormatError(line_no, "expected header 'bpp,psnr_db'");
            header = true;
            continue;
        }
        const auto comma = line.find(',');
        if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos)
            throw CsvFormatError(line_no, "expected two comma-separated values");
        RDPoint p;
        try {
            std::size_t used = 0;
            const std::string a = line.substr(0, comma), b = line.substr(comma + 1);
            p.bpp = std::stod(a, &used);
            if (a.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(a);
            p.psnr_db = std::stod(b, &used);
            if (b.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(b);
        } catch (const std::logic_error&) {
            throw CsvFormatError(line_no, "not a number");
        }
        if (!points.empty() && !(p.bpp > points.back().bpp))
            throw CsvFormatError(line_no, "bpp must be strictly increasing");
        if (!std::isfinite(p.psnr_db) || !(p.bpp > 0.0)) throw CsvFormatError(line_no, "bpp must be positive, PSNR finite");
        points.push_back(p);
    }
    if (!header) throw CsvFormatError(line_no + 1, "missing header 'bpp,psnr_db'");
    return RDCurve(std::move(points));
}

RDCurve RDCurve::read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read RD curve " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_csv(buf.str());
}

std::string RDCurve::to_csv() const {
    std::ostringstream out;
    out.precision(10);
    out << "bpp,psnr_db\n";
    for (const auto& p : points_) out << p.bpp << ',' << p.psnr_db << '\n';
    return out.str();
}

namespace {

/// Least-squares cubic log10(bpp) = c0 + c1 q + c2 q^2 + c3 q^3 over PSNR q.
Eigen::Vector4d fit_log_rate(const RDCurve& curve) {
    const auto n = static_cast<Eigen::Index>(curve.size());
    Eigen::MatrixXd a(n, 4);
    Eigen::VectorXd b(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double q = curve.points()[static_cast<std::size_t>(i)].psnr_db;
        a(i, 0) = 1.0;
        a(i, 1) = q;
        a(i, 2) = q * q;
        a(i, 3) = q * q * q;
        b(i) = std::log10(curve.points()[static_cast<std::size_t>(i)].bpp);
    }
    return a.colPivHouseholderQr().solve(b);
}

double integrate_cubic(const Eigen::Vector4d& c, double lo, double hi) {
    const auto antiderivative = [&c](double q) {
        return ((c(3) / 4.0 * q + c(2) / 3.0) * q + c(1) / 2.0) * q * q + c(0) * q;
    };
    return antiderivative(hi) - antiderivative(lo);
}

std::pair<double, double> psnr_range(const RDCurve& curve) {
    const auto [lo, hi] = std::minmax_element(curve.points().begin(), curve.points().end(),
                                              [](const RDPoint& a, const RDPoint& b) { return a.psnr_db < b.psnr_db; });
    return {lo->psnr_db, hi->psnr_db};
}

}  // namespace

double bd_rate(const RDCurve& anchor, const RDCurve& test) {
    if (anchor.size() < 4 || test.size() < 4) throw DataError("bd_rate needs at least 4 points per curve");
    const auto [a_lo, a_hi] = psnr_range(anchor);
    const auto [t_lo, t_hi] = psnr_range(test);
    const double lo = std::max(a_lo, t_lo), hi = std::min(a_hi, t_hi);
    if (!(hi > lo))
        throw DataError("bd_rate: PSNR ranges do not overlap ([" + std::to_string(a_lo) + ", " + std::to_string(a_hi) +
                        "] vs [" + std::to_string(t_lo) + ", " + std::to_string(t_hi) + "])");
    const double mean_diff =
        (integrate_cubic(fit_log_rate(test), lo, hi) - integrate_cubic(fit_log_rate(anchor), lo, hi)) / (hi - lo);
    return (std::pow(10.0, mean_diff) - 1.0) * 100.0;
}

}  // namespace dynaquant
