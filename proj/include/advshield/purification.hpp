#pragma once

// Purification simulators (JPEG, bit-depth reduction, down/up resizing) and
// the harness that measures how much of a perturbation survives them.

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "advshield/dct.hpp"
#include "advshield/losses.hpp"
#include "advshield/metrics.hpp"
#include "advshield/resample.hpp"

namespace advshield {

// Standard IJG quality scaling of the luminance table.
inline std::array<double, 64> jpeg_quant_table(int quality) {
    if (quality < 1 || quality > 100)
        throw std::invalid_argument("JPEG quality must be in [1,100], got " + std::to_string(quality));
    int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    std::array<double, 64> q{};
    for (std::size_t i = 0; i < 64; ++i) q[i] = std::max(1, (kLuminanceTable[i] * scale + 50) / 100);
    return q;
}

// Per channel, RGB domain, 4:4:4: level shift, 8x8 DCT, quantize with
// round-half-up, dequantize, inverse DCT, clamp. Edge blocks are completed by
// replicating the last row/column. Output is not re-rounded to 8 bits.
inline Tensor jpeg_compress(const Tensor& x, int quality) {
    auto q = jpeg_quant_table(quality);
    if (x.rank() != 3) throw ShapeError("jpeg_compress expects [c,h,w], got " + shape_str(x.shape()));
    std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::vector<double> out(x.numel());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t by = 0; by < blocks_for(h); ++by)
            for (std::size_t bx = 0; bx < blocks_for(w); ++bx) {
                Block blk{};
                for (std::size_t i = 0; i < kBlock; ++i)
                    for (std::size_t j = 0; j < kBlock; ++j) {
                        std::size_t y = std::min(by * kBlock + i, h - 1), xx = std::min(bx * kBlock + j, w - 1);
                        blk[i * kBlock + j] = x.at(ch, y, xx) * 255.0 - 128.0;
                    }
                Block f = dct2(blk);
                for (std::size_t k = 0; k < 64; ++k) f[k] = std::floor(f[k] / q[k] + 0.5) * q[k];
                Block r = idct2(f);
                for (std::size_t i = 0; i < kBlock; ++i)
                    for (std::size_t j = 0; j < kBlock; ++j) {
                        std::size_t y = by * kBlock + i, xx = bx * kBlock + j;
                        if (y < h && xx < w)
                            out[(ch * h + y) * w + xx] = std::clamp((r[i * kBlock + j] + 128.0) / 255.0, 0.0, 1.0);
                    }
            }
    return Tensor(x.shape(), std::move(out));
}

// round(x (2^b - 1)) / (2^b - 1), rounding half up.
inline Tensor bit_reduce(const Tensor& x, int bits) {
    if (bits < 1 || bits > 8) throw std::invalid_argument("bits must be in [1,8], got " + std::to_string(bits));
    double levels = static_cast<double>((1 << bits) - 1);
    std::vector<double> v = x.values();
    for (auto& e : v) e = std::floor(e * levels + 0.5) / levels;
    return Tensor(x.shape(), std::move(v));
}

// Down to floor(factor * side) with `mode`, then bilinear back to the original size.
inline Tensor purify_resize(const Tensor& x, double factor, ResizeMode mode) {
    if (!(factor > 0 && factor <= 1)) throw std::invalid_argument("resize factor must be in (0,1]");
    if (mode == ResizeMode::nearest) throw std::invalid_argument("resize purifier supports bilinear and area");
    if (x.rank() != 3) throw ShapeError("purify_resize expects [c,h,w], got " + shape_str(x.shape()));
    std::size_t h = x.dim(1), w = x.dim(2);
    Tensor small = resize(x, {scaled_extent(h, factor), scaled_extent(w, factor)}, mode);
    return resize(small, {h, w}, ResizeMode::bilinear);
}

struct Purifier {
    enum class Kind { identity, jpeg, bits, resize };
    Kind kind = Kind::identity;
    int quality = 75;
    int bits = 8;
    double factor = 1.0;
    ResizeMode mode = ResizeMode::bilinear;

    std::string name() const {
        switch (kind) {
            case Kind::identity: return "identity";
            case Kind::jpeg: return "jpeg";
            case Kind::bits: return "bits";
            case Kind::resize: return "resize";
        }
        return "?";
    }
    std::string params() const {
        std::ostringstream os;
        switch (kind) {
            case Kind::identity: break;
            case Kind::jpeg: os << "q=" << quality; break;
            case Kind::bits: os << "bits=" << bits; break;
            case Kind::resize: os << "factor=" << factor << " mode=" << to_string(mode); break;
        }
        return os.str();
    }
    // Canonical "jpeg:75" style label, parseable by parse_purifier.
    std::string label() const {
        std::ostringstream os;
        switch (kind) {
            case Kind::identity: os << "identity"; break;
            case Kind::jpeg: os << "jpeg:" << quality; break;
            case Kind::bits: os << "bits:" << bits; break;
            case Kind::resize: os << "resize:" << factor << ':' << to_string(mode); break;
        }
        return os.str();
    }
    Tensor apply(const Tensor& x) const {
        switch (kind) {
            case Kind::identity: return x.detach();
            case Kind::jpeg: return jpeg_compress(x, quality);
            case Kind::bits: return bit_reduce(x, bits);
            case Kind::resize: return purify_resize(x, factor, mode);
        }
        throw std::logic_error("unknown purifier");
    }
};

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) parts.push_back(cur);
    if (!s.empty() && s.back() == sep) parts.emplace_back();
    return parts;
}

inline int parse_int(const std::string& s, const std::string& ctx) {
    std::size_t used = 0;
    int v = 0;
    try {
        v = std::stoi(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != s.size()) throw std::invalid_argument("bad integer '" + s + "' in " + ctx);
    return v;
}

inline double parse_double(const std::string& s, const std::string& ctx) {
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != s.size()) throw std::invalid_argument("bad number '" + s + "' in " + ctx);
    return v;
}

}  // namespace detail

// "identity", "jpeg:Q", "bits:B", "resize:F[:bilinear|area]" (mode defaults to bilinear).
inline Purifier parse_purifier(const std::string& spec) {
    auto parts = detail::split(spec, ':');
    Purifier p;
    if (parts.empty()) throw std::invalid_argument("empty purifier spec");
    const std::string& kind = parts[0];
    if (kind == "identity" && parts.size() == 1) return p;
    if (kind == "jpeg" && parts.size() == 2) {
        p.kind = Purifier::Kind::jpeg;
        p.quality = detail::parse_int(parts[1], spec);
        jpeg_quant_table(p.quality);
        return p;
    }
    if (kind == "bits" && parts.size() == 2) {
        p.kind = Purifier::Kind::bits;
        p.bits = detail::parse_int(parts[1], spec);
        if (p.bits < 1 || p.bits > 8) throw std::invalid_argument("bits must be in [1,8] in " + spec);
        return p;
    }
    if (kind == "resize" && (parts.size() == 2 || parts.size() == 3)) {
        p.kind = Purifier::Kind::resize;
        p.factor = detail::parse_double(parts[1], spec);
        if (!(p.factor > 0 && p.factor <= 1)) throw std::invalid_argument("resize factor must be in (0,1] in " + spec);
        if (parts.size() == 3) {
            if (parts[2] == "bilinear")
                p.mode = ResizeMode::bilinear;
            else if (parts[2] == "area")
                p.mode = ResizeMode::area;
            else
                throw std::invalid_argument("resize mode must be bilinear or area in " + spec);
        }
        return p;
    }
    throw std::invalid_argument("unknown purifier '" + spec + "'");
}

// Comma-separated list of purifier specs.
inline std::vector<Purifier> parse_purifier_list(const std::string& list) {
    std::vector<Purifier> out;
    for (const auto& item : detail::split(list, ','))
        if (!item.empty()) out.push_back(parse_purifier(item));
    if (out.empty()) throw std::invalid_argument("empty purifier list");
    return out;
}

// JPEG 90/75/50, 8- and 3-bit reduction, resize 0.75 and 0.5 in both modes.
inline std::vector<Purifier> default_purifier_grid() {
    return parse_purifier_list(
        "jpeg:90,jpeg:75,jpeg:50,bits:8,bits:3,resize:0.75:bilinear,resize:0.75:area,resize:0.5:bilinear,"
        "resize:0.5:area");
}

// Share of the perturbation d = x_protected - x that survives purification
// coherently: <P(x + d) - P(x), d> / ||d||^2. 1 when P leaves d intact, 0 when
// it erases d. The raw residual norm is a poor survival measure under JPEG,
// because every coefficient pushed across a quantization boundary adds a full
// quantization step of noise that has nothing to do with d.
inline double retained_fraction(const Tensor& residual, const Tensor& x, const Tensor& x_protected) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        double d = x_protected[i] - x[i];
        num += residual[i] * d;
        den += d * d;
    }
    if (den == 0) throw std::invalid_argument("retained_fraction: zero perturbation");
    return num / den;
}

inline double residual_energy_fraction(const Purifier& p, const Tensor& x, const Tensor& x_protected) {
    require_same_shape(x, x_protected, "residual_energy_fraction");
    return retained_fraction(sub(p.apply(x_protected), p.apply(x)), x, x_protected);
}

struct RobustnessRecord {
    std::string name, params, label;
    double residual_energy = 0;           // ||P(x_p) - P(x)||_2
    double residual_fraction = 0;         // retained_fraction; 0 when x_p == x
    double ism_toy = 1;                   // cos(A(P(x_p)), A(x))
    std::size_t detected_cells = 0;       // P-Net cells above t_prob on the clean image
    std::size_t failed_cells = 0;         // of those, cells at or below t_prob after purification
    double detector_failure_rate = 0;     // failed / detected, 0 when nothing was detected
    LossValues losses;                    // all four losses at d_eff = P(x_p) - x
};

struct RobustnessReport {
    std::vector<RobustnessRecord> records;
};

inline constexpr const char* kRobustnessHeader =
    "purifier,params,residual_energy,residual_fraction,ism_toy,detected_cells,failed_cells,detector_failure_rate,"
    "l_proj,l_attn,l_mtcnn,l_id,total";

inline std::string format_robustness_record(const RobustnessRecord& r) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%s,%s,%.12g,%.12g,%.12g,%zu,%zu,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g",
                  r.label.c_str(), r.params.c_str(), r.residual_energy, r.residual_fraction, r.ism_toy,
                  r.detected_cells, r.failed_cells, r.detector_failure_rate, r.losses.proj, r.losses.attn,
                  r.losses.mtcnn, r.losses.id, r.losses.total);
    return buf;
}

inline std::string format_robustness_report(const RobustnessReport& rep) {
    std::string s = std::string(kRobustnessHeader) + "\n";
    for (const auto& r : rep.records) s += format_robustness_record(r) + "\n";
    return s;
}

inline RobustnessReport evaluate_robustness(const Tensor& x, const Tensor& x_protected, const ToyModelBundle& b,
                                            const std::vector<Purifier>& purifiers,
                                            const LossConfig& cfg = LossConfig()) {
    require_same_shape(x, x_protected, "evaluate_robustness");
    AttackObjective objective(b, x, cfg);
    const auto& det = objective.detector_state();
    Tensor clean_embedding = b.identity.forward(x);

    std::vector<Tensor> clean_masks;
    for (double s : det.scales)
        for (ResizePath path : kResizePaths)
            clean_masks.push_back(build_prob_mask(select(b.pnet.forward(resize_path(x, s, path)), 1), det.t_prob));

    bool unperturbed = mse(x_protected, x) == 0;
    RobustnessReport rep;
    for (const auto& p : purifiers) {
        RobustnessRecord r;
        r.name = p.name();
        r.params = p.params();
        r.label = p.label();
        Tensor purified = p.apply(x_protected);
        Tensor residual = sub(purified, p.apply(x));
        double energy = 0;
        for (double v : residual.data()) energy += v * v;
        r.residual_energy = std::sqrt(energy);
        r.residual_fraction = unperturbed ? 0.0 : retained_fraction(residual, x, x_protected);
        r.ism_toy = cosine_similarity(b.identity.forward(purified), clean_embedding).item();

        std::size_t k = 0;
        for (double s : det.scales)
            for (ResizePath path : kResizePaths) {
                Tensor pt = select(b.pnet.forward(resize_path(purified, s, path)), 1);
                const Tensor& m = clean_masks[k++];
                for (std::size_t i = 0; i < pt.numel(); ++i)
                    if (m[i] != 0) {
                        ++r.detected_cells;
                        r.failed_cells += pt[i] <= det.t_prob;
                    }
            }
        r.detector_failure_rate =
            r.detected_cells ? static_cast<double>(r.failed_cells) / static_cast<double>(r.detected_cells) : 0.0;
        r.losses = objective.evaluate(sub(purified, x)).values;
        rep.records.push_back(std::move(r));
    }
    return rep;
}

}  // namespace advshield
