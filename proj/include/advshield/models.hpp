#pragma once

// Seeded, frozen stand-ins for the networks the attack targets:
//   FaceProjector      image -> condition tokens [seq, d]
//   CrossAttentionBlock query image x tokens -> attention map [h, res, seq]
//   PNetToy            image -> per-cell (P_F, P_T) face probabilities
//   IdentityEmbedder   image -> unit-norm identity vector [128]
// All are tanh conv stacks so every loss built on them is smooth away from
// its masks, which keeps finite-difference checks meaningful.

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "advshield/nn.hpp"
#include "advshield/resample.hpp"
#include "advshield/tensor.hpp"

namespace advshield {

struct NamedParam {
    std::string name;
    Tensor* tensor;
    std::size_t fan_in;
};

struct Conv {
    Tensor weight, bias;
    std::size_t stride = 1, padding = 0;

    Conv() = default;
    Conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_ = 1, std::size_t padding_ = 0,
         bool with_bias = true)
        : weight(Tensor::zeros({out, in, k, k})),
          bias(with_bias ? Tensor::zeros({out}) : Tensor()),
          stride(stride_),
          padding(padding_) {}

    Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
    std::size_t fan_in() const { return weight.dim(1) * weight.dim(2) * weight.dim(3); }
    void collect(const std::string& prefix, std::vector<NamedParam>& out) {
        out.push_back({prefix + ".weight", &weight, fan_in()});
        if (bias.defined()) out.push_back({prefix + ".bias", &bias, fan_in()});
    }
};

struct Dense {
    Tensor weight, bias;  // weight is [in, out]

    Dense() = default;
    Dense(std::size_t in, std::size_t out, bool with_bias = true)
        : weight(Tensor::zeros({in, out})), bias(with_bias ? Tensor::zeros({out}) : Tensor()) {}

    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
    void collect(const std::string& prefix, std::vector<NamedParam>& out) {
        out.push_back({prefix + ".weight", &weight, weight.dim(0)});
        if (bias.defined()) out.push_back({prefix + ".bias", &bias, weight.dim(0)});
    }
};

inline constexpr std::size_t kPoolGrid = 4;

// Fixed pre-activation gains. Uniform 1/sqrt(fan_in) weights shrink the signal
// by about sqrt(3) per tanh layer, which leaves an untrained stack nearly
// linear and blind to small perturbations; these gains put each stack in a
// responsive regime instead.
inline constexpr double kInputScale = 2.0;  // x -> (x - 0.5) * scale
inline constexpr double kTrunkGain = 6.0;
inline constexpr double kPNetGain = 4.0;
inline constexpr double kFacePrior = 0.3;  // subtracted from the face logit
inline constexpr double kIdentityGain = 6.0;
inline constexpr double kQueryGain = 4.0;

inline Tensor normalize_input(const Tensor& x) { return mul(sub(x, 0.5), kInputScale); }

inline void require_image(const Tensor& x, std::size_t min_side, bool square, const char* who) {
    if (x.rank() != 3 || x.dim(0) != 3)
        throw ShapeError(std::string(who) + ": expected a 3xHxW image, got " + shape_str(x.shape()));
    if (square && x.dim(1) != x.dim(2))
        throw ShapeError(std::string(who) + ": expected a square image, got " + shape_str(x.shape()));
    if (std::min(x.dim(1), x.dim(2)) < min_side)
        throw ShapeError(std::string(who) + ": image side must be >= " + std::to_string(min_side) + ", got " +
                         shape_str(x.shape()));
}

// Two stride-2 convs, then area pooling to a fixed 4x4 grid so the feature
// size does not depend on the input resolution.
struct ConvTrunk {
    Conv c1{3, 8, 3, 2, 1};
    Conv c2{8, 16, 3, 2, 1};

    Tensor operator()(const Tensor& x) const {
        Tensor h = tanh(mul(c1(normalize_input(x)), kTrunkGain));
        h = tanh(mul(c2(h), kTrunkGain));
        return resize(h, {kPoolGrid, kPoolGrid}, ResizeMode::area);  // [16, 4, 4]
    }
    void collect(const std::string& prefix, std::vector<NamedParam>& out) {
        c1.collect(prefix + ".conv1", out);
        c2.collect(prefix + ".conv2", out);
    }
};

inline constexpr std::size_t kTrunkFeatures = 16 * kPoolGrid * kPoolGrid;

struct FaceProjector {
    static constexpr std::size_t seq = 4, dim = 16;
    ConvTrunk trunk;
    Dense head{kTrunkFeatures, seq * dim};

    Tensor forward(const Tensor& x) const {
        require_image(x, 16, true, "FaceProjector");
        Tensor f = reshape(trunk(x), {1, kTrunkFeatures});
        return reshape(head(f), {seq, dim});
    }
    std::vector<NamedParam> params() {
        std::vector<NamedParam> p;
        trunk.collect("projector", p);
        head.collect("projector.head", p);
        return p;
    }
};

struct CrossAttentionBlock {
    static constexpr std::size_t heads = 1, res = kPoolGrid * kPoolGrid, dim = 16;
    ConvTrunk encoder;
    Dense w_q{dim, dim, false};
    Dense w_k{FaceProjector::dim, dim, false};

    // Q [res, d] from the query image.
    Tensor query(const Tensor& x) const {
        require_image(x, 16, true, "CrossAttentionBlock");
        Tensor f = reshape(encoder(x), {dim, res});
        return mul(w_q(transpose(f)), kQueryGain);
    }
    // K [seq, d] from condition tokens.
    Tensor keys(const Tensor& tokens) const {
        if (tokens.rank() != 2 || tokens.dim(1) != FaceProjector::dim)
            throw ShapeError("CrossAttentionBlock: tokens must be [seq," + std::to_string(FaceProjector::dim) +
                             "], got " + shape_str(tokens.shape()));
        return w_k(tokens);
    }
    // softmax(Q K^T / sqrt(d)) over the token axis, shaped [h, res, seq].
    static Tensor attention_map(const Tensor& q, const Tensor& k) {
        Tensor logits = mul(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.dim(1))));
        Tensor a = softmax(logits, 1);
        return reshape(a, {heads, q.dim(0), k.dim(0)});
    }
};

struct PNetToy {
    Conv c1{3, 10, 3};
    Conv c2{10, 16, 2, 2};
    Conv c3{16, 16, 3};
    Conv c4{16, 32, 3};
    Conv c5{32, 2, 1};

    // [2, ceil((h-10)/2), ceil((w-10)/2)]; channel 0 is P_F, channel 1 is P_T.
    Tensor forward(const Tensor& x) const {
        require_image(x, 12, false, "PNetToy");
        const double g = kPNetGain;
        Tensor h = tanh(mul(c1(normalize_input(x)), g));
        // ceil-mode for the stride-2 stage
        h = pad2d(h, {0, h.dim(1) % 2, 0, h.dim(2) % 2});
        h = tanh(mul(c2(h), g));
        h = tanh(mul(c3(h), g));
        h = tanh(mul(c4(h), g));
        Tensor z = c5(h);
        std::vector<double> prior(z.numel(), 0.0);
        std::fill(prior.begin() + static_cast<std::ptrdiff_t>(z.numel() / 2), prior.end(), -kFacePrior);
        return softmax(add(z, Tensor(z.shape(), std::move(prior))), 0);
    }
    std::vector<NamedParam> params() {
        std::vector<NamedParam> p;
        c1.collect("pnet.conv1", p);
        c2.collect("pnet.conv2", p);
        c3.collect("pnet.conv3", p);
        c4.collect("pnet.conv4", p);
        c5.collect("pnet.conv5", p);
        return p;
    }
};

inline Tensor l2_norm(const Tensor& v) { return sqrt(sum(square(v))); }

inline Tensor l2_normalize(const Tensor& v) {
    Tensor n = l2_norm(v);
    if (n.item() == 0.0) throw std::domain_error("l2_normalize: zero vector");
    return div(v, n);
}

inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    return div(dot(a, b), mul(l2_norm(a), l2_norm(b)));
}

struct IdentityEmbedder {
    static constexpr std::size_t dim = 128;
    // No biases: on the centred input the stack is an odd function, so
    // unrelated images embed near-orthogonally instead of sharing a common
    // offset direction, and A(1 - x) = -A(x).
    Conv c1{3, 16, 3, 2, 1, false};
    Conv c2{16, 32, 3, 2, 1, false};
    Conv c3{32, 32, 3, 1, 1, false};
    Dense head{32 * kPoolGrid * kPoolGrid, dim, false};

    Tensor forward(const Tensor& x) const {
        require_image(x, 16, true, "IdentityEmbedder");
        const double g = kIdentityGain;
        Tensor h = tanh(mul(c1(normalize_input(x)), g));
        h = tanh(mul(c2(h), g));
        h = tanh(mul(c3(h), g));
        h = resize(h, {kPoolGrid, kPoolGrid}, ResizeMode::area);
        Tensor f = reshape(h, {1, 32 * kPoolGrid * kPoolGrid});
        return l2_normalize(reshape(head(f), {dim}));
    }
    std::vector<NamedParam> params() {
        std::vector<NamedParam> p;
        c1.collect("identity.conv1", p);
        c2.collect("identity.conv2", p);
        c3.collect("identity.conv3", p);
        head.collect("identity.head", p);
        return p;
    }
};

inline constexpr char kWeightMagic[9] = "ADVSHLD1";
inline constexpr std::uint32_t kWeightFormatVersion = 1;

struct ToyModelBundle {
    FaceProjector projector;
    CrossAttentionBlock attention;
    PNetToy pnet;
    IdentityEmbedder identity;
    std::uint64_t seed = 0;
    std::uint32_t format_version = kWeightFormatVersion;

    struct ModelParams {
        std::string model;
        std::vector<NamedParam> params;
    };

    // Declaration order; defines both weight synthesis and file layout.
    std::vector<ModelParams> layout() {
        std::vector<NamedParam> attn;
        attention.encoder.collect("attention.encoder", attn);
        attention.w_q.collect("attention.w_q", attn);
        attention.w_k.collect("attention.w_k", attn);
        return {{"projector", projector.params()},
                {"attention", std::move(attn)},
                {"pnet", pnet.params()},
                {"identity", identity.params()}};
    }
};

// 53-bit uniforms from the standard-specified mt19937_64 stream; no
// distribution objects, so the draws are identical on every platform.
class WeightRng {
   public:
    explicit WeightRng(std::uint64_t seed) : gen_(seed) {}
    double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
    double symmetric(double s) { return (2.0 * uniform01() - 1.0) * s; }

   private:
    std::mt19937_64 gen_;
};

// Weights uniform in [-s, s] with s = 1/sqrt(fan_in).
inline ToyModelBundle init_models(std::uint64_t seed) {
    ToyModelBundle b;
    b.seed = seed;
    WeightRng rng(seed);
    for (auto& m : b.layout())
        for (auto& p : m.params) {
            double s = 1.0 / std::sqrt(static_cast<double>(p.fan_in));
            for (auto& v : p.tensor->mutable_data()) v = rng.symmetric(s);
        }
    return b;
}

// ---------------------------------------------------------------------------
// Weight file: little-endian
//   "ADVSHLD1" | u64 seed | u32 model count
//   per model: str name | u32 param count | per param: str name | u32 rank | u32 dims[rank]
//   then every parameter as raw f64, in table order
// where str is u32 length followed by the bytes.

class WeightFormatError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_str(std::string& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out += s;
}

class ByteReader {
   public:
    explicit ByteReader(const std::string& bytes) : b_(bytes) {}
    std::uint64_t u(int n) {
        if (pos_ + static_cast<std::size_t>(n) > b_.size()) throw WeightFormatError("weight file truncated");
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_++])) << (8 * i);
        return v;
    }
    std::uint32_t u32() { return static_cast<std::uint32_t>(u(4)); }
    std::uint64_t u64() { return u(8); }
    std::string str() {
        std::size_t n = u32();
        if (pos_ + n > b_.size()) throw WeightFormatError("weight file truncated");
        std::string s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == b_.size(); }

   private:
    const std::string& b_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_weights(const ToyModelBundle& bundle) {
    auto& b = const_cast<ToyModelBundle&>(bundle);  // layout() only hands out pointers; nothing is written
    auto lay = b.layout();
    std::string out(kWeightMagic, 8);
    detail::put_u64(out, b.seed);
    detail::put_u32(out, static_cast<std::uint32_t>(lay.size()));
    for (auto& m : lay) {
        detail::put_str(out, m.model);
        detail::put_u32(out, static_cast<std::uint32_t>(m.params.size()));
        for (auto& p : m.params) {
            detail::put_str(out, p.name);
            detail::put_u32(out, static_cast<std::uint32_t>(p.tensor->rank()));
            for (auto d : p.tensor->shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
        }
    }
    for (auto& m : lay)
        for (auto& p : m.params)
            for (double v : p.tensor->data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    return out;
}

inline ToyModelBundle deserialize_weights(const std::string& bytes) {
    if (bytes.size() < 8 || bytes.compare(0, 8, kWeightMagic) != 0)
        throw WeightFormatError("not a weight file (bad magic)");
    std::string body = bytes.substr(8);
    detail::ByteReader r(body);
    ToyModelBundle b;
    b.seed = r.u64();
    auto lay = b.layout();
    if (r.u32() != lay.size()) throw WeightFormatError("weight file: unexpected model count");
    for (auto& m : lay) {
        if (r.str() != m.model) throw WeightFormatError("weight file: model table mismatch at " + m.model);
        if (r.u32() != m.params.size()) throw WeightFormatError("weight file: parameter count mismatch in " + m.model);
        for (auto& p : m.params) {
            if (r.str() != p.name) throw WeightFormatError("weight file: expected parameter " + p.name);
            std::uint32_t rank = r.u32();
            Shape s(rank);
            for (auto& d : s) d = r.u32();
            if (s != p.tensor->shape())
                throw WeightFormatError("weight file: " + p.name + " has shape " + shape_str(s) + ", expected " +
                                        shape_str(p.tensor->shape()));
        }
    }
    for (auto& m : lay)
        for (auto& p : m.params)
            for (auto& v : p.tensor->mutable_data()) v = std::bit_cast<double>(r.u64());
    if (!r.done()) throw WeightFormatError("weight file: trailing bytes");
    return b;
}

inline void save_weights(const ToyModelBundle& bundle, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    std::string bytes = serialize_weights(bundle);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("failed writing " + path);
}

inline ToyModelBundle load_weights(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open weight file " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_weights(bytes);
}

// ---------------------------------------------------------------------------
// Forward passes

inline Tensor project_condition(const FaceProjector& m, const Tensor& x) { return m.forward(x); }

inline Tensor attention_forward(const CrossAttentionBlock& b, const Tensor& x_query, const Tensor& tokens) {
    return CrossAttentionBlock::attention_map(b.query(x_query), b.keys(tokens));
}

struct DetectorOutput {
    Tensor p_false, p_true;  // [h', w'] each
};

inline DetectorOutput pnet_forward(const PNetToy& t, const Tensor& x) {
    Tensor out = t.forward(x);
    return {select(out, 0), select(out, 1)};
}

inline Tensor embed_identity(const IdentityEmbedder& a, const Tensor& x) { return a.forward(x); }

}  // namespace advshield
