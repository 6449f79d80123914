#pragma once

// Binary checkpoint, all integers little-endian:
//
//   "MLCV"  u32 version  u64 config_len  config JSON bytes  u64 tensor_count
//   per tensor: u64 name_len  name bytes  u64 rank  u64 dims[rank]  f64 values[prod(dims)]
//
// Decoding consumes the whole buffer; anything left over is an error.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "config.hpp"
#include "detector.hpp"
#include "errors.hpp"
#include "tensor.hpp"
#include "trainer.hpp"

namespace mlcvnet {

inline constexpr char kCheckpointMagic[4] = {'M', 'L', 'C', 'V'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    nlohmann::json config = nlohmann::json::object();
    std::vector<CheckpointTensor> tensors;

    const CheckpointTensor* find(std::string_view name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
public:
    explicit ByteReader(std::string_view bytes) : b_(bytes) {}

    std::string_view take(std::size_t n, const char* what) {
        if (n > b_.size() - pos_) throw CorruptCheckpointError(std::string("checkpoint: truncated while reading ") + what);
        auto s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint64_t u64(const char* what) {
        const auto s = take(8, what);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
        return v;
    }
    std::uint32_t u32(const char* what) {
        const auto s = take(4, what);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
        return v;
    }
    std::size_t remaining() const { return b_.size() - pos_; }

private:
    std::string_view b_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
    std::string out(kCheckpointMagic, 4);
    detail::put_u32(out, kCheckpointVersion);
    const std::string cfg = ck.config.dump();
    detail::put_u64(out, cfg.size());
    out += cfg;
    detail::put_u64(out, ck.tensors.size());
    for (const auto& t : ck.tensors) {
        if (numel_of(t.shape) != t.values.size())
            throw std::invalid_argument("checkpoint: tensor " + t.name + " has a shape/value count mismatch");
        detail::put_u64(out, t.name.size());
        out += t.name;
        detail::put_u64(out, t.shape.size());
        for (auto d : t.shape) detail::put_u64(out, d);
        for (double v : t.values) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
        throw UnsupportedFormatError("checkpoint: bad magic (not an MLCV checkpoint)");
    detail::ByteReader r(bytes);
    r.take(4, "magic");
    const auto version = r.u32("version");
    if (version != kCheckpointVersion)
        throw UnsupportedFormatError("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ck;
    const auto cfg_len = r.u64("config length");
    const auto cfg = r.take(cfg_len, "config");
    try {
        ck.config = nlohmann::json::parse(cfg);
    } catch (const nlohmann::json::parse_error& e) {
        throw CorruptCheckpointError(std::string("checkpoint: config block is not JSON: ") + e.what());
    }
    const auto count = r.u64("tensor count");
    for (std::uint64_t i = 0; i < count; ++i) {
        CheckpointTensor t;
        const auto name_len = r.u64("tensor name length");
        t.name = std::string(r.take(name_len, "tensor name"));
        const auto rank = r.u64("tensor rank");
        if (rank > r.remaining() / 8) throw CorruptCheckpointError("checkpoint: truncated while reading tensor dims");
        std::uint64_t n = 1;
        for (std::uint64_t d = 0; d < rank; ++d) {
            const auto dim = r.u64("tensor dims");
            if (dim != 0 && n > r.remaining() / dim)
                throw CorruptCheckpointError("checkpoint: truncated while reading tensor " + t.name);
            n *= dim;
            t.shape.push_back(dim);
        }
        if (n > r.remaining() / 8) throw CorruptCheckpointError("checkpoint: truncated while reading tensor " + t.name);
        const auto raw = r.take(n * 8, "tensor values");
        t.values.resize(n);
        for (std::uint64_t k = 0; k < n; ++k) {
            std::uint64_t bits = 0;
            for (int b = 7; b >= 0; --b)
                bits = (bits << 8) | static_cast<unsigned char>(raw[k * 8 + static_cast<std::size_t>(b)]);
            t.values[k] = std::bit_cast<double>(bits);
        }
        ck.tensors.push_back(std::move(t));
    }
    if (r.remaining() != 0)
        throw CorruptCheckpointError("checkpoint: " + std::to_string(r.remaining()) + " trailing bytes");
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    const auto bytes = encode_checkpoint(ck);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

// ---------------------------------------------------------------------------
// Model <-> checkpoint
// ---------------------------------------------------------------------------

/// Parameters (and optionally Adam moments, as "optim.*" tensors) with the
/// model config echoed under "model".
inline Checkpoint make_checkpoint(const Detector& model, Adam* opt = nullptr) {
    Checkpoint ck;
    ck.config = {{"model", to_json(model.config())}};
    const auto params = model.parameters();
    for (const auto& p : params) ck.tensors.push_back({p.name, p.tensor.shape(), p.tensor.values()});
    if (opt) {
        ck.tensors.push_back({"optim.step", {1}, {static_cast<double>(opt->steps())}});
        std::size_t k = 0;
        for (const auto& p : params) {
            if (!p.trainable) continue;
            ck.tensors.push_back({"optim.m." + p.name, p.tensor.shape(), opt->first_moments()[k]});
            ck.tensors.push_back({"optim.v." + p.name, p.tensor.shape(), opt->second_moments()[k]});
            ++k;
        }
    }
    return ck;
}

/// Copies every model parameter out of `ck`; missing or mis-shaped tensors are errors.
inline void load_parameters(Detector& model, const Checkpoint& ck) {
    for (const auto& p : model.parameters()) {
        const auto* t = ck.find(p.name);
        if (!t) throw CorruptCheckpointError("checkpoint: missing tensor " + p.name);
        if (t->shape != p.tensor.shape())
            throw CorruptCheckpointError("checkpoint: tensor " + p.name + " has shape " + shape_str(t->shape) +
                                         ", model expects " + shape_str(p.tensor.shape()));
        Tensor dst = p.tensor;
        std::copy(t->values.begin(), t->values.end(), dst.data().begin());
    }
}

inline Detector model_from_checkpoint(const Checkpoint& ck) {
    if (!ck.config.contains("model")) throw CorruptCheckpointError("checkpoint: config block has no \"model\" entry");
    Detector model(model_config_from_json(ck.config.at("model")));
    load_parameters(model, ck);
    return model;
}

}  // namespace mlcvnet
