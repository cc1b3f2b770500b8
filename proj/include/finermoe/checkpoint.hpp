// Copyright 2026 The finermoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// FRM1 single-file tensor container.
//
//   offset 0   4 bytes   magic "FRM1"
//   offset 4   u64 LE    manifest byte length M
//   offset 12  M bytes   UTF-8 JSON manifest
//              zero bytes up to the next multiple of 8
//              payload: raw little-endian IEEE-754 f32 tensors, row-major
//
// The manifest holds {"format", "kind", "config", "tensors"}; each tensor entry
// is {"name", "shape", "dtype": "f32", "offset", "length"} with offsets relative
// to the payload start, ascending and non-overlapping.
//
// Tensor names: ffn.{w1,wg,w2} for a dense FFN; shared.{w1,wg,w2},
// expert.<k>.{w1,wg,w2}, router.w, and optionally cc_router.w and
// concat_proj.w for a MoE layer.

#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"

#include "finermoe/config.hpp"
#include "finermoe/experts.hpp"
#include "finermoe/moe_layer.hpp"
#include "finermoe/numerics.hpp"

namespace finermoe {

inline constexpr char kFrmMagic[4] = {'F', 'R', 'M', '1'};

struct TensorManifestEntry {
    std::string name;
    std::vector<std::size_t> shape;
    std::string dtype = "f32";
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
};

enum class ModelKind { dense, moe };

using AnyModel = std::variant<DenseFfnWeights<float>, MoEModel<float>>;

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

inline void put_f32_le(std::string& out, float f) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline float get_f32_le(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int i = 3; i >= 0; --i) bits = (bits << 8) | p[i];
    return std::bit_cast<float>(bits);
}

inline nlohmann::ordered_json config_to_json(const FineRConfig& c) {
    nlohmann::ordered_json j;
    j["h"] = c.h;
    j["H"] = c.H;
    j["G_I"] = c.G_I;
    j["R_I"] = c.R_I;
    j["G_O"] = c.G_O;
    j["R_O"] = c.R_O;
    j["T_I"] = c.T_I;
    j["router_mode"] = to_string(c.router_mode);
    j["share_expert"] = c.share_expert;
    j["concat_proj"] = c.concat_proj;
    return j;
}

inline FineRConfig config_from_json(const nlohmann::ordered_json& j) {
    FineRConfig c;
    try {
        c.h = j.at("h").get<std::size_t>();
        c.H = j.at("H").get<std::size_t>();
        c.G_I = j.at("G_I").get<std::size_t>();
        c.R_I = j.at("R_I").get<std::size_t>();
        c.G_O = j.at("G_O").get<std::size_t>();
        c.R_O = j.at("R_O").get<std::size_t>();
        c.T_I = j.at("T_I").get<std::size_t>();
        const auto mode = j.at("router_mode").get<std::string>();
        if (mode == "single") c.router_mode = RouterMode::single;
        else if (mode == "separate") c.router_mode = RouterMode::separate;
        else throw Error(ErrorCode::bad_manifest, "unknown router_mode '" + mode + "'");
        c.share_expert = j.at("share_expert").get<bool>();
        c.concat_proj = j.at("concat_proj").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::bad_manifest, std::string("malformed config block: ") + e.what());
    }
    return c;
}

class TensorWriter {
public:
    void add(const std::string& name, const Matrix<float>& m) {
        TensorManifestEntry e;
        e.name = name;
        e.shape = {m.rows(), m.cols()};
        e.offset = payload_.size();
        e.length = static_cast<std::uint64_t>(m.size()) * 4;
        for (float v : m.values()) put_f32_le(payload_, v);
        entries_.push_back(std::move(e));
    }

    template <class Tag>
    void add_ffn(const std::string& prefix, const GatedFfn<float, Tag>& w) {
        add(prefix + ".w1", w.w1);
        add(prefix + ".wg", w.wg);
        add(prefix + ".w2", w.w2);
    }

    std::string finish(ModelKind kind, const nlohmann::ordered_json& config) const {
        nlohmann::ordered_json manifest;
        manifest["format"] = "FRM1";
        manifest["kind"] = kind == ModelKind::dense ? "dense" : "moe";
        manifest["config"] = config;
        auto tensors = nlohmann::ordered_json::array();
        for (const auto& e : entries_) {
            nlohmann::ordered_json t;
            t["name"] = e.name;
            t["shape"] = e.shape;
            t["dtype"] = e.dtype;
            t["offset"] = e.offset;
            t["length"] = e.length;
            tensors.push_back(std::move(t));
        }
        manifest["tensors"] = std::move(tensors);
        const std::string text = manifest.dump();

        std::string out(kFrmMagic, 4);
        put_u64_le(out, text.size());
        out += text;
        out.append((8 - out.size() % 8) % 8, '\0');
        out += payload_;
        return out;
    }

    const std::vector<TensorManifestEntry>& entries() const noexcept { return entries_; }

private:
    std::vector<TensorManifestEntry> entries_;
    std::string payload_;
};

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io_failure, "cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::io_failure, "write to '" + path + "' failed");
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io_failure, "cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encode

inline std::string encode_model(const DenseFfnWeights<float>& dense) {
    dense.check_shapes();
    detail::TensorWriter w;
    w.add_ffn("ffn", dense);
    nlohmann::ordered_json cfg;
    cfg["h"] = dense.in_dim();
    cfg["H"] = dense.inter_dim();
    return w.finish(ModelKind::dense, cfg);
}

inline std::string encode_model(const MoEModel<float>& model) {
    model.check();
    detail::TensorWriter w;
    if (model.shared) w.add_ffn("shared", *model.shared);
    for (std::size_t k = 0; k < model.experts.size(); ++k) w.add_ffn("expert." + std::to_string(k), model.experts[k]);
    w.add("router.w", model.router.w);
    if (model.cc_router) w.add("cc_router.w", model.cc_router->w);
    if (model.concat_proj) w.add("concat_proj.w", *model.concat_proj);
    return w.finish(ModelKind::moe, detail::config_to_json(model.cfg));
}

inline void write_model(const DenseFfnWeights<float>& dense, const std::string& path) {
    detail::write_file(path, encode_model(dense));
}

inline void write_model(const MoEModel<float>& model, const std::string& path) {
    detail::write_file(path, encode_model(model));
}

// ---------------------------------------------------------------------------
// Decode

struct DecodedFile {
    ModelKind kind = ModelKind::dense;
    nlohmann::ordered_json config;
    std::vector<TensorManifestEntry> manifest;
    std::map<std::string, Matrix<float>> tensors;
};

inline DecodedFile decode_file(const std::string& bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 12) throw Error(ErrorCode::truncated_payload, "file shorter than the FRM1 header");
    if (std::memcmp(p, kFrmMagic, 4) != 0) throw Error(ErrorCode::bad_magic, "missing FRM1 magic");
    const std::uint64_t mlen = detail::get_u64_le(p + 4);
    if (mlen > bytes.size() - 12) throw Error(ErrorCode::truncated_payload, "manifest extends past end of file");
    const std::uint64_t payload_start = (12 + mlen + 7) / 8 * 8;
    if (payload_start > bytes.size()) throw Error(ErrorCode::truncated_payload, "missing manifest padding");

    nlohmann::ordered_json manifest;
    try {
        manifest = nlohmann::ordered_json::parse(bytes.substr(12, mlen));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::bad_manifest, std::string("manifest is not valid JSON: ") + e.what());
    }

    DecodedFile out;
    const std::uint64_t payload_size = bytes.size() - payload_start;
    try {
        if (manifest.at("format").get<std::string>() != "FRM1") throw Error(ErrorCode::bad_manifest, "format is not FRM1");
        const auto kind = manifest.at("kind").get<std::string>();
        if (kind == "dense") out.kind = ModelKind::dense;
        else if (kind == "moe") out.kind = ModelKind::moe;
        else throw Error(ErrorCode::bad_manifest, "unknown model kind '" + kind + "'");
        out.config = manifest.at("config");

        std::uint64_t prev_end = 0;
        for (const auto& t : manifest.at("tensors")) {
            TensorManifestEntry e;
            e.name = t.at("name").get<std::string>();
            e.shape = t.at("shape").get<std::vector<std::size_t>>();
            e.dtype = t.at("dtype").get<std::string>();
            e.offset = t.at("offset").get<std::uint64_t>();
            e.length = t.at("length").get<std::uint64_t>();
            if (e.dtype != "f32") throw Error(ErrorCode::unknown_dtype, "tensor '" + e.name + "' has unknown dtype '" + e.dtype + "'");
            if (e.shape.size() != 2) throw Error(ErrorCode::bad_manifest, "tensor '" + e.name + "' is not 2-D");
            if (e.length != static_cast<std::uint64_t>(e.shape[0]) * e.shape[1] * 4) {
                throw Error(ErrorCode::bad_manifest, "tensor '" + e.name + "' length does not match its shape");
            }
            if (e.offset < prev_end) throw Error(ErrorCode::bad_manifest, "tensor '" + e.name + "' overlaps its predecessor");
            prev_end = e.offset + e.length;
            if (prev_end > payload_size) {
                throw Error(ErrorCode::truncated_payload, "truncated payload: tensor '" + e.name + "' ends at byte " +
                                                              std::to_string(prev_end) + " of a " +
                                                              std::to_string(payload_size) + "-byte payload");
            }
            std::vector<float> data(e.shape[0] * e.shape[1]);
            const unsigned char* src = p + payload_start + e.offset;
            for (std::size_t i = 0; i < data.size(); ++i) data[i] = detail::get_f32_le(src + 4 * i);
            if (!out.tensors.emplace(e.name, Matrix<float>(e.shape[0], e.shape[1], std::move(data))).second) {
                throw Error(ErrorCode::bad_manifest, "duplicate tensor '" + e.name + "'");
            }
            out.manifest.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::bad_manifest, std::string("malformed manifest: ") + e.what());
    }
    return out;
}

namespace detail {

inline Matrix<float> take(DecodedFile& f, const std::string& name) {
    auto it = f.tensors.find(name);
    if (it == f.tensors.end()) throw Error(ErrorCode::bad_manifest, "missing tensor '" + name + "'");
    Matrix<float> m = std::move(it->second);
    f.tensors.erase(it);
    return m;
}

template <class Tag>
GatedFfn<float, Tag> take_ffn(DecodedFile& f, const std::string& prefix) {
    GatedFfn<float, Tag> w;
    w.w1 = take(f, prefix + ".w1");
    w.wg = take(f, prefix + ".wg");
    w.w2 = take(f, prefix + ".w2");
    return w;
}

}  // namespace detail

inline AnyModel decode_model(const std::string& bytes) {
    DecodedFile f = decode_file(bytes);
    if (f.kind == ModelKind::dense) {
        auto dense = detail::take_ffn<DenseTag>(f, "ffn");
        dense.check_shapes();
        std::size_t h = 0, H = 0;
        try {
            h = f.config.at("h").get<std::size_t>();
            H = f.config.at("H").get<std::size_t>();
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::bad_manifest, std::string("malformed dense config: ") + e.what());
        }
        if (dense.in_dim() != h || dense.inter_dim() != H || dense.out_dim() != h) {
            throw Error(ErrorCode::shape_mismatch, "dense tensors do not match config h/H");
        }
        if (!f.tensors.empty()) throw Error(ErrorCode::bad_manifest, "unexpected tensor '" + f.tensors.begin()->first + "'");
        return dense;
    }
    MoEModel<float> m;
    m.cfg = detail::config_from_json(f.config);
    validate(m.cfg);
    const DerivedDims d = derive(m.cfg);
    if (m.cfg.share_expert) m.shared = detail::take_ffn<SharedTag>(f, "shared");
    m.experts.reserve(d.N);
    for (std::size_t k = 0; k < d.N; ++k) m.experts.push_back(detail::take_ffn<ExpertTag>(f, "expert." + std::to_string(k)));
    m.router.w = detail::take(f, "router.w");
    if (m.cfg.router_mode == RouterMode::separate) m.cc_router = RouterState<float>{detail::take(f, "cc_router.w")};
    if (m.cfg.concat_proj) m.concat_proj = detail::take(f, "concat_proj.w");
    if (!f.tensors.empty()) throw Error(ErrorCode::bad_manifest, "unexpected tensor '" + f.tensors.begin()->first + "'");
    m.check();
    return m;
}

inline AnyModel read_model(const std::string& path) { return decode_model(detail::read_file(path)); }

inline DenseFfnWeights<float> read_dense(const std::string& path) {
    AnyModel m = read_model(path);
    if (auto* d = std::get_if<DenseFfnWeights<float>>(&m)) return std::move(*d);
    throw Error(ErrorCode::bad_manifest, "'" + path + "' holds a MoE model, expected a dense FFN");
}

inline MoEModel<float> read_moe(const std::string& path) {
    AnyModel m = read_model(path);
    if (auto* moe = std::get_if<MoEModel<float>>(&m)) return std::move(*moe);
    throw Error(ErrorCode::bad_manifest, "'" + path + "' holds a dense FFN, expected a MoE model");
}

// ---------------------------------------------------------------------------
// Raw matrix files: one text line "rows cols\n" followed by rows*cols
// little-endian f32 values, row-major.

inline std::string encode_matrix(const Matrix<float>& m) {
    std::string out = std::to_string(m.rows()) + " " + std::to_string(m.cols()) + "\n";
    out.reserve(out.size() + 4 * m.size());
    for (float v : m.values()) detail::put_f32_le(out, v);
    return out;
}

inline Matrix<float> decode_matrix(const std::string& bytes) {
    const auto nl = bytes.find('\n');
    if (nl == std::string::npos) throw Error(ErrorCode::bad_manifest, "matrix file has no header line");
    std::istringstream header(bytes.substr(0, nl));
    std::size_t rows = 0, cols = 0;
    if (!(header >> rows >> cols)) throw Error(ErrorCode::bad_manifest, "matrix header must be 'rows cols'");
    const std::size_t need = rows * cols * 4;
    if (bytes.size() - nl - 1 < need) throw Error(ErrorCode::truncated_payload, "matrix payload shorter than rows*cols");
    if (bytes.size() - nl - 1 > need) throw Error(ErrorCode::bad_manifest, "trailing bytes after matrix payload");
    std::vector<float> data(rows * cols);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + nl + 1;
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = detail::get_f32_le(p + 4 * i);
    return Matrix<float>(rows, cols, std::move(data));
}

inline void write_matrix_file(const Matrix<float>& m, const std::string& path) { detail::write_file(path, encode_matrix(m)); }
inline Matrix<float> read_matrix_file(const std::string& path) { return decode_matrix(detail::read_file(path)); }

}  // namespace finermoe
