// SPDX-License-Identifier: Apache-2.0

#include "r2f/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "r2f/error.hpp"
#include "r2f/random.hpp"

namespace r2f {

namespace {

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFU));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFU));
}

void put_str(std::string& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out += s;
}

class Reader {
public:
    explicit Reader(const std::string& bytes) : b_(bytes) {}

    void need(std::size_t n) const {
        if (pos_ + n > b_.size()) fail(ErrorKind::io, "container: truncated at byte " + std::to_string(pos_));
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(b_[pos_++]);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b_[pos_++])) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_++])) << (8 * i);
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }
    void skip(std::size_t n) {
        need(n);
        pos_ += n;
    }

private:
    const std::string& b_;
    std::size_t pos_ = 0;
};

float f32_from_le(const char* p) {
    std::uint32_t u = 0;
    for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    float f = 0.0F;
    std::memcpy(&f, &u, 4);
    return f;
}

}  // namespace

const std::string& Container::get(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) fail(ErrorKind::io, "container: missing metadata '" + key + "'");
    return it->second;
}

std::string encode_container(const Container& c) {
    std::string out = "R2F1";
    put_u32(out, kContainerVersion);
    put_u32(out, static_cast<std::uint32_t>(c.meta.size()));
    for (const auto& [k, v] : c.meta) {
        put_str(out, k);
        put_str(out, v);
    }
    put_u32(out, static_cast<std::uint32_t>(c.tensors.size()));
    std::uint64_t offset = 0;
    for (const auto& [name, t] : c.tensors) {
        put_str(out, name);
        put_u8(out, 0);
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) put_u64(out, d);
        put_u64(out, offset);
        offset += 4ULL * t.size();
    }
    std::string payload;
    payload.reserve(offset);
    for (const auto& [name, t] : c.tensors) {
        for (float f : t.data()) {
            std::uint32_t u = 0;
            std::memcpy(&u, &f, 4);
            put_u32(payload, u);
        }
    }
    put_u64(out, payload.size());
    out += payload;
    put_u64(out, fnv1a64(payload.data(), payload.size()));
    return out;
}

Container decode_container(const std::string& bytes) {
    if (bytes.size() < 8 || bytes.compare(0, 4, "R2F1") != 0) fail(ErrorKind::io, "container: bad magic");
    Reader r(bytes);
    r.skip(4);
    const std::uint32_t version = r.u32();
    if (version != kContainerVersion) fail(ErrorKind::io, "container: unsupported version " + std::to_string(version));
    Container c;
    const std::uint32_t n_meta = r.u32();
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        std::string k = r.str();
        std::string v = r.str();
        if (!c.meta.emplace(std::move(k), std::move(v)).second) fail(ErrorKind::io, "container: duplicate metadata key");
    }
    struct Entry {
        std::string name;
        Shape shape;
        std::uint64_t offset;
    };
    std::vector<Entry> entries;
    const std::uint32_t n_entry = r.u32();
    std::set<std::string> names;
    for (std::uint32_t i = 0; i < n_entry; ++i) {
        Entry e;
        e.name = r.str();
        if (!names.insert(e.name).second) fail(ErrorKind::io, "container: duplicate tensor name '" + e.name + "'");
        if (r.u8() != 0) fail(ErrorKind::io, "container: unsupported dtype for '" + e.name + "'");
        const std::uint32_t rank = r.u32();
        if (rank > 8) fail(ErrorKind::io, "container: implausible rank for '" + e.name + "'");
        for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.u64());
        e.offset = r.u64();
        entries.push_back(std::move(e));
    }
    const std::uint64_t payload_size = r.u64();
    r.need(payload_size);
    const std::size_t payload_at = r.pos();
    r.skip(payload_size);
    const std::uint64_t checksum = r.u64();
    if (r.pos() != bytes.size()) fail(ErrorKind::io, "container: trailing bytes");
    if (checksum != fnv1a64(bytes.data() + payload_at, payload_size)) fail(ErrorKind::io, "container: checksum mismatch");

    // Entries must tile the payload in order without overlap.
    std::uint64_t expect = 0;
    for (const auto& e : entries) {
        const std::uint64_t n = shape_size(e.shape);
        if (e.offset != expect || e.offset + 4 * n > payload_size) {
            fail(ErrorKind::io, "container: bad offset for '" + e.name + "'");
        }
        std::vector<float> data(n);
        const char* p = bytes.data() + payload_at + e.offset;
        for (std::uint64_t i = 0; i < n; ++i) data[i] = f32_from_le(p + 4 * i);
        c.tensors.emplace(e.name, Tensor(e.shape, std::move(data)));
        expect += 4 * n;
    }
    if (expect != payload_size) fail(ErrorKind::io, "container: payload size mismatch");
    return c;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorKind::io, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) fail(ErrorKind::io, "write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) fail(ErrorKind::io, "rename to " + path.string() + " failed: " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void save_container(const std::filesystem::path& path, const Container& c) { write_file_atomic(path, encode_container(c)); }

Container load_container(const std::filesystem::path& path) { return decode_container(read_file(path)); }

std::string checksum_hex(const std::string& bytes) {
    static const char* digits = "0123456789abcdef";
    std::uint64_t h = fnv1a64(bytes.data(), bytes.size());
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xFU];
        h >>= 4;
    }
    return out;
}

namespace {

std::size_t meta_size(const Container& c, const std::string& key) {
    const std::string& v = c.get(key);
    try {
        std::size_t used = 0;
        const unsigned long long n = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return static_cast<std::size_t>(n);
    } catch (const std::logic_error&) {
        fail(ErrorKind::io, "container: metadata '" + key + "' is not an integer: " + v);
    }
}

}  // namespace

Container model_to_container(const ModelParams& params) {
    Container c;
    const ModelConfig& cfg = params.config;
    c.meta = {{"kind", "model"},
              {"role", role_name(cfg.role)},
              {"vocab_size", std::to_string(cfg.vocab_size)},
              {"d_model", std::to_string(cfg.d_model)},
              {"n_layers", std::to_string(cfg.n_layers)},
              {"n_heads", std::to_string(cfg.n_heads)},
              {"seq_len", std::to_string(cfg.seq_len)}};
    c.tensors = params.tensors;
    return c;
}

ModelParams model_from_container(const Container& c) {
    if (c.get("kind") != "model") fail(ErrorKind::incompatible, "container holds '" + c.get("kind") + "', not a model");
    ModelConfig cfg;
    cfg.role = parse_role(c.get("role"));
    cfg.vocab_size = meta_size(c, "vocab_size");
    cfg.d_model = meta_size(c, "d_model");
    cfg.n_layers = meta_size(c, "n_layers");
    cfg.n_heads = meta_size(c, "n_heads");
    cfg.seq_len = meta_size(c, "seq_len");
    cfg.validate();
    // Shapes must agree with a fresh model of the same config.
    const ModelParams like = init_model(cfg, 0);
    if (like.tensors.size() != c.tensors.size()) fail(ErrorKind::shape, "model container: wrong tensor count");
    for (const auto& [name, t] : like.tensors) {
        auto it = c.tensors.find(name);
        if (it == c.tensors.end()) fail(ErrorKind::shape, "model container: missing tensor '" + name + "'");
        if (it->second.shape() != t.shape()) fail(ErrorKind::shape, "model container: bad shape for '" + name + "'");
    }
    return ModelParams{cfg, c.tensors};
}

void save_model(const std::filesystem::path& path, const ModelParams& params) {
    save_container(path, model_to_container(params));
}

ModelParams load_model(const std::filesystem::path& path) { return model_from_container(load_container(path)); }

}  // namespace r2f
