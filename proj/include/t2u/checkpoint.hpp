#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "t2u/model.hpp"
#include "t2u/optim.hpp"

namespace t2u {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Checkpoint layout, all integers little-endian:
//   "T2U1"                         4 bytes magic
//   version                        u32 (= 1)
//   text length                    u32, followed by that many bytes of text
//   tensor count                   u32
//   per tensor:
//     name length                  u16, followed by the name bytes
//     ndim                         u8
//     dims                         u32 each
//     data                         product(dims) IEEE-754 float32
//
// The text holds the run config echo, optionally followed by a "[state]"
// line and `state.*` scalars for resuming training.
inline constexpr char checkpoint_magic[4] = {'T', '2', 'U', '1'};
inline constexpr std::uint32_t checkpoint_version = 1;

struct CheckpointTensor {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

struct CheckpointFile {
    std::string text;
    std::vector<CheckpointTensor> tensors;

    const CheckpointTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

namespace detail {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
inline void put_u16(std::string& out, std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
public:
    explicit ByteReader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}

    void need(std::size_t n) const {
        if (buf_.size() - pos_ < n) throw CheckpointError("corrupt checkpoint: truncated at byte " + std::to_string(pos_));
    }
    std::uint8_t u8() {
        need(1);
        return buf_[pos_++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(buf_[pos_] | (buf_[pos_ + 1] << 8));
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s(buf_.begin() + static_cast<std::ptrdiff_t>(pos_), buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == buf_.size(); }

private:
    const std::vector<std::uint8_t>& buf_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const CheckpointFile& file) {
    std::string out(checkpoint_magic, 4);
    detail::put_u32(out, checkpoint_version);
    detail::put_u32(out, static_cast<std::uint32_t>(file.text.size()));
    out += file.text;
    detail::put_u32(out, static_cast<std::uint32_t>(file.tensors.size()));
    for (const auto& t : file.tensors) {
        if (t.name.size() > 0xffff) throw CheckpointError("tensor name too long: " + t.name.substr(0, 64));
        if (t.shape.size() > 0xff) throw CheckpointError("tensor rank too large: " + t.name);
        if (shape_numel(t.shape) != t.data.size()) throw CheckpointError("tensor data does not match shape: " + t.name);
        detail::put_u16(out, static_cast<std::uint16_t>(t.name.size()));
        out += t.name;
        detail::put_u8(out, static_cast<std::uint8_t>(t.shape.size()));
        for (auto d : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (float f : t.data) {
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            detail::put_u32(out, bits);
        }
    }
    return out;
}

inline CheckpointFile decode_checkpoint(const std::vector<std::uint8_t>& buf) {
    detail::ByteReader r(buf);
    if (buf.size() < 4 || std::memcmp(buf.data(), checkpoint_magic, 4) != 0) {
        throw CheckpointError("not a checkpoint: bad magic (expected \"T2U1\")");
    }
    r.bytes(4);
    const std::uint32_t version = r.u32();
    if (version != checkpoint_version) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                              std::to_string(checkpoint_version) + ")");
    }
    CheckpointFile file;
    file.text = r.bytes(r.u32());
    const std::uint32_t count = r.u32();
    for (std::uint32_t k = 0; k < count; ++k) {
        CheckpointTensor t;
        t.name = r.bytes(r.u16());
        const std::uint8_t ndim = r.u8();
        for (std::uint8_t i = 0; i < ndim; ++i) t.shape.push_back(r.u32());
        const std::size_t n = shape_numel(t.shape);
        r.need(4 * n);
        t.data.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint32_t bits = r.u32();
            std::memcpy(&t.data[i], &bits, 4);
        }
        file.tensors.push_back(std::move(t));
    }
    if (!r.done()) throw CheckpointError("corrupt checkpoint: trailing bytes after last tensor");
    return file;
}

inline void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file) {
    const std::string bytes = encode_checkpoint(file);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw CheckpointError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    const std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(buf);
}

// ---------------------------------------------------------------------------
// Model and optimizer state
// ---------------------------------------------------------------------------

template <class T>
void append_model_tensors(const Trans2Unet<T>& model, CheckpointFile& file) {
    const auto reg = model.registry();
    for (const auto* list : {&reg.params, &reg.buffers}) {
        for (const auto& nt : *list) {
            file.tensors.push_back({nt.name, nt.tensor.shape(), std::vector<float>(nt.tensor.data().begin(), nt.tensor.data().end())});
        }
    }
}

template <class T>
void append_optimizer_tensors(const Adam<T>& opt, CheckpointFile& file) {
    for (std::size_t k = 0; k < opt.params().size(); ++k) {
        const auto& p = opt.params()[k];
        const auto& m = opt.first_moments()[k];
        const auto& v = opt.second_moments()[k];
        file.tensors.push_back({"adam.m." + p.name, p.tensor.shape(), std::vector<float>(m.begin(), m.end())});
        file.tensors.push_back({"adam.v." + p.name, p.tensor.shape(), std::vector<float>(v.begin(), v.end())});
    }
}

/// Loads every parameter and buffer of `model` from `file`. Missing tensors
/// and shape mismatches are errors.
template <class T>
void load_model_tensors(const CheckpointFile& file, Trans2Unet<T>& model) {
    std::map<std::string, const CheckpointTensor*> by_name;
    for (const auto& t : file.tensors) by_name[t.name] = &t;
    auto reg = model.registry();
    for (auto* list : {&reg.params, &reg.buffers}) {
        for (auto& nt : *list) {
            auto it = by_name.find(nt.name);
            if (it == by_name.end()) throw CheckpointError("checkpoint/config mismatch: missing tensor '" + nt.name + "'");
            if (it->second->shape != nt.tensor.shape()) {
                throw CheckpointError("checkpoint/config mismatch: tensor '" + nt.name + "' has shape " +
                                      shape_str(it->second->shape) + ", model expects " + shape_str(nt.tensor.shape()));
            }
            auto& dst = nt.tensor.storage();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->data[i]);
        }
    }
}

template <class T>
void load_optimizer_tensors(const CheckpointFile& file, Adam<T>& opt) {
    for (std::size_t k = 0; k < opt.params().size(); ++k) {
        const auto& name = opt.params()[k].name;
        const auto* m = file.find("adam.m." + name);
        const auto* v = file.find("adam.v." + name);
        if (!m || !v) throw CheckpointError("checkpoint has no optimizer state for '" + name + "'");
        if (m->data.size() != opt.first_moments()[k].size() || v->data.size() != opt.second_moments()[k].size()) {
            throw CheckpointError("optimizer state size mismatch for '" + name + "'");
        }
        std::copy(m->data.begin(), m->data.end(), opt.first_moments()[k].begin());
        std::copy(v->data.begin(), v->data.end(), opt.second_moments()[k].begin());
    }
}

}  // namespace t2u
