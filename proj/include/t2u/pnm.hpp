#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

namespace t2u {

class ImageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// 8-bit interleaved raster: channels = 1 (P5) or 3 (P6).
struct Image8 {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 1;
    std::vector<std::uint8_t> pixels;  // row-major, interleaved

    std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const { return pixels[(y * width + x) * channels + c]; }
};

namespace detail {

// Reads the next header token, skipping whitespace and '#' comments.
inline std::string pnm_token(const std::vector<std::uint8_t>& buf, std::size_t& pos, const std::string& path) {
    while (pos < buf.size()) {
        if (buf[pos] == '#') {
            while (pos < buf.size() && buf[pos] != '\n') ++pos;
        } else if (std::isspace(buf[pos])) {
            ++pos;
        } else {
            break;
        }
    }
    std::string tok;
    while (pos < buf.size() && !std::isspace(buf[pos]) && buf[pos] != '#') tok.push_back(static_cast<char>(buf[pos++]));
    if (tok.empty()) throw ImageError(path + ": truncated PNM header");
    return tok;
}

inline std::size_t pnm_number(const std::string& tok, const std::string& path) {
    std::size_t v = 0;
    for (char c : tok) {
        if (c < '0' || c > '9') throw ImageError(path + ": bad PNM header value '" + tok + "'");
        v = v * 10 + static_cast<std::size_t>(c - '0');
        if (v > (1u << 24)) throw ImageError(path + ": PNM header value too large");
    }
    return v;
}

}  // namespace detail

/// Reads binary PGM (P5) or PPM (P6) with maxval 255.
inline Image8 read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ImageError(path.string() + ": cannot open");
    const std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string name = path.string();
    if (buf.size() < 2 || buf[0] != 'P' || (buf[1] != '5' && buf[1] != '6')) {
        throw ImageError(name + ": not a binary PGM/PPM file (expected P5 or P6)");
    }
    Image8 img;
    img.channels = buf[1] == '5' ? 1 : 3;
    std::size_t pos = 2;
    img.width = detail::pnm_number(detail::pnm_token(buf, pos, name), name);
    img.height = detail::pnm_number(detail::pnm_token(buf, pos, name), name);
    const std::size_t maxval = detail::pnm_number(detail::pnm_token(buf, pos, name), name);
    if (img.width == 0 || img.height == 0) throw ImageError(name + ": zero image dimension");
    if (maxval != 255) throw ImageError(name + ": only maxval 255 is supported, got " + std::to_string(maxval));
    if (pos >= buf.size() || !std::isspace(buf[pos])) throw ImageError(name + ": truncated PNM header");
    ++pos;  // single whitespace before raster
    const std::size_t n = img.width * img.height * img.channels;
    if (buf.size() - pos < n) throw ImageError(name + ": truncated raster");
    img.pixels.assign(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.begin() + static_cast<std::ptrdiff_t>(pos + n));
    return img;
}

inline void write_pnm(const std::filesystem::path& path, const Image8& img) {
    if (img.channels != 1 && img.channels != 3) throw ImageError("write_pnm: channels must be 1 or 3");
    if (img.pixels.size() != img.width * img.height * img.channels) throw ImageError("write_pnm: pixel buffer size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ImageError(path.string() + ": cannot open for writing");
    out << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw ImageError(path.string() + ": write failed");
}

}  // namespace t2u
