#include "keytailor/ktsr.hpp"

#include <cstring>
#include <fstream>

#include "keytailor/errors.hpp"

namespace kt {
namespace {

constexpr char kMagic[4] = {'K', 'T', 'S', 'R'};
constexpr uint32_t kVersion = 1;
constexpr uint8_t kDtypeF32 = 0;

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw format_error("KTSR: truncated header");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void ktsr_write(std::ostream& os, const Tensor& t) {
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    os.put(static_cast<char>(kDtypeF32));
    put_u32(os, static_cast<uint32_t>(t.ndim()));
    for (size_t e : t.shape) put_u32(os, static_cast<uint32_t>(e));
    for (double d : t.data) {
        float f = static_cast<float>(d);
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(os, bits);
    }
    if (!os) throw io_error("KTSR: write failed");
}

void ktsr_write_file(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("KTSR: cannot open for writing: " + path);
    ktsr_write(os, t);
}

Tensor ktsr_read(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw format_error("KTSR: bad magic");
    uint32_t version = get_u32(is);
    if (version != kVersion) throw format_error("KTSR: unsupported version " + std::to_string(version));
    int dtype = is.get();
    if (dtype != kDtypeF32) throw format_error("KTSR: unsupported dtype code " + std::to_string(dtype));
    uint32_t ndim = get_u32(is);
    if (ndim > 8) throw format_error("KTSR: implausible ndim " + std::to_string(ndim));
    Shape shape(ndim);
    for (uint32_t i = 0; i < ndim; ++i) shape[i] = get_u32(is);
    Tensor t(shape);
    for (size_t i = 0; i < t.size(); ++i) {
        uint32_t bits = get_u32(is);
        float f;
        std::memcpy(&f, &bits, 4);
        t.data[i] = static_cast<double>(f);
    }
    return t;
}

Tensor ktsr_read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("KTSR: cannot open: " + path);
    return ktsr_read(is);
}

}  // namespace kt
