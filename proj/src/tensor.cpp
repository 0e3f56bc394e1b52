#include "nlmf/tensor.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "nlmf/errors.hpp"

namespace nlmf {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

constexpr char kMagic[8] = {'N', 'T', 'E', 'N', 'S', 'O', 'R', '1'};

void put_u32le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace

void save_ntf(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path);
    os.write(kMagic, 8);
    put_u32le(os, static_cast<std::uint32_t>(t.rank()));
    for (int e : t.shape) put_u32le(os, static_cast<std::uint32_t>(e));
    static_assert(sizeof(float) == 4);
    for (float v : t.data) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32le(os, bits);
    }
    if (!os) throw DataError("write failed: " + path);
}

Tensor load_ntf(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0) throw DataError("not an NTF file: " + path);
    const std::uint32_t rank = get_u32le(is);
    if (!is || rank == 0 || rank > 8) throw DataError("NTF rank out of range in " + path);
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) {
        const std::uint32_t e = get_u32le(is);
        if (!is || e == 0 || e > (1u << 30)) throw DataError("NTF extent out of range in " + path);
        shape[i] = static_cast<int>(e);
    }
    const std::int64_t n = numel(shape);
    std::vector<float> data(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const std::uint32_t bits = get_u32le(is);
        if (!is) throw DataError("truncated NTF payload in " + path);
        float v;
        std::memcpy(&v, &bits, 4);
        data[static_cast<std::size_t>(i)] = v;
    }
    return Tensor(std::move(shape), std::move(data));
}

} // namespace nlmf
