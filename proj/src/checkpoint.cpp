#include "fcan/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

namespace fcan {

namespace {

constexpr std::array<char, 4> kMagic{'F', 'C', 'T', '1'};

template <typename T>
void put_le(std::ostream& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<unsigned char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const char* what) {
    std::array<unsigned char, sizeof(T)> bytes;
    const auto offset = in.tellg();
    if (!in.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) {
        throw FormatError(std::string("FCT1: truncated ") + what + " at byte " + std::to_string(offset));
    }
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    T value;
    std::memcpy(&value, bytes.data(), sizeof(T));
    return value;
}

}  // namespace

void write_fct(std::ostream& out, const Tensor& t, DType dtype) {
    out.write(kMagic.data(), kMagic.size());
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(dtype));
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
    for (double v : t.data()) {
        if (dtype == DType::F32) {
            put_le<float>(out, static_cast<float>(v));
        } else {
            put_le<double>(out, v);
        }
    }
    if (!out) throw FormatError("FCT1: write failed");
}

Tensor read_fct(std::istream& in) {
    std::array<char, 4> magic{};
    if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
        throw FormatError("FCT1: bad magic at byte 0");
    }
    const auto code = get_le<std::uint8_t>(in, "dtype");
    if (code > 1) throw FormatError("FCT1: unknown dtype code " + std::to_string(code) + " at byte 4");
    const auto rank = get_le<std::uint8_t>(in, "rank");
    if (rank == 0) throw FormatError("FCT1: rank 0 at byte 5");
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
        d = get_le<std::uint64_t>(in, "dimension");
        if (d == 0) throw FormatError("FCT1: zero dimension");
        count *= d;
    }
    std::vector<double> data(count);
    for (auto& v : data) {
        v = code == 0 ? static_cast<double>(get_le<float>(in, "payload")) : get_le<double>(in, "payload");
    }
    return Tensor(std::move(shape), std::move(data));
}

void save_fct(const std::filesystem::path& path, const Tensor& t, DType dtype) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    write_fct(out, t, dtype);
}

Tensor load_fct(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return read_fct(in);
}

}  // namespace fcan
