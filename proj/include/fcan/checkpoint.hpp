#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>

#include "fcan/tensor.hpp"

namespace fcan {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// FCT1 layout: "FCT1", u8 dtype, u8 rank, rank x u64 LE dims, row-major payload (LE).
void write_fct(std::ostream& out, const Tensor& t, DType dtype = DType::F64);
Tensor read_fct(std::istream& in);

void save_fct(const std::filesystem::path& path, const Tensor& t, DType dtype = DType::F64);
Tensor load_fct(const std::filesystem::path& path);

}  // namespace fcan
