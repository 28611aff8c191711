#pragma once

#include <iosfwd>
#include <string>

#include "keytailor/tensor.hpp"

namespace kt {

// KTSR tensor file: magic "KTSR", u32 version (=1), u8 dtype (0 = f32),
// u32 ndim, ndim x u32 extents, then little-endian f32 payload, no padding.

void ktsr_write(std::ostream& os, const Tensor& t);
void ktsr_write_file(const std::string& path, const Tensor& t);

Tensor ktsr_read(std::istream& is);
Tensor ktsr_read_file(const std::string& path);

}  // namespace kt
