#ifndef FOCALCONV_SERIALIZE_HPP
#define FOCALCONV_SERIALIZE_HPP

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "focalconv/tensor.hpp"

namespace focalconv {

// Portable tensor file: magic "FCTN", u8 version, u8 dtype tag,
// u32 rank, u32 dims[rank], little-endian payload.
enum class Dtype : std::uint8_t { F64 = 1, F32 = 2, U8 = 3 };

// One FCTN record; U8 records carry raw bytes (used for metadata strings
// inside checkpoint containers), the float dtypes carry tensors.
struct Record {
    bool is_bytes = false;
    Tensor tensor;
    std::vector<std::uint8_t> bytes;
};

void write_tensor_record(std::ostream& os, const Tensor& t, Dtype dtype = Dtype::F64);
void write_bytes_record(std::ostream& os, const std::vector<std::uint8_t>& bytes);
Record read_record(std::istream& is, const std::string& context);
Tensor read_tensor_record(std::istream& is, const std::string& context);

void save_tensor(const std::string& path, const Tensor& t, Dtype dtype = Dtype::F64);
Tensor load_tensor(const std::string& path);

// Little-endian helpers shared by the checkpoint container.
void write_u32_le(std::ostream& os, std::uint32_t v);
std::uint32_t read_u32_le(std::istream& is, const std::string& context);

}  // namespace focalconv

#endif
