#include "focalconv/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

namespace focalconv {

namespace {

constexpr char kMagic[4] = {'F', 'C', 'T', 'N'};
constexpr std::uint8_t kVersion = 1;

void write_raw(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_raw(std::istream& is, void* p, std::size_t n, const std::string& context) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (is.gcount() != static_cast<std::streamsize>(n)) {
        throw FormatError(context + ": truncated tensor record");
    }
}

void write_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    write_raw(os, b, 8);
}

std::uint64_t read_u64_le(std::istream& is, const std::string& context) {
    unsigned char b[8];
    read_raw(is, b, 8, context);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void write_u32_le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    write_raw(os, b, 4);
}

std::uint32_t read_u32_le(std::istream& is, const std::string& context) {
    unsigned char b[4];
    read_raw(is, b, 4, context);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

void write_tensor_record(std::ostream& os, const Tensor& t, Dtype dtype) {
    if (dtype == Dtype::U8) {
        throw FormatError("tensor record: U8 payloads carry bytes, not tensors");
    }
    write_raw(os, kMagic, 4);
    const std::uint8_t ver = kVersion;
    const auto tag = static_cast<std::uint8_t>(dtype);
    write_raw(os, &ver, 1);
    write_raw(os, &tag, 1);
    const auto& shape = t.shape();
    write_u32_le(os, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) write_u32_le(os, static_cast<std::uint32_t>(d));
    if (dtype == Dtype::F64) {
        for (double v : t.data()) write_u64_le(os, std::bit_cast<std::uint64_t>(v));
    } else {
        for (double v : t.data()) {
            write_u32_le(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        }
    }
}

void write_bytes_record(std::ostream& os, const std::vector<std::uint8_t>& bytes) {
    write_raw(os, kMagic, 4);
    const std::uint8_t ver = kVersion;
    const auto tag = static_cast<std::uint8_t>(Dtype::U8);
    write_raw(os, &ver, 1);
    write_raw(os, &tag, 1);
    write_u32_le(os, 1);
    write_u32_le(os, static_cast<std::uint32_t>(bytes.size()));
    if (!bytes.empty()) write_raw(os, bytes.data(), bytes.size());
}

Record read_record(std::istream& is, const std::string& context) {
    char magic[4];
    read_raw(is, magic, 4, context);
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError(context + ": bad magic, expected FCTN");
    }
    std::uint8_t ver = 0;
    std::uint8_t tag = 0;
    read_raw(is, &ver, 1, context);
    read_raw(is, &tag, 1, context);
    if (ver != kVersion) {
        throw FormatError(context + ": unsupported version " + std::to_string(ver));
    }
    const std::uint32_t rank = read_u32_le(is, context);
    if (rank > 8) throw FormatError(context + ": implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::int64_t>(read_u32_le(is, context));
    const std::int64_t count = numel(shape);

    Record rec;
    switch (static_cast<Dtype>(tag)) {
        case Dtype::F64: {
            std::vector<double> data(static_cast<std::size_t>(count));
            for (auto& v : data) v = std::bit_cast<double>(read_u64_le(is, context));
            rec.tensor = Tensor::from_data(std::move(shape), std::move(data));
            break;
        }
        case Dtype::F32: {
            std::vector<double> data(static_cast<std::size_t>(count));
            for (auto& v : data) {
                v = static_cast<double>(std::bit_cast<float>(read_u32_le(is, context)));
            }
            rec.tensor = Tensor::from_data(std::move(shape), std::move(data));
            break;
        }
        case Dtype::U8: {
            if (rank != 1) throw FormatError(context + ": byte record must be rank 1");
            rec.is_bytes = true;
            rec.bytes.resize(static_cast<std::size_t>(count));
            if (count > 0) read_raw(is, rec.bytes.data(), rec.bytes.size(), context);
            break;
        }
        default:
            throw FormatError(context + ": unknown dtype tag " + std::to_string(tag));
    }
    return rec;
}

Tensor read_tensor_record(std::istream& is, const std::string& context) {
    Record rec = read_record(is, context);
    if (rec.is_bytes) throw FormatError(context + ": expected a tensor record, found bytes");
    return rec.tensor;
}

void save_tensor(const std::string& path, const Tensor& t, Dtype dtype) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path);
    write_tensor_record(os, t, dtype);
    if (!os) throw DataError("write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    return read_tensor_record(is, path);
}

}  // namespace focalconv
