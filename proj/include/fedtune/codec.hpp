#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedtune/ledger.hpp"
#include "fedtune/tensor.hpp"

namespace fedtune {

enum class Codec : uint8_t { None = 0, Deflate = 1, Gzip = 2 };
enum class Dtype : uint8_t { F32 = 0, F16 = 1, I8 = 2 };

struct CodecFlags {
    Codec codec = Codec::None;
    Dtype dtype = Dtype::F32;

    uint8_t to_byte() const;
    static CodecFlags from_byte(uint8_t b);  // DecodeError on reserved bits
};

Codec codec_from_name(const std::string& s);
Dtype dtype_from_name(const std::string& s);
const char* codec_name(Codec c);
const char* dtype_name(Dtype d);
uint32_t dtype_bits(Dtype d);

// Streaming parameter payload:
//   count u32 | per entry { name_len u16, name, rank u8, dims u32*rank,
//   dtype u8, [scale f32 if i8], data }
// Little-endian throughout. This is both the wire payload and the on-disk
// .fsp checkpoint format.
std::vector<uint8_t> serialize_params(const ParamTree& tree, Dtype dtype);
ParamTree deserialize_params(const std::vector<uint8_t>& bytes);

// Symmetric per-tensor int8 quantization: scale = max|x| / 127 (1 if all
// zeros), codes clamped to [-127, 127].
struct QuantizedTensor {
    double scale = 1.0;
    std::vector<int8_t> codes;
};
QuantizedTensor quantize_i8(const TensorF& t);
TensorF dequantize_i8(const QuantizedTensor& q, const std::vector<uint32_t>& dims);

std::vector<uint8_t> compress(const std::vector<uint8_t>& bytes, Codec codec);
std::vector<uint8_t> decompress(const std::vector<uint8_t>& bytes, Codec codec);

// Full send-side composition: quantize -> serialize -> compress.
std::vector<uint8_t> encode_tree(const ParamTree& tree, CodecFlags flags);
ParamTree decode_tree(const std::vector<uint8_t>& bytes, CodecFlags flags);

// Exchange semantics: what the receiving side reconstructs from `tree` under
// `flags` (identical in simulated and distributed modes).
ParamTree codec_roundtrip(const ParamTree& tree, CodecFlags flags);

double estimate_transmission_time(double payload_bytes, double bandwidth_bits_per_second,
                                  int directions);

void write_file(const std::string& path, const std::vector<uint8_t>& bytes);
std::vector<uint8_t> read_file(const std::string& path);

}  // namespace fedtune
