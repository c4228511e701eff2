#include "fedtune/codec.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <zlib.h>

#include "fedtune/half.hpp"

namespace fedtune {

namespace {

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f32(std::vector<uint8_t>& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    const std::vector<uint8_t>& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw DecodeError("parameter payload truncated");
    }
    uint8_t u8() {
        need(1);
        return buf[pos++];
    }
    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint16_t>(buf[pos]) |
                     static_cast<uint16_t>(buf[pos + 1]) << 8;
        pos += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string str(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
        pos += n;
        return s;
    }
};

constexpr int kRawDeflateWindow = -15;
constexpr int kGzipWindow = 15 + 16;

std::vector<uint8_t> zlib_deflate(const std::vector<uint8_t>& in, int window) {
    z_stream zs{};
    if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, window, 8,
                     Z_DEFAULT_STRATEGY) != Z_OK) {
        throw IoError("deflateInit2 failed");
    }
    std::vector<uint8_t> out(deflateBound(&zs, in.size()));
    zs.next_in = const_cast<Bytef*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(out.size());
    int rc = deflate(&zs, Z_FINISH);
    deflateEnd(&zs);
    if (rc != Z_STREAM_END) throw IoError("deflate failed");
    out.resize(out.size() - zs.avail_out);
    return out;
}

std::vector<uint8_t> zlib_inflate(const std::vector<uint8_t>& in, int window) {
    z_stream zs{};
    if (inflateInit2(&zs, window) != Z_OK) throw IoError("inflateInit2 failed");
    std::vector<uint8_t> out;
    out.resize(std::max<size_t>(in.size() * 4, 1024));
    zs.next_in = const_cast<Bytef*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    size_t written = 0;
    for (;;) {
        zs.next_out = out.data() + written;
        zs.avail_out = static_cast<uInt>(out.size() - written);
        int rc = inflate(&zs, Z_NO_FLUSH);
        written = out.size() - zs.avail_out;
        if (rc == Z_STREAM_END) break;
        if (rc == Z_OK || rc == Z_BUF_ERROR) {
            if (zs.avail_out == 0) {
                out.resize(out.size() * 2);
                continue;
            }
            if (rc == Z_BUF_ERROR || zs.avail_in == 0) {
                inflateEnd(&zs);
                throw DecodeError("compressed stream truncated");
            }
            continue;
        }
        inflateEnd(&zs);
        throw DecodeError("corrupt compressed stream");
    }
    inflateEnd(&zs);
    out.resize(written);
    return out;
}

}  // namespace

uint8_t CodecFlags::to_byte() const {
    return static_cast<uint8_t>(codec) | static_cast<uint8_t>(static_cast<uint8_t>(dtype) << 2);
}

CodecFlags CodecFlags::from_byte(uint8_t b) {
    if ((b & 0xf0) != 0) throw DecodeError("flags: reserved bits set");
    uint8_t c = b & 0x03;
    uint8_t d = (b >> 2) & 0x03;
    if (c > 2) throw DecodeError("flags: unknown codec");
    if (d > 2) throw DecodeError("flags: unknown dtype");
    return CodecFlags{static_cast<Codec>(c), static_cast<Dtype>(d)};
}

Codec codec_from_name(const std::string& s) {
    if (s == "none") return Codec::None;
    if (s == "deflate") return Codec::Deflate;
    if (s == "gzip") return Codec::Gzip;
    throw ConfigError("unknown codec '" + s + "'");
}

Dtype dtype_from_name(const std::string& s) {
    if (s == "f32") return Dtype::F32;
    if (s == "f16") return Dtype::F16;
    if (s == "i8") return Dtype::I8;
    throw ConfigError("unknown dtype '" + s + "'");
}

const char* codec_name(Codec c) {
    switch (c) {
        case Codec::None: return "none";
        case Codec::Deflate: return "deflate";
        case Codec::Gzip: return "gzip";
    }
    return "?";
}

const char* dtype_name(Dtype d) {
    switch (d) {
        case Dtype::F32: return "f32";
        case Dtype::F16: return "f16";
        case Dtype::I8: return "i8";
    }
    return "?";
}

uint32_t dtype_bits(Dtype d) {
    switch (d) {
        case Dtype::F32: return 32;
        case Dtype::F16: return 16;
        case Dtype::I8: return 8;
    }
    return 0;
}

QuantizedTensor quantize_i8(const TensorF& t) {
    QuantizedTensor q;
    double max_abs = 0.0;
    for (double v : t.data) max_abs = std::max(max_abs, std::abs(v));
    q.scale = (max_abs == 0.0) ? 1.0 : max_abs / 127.0;
    q.codes.resize(t.data.size());
    for (size_t i = 0; i < t.data.size(); ++i) {
        double c = std::nearbyint(t.data[i] / q.scale);
        c = std::clamp(c, -127.0, 127.0);
        q.codes[i] = static_cast<int8_t>(c);
    }
    return q;
}

TensorF dequantize_i8(const QuantizedTensor& q, const std::vector<uint32_t>& dims) {
    TensorF t;
    t.dims = dims;
    t.data.resize(q.codes.size());
    for (size_t i = 0; i < q.codes.size(); ++i) {
        t.data[i] = static_cast<double>(q.codes[i]) * q.scale;
    }
    t.validate();
    return t;
}

std::vector<uint8_t> serialize_params(const ParamTree& tree, Dtype dtype) {
    std::vector<uint8_t> out;
    put_u32(out, static_cast<uint32_t>(tree.size()));
    for (const auto& [name, t] : tree.entries()) {
        if (name.size() > 0xffff) throw UsageError("serialize: name too long");
        put_u16(out, static_cast<uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(static_cast<uint8_t>(t.dims.size()));
        for (uint32_t d : t.dims) put_u32(out, d);
        out.push_back(static_cast<uint8_t>(dtype));
        switch (dtype) {
            case Dtype::F32:
                for (double v : t.data) put_f32(out, static_cast<float>(v));
                break;
            case Dtype::F16:
                for (double v : t.data) {
                    uint16_t bits = half_bits_from_double(v).bits;
                    put_u16(out, bits);
                }
                break;
            case Dtype::I8: {
                QuantizedTensor q = quantize_i8(t);
                put_f32(out, static_cast<float>(q.scale));
                for (int8_t c : q.codes) out.push_back(static_cast<uint8_t>(c));
                break;
            }
        }
    }
    return out;
}

ParamTree deserialize_params(const std::vector<uint8_t>& bytes) {
    Reader r{bytes};
    uint32_t count = r.u32();
    ParamTree tree;
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t name_len = r.u16();
        std::string name = r.str(name_len);
        uint8_t rank = r.u8();
        if (rank < 1 || rank > 2) throw DecodeError("bad tensor rank");
        std::vector<uint32_t> dims(rank);
        uint64_t n = 1;
        for (auto& d : dims) {
            d = r.u32();
            if (d == 0) throw DecodeError("zero tensor dimension");
            n *= d;
        }
        if (n > (1ull << 32)) throw DecodeError("tensor too large");
        auto dt = static_cast<Dtype>(r.u8());
        TensorF t;
        t.dims = dims;
        t.data.resize(n);
        switch (dt) {
            case Dtype::F32:
                for (uint64_t j = 0; j < n; ++j) t.data[j] = r.f32();
                break;
            case Dtype::F16:
                for (uint64_t j = 0; j < n; ++j) t.data[j] = double_from_half_bits(r.u16());
                break;
            case Dtype::I8: {
                double scale = r.f32();
                for (uint64_t j = 0; j < n; ++j) {
                    t.data[j] = static_cast<double>(static_cast<int8_t>(r.u8())) * scale;
                }
                break;
            }
            default:
                throw DecodeError("unknown element dtype");
        }
        if (tree.has(name)) throw DecodeError("duplicate tensor name '" + name + "'");
        tree.insert(std::move(name), std::move(t));
    }
    if (r.pos != bytes.size()) throw DecodeError("trailing bytes after payload");
    return tree;
}

std::vector<uint8_t> compress(const std::vector<uint8_t>& bytes, Codec codec) {
    switch (codec) {
        case Codec::None: return bytes;
        case Codec::Deflate: return zlib_deflate(bytes, kRawDeflateWindow);
        case Codec::Gzip: return zlib_deflate(bytes, kGzipWindow);
    }
    throw UsageError("compress: bad codec");
}

std::vector<uint8_t> decompress(const std::vector<uint8_t>& bytes, Codec codec) {
    switch (codec) {
        case Codec::None: return bytes;
        case Codec::Deflate: return zlib_inflate(bytes, kRawDeflateWindow);
        case Codec::Gzip: return zlib_inflate(bytes, kGzipWindow);
    }
    throw UsageError("decompress: bad codec");
}

std::vector<uint8_t> encode_tree(const ParamTree& tree, CodecFlags flags) {
    return compress(serialize_params(tree, flags.dtype), flags.codec);
}

ParamTree decode_tree(const std::vector<uint8_t>& bytes, CodecFlags flags) {
    return deserialize_params(decompress(bytes, flags.codec));
}

ParamTree codec_roundtrip(const ParamTree& tree, CodecFlags flags) {
    return decode_tree(encode_tree(tree, flags), flags);
}

double estimate_transmission_time(double payload_bytes,
                                  double bandwidth_bits_per_second, int directions) {
    if (bandwidth_bits_per_second <= 0.0) {
        throw ConfigError("transmission time: bandwidth must be positive");
    }
    if (payload_bytes < 0.0 || directions < 1) {
        throw ConfigError("transmission time: bad payload/directions");
    }
    return static_cast<double>(directions) * payload_bytes * 8.0 /
           bandwidth_bits_per_second;
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write to '" + path + "' failed");
}

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open '" + path + "'");
    std::streamsize n = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> buf(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(buf.data()), n);
    if (!f) throw IoError("read from '" + path + "' failed");
    return buf;
}

}  // namespace fedtune
