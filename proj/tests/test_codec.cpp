#include <doctest.h>

#include <cmath>

#include "fedtune/codec.hpp"
#include "fedtune/rng.hpp"

using namespace fedtune;

namespace {

ParamTree random_tree(uint64_t seed, int n_tensors = 3, uint32_t n = 40) {
    Rng rng(seed);
    ParamTree t;
    for (int i = 0; i < n_tensors; ++i) {
        TensorF x = i % 2 == 0 ? TensorF::zeros({n}) : TensorF::zeros({4, n / 4});
        for (double& v : x.data) v = rng.normal() * 0.5;
        t.insert("t" + std::to_string(i), x);
    }
    return t;
}

}  // namespace

TEST_CASE("flags byte round-trips and rejects reserved bits") {
    for (Codec c : {Codec::None, Codec::Deflate, Codec::Gzip}) {
        for (Dtype d : {Dtype::F32, Dtype::F16, Dtype::I8}) {
            CodecFlags f{c, d};
            CodecFlags g = CodecFlags::from_byte(f.to_byte());
            CHECK(g.codec == c);
            CHECK(g.dtype == d);
        }
    }
    CHECK_THROWS_AS(CodecFlags::from_byte(0x10), DecodeError);
    CHECK_THROWS_AS(CodecFlags::from_byte(0x03), DecodeError);  // codec 3
    CHECK_THROWS_AS(CodecFlags::from_byte(0x0c), DecodeError);  // dtype 3
}

TEST_CASE("empty tree serializes to the 4-byte count") {
    std::vector<uint8_t> bytes = serialize_params(ParamTree{}, Dtype::F32);
    CHECK(bytes == std::vector<uint8_t>{0, 0, 0, 0});
    CHECK(deserialize_params(bytes).empty());
}

TEST_CASE("documented payload layout byte count") {
    // one tensor "a", dims [2], f32: 4 count + 2 name_len + 1 name + 1 rank
    // + 4 dims + 1 dtype + 8 data = 21 bytes
    ParamTree t;
    TensorF x = TensorF::zeros({2});
    x.data = {1.0, -1.0};
    t.insert("a", x);
    std::vector<uint8_t> bytes = serialize_params(t, Dtype::F32);
    CHECK(bytes.size() == 21);

    ParamTree back = deserialize_params(bytes);
    CHECK(back.get("a").data[0] == 1.0);
    CHECK(back.get("a").data[1] == -1.0);
}

TEST_CASE("dtype size law: f16 data half of f32, i8 a quarter plus scale") {
    ParamTree t = random_tree(5, 2, 40);
    auto header_bytes = [&](Dtype d) {
        uint64_t total = 4;
        for (const auto& [name, tensor] : t.entries()) {
            total += 2 + name.size() + 1 + 4 * tensor.dims.size() + 1;
            if (d == Dtype::I8) total += 4;
        }
        return total;
    };
    size_t f32 = serialize_params(t, Dtype::F32).size() - header_bytes(Dtype::F32);
    size_t f16 = serialize_params(t, Dtype::F16).size() - header_bytes(Dtype::F16);
    size_t i8 = serialize_params(t, Dtype::I8).size() - header_bytes(Dtype::I8);
    CHECK(f16 * 2 == f32);
    CHECK(i8 * 4 == f32);
}

TEST_CASE("double serialization is canonical (idempotent)") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        ParamTree t = random_tree(seed);
        for (Dtype d : {Dtype::F32, Dtype::F16, Dtype::I8}) {
            std::vector<uint8_t> once = serialize_params(t, d);
            ParamTree mid = deserialize_params(once);
            std::vector<uint8_t> twice = serialize_params(mid, d);
            CHECK(once == twice);
        }
    }
}

TEST_CASE("deserialize rejects malformed payloads") {
    ParamTree t = random_tree(1);
    std::vector<uint8_t> bytes = serialize_params(t, Dtype::F32);

    std::vector<uint8_t> truncated(bytes.begin(), bytes.end() - 3);
    CHECK_THROWS_AS(deserialize_params(truncated), DecodeError);

    std::vector<uint8_t> trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(deserialize_params(trailing), DecodeError);

    // duplicate names
    ParamTree a;
    TensorF x = TensorF::zeros({1});
    a.insert("dup", x);
    std::vector<uint8_t> one = serialize_params(a, Dtype::F32);
    std::vector<uint8_t> dup = one;
    // splice the single entry twice: count=2 then entry bytes twice
    dup[0] = 2;
    dup.insert(dup.end(), one.begin() + 4, one.end());
    CHECK_THROWS_AS(deserialize_params(dup), DecodeError);
}

TEST_CASE("i8 quantization bound and exact cases") {
    TensorF zeros = TensorF::zeros({16});
    QuantizedTensor qz = quantize_i8(zeros);
    CHECK(qz.scale == 1.0);
    for (int8_t c : qz.codes) CHECK(c == 0);
    TensorF back = dequantize_i8(qz, zeros.dims);
    for (double v : back.data) CHECK(v == 0.0);

    TensorF pm = TensorF::zeros({2});
    pm.data = {-1.0, 1.0};
    QuantizedTensor qpm = quantize_i8(pm);
    CHECK(qpm.scale == doctest::Approx(1.0 / 127.0));
    CHECK(qpm.codes[0] == -127);
    CHECK(qpm.codes[1] == 127);
    TensorF pm_back = dequantize_i8(qpm, pm.dims);
    CHECK(pm_back.data[0] == doctest::Approx(-1.0));
    CHECK(pm_back.data[1] == doctest::Approx(1.0));

    Rng rng(77);
    TensorF u = TensorF::zeros({1000});
    for (double& v : u.data) v = rng.uniform(-1.0, 1.0);
    QuantizedTensor q = quantize_i8(u);
    TensorF dq = dequantize_i8(q, u.dims);
    for (size_t i = 0; i < u.data.size(); ++i) {
        CHECK(std::abs(u.data[i] - dq.data[i]) <= q.scale / 2.0 + 1e-15);
    }
}

TEST_CASE("compression round-trips and compresses zeros") {
    std::vector<uint8_t> zeros(10 * 1024, 0);
    for (Codec c : {Codec::Deflate, Codec::Gzip}) {
        std::vector<uint8_t> packed = compress(zeros, c);
        CHECK(packed.size() < 200);
        CHECK(decompress(packed, c) == zeros);
    }
    // gzip wrapper carries the standard magic
    std::vector<uint8_t> gz = compress(zeros, Codec::Gzip);
    REQUIRE(gz.size() >= 2);
    CHECK(gz[0] == 0x1f);
    CHECK(gz[1] == 0x8b);

    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
        std::vector<uint8_t> buf(static_cast<size_t>(rng.below(2048)));
        for (auto& b : buf) b = static_cast<uint8_t>(rng.below(256));
        for (Codec c : {Codec::None, Codec::Deflate, Codec::Gzip}) {
            CHECK(decompress(compress(buf, c), c) == buf);
        }
    }
}

TEST_CASE("corrupt compressed streams raise decode errors") {
    Rng rng(4);
    std::vector<uint8_t> noise(256);
    for (auto& b : noise) b = static_cast<uint8_t>(rng.below(256));
    CHECK_THROWS_AS(decompress(noise, Codec::Gzip), DecodeError);

    std::vector<uint8_t> payload(1024, 7);
    std::vector<uint8_t> packed = compress(payload, Codec::Deflate);
    packed.resize(packed.size() / 2);  // truncate
    CHECK_THROWS_AS(decompress(packed, Codec::Deflate), DecodeError);
}

TEST_CASE("codec roundtrip through every flag combination") {
    ParamTree t = random_tree(11);
    for (Codec c : {Codec::None, Codec::Deflate, Codec::Gzip}) {
        // lossless compression: dequantized tree identical across codecs
        CodecFlags f32{c, Dtype::F32};
        CodecFlags i8{c, Dtype::I8};
        ParamTree r32 = codec_roundtrip(t, f32);
        ParamTree r8 = codec_roundtrip(t, i8);
        CHECK(r32.digest64() == codec_roundtrip(t, CodecFlags{Codec::None, Dtype::F32}).digest64());
        CHECK(r8.digest64() == codec_roundtrip(t, CodecFlags{Codec::None, Dtype::I8}).digest64());
        // quantization loss only at the quantize step: second pass is exact
        CHECK(codec_roundtrip(r8, i8).digest64() == r8.digest64());
    }
}

TEST_CASE("transmission time anchor and scaling") {
    // 28 GB (decimal) both directions at 100 Mbit/s lands near 75 minutes
    double t = estimate_transmission_time(28e9, 1e8, 2);
    CHECK(t == doctest::Approx(4480.0));
    CHECK(t >= 4400.0);
    CHECK(t <= 4600.0);

    CHECK(estimate_transmission_time(1, 8, 1) == doctest::Approx(1.0));
    CHECK(estimate_transmission_time(100, 2e8, 2) ==
          doctest::Approx(estimate_transmission_time(100, 1e8, 2) / 2.0));
    CHECK_THROWS_AS(estimate_transmission_time(1, 0, 1), ConfigError);
}

TEST_CASE("ledger record is pure and rejects negative deltas") {
    CostLedger ledger;
    CostLedger one = ledger_record(ledger, LedgerEvent{100, 0, 0, 0.0});
    CHECK(one.bytes_up == 100);
    CHECK(ledger.bytes_up == 0);
    CostLedger two = ledger_record(one, LedgerEvent{50, 10, 1000, 0.5});
    CHECK(two.bytes_up == 150);
    CHECK(two.bytes_down == 10);
    CHECK(two.wall_seconds == doctest::Approx(0.5));
    CHECK_THROWS_AS(ledger_record(two, LedgerEvent{0, 0, 0, -1.0}), UsageError);
}
