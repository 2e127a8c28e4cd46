#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <sstream>

#include "fcan/checkpoint.hpp"

using namespace fcan;

namespace {

std::string encode(const Tensor& t, DType dtype) {
    std::ostringstream out;
    write_fct(out, t, dtype);
    return out.str();
}

Tensor decode(const std::string& bytes) {
    std::istringstream in(bytes);
    return read_fct(in);
}

}  // namespace

TEST(Fct, HeaderLayoutIsLittleEndian) {
    const std::string b = encode(Tensor({2, 1}, {1.0, -2.0}), DType::F64);
    ASSERT_EQ(b.size(), 4u + 1 + 1 + 2 * 8 + 2 * 8);
    EXPECT_EQ(b.substr(0, 4), "FCT1");
    EXPECT_EQ(static_cast<unsigned char>(b[4]), 1u);
    EXPECT_EQ(static_cast<unsigned char>(b[5]), 2u);
    EXPECT_EQ(static_cast<unsigned char>(b[6]), 2u);
    for (int i = 7; i < 14; ++i) EXPECT_EQ(b[i], 0);
    EXPECT_EQ(static_cast<unsigned char>(b[14]), 1u);
    double first;
    std::memcpy(&first, b.data() + 22, 8);
    EXPECT_EQ(first, 1.0);
}

TEST(Fct, DoubleRoundTripIsExact) {
    Tensor t({2, 3, 1}, {0.1, -1e300, 3.0, 1e-310, 7.25, -0.0});
    Tensor r = decode(encode(t, DType::F64));
    EXPECT_EQ(r.shape(), t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) EXPECT_EQ(r[i], t[i]);
}

TEST(Fct, FloatRoundTripRoundsToSinglePrecision) {
    Tensor t({3}, {0.1, 1.0, -2.5});
    const std::string b = encode(t, DType::F32);
    EXPECT_EQ(b.size(), 6u + 8 + 3 * 4);
    Tensor r = decode(b);
    EXPECT_EQ(r[0], static_cast<double>(0.1f));
    EXPECT_EQ(r[2], -2.5);
}

TEST(Fct, RejectsMalformedInput) {
    const std::string good = encode(Tensor({2}, {1.0, 2.0}), DType::F64);
    EXPECT_THROW(decode("XCT1"), FormatError);
    EXPECT_THROW(decode(good.substr(0, good.size() - 3)), FormatError);
    EXPECT_THROW(decode(good.substr(0, 9)), FormatError);
    std::string bad_dtype = good;
    bad_dtype[4] = 7;
    EXPECT_THROW(decode(bad_dtype), FormatError);
    std::string zero_rank = good;
    zero_rank[5] = 0;
    EXPECT_THROW(decode(zero_rank), FormatError);
}

TEST(Fct, TruncationMessageNamesOffset) {
    const std::string good = encode(Tensor({2}, {1.0, 2.0}), DType::F64);
    try {
        decode(good.substr(0, 20));
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("payload at byte 14"), std::string::npos) << e.what();
    }
}

TEST(Fct, FileRoundTrip) {
    const auto path = std::filesystem::temp_directory_path() / "fcan_test_checkpoint.fct";
    Tensor t({1, 2, 2}, {1, 2, 3, 4});
    save_fct(path, t);
    Tensor r = load_fct(path);
    EXPECT_EQ(r.shape(), t.shape());
    EXPECT_EQ(r[3], 4.0);
    std::filesystem::remove(path);
    EXPECT_THROW(load_fct(path), FormatError);
}
