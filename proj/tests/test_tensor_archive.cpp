#include <cstring>
#include <limits>

#include "test_support.hpp"

using namespace fimmerge;
using fimmerge::test_support::TempDir;

namespace {

// Independent encoder: builds a safetensors-style file by hand.
std::string encode(const std::string& header_json, const std::string& payload) {
  std::string out(8, '\0');
  const std::uint64_t n = header_json.size();
  for (int i = 0; i < 8; ++i) out[i] = static_cast<char>((n >> (8 * i)) & 0xff);
  return out + header_json + payload;
}

std::string f32_bytes(std::initializer_list<float> xs) {
  std::string s;
  for (float x : xs) {
    char b[4];
    std::memcpy(b, &x, 4);
    s.append(b, 4);
  }
  return s;
}

std::string header_of(const std::string& bytes) {
  std::uint64_t n = 0;
  for (int i = 0; i < 8; ++i) n |= std::uint64_t(static_cast<unsigned char>(bytes[i])) << (8 * i);
  return bytes.substr(8, n);
}

}  // namespace

TEST(TensorArchive, IdentityMatrixRoundTrip) {
  TempDir dir;
  TensorArchive a;
  a.insert("w", Tensor({2, 2}, {1, 0, 0, 1}));
  write_archive(a, dir / "w.safetensors");
  const auto b = load_archive(dir / "w.safetensors");
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b.total_elements(), 4u);
  EXPECT_EQ(b.at("w").data, (std::vector<float>{1, 0, 0, 1}));
  EXPECT_EQ(b.at("w").shape, (std::vector<std::int64_t>{2, 2}));
}

TEST(TensorArchive, ParsesHandEncodedFile) {
  const auto bytes = encode(
      R"({"b":{"dtype":"F32","shape":[2],"data_offsets":[8,16]},"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"__metadata__":{"k":"v"}})",
      f32_bytes({1.5f, -2.0f, 3.25f, 4.0f}));
  const auto a = parse_archive(bytes);
  EXPECT_EQ(a.at("a").data, (std::vector<float>{1.5f, -2.0f}));
  EXPECT_EQ(a.at("b").data, (std::vector<float>{3.25f, 4.0f}));
}

TEST(TensorArchive, WidensHalfPrecision) {
  // f16: 1.0 = 0x3C00, -2.0 = 0xC000, 0.5 = 0x3800, smallest subnormal 0x0001 = 2^-24
  std::string f16 = {'\x00', '\x3c', '\x00', '\xc0', '\x00', '\x38', '\x01', '\x00'};
  // bf16 is the top half of f32: 1.0 = 0x3F80, -3.0 = 0xC040
  std::string bf16 = {'\x80', '\x3f', '\x40', '\xc0'};
  const auto bytes = encode(
      R"({"h":{"dtype":"F16","shape":[4],"data_offsets":[0,8]},"b":{"dtype":"BF16","shape":[2],"data_offsets":[8,12]}})",
      f16 + bf16);
  std::vector<std::string> notes;
  const auto a = parse_archive(bytes, &notes);
  EXPECT_EQ(a.at("h").data, (std::vector<float>{1.0f, -2.0f, 0.5f, std::ldexp(1.0f, -24)}));
  EXPECT_EQ(a.at("b").data, (std::vector<float>{1.0f, -3.0f}));
  EXPECT_FALSE(notes.empty());
}

TEST(TensorArchive, RoundTripIsByteIdentical) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    TensorArchive a;
    std::uniform_int_distribution<int> n_tensors(0, 6), dim(1, 5), rank(0, 3);
    const int n = n_tensors(rng);
    for (int i = 0; i < n; ++i) {
      std::vector<std::int64_t> shape(static_cast<std::size_t>(rank(rng)));
      for (auto& s : shape) s = dim(rng);
      a.insert("t" + std::to_string(trial) + "." + std::to_string(i), test_support::random_tensor(shape, rng));
    }
    const auto bytes = serialize_archive(a);
    const auto back = parse_archive(bytes);
    EXPECT_EQ(back, a);
    EXPECT_EQ(serialize_archive(back), bytes);
  }
}

TEST(TensorArchive, EmptyArchiveIsValid) {
  TempDir dir;
  write_archive(TensorArchive{}, dir / "e.safetensors");
  const auto bytes = read_file(dir / "e.safetensors");
  EXPECT_EQ(bytes.size() % 8, 0u);
  EXPECT_EQ(load_archive(dir / "e.safetensors").size(), 0u);
}

TEST(TensorArchive, SameArchiveWrittenTwiceIsByteIdentical) {
  TempDir dir;
  const auto a = test_support::toy_transformer(2, 3);
  write_archive(a, dir / "1.safetensors");
  write_archive(a, dir / "2.safetensors");
  EXPECT_EQ(read_file(dir / "1.safetensors"), read_file(dir / "2.safetensors"));
}

TEST(TensorArchive, HeaderListsNamesLexicographically) {
  TensorArchive a;
  a.insert("b", Tensor({1}, {2}));
  a.insert("a", Tensor({1}, {1}));
  const auto header = header_of(serialize_archive(a));
  EXPECT_LT(header.find("\"a\""), header.find("\"b\""));
  EXPECT_EQ((header.size() + 8) % 8, 0u);
}

TEST(TensorArchive, TruncatedPayloadIsRejected) {
  // header claims 16 bytes, payload holds 12
  const auto bytes = encode(R"({"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}})",
                            f32_bytes({1, 2, 3}));
  EXPECT_THROW(parse_archive(bytes), FormatError);
}

TEST(TensorArchive, ShapeByteLengthMismatchIsRejected) {
  const auto bytes = encode(R"({"w":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})",
                            f32_bytes({1, 2}));
  EXPECT_THROW(parse_archive(bytes), FormatError);
}

TEST(TensorArchive, NonFiniteValuesAreRejected) {
  const auto bytes = encode(R"({"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})",
                            f32_bytes({1, std::numeric_limits<float>::quiet_NaN()}));
  EXPECT_THROW(parse_archive(bytes), FormatError);
  TensorArchive a;
  EXPECT_THROW(a.insert("w", Tensor({1}, {std::numeric_limits<float>::infinity()})), ValidationError);
}

TEST(TensorArchive, DuplicateNamesAreRejected) {
  const auto bytes = encode(
      R"({"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})",
      f32_bytes({1, 2}));
  EXPECT_THROW(parse_archive(bytes), FormatError);
  TensorArchive a;
  a.insert("w", Tensor({1}, {1}));
  EXPECT_THROW(a.insert("w", Tensor({1}, {2})), ValidationError);
}

TEST(TensorArchive, OverlappingRangesAreRejected) {
  const auto bytes = encode(
      R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}})",
      f32_bytes({1, 2, 3}));
  EXPECT_THROW(parse_archive(bytes), FormatError);
}

TEST(TensorArchive, MalformedHeaderIsRejected) {
  EXPECT_THROW(parse_archive(std::string("\x04\0\0\0\0\0\0\0{bad", 12)), FormatError);
  EXPECT_THROW(parse_archive(std::string("abc")), FormatError);
  EXPECT_THROW(parse_archive(encode(R"({"w":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}})",
                                    std::string(8, '\0'))),
               FormatError);
}

TEST(TensorArchive, MissingFileIsAnIoError) {
  EXPECT_THROW(load_archive("/nonexistent/dir/x.safetensors"), IoError);
}

TEST(TensorArchive, DigestTracksContent) {
  auto a = test_support::toy_transformer(1, 5);
  const auto d0 = archive_digest(a);
  EXPECT_EQ(d0, archive_digest(test_support::toy_transformer(1, 5)));
  a.at("lm_head.weight").data[0] += 1.0f;
  EXPECT_NE(d0, archive_digest(a));
}
