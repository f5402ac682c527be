#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "test_util.hpp"

using namespace hp;

namespace {

PatchShard tiny_shard(bool labels = true) {
  PatchShard s;
  s.grid_h = 2;
  s.grid_w = 2;
  s.feat_dim = 3;
  s.view_a = test::random_matrix_f(4, 3, 1);
  s.view_b = test::random_matrix_f(4, 3, 2);
  s.attention = Matrix<float>::zeros(4, 4);
  for (auto& v : s.attention.flat()) v = 0.25f;
  if (labels) {
    s.labels = std::vector<std::int32_t>{0, 1, -1, 1};
    s.num_classes = 2;
  }
  return s;
}

// Little-endian writer independent of the library's encoder, standing in for
// the Python exporter.
struct Bytes {
  std::vector<char> b;
  void raw(const char* s, std::size_t n) { b.insert(b.end(), s, s + n); }
  void u32(std::uint32_t v) {
    for (int k = 0; k < 4; ++k) b.push_back(char((v >> (8 * k)) & 0xff));
  }
  void u8(std::uint8_t v) { b.push_back(char(v)); }
  void f32(float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    u32(u);
  }
};

}  // namespace

TEST(Shard, RoundTrip) {
  for (bool labels : {true, false}) {
    const auto s = tiny_shard(labels);
    const auto bytes = encode_shard(s);
    const auto d = decode_shard(bytes);
    EXPECT_EQ(d.grid_h, 2u);
    EXPECT_EQ(d.view_a, s.view_a);
    EXPECT_EQ(d.view_b, s.view_b);
    EXPECT_EQ(d.attention, s.attention);
    EXPECT_EQ(d.labels, s.labels);
    EXPECT_EQ(d.num_classes, s.num_classes);
  }
}

TEST(Shard, HeaderIs25BytesAndSizeMatches) {
  const auto bytes = encode_shard(tiny_shard());
  EXPECT_EQ(bytes.size(), kShardHeaderBytes + 4 * (2 * 4 * 3 + 16 + 4));
}

TEST(Shard, HandBuiltByteStreamParses) {
  Bytes w;
  w.raw("HPFS", 4);
  w.u32(1);
  w.u32(1);  // H
  w.u32(2);  // W
  w.u32(2);  // C
  w.u8(1);
  w.u32(3);
  for (float f : {1.f, 0.f, 0.f, 1.f}) w.f32(f);    // view a
  for (float f : {1.f, 0.1f, 0.1f, 1.f}) w.f32(f);  // view b
  for (float f : {0.75f, 0.25f, 0.5f, 0.5f}) w.f32(f);
  w.u32(2);
  w.u32(std::uint32_t(-1));
  const auto s = decode_shard(w.b);
  EXPECT_EQ(s.grid_h, 1u);
  EXPECT_EQ(s.grid_w, 2u);
  EXPECT_EQ(s.feat_dim, 2u);
  EXPECT_FLOAT_EQ(s.view_b(0, 1), 0.1f);
  EXPECT_FLOAT_EQ(s.attention(0, 0), 0.75f);
  ASSERT_TRUE(s.labels);
  EXPECT_EQ((*s.labels)[0], 2);
  EXPECT_EQ((*s.labels)[1], -1);
  // And our encoder produces the same bytes.
  EXPECT_EQ(encode_shard(s), w.b);
}

TEST(Shard, BadMagic) {
  auto bytes = encode_shard(tiny_shard());
  bytes[0] = 'X';
  try {
    decode_shard(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::bad_magic);
  }
}

TEST(Shard, BadVersion) {
  auto bytes = encode_shard(tiny_shard());
  bytes[4] = 2;
  try {
    decode_shard(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::bad_version);
  }
}

TEST(Shard, TruncationAtEveryLength) {
  const auto bytes = encode_shard(tiny_shard());
  for (std::size_t len = 0; len < bytes.size(); ++len) {
    std::vector<char> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(len));
    try {
      decode_shard(cut);
      FAIL() << "length " << len;
    } catch (const FormatError& e) {
      EXPECT_EQ(e.kind(), FormatErrorKind::truncated) << "length " << len;
    }
  }
}

TEST(Shard, TrailingData) {
  auto bytes = encode_shard(tiny_shard());
  bytes.push_back(0);
  try {
    decode_shard(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::trailing_data);
  }
}

TEST(Shard, AttentionRowSumRejected) {
  auto s = tiny_shard();
  for (auto& v : s.attention.row(1)) v = 0.125f;  // sums to 0.5
  EXPECT_THROW(validate_shard(s), InvariantViolation);
  EXPECT_THROW(encode_shard(s), InvariantViolation);
  // Bypass the encoder to check the decoder rejects it too.
  auto good = encode_shard(tiny_shard());
  const std::size_t att_off = kShardHeaderBytes + 4 * 2 * 4 * 3 + 4 * 4;  // row 1
  Bytes w;
  for (int k = 0; k < 4; ++k) w.f32(0.125f);
  std::copy(w.b.begin(), w.b.end(), good.begin() + static_cast<std::ptrdiff_t>(att_off));
  try {
    decode_shard(good);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::invariant);
  }
}

TEST(Shard, LabelOutOfRangeNamesPatch) {
  auto s = tiny_shard();
  (*s.labels)[3] = 2;
  try {
    validate_shard(s);
    FAIL();
  } catch (const InvariantViolation& e) {
    EXPECT_NE(std::string(e.what()).find("patch 3"), std::string::npos) << e.what();
  }
}

TEST(Shard, NonFinitePayloadRejected) {
  auto bytes = encode_shard(tiny_shard());
  Bytes w;
  w.f32(std::numeric_limits<float>::infinity());
  std::copy(w.b.begin(), w.b.end(), bytes.begin() + kShardHeaderBytes);
  try {
    decode_shard(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::invariant);
  }
}

TEST(Shard, FileRoundTripAndHeader) {
  test::TempDir dir("shard");
  const auto s = tiny_shard();
  write_shard(s, dir.path() / "b.hpfs");
  write_shard(s, dir.path() / "a.hpfs");
  { std::ofstream(dir.path() / "ignored.txt") << "x"; }
  const auto h = read_shard_header(dir.path() / "a.hpfs");
  EXPECT_EQ(h.version, 1u);
  EXPECT_EQ(h.feat_dim, 3u);
  EXPECT_TRUE(h.has_labels);
  EXPECT_EQ(h.num_classes, 2u);
  const auto all = load_shard_directory(dir.path());
  EXPECT_EQ(all.size(), 2u);
  EXPECT_EQ(all[0].view_a, s.view_a);
  EXPECT_THROW(read_shard(dir.path() / "missing.hpfs"), FormatError);
}

TEST(Shard, DirectoryDimensionMismatch) {
  test::TempDir dir("shardmix");
  write_shard(tiny_shard(), dir.path() / "a.hpfs");
  auto other = generate_synthetic(test::small_spec());
  write_shard(other[0], dir.path() / "b.hpfs");
  EXPECT_THROW(load_shard_directory(dir.path()), InvariantViolation);
}

TEST(Batches, TenImagesBatchFour) {
  const auto plan = epoch_plan(10, 4, RngStream(0, "b"));
  ASSERT_EQ(plan.size(), 3u);
  EXPECT_EQ(plan[0].size(), 4u);
  EXPECT_EQ(plan[1].size(), 4u);
  EXPECT_EQ(plan[2].size(), 2u);
  std::vector<std::size_t> all;
  for (auto& b : plan) all.insert(all.end(), b.begin(), b.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(all[i], i);
}

TEST(Batches, TrailingSingletonDropped) {
  const auto plan = epoch_plan(9, 4, RngStream(0, "b"));
  ASSERT_EQ(plan.size(), 2u);
}

TEST(Batches, SingleImageIsError) {
  EXPECT_THROW(epoch_plan(1, 4, RngStream(0, "b")), InputError);
  EXPECT_THROW(epoch_plan(10, 1, RngStream(0, "b")), InputError);
}

TEST(Batches, DeterministicPerSeed) {
  EXPECT_EQ(epoch_plan(20, 4, RngStream(3, "b")), epoch_plan(20, 4, RngStream(3, "b")));
  EXPECT_NE(epoch_plan(20, 4, RngStream(3, "b")), epoch_plan(20, 4, RngStream(4, "b")));
}

TEST(Batches, AssembleLayout) {
  const auto data = generate_synthetic(test::small_spec());
  const auto batches = make_batches(data, 4, RngStream(0, "b"));
  ASSERT_EQ(batches.size(), 3u);
  const auto& b = batches[1];
  EXPECT_EQ(b.view_a.rows(), 4u * 16);
  for (std::size_t flat : {0ul, 17ul, 63ul}) {
    const auto o = b.origin(flat);
    EXPECT_EQ(b.flat_index(o.shard, o.patch), flat);
    const auto& src = data[b.shard_ids[o.shard]].view_a.row(o.patch);
    EXPECT_TRUE(std::equal(src.begin(), src.end(), b.view_a.row(flat).begin()));
  }
}
