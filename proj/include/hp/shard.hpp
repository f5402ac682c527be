#pragma once

// HPFS v1: per-image patch features, attention rows and optional labels.
//
// All integers and floats are little-endian.
//
//   offset  size        field
//   0       4           magic "HPFS"
//   4       4   u32     version (1)
//   8       4   u32     grid_h (H)
//   12      4   u32     grid_w (W)
//   16      4   u32     feat_dim (C)
//   20      1   u8      has_labels (0 | 1)
//   21      4   u32     num_classes (0 when has_labels == 0)
//   25      4*N*C f32   view_a, row-major, N = H*W
//   ...     4*N*C f32   view_b
//   ...     4*N*N f32   attention, row i = head-averaged attention of patch i
//   ...     4*N   i32   labels (only when has_labels == 1), -1 = unlabeled
//
// Nothing follows the last section.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hp/errors.hpp"
#include "hp/rng.hpp"
#include "hp/tensor.hpp"

namespace hp {

inline constexpr char kShardMagic[4] = {'H', 'P', 'F', 'S'};
inline constexpr std::uint32_t kShardVersion = 1;
inline constexpr std::size_t kShardHeaderBytes = 25;
inline constexpr std::int32_t kUnlabeled = -1;
inline constexpr double kAttentionRowTolerance = 1e-4;

struct PatchShard {
  std::uint32_t grid_h = 0;
  std::uint32_t grid_w = 0;
  std::uint32_t feat_dim = 0;
  Matrix<float> view_a;     // (H*W) x C
  Matrix<float> view_b;     // (H*W) x C
  Matrix<float> attention;  // (H*W) x (H*W)
  std::optional<std::vector<std::int32_t>> labels;
  std::uint32_t num_classes = 0;

  std::size_t num_patches() const noexcept { return std::size_t(grid_h) * grid_w; }
  bool has_labels() const noexcept { return labels.has_value(); }
};

/// Throws InvariantViolation describing the first broken invariant.
inline void validate_shard(const PatchShard& s) {
  const std::size_t n = s.num_patches();
  if (n == 0 || s.feat_dim == 0) throw InvariantViolation("shard: empty grid or zero feature dim");
  auto check_shape = [&](const Matrix<float>& m, std::size_t cols, const char* name) {
    if (m.rows() != n || m.cols() != cols)
      throw InvariantViolation(std::string("shard: ") + name + " has shape " +
                               std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                               ", expected " + std::to_string(n) + "x" + std::to_string(cols));
  };
  check_shape(s.view_a, s.feat_dim, "view_a");
  check_shape(s.view_b, s.feat_dim, "view_b");
  check_shape(s.attention, n, "attention");
  for (auto* m : {&s.view_a, &s.view_b, &s.attention})
    for (float v : m->flat())
      if (!std::isfinite(v)) throw InvariantViolation("shard: non-finite value");
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (float v : s.attention.row(i)) {
      if (v < 0.0f) throw InvariantViolation("shard: negative attention in row " + std::to_string(i));
      sum += v;
    }
    if (std::abs(sum - 1.0) > kAttentionRowTolerance)
      throw InvariantViolation("shard: attention row " + std::to_string(i) + " sums to " +
                               std::to_string(sum));
  }
  if (s.labels) {
    if (s.labels->size() != n) throw InvariantViolation("shard: label count != H*W");
    if (s.num_classes == 0) throw InvariantViolation("shard: labels present but num_classes == 0");
    for (std::size_t i = 0; i < n; ++i) {
      const auto l = (*s.labels)[i];
      if (l != kUnlabeled && (l < 0 || static_cast<std::uint32_t>(l) >= s.num_classes))
        throw InvariantViolation("shard: label " + std::to_string(l) + " at patch " +
                                 std::to_string(i) + " outside [0, " +
                                 std::to_string(s.num_classes) + ")");
    }
  }
}

namespace detail {

inline void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xffu));
}

inline std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k) v |= std::uint32_t(static_cast<unsigned char>(p[k])) << (8 * k);
  return v;
}

inline void put_f32s(std::vector<char>& out, std::span<const float> v) {
  for (float x : v) put_u32(out, std::bit_cast<std::uint32_t>(x));
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::io, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatErrorKind::io, "write failed: " + path.string());
}

/// Bounds-checked little-endian reader over a byte buffer.
class ByteReader {
 public:
  ByteReader(const std::vector<char>& bytes, std::string context)
      : bytes_(bytes), context_(std::move(context)) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size())
      throw FormatError(FormatErrorKind::truncated,
                        context_ + ": truncated at byte " + std::to_string(pos_) + " (need " +
                            std::to_string(n) + " more)");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    auto v = get_u32(bytes_.data() + pos_);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    const std::uint64_t hi = u32();
    return lo | (hi << 32);
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::vector<float> f32s(std::size_t n) {
    need(4 * n);
    std::vector<float> out(n);
    for (auto& v : out) v = f32();
    return out;
  }
  void bytes(char* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  const std::string& context() const { return context_; }

 private:
  const std::vector<char>& bytes_;
  std::string context_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> encode_shard(const PatchShard& shard) {
  validate_shard(shard);
  std::vector<char> out;
  const std::size_t n = shard.num_patches();
  out.reserve(kShardHeaderBytes + 4 * (2 * n * shard.feat_dim + n * n + n));
  out.insert(out.end(), std::begin(kShardMagic), std::end(kShardMagic));
  detail::put_u32(out, kShardVersion);
  detail::put_u32(out, shard.grid_h);
  detail::put_u32(out, shard.grid_w);
  detail::put_u32(out, shard.feat_dim);
  out.push_back(shard.has_labels() ? 1 : 0);
  detail::put_u32(out, shard.has_labels() ? shard.num_classes : 0);
  detail::put_f32s(out, shard.view_a.flat());
  detail::put_f32s(out, shard.view_b.flat());
  detail::put_f32s(out, shard.attention.flat());
  if (shard.labels)
    for (auto l : *shard.labels) detail::put_u32(out, static_cast<std::uint32_t>(l));
  return out;
}

inline PatchShard decode_shard(const std::vector<char>& bytes, const std::string& context = "shard") {
  detail::ByteReader in(bytes, context);
  char magic[4];
  in.bytes(magic, 4);
  if (std::memcmp(magic, kShardMagic, 4) != 0)
    throw FormatError(FormatErrorKind::bad_magic, context + ": bad magic");
  const auto version = in.u32();
  if (version != kShardVersion)
    throw FormatError(FormatErrorKind::bad_version,
                      context + ": unsupported version " + std::to_string(version));
  PatchShard s;
  s.grid_h = in.u32();
  s.grid_w = in.u32();
  s.feat_dim = in.u32();
  const auto has_labels = in.u8();
  s.num_classes = in.u32();
  if (has_labels > 1)
    throw FormatError(FormatErrorKind::invariant, context + ": has_labels flag must be 0 or 1");
  const std::size_t n = s.num_patches();
  const std::size_t c = s.feat_dim;
  // Size check up front so absurd dimensions fail as truncation, not allocation.
  const std::size_t expected = 4 * (2 * n * c + n * n + (has_labels ? n : 0));
  in.need(expected);
  try {
    s.view_a = Matrix<float>(n, c, in.f32s(n * c));
    s.view_b = Matrix<float>(n, c, in.f32s(n * c));
    s.attention = Matrix<float>(n, n, in.f32s(n * n));
  } catch (const NonFiniteValue& e) {
    throw FormatError(FormatErrorKind::invariant, context + ": " + e.what());
  }
  if (has_labels) {
    std::vector<std::int32_t> labels(n);
    for (auto& l : labels) l = static_cast<std::int32_t>(in.u32());
    s.labels = std::move(labels);
  }
  if (in.remaining() != 0)
    throw FormatError(FormatErrorKind::trailing_data,
                      context + ": " + std::to_string(in.remaining()) + " trailing bytes");
  try {
    validate_shard(s);
  } catch (const InvariantViolation& e) {
    throw FormatError(FormatErrorKind::invariant, context + ": " + e.what());
  }
  return s;
}

inline void write_shard(const PatchShard& shard, const std::filesystem::path& path) {
  detail::write_file(path, encode_shard(shard));
}

inline PatchShard read_shard(const std::filesystem::path& path) {
  return decode_shard(detail::read_file(path), path.string());
}

struct ShardHeader {
  std::uint32_t version, grid_h, grid_w, feat_dim, num_classes;
  bool has_labels;
};

/// Reads only the fixed header (used by `inspect`).
inline ShardHeader read_shard_header(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError(FormatErrorKind::io, "cannot open " + path.string());
  std::vector<char> bytes(kShardHeaderBytes);
  f.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  bytes.resize(static_cast<std::size_t>(f.gcount()));
  detail::ByteReader in(bytes, path.string());
  char magic[4];
  in.bytes(magic, 4);
  if (std::memcmp(magic, kShardMagic, 4) != 0)
    throw FormatError(FormatErrorKind::bad_magic, path.string() + ": bad magic");
  ShardHeader h{};
  h.version = in.u32();
  h.grid_h = in.u32();
  h.grid_w = in.u32();
  h.feat_dim = in.u32();
  h.has_labels = in.u8() != 0;
  h.num_classes = in.u32();
  return h;
}

/// Loads every *.hpfs file in a directory, sorted by file name.
inline std::vector<PatchShard> load_shard_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw FormatError(FormatErrorKind::io, dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".hpfs") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<PatchShard> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(read_shard(f));
  if (!out.empty()) {
    const auto& first = out.front();
    for (const auto& s : out)
      if (s.grid_h != first.grid_h || s.grid_w != first.grid_w || s.feat_dim != first.feat_dim)
        throw InvariantViolation("dataset: shards disagree on grid or feature dimensions");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mini-batches

struct PatchOrigin {
  std::size_t shard;  // index into MiniBatch::shard_ids
  std::size_t patch;
};

struct MiniBatch {
  std::vector<std::size_t> shard_ids;  // dataset indices
  std::size_t grid_h = 0, grid_w = 0;
  Matrix<float> view_a;  // (B*H*W) x C, shard-major
  Matrix<float> view_b;

  std::size_t patches_per_image() const { return grid_h * grid_w; }
  std::size_t num_images() const { return shard_ids.size(); }
  PatchOrigin origin(std::size_t flat) const {
    return {flat / patches_per_image(), flat % patches_per_image()};
  }
  std::size_t flat_index(std::size_t image, std::size_t patch) const {
    return image * patches_per_image() + patch;
  }
};

inline MiniBatch assemble_batch(const std::vector<PatchShard>& dataset,
                                const std::vector<std::size_t>& ids) {
  if (ids.empty()) throw InputError("assemble_batch: no shards");
  const auto& first = dataset.at(ids.front());
  MiniBatch b;
  b.shard_ids = ids;
  b.grid_h = first.grid_h;
  b.grid_w = first.grid_w;
  const std::size_t n = first.num_patches();
  const std::size_t c = first.feat_dim;
  b.view_a = Matrix<float>::zeros(ids.size() * n, c);
  b.view_b = Matrix<float>::zeros(ids.size() * n, c);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const auto& s = dataset.at(ids[k]);
    if (s.num_patches() != n || s.feat_dim != c)
      throw InvariantViolation("assemble_batch: shard dimension mismatch");
    std::copy(s.view_a.flat().begin(), s.view_a.flat().end(), b.view_a.flat().begin() + k * n * c);
    std::copy(s.view_b.flat().begin(), s.view_b.flat().end(), b.view_b.flat().begin() + k * n * c);
  }
  return b;
}

/// Shard index groups for one epoch: a seeded shuffle split into chunks of
/// batch_size; a trailing chunk is kept only if it holds at least 2 images.
inline std::vector<std::vector<std::size_t>> epoch_plan(std::size_t dataset_size,
                                                        std::size_t batch_size, RngStream rng) {
  if (batch_size < 2) throw InputError("batch size must be >= 2");
  if (dataset_size == 0) throw InputError("empty dataset");
  std::vector<std::size_t> order(dataset_size);
  for (std::size_t i = 0; i < dataset_size; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> plan;
  for (std::size_t start = 0; start < dataset_size; start += batch_size) {
    const std::size_t end = std::min(dataset_size, start + batch_size);
    if (end - start < 2) break;
    plan.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                      order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (plan.empty()) throw InputError("epoch has no batch of at least 2 images");
  return plan;
}

inline std::vector<MiniBatch> make_batches(const std::vector<PatchShard>& dataset,
                                           std::size_t batch_size, RngStream rng) {
  std::vector<MiniBatch> out;
  for (const auto& ids : epoch_plan(dataset.size(), batch_size, std::move(rng)))
    out.push_back(assemble_batch(dataset, ids));
  return out;
}

}  // namespace hp
