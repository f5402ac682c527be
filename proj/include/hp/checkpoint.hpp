#pragma once

// HPCK v1 checkpoint layout (little-endian):
//
//   "HPCK"  u32 version  u64 iteration  u32 C  u32 K_h  u32 K
//   head parameters     6 blocks of f32: seg_w1 seg_b1 seg_w2 seg_b2 proj_w proj_b
//   momentum head       f32 coefficient, 4 blocks of f32: w1 b1 w2 b2
//   optimizer           u64 step, f64 lr wd beta1 beta2 eps,
//                       6 blocks first moments, 6 blocks second moments
//   pools               for Q^ag then Q^sp: u8 present; if present
//                       u8 flavor, u32 M, u32 d, u64 built_at, M*d f32
//   u64 renewal count
//
// Block sizes follow from C, K_h and K.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "hp/errors.hpp"
#include "hp/heads.hpp"
#include "hp/refpool.hpp"
#include "hp/shard.hpp"

namespace hp {

inline constexpr char kCheckpointMagic[4] = {'H', 'P', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t iteration = 0;
  HeadParameters<float> params;
  MomentumHead<float> momentum;
  OptimizerState<float> optimizer;
  std::optional<ReferencePool> pool_ag;
  std::optional<ReferencePool> pool_sp;
  std::uint64_t renewals = 0;
};

namespace detail {

inline void put_u64(std::vector<char>& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v & 0xffffffffu));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void put_f64(std::vector<char>& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline void read_block(ByteReader& in, std::span<float> dst) {
  auto v = in.f32s(dst.size());
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (!std::isfinite(v[i])) throw FormatError(FormatErrorKind::invariant, in.context() + ": non-finite parameter");
    dst[i] = v[i];
  }
}

inline void put_pool(std::vector<char>& out, const std::optional<ReferencePool>& pool) {
  out.push_back(pool ? 1 : 0);
  if (!pool) return;
  out.push_back(static_cast<char>(pool->flavor));
  put_u32(out, static_cast<std::uint32_t>(pool->size()));
  put_u32(out, static_cast<std::uint32_t>(pool->dim()));
  put_u64(out, pool->built_at_iteration);
  put_f32s(out, pool->entries.flat());
}

inline std::optional<ReferencePool> read_pool(ByteReader& in) {
  if (in.u8() == 0) return std::nullopt;
  ReferencePool pool;
  const auto flavor = in.u8();
  if (flavor > 1) throw FormatError(FormatErrorKind::invariant, in.context() + ": bad pool flavor");
  pool.flavor = static_cast<PoolFlavor>(flavor);
  const std::size_t m = in.u32(), d = in.u32();
  pool.built_at_iteration = in.u64();
  in.need(4 * m * d);
  pool.entries = Matrix<float>::zeros(m, d);
  read_block(in, pool.entries.flat());
  return pool;
}

}  // namespace detail

inline std::vector<char> encode_checkpoint(const Checkpoint& ck) {
  std::vector<char> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, ck.iteration);
  detail::put_u32(out, static_cast<std::uint32_t>(ck.params.seg.in_dim()));
  detail::put_u32(out, static_cast<std::uint32_t>(ck.params.seg.hidden_dim()));
  detail::put_u32(out, static_cast<std::uint32_t>(ck.params.seg.out_dim()));
  for (auto b : param_blocks(ck.params)) detail::put_f32s(out, b);
  detail::put_u32(out, std::bit_cast<std::uint32_t>(ck.momentum.momentum));
  const auto& mp = ck.momentum.params;
  for (std::span<const float> b : {mp.w1.flat(), std::span<const float>(mp.b1), mp.w2.flat(),
                                   std::span<const float>(mp.b2)})
    detail::put_f32s(out, b);
  const auto& opt = ck.optimizer;
  detail::put_u64(out, opt.step);
  for (double v : {opt.config.lr, opt.config.weight_decay, opt.config.beta1, opt.config.beta2, opt.config.eps})
    detail::put_f64(out, v);
  for (auto b : param_blocks(opt.m)) detail::put_f32s(out, b);
  for (auto b : param_blocks(opt.v)) detail::put_f32s(out, b);
  detail::put_pool(out, ck.pool_ag);
  detail::put_pool(out, ck.pool_sp);
  detail::put_u64(out, ck.renewals);
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<char>& bytes, const std::string& context = "checkpoint") {
  detail::ByteReader in(bytes, context);
  char magic[4];
  in.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw FormatError(FormatErrorKind::bad_magic, context + ": bad magic");
  const auto version = in.u32();
  if (version != kCheckpointVersion)
    throw FormatError(FormatErrorKind::bad_version, context + ": unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.iteration = in.u64();
  const std::size_t c = in.u32(), kh = in.u32(), k = in.u32();
  if (c == 0 || kh == 0 || k == 0) throw FormatError(FormatErrorKind::invariant, context + ": zero dimension");
  in.need(4 * (kh * c + kh + k * kh + k + k * k + k));
  ck.params = HeadParameters<float>::zeros(c, kh, k);
  for (auto b : param_blocks(ck.params)) detail::read_block(in, b);
  ck.momentum.momentum = in.f32();
  ck.momentum.params = SegHeadParams<float>::zeros(c, kh, k);
  auto& mp = ck.momentum.params;
  for (std::span<float> b : {mp.w1.flat(), std::span<float>(mp.b1), mp.w2.flat(), std::span<float>(mp.b2)})
    detail::read_block(in, b);
  ck.optimizer = OptimizerState<float>::for_params(ck.params, {});
  ck.optimizer.step = in.u64();
  for (double* v : {&ck.optimizer.config.lr, &ck.optimizer.config.weight_decay, &ck.optimizer.config.beta1,
                    &ck.optimizer.config.beta2, &ck.optimizer.config.eps})
    *v = std::bit_cast<double>(in.u64());
  for (auto b : param_blocks(ck.optimizer.m)) detail::read_block(in, b);
  for (auto b : param_blocks(ck.optimizer.v)) detail::read_block(in, b);
  ck.pool_ag = detail::read_pool(in);
  ck.pool_sp = detail::read_pool(in);
  ck.renewals = in.u64();
  if (in.remaining() != 0)
    throw FormatError(FormatErrorKind::trailing_data, context + ": " + std::to_string(in.remaining()) + " trailing bytes");
  return ck;
}

inline void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path), path.string());
}

}  // namespace hp
