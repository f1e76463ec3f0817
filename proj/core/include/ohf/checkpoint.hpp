#pragma once

// Checkpoint persistence. On-disk layout (all integers little-endian):
//   "OHF1" | u32 version=1 | u32 spec length | spec bytes
//   | u32 tensor count | tensor records...        (model parameters + buffers)
//   | u32 buffer count | tensor records...        (optimizer momentum)
//   | u64 step | 4 x u64 RNG state
// tensor record: u16 name length | name bytes | u8 rank | rank x u32 extents
//                | extent-product x f32 values.
// Saves write a sibling temp file and rename it into place, so a crash or a
// full disk never leaves a partial checkpoint at the target path.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ohf/errors.hpp"
#include "ohf/model.hpp"
#include "ohf/optim.hpp"
#include "ohf/rng.hpp"
#include "ohf/tensor.hpp"

namespace ohf {

struct Checkpoint {
  std::uint32_t version = 1;
  std::string spec;  // model spec string; rebuilds the architecture
  std::vector<std::pair<std::string, Tensor<float>>> tensors;      // params + buffers
  std::vector<std::pair<std::string, Tensor<float>>> opt_buffers;  // momentum, aligned with params
  std::uint64_t step = 0;
  Rng::State rng_state{};
};

namespace detail {

inline void put_u16(std::vector<unsigned char>& b, std::uint16_t v) {
  b.push_back(static_cast<unsigned char>(v & 0xff));
  b.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
}
inline void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::vector<unsigned char>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::vector<unsigned char>& b, float v) { put_u32(b, std::bit_cast<std::uint32_t>(v)); }

// Bounds-checked little-endian reader that reports the byte offset of the
// first missing or malformed datum.
struct ByteReader {
  const std::vector<unsigned char>& buf;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) {
    if (pos + n > buf.size())
      fail_format("checkpoint truncated reading " + std::string(what) + " at byte offset " + std::to_string(pos));
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint16_t>(buf[pos] | (buf[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
};

inline void encode_tensor_section(std::vector<unsigned char>& out,
                                  const std::vector<std::pair<std::string, Tensor<float>>>& tensors) {
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xffff) fail_contract("tensor name too long: " + name);
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<unsigned char>(t.dim()));
    for (int a = 0; a < t.dim(); ++a) put_u32(out, static_cast<std::uint32_t>(t.extent(a)));
    for (float v : t.values()) put_f32(out, v);
  }
}

inline std::vector<std::pair<std::string, Tensor<float>>> decode_tensor_section(ByteReader& r, const char* section) {
  const std::uint32_t count = r.u32(section);
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  tensors.reserve(count);
  std::unordered_set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t name_at = r.pos;
    const std::uint16_t name_len = r.u16("tensor name length");
    std::string name = r.bytes(name_len, "tensor name");
    if (!seen.insert(name).second)
      fail_format("duplicate tensor name '" + name + "' at byte offset " + std::to_string(name_at));
    r.need(1, "tensor rank");
    const int rank = r.buf[r.pos++];
    if (rank > 8) fail_format("implausible tensor rank " + std::to_string(rank) + " at byte offset " +
                              std::to_string(r.pos - 1));
    std::vector<int> shape(static_cast<std::size_t>(rank));
    std::int64_t numel = 1;
    for (int a = 0; a < rank; ++a) {
      const std::size_t at = r.pos;
      const std::uint32_t e = r.u32("tensor extent");
      if (e == 0 || e > (1u << 28) || (numel *= e) > (std::int64_t{1} << 28))
        fail_format("implausible tensor extent at byte offset " + std::to_string(at));
      shape[static_cast<std::size_t>(a)] = static_cast<int>(e);
    }
    std::vector<float> values(static_cast<std::size_t>(numel));
    r.need(values.size() * 4, "tensor values");
    for (auto& v : values) {
      std::uint32_t bits = 0;
      for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(r.buf[r.pos + k]) << (8 * k);
      r.pos += 4;
      v = std::bit_cast<float>(bits);
    }
    tensors.emplace_back(std::move(name), Tensor<float>::from_values(std::move(shape), std::move(values)));
  }
  return tensors;
}

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& c) {
  std::vector<unsigned char> out;
  out.insert(out.end(), {'O', 'H', 'F', '1'});
  detail::put_u32(out, c.version);
  detail::put_u32(out, static_cast<std::uint32_t>(c.spec.size()));
  out.insert(out.end(), c.spec.begin(), c.spec.end());
  detail::encode_tensor_section(out, c.tensors);
  detail::encode_tensor_section(out, c.opt_buffers);
  detail::put_u64(out, c.step);
  for (std::uint64_t s : c.rng_state) detail::put_u64(out, s);
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& buf) {
  detail::ByteReader r{buf};
  if (r.bytes(4, "magic") != "OHF1") fail_format("bad checkpoint magic at byte offset 0");
  Checkpoint c;
  c.version = r.u32("version");
  if (c.version != 1) fail_format("unsupported checkpoint version " + std::to_string(c.version) + " at byte offset 4");
  const std::uint32_t spec_len = r.u32("spec length");
  c.spec = r.bytes(spec_len, "spec text");
  c.tensors = detail::decode_tensor_section(r, "tensor count");
  c.opt_buffers = detail::decode_tensor_section(r, "optimizer buffer count");
  c.step = r.u64("step");
  for (auto& s : c.rng_state) s = r.u64("rng state");
  if (r.pos != buf.size()) fail_format(std::to_string(buf.size() - r.pos) + " trailing bytes at byte offset " +
                                       std::to_string(r.pos));
  return c;
}

// Writes atomically: serialize fully, write a sibling temp file, rename.
inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const auto bytes = encode_checkpoint(c);
  const std::string tmp = path + ".tmp";
  std::FILE* f = std::fopen(tmp.c_str(), "wb");
  if (!f) fail_io("cannot open '" + tmp + "' for writing");
  const bool ok = std::fwrite(bytes.data(), 1, bytes.size(), f) == bytes.size() && std::fclose(f) == 0;
  if (!ok) {
    std::remove(tmp.c_str());
    fail_io("failed writing checkpoint to '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    fail_io("cannot move checkpoint into place at '" + path + "'");
  }
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) fail_data("cannot open checkpoint '" + path + "'");
  std::fseek(f, 0, SEEK_END);
  const long size = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<unsigned char> buf(static_cast<std::size_t>(size < 0 ? 0 : size));
  const std::size_t got = buf.empty() ? 0 : std::fread(buf.data(), 1, buf.size(), f);
  std::fclose(f);
  if (got != buf.size()) fail_io("failed reading '" + path + "'");
  return decode_checkpoint(buf);
}

// Snapshot of live training state. Tensor handles are shared, not copied;
// the caller must not mutate parameters between making and saving.
inline Checkpoint make_checkpoint(const ModelConfig& cfg, const ModelParams<float>& mp, const Sgd<float>& opt,
                                  std::uint64_t step, const Rng::State& rng_state) {
  Checkpoint c;
  c.spec = model_spec_string(cfg);
  for (const auto& p : named_params(mp)) c.tensors.emplace_back(p.name, p.tensor);
  for (const auto& [name, t] : named_buffers(mp)) c.tensors.emplace_back(name, t);
  c.opt_buffers = opt.velocity;
  c.step = step;
  c.rng_state = rng_state;
  return c;
}

// Rebuilds a model (and optionally the optimizer) from a checkpoint. Every
// live tensor of the architecture must be present with matching shape, and
// the file must not carry extras — anything else means the file does not
// describe the architecture its own spec claims.
struct RestoredModel {
  ModelConfig config;
  ModelParams<float> model;
  Sgd<float> opt;
  std::uint64_t step = 0;
  Rng::State rng_state{};
};

inline RestoredModel restore_checkpoint(const Checkpoint& c, double momentum = 0.9, double weight_decay = 1e-4) {
  RestoredModel out;
  out.config = parse_model_spec(c.spec);
  Rng scratch(0);  // layout only; every value is overwritten below
  out.model = init_model<float>(out.config, scratch);
  out.step = c.step;
  out.rng_state = c.rng_state;

  std::vector<std::pair<std::string, Tensor<float>>> live;
  for (const auto& p : named_params(out.model)) live.emplace_back(p.name, p.tensor);
  for (const auto& b : named_buffers(out.model)) live.push_back(b);
  if (live.size() != c.tensors.size())
    fail_format("checkpoint carries " + std::to_string(c.tensors.size()) + " tensors but its spec describes " +
                std::to_string(live.size()));
  for (std::size_t i = 0; i < live.size(); ++i) {
    const auto& [name, stored] = c.tensors[i];
    if (name != live[i].first)
      fail_format("checkpoint tensor '" + name + "' does not match expected '" + live[i].first + "'");
    if (stored.shape() != live[i].second.shape())
      fail_format("checkpoint tensor '" + name + "' has shape " + shape_str(stored.shape()) + ", expected " +
                  shape_str(live[i].second.shape()));
    live[i].second.mutable_values() = stored.values();
  }

  out.opt = Sgd<float>(named_params(out.model), momentum, weight_decay);
  if (!c.opt_buffers.empty()) {
    if (c.opt_buffers.size() != out.opt.velocity.size())
      fail_format("checkpoint carries " + std::to_string(c.opt_buffers.size()) + " optimizer buffers, expected " +
                  std::to_string(out.opt.velocity.size()));
    for (std::size_t i = 0; i < out.opt.velocity.size(); ++i) {
      const auto& [name, stored] = c.opt_buffers[i];
      if (name != out.opt.velocity[i].first)
        fail_format("optimizer buffer '" + name + "' does not match parameter '" + out.opt.velocity[i].first + "'");
      if (stored.shape() != out.opt.velocity[i].second.shape())
        fail_format("optimizer buffer '" + name + "' has shape " + shape_str(stored.shape()));
      out.opt.velocity[i].second.mutable_values() = stored.values();
    }
  }
  return out;
}

}  // namespace ohf
