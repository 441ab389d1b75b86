#pragma once

// Binary checkpoint container. All integers and doubles little-endian.
//
//   "YESCKPT\0"                 8 bytes
//   version                     u32 (= 1)
//   epoch                       u64
//   config hash                 u64
//   rng seed, rng counter       u64, u64
//   optimizer step              i64
//   meta length, meta JSON      u32, bytes
//   tensor count                u32
//   per tensor: name length u32, name, ndim u32 (= 2), rows u64, cols u64,
//               rows*cols f64 in row-major order
//   FNV-1a 64 of every preceding byte   u64

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "yesbound/hash.hpp"
#include "yesbound/linalg.hpp"
#include "yesbound/lm/model.hpp"
#include "yesbound/optim.hpp"
#include "yesbound/rng.hpp"

namespace yesbound::ckpt {

inline constexpr char kMagic[8] = {'Y', 'E', 'S', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kVersion = 1;

struct Checkpoint {
  std::uint64_t epoch = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_counter = 0;
  std::int64_t opt_step = 0;
  std::string meta;
  std::vector<std::pair<std::string, Mat>> tensors;

  const Mat* find(const std::string& name) const {
    for (const auto& [n, m] : tensors) {
      if (n == name) return &m;
    }
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int s = 0; s < 64; s += 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& b) : b_(b) {}

  std::size_t offset() const { return off_; }

  void need(std::size_t n, const char* what) const {
    if (off_ + n > b_.size()) {
      fail(ErrorKind::FormatError, std::string("checkpoint truncated while reading ") + what, off_);
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{static_cast<unsigned char>(b_[off_ + i])} << (8 * i);
    off_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{static_cast<unsigned char>(b_[off_ + i])} << (8 * i);
    off_ += 8;
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = b_.substr(off_, n);
    off_ += n;
    return s;
  }

 private:
  const std::string& b_;
  std::size_t off_ = 0;
};

}  // namespace detail

inline std::string serialize(const Checkpoint& c) {
  std::string out(kMagic, sizeof kMagic);
  detail::put_u32(out, kVersion);
  detail::put_u64(out, c.epoch);
  detail::put_u64(out, c.config_hash);
  detail::put_u64(out, c.rng_seed);
  detail::put_u64(out, c.rng_counter);
  detail::put_u64(out, static_cast<std::uint64_t>(c.opt_step));
  detail::put_u32(out, static_cast<std::uint32_t>(c.meta.size()));
  out += c.meta;
  detail::put_u32(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, m] : c.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, 2);
    detail::put_u64(out, static_cast<std::uint64_t>(m.rows()));
    detail::put_u64(out, static_cast<std::uint64_t>(m.cols()));
    for (Index i = 0; i < m.size(); ++i) detail::put_u64(out, std::bit_cast<std::uint64_t>(m.data()[i]));
  }
  detail::put_u64(out, fnv1a64(out));
  return out;
}

inline Checkpoint parse(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.bytes(sizeof kMagic, "magic") != std::string(kMagic, sizeof kMagic)) {
    fail(ErrorKind::FormatError, "not a checkpoint (bad magic)", 0);
  }
  const std::size_t voff = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kVersion) {
    fail(ErrorKind::FormatError, "unsupported checkpoint version " + std::to_string(version), voff);
  }
  Checkpoint c;
  c.epoch = r.u64("epoch");
  c.config_hash = r.u64("config hash");
  c.rng_seed = r.u64("rng seed");
  c.rng_counter = r.u64("rng counter");
  c.opt_step = static_cast<std::int64_t>(r.u64("optimizer step"));
  c.meta = r.bytes(r.u32("meta length"), "meta");
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    std::string name = r.bytes(r.u32("tensor name length"), "tensor name");
    const std::size_t doff = r.offset();
    if (r.u32("ndim") != 2) fail(ErrorKind::FormatError, "tensor " + name + ": ndim must be 2", doff);
    const std::uint64_t rows = r.u64("rows");
    const std::uint64_t cols = r.u64("cols");
    if (rows > (1ULL << 32) || cols > (1ULL << 32) || rows * cols > (bytes.size() / 8)) {
      fail(ErrorKind::FormatError, "tensor " + name + ": implausible shape", doff + 4);
    }
    r.need(rows * cols * 8, "tensor data");
    Mat m(static_cast<Index>(rows), static_cast<Index>(cols));
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<double>(r.u64("tensor data"));
    c.tensors.emplace_back(std::move(name), std::move(m));
  }
  const std::size_t body = r.offset();
  const std::uint64_t stored = r.u64("checksum");
  if (stored != fnv1a64(std::string_view(bytes).substr(0, body))) {
    fail(ErrorKind::FormatError, "checkpoint checksum mismatch", body);
  }
  if (r.offset() != bytes.size()) fail(ErrorKind::FormatError, "trailing bytes after checkpoint", r.offset());
  return c;
}

inline void save(const std::filesystem::path& path, const Checkpoint& c) {
  const std::string bytes = serialize(c);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::IoError, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::IoError, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::IoError, "cannot move checkpoint into " + path.string() + ": " + ec.message());
}

inline Checkpoint load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::IoError, "cannot open checkpoint " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse(bytes);
}

// ---------------------------------------------------------------- LM state

/// Model tensors under "model/", AdamW moments under "opt/m/" and "opt/v/".
inline void pack_lm(Checkpoint& c, const lm::LmState& st, const optim::Optimizer* opt) {
  std::vector<std::string> names;
  st.for_each([&](const std::string& n, const Mat& m) {
    names.push_back(n);
    c.tensors.emplace_back("model/" + n, m);
  });
  if (!opt) return;
  c.opt_step = opt->step_count();
  const auto& mom = opt->moments();
  if (mom.empty()) return;
  if (mom.size() != names.size()) fail(ErrorKind::InvalidShape, "optimizer moments do not match model");
  for (std::size_t i = 0; i < names.size(); ++i) c.tensors.emplace_back("opt/m/" + names[i], mom[i].m);
  for (std::size_t i = 0; i < names.size(); ++i) c.tensors.emplace_back("opt/v/" + names[i], mom[i].v);
}

/// Fills `st` (already shaped by the model config) and the optimizer moments.
inline void unpack_lm(const Checkpoint& c, lm::LmState& st, optim::Optimizer* opt) {
  std::vector<std::string> names;
  st.for_each([&](const std::string& n, Mat& m) {
    names.push_back(n);
    const Mat* src = c.find("model/" + n);
    if (!src) fail(ErrorKind::FormatError, "checkpoint lacks tensor model/" + n);
    if (src->rows() != m.rows() || src->cols() != m.cols()) {
      fail(ErrorKind::InvalidShape, "checkpoint tensor model/" + n + " has shape " +
                                        linalg::shape_str(*src) + ", model expects " +
                                        linalg::shape_str(m));
    }
    m = *src;
  });
  if (!opt) return;
  opt->set_step_count(c.opt_step);
  auto& mom = opt->moments();
  mom.clear();
  if (!c.find("opt/m/" + names.front())) return;
  for (const auto& n : names) {
    const Mat* m = c.find("opt/m/" + n);
    const Mat* v = c.find("opt/v/" + n);
    if (!m || !v) fail(ErrorKind::FormatError, "checkpoint lacks optimizer moments for " + n);
    mom.push_back({*m, *v});
  }
}

}  // namespace yesbound::ckpt
