#pragma once

// MNIST IDX files, pre-tokenized id streams and deterministic window batching.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "yesbound/linalg.hpp"
#include "yesbound/lm/model.hpp"
#include "yesbound/rng.hpp"

namespace yesbound::data {

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

struct MnistSet {
  Mat images;  // n x 784, pixels in [0, 1]
  Mat labels;  // n x 10, one-hot
  Index size() const { return images.rows(); }
};

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off,
                               const std::string& what) {
  if (off + 4 > b.size()) fail(ErrorKind::FormatError, what + ": truncated header", off);
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

inline void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  b.push_back(static_cast<unsigned char>(v >> 24));
  b.push_back(static_cast<unsigned char>(v >> 16));
  b.push_back(static_cast<unsigned char>(v >> 8));
  b.push_back(static_cast<unsigned char>(v));
}

/// First `subset` samples of an IDX image/label pair; pixels / 255, one-hot labels.
inline MnistSet load_mnist_idx(const std::filesystem::path& images_path,
                               const std::filesystem::path& labels_path, Index subset) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  const std::string iname = images_path.filename().string();
  const std::string lname = labels_path.filename().string();
  if (read_be32(img, 0, iname) != kIdxImagesMagic) {
    fail(ErrorKind::FormatError, iname + ": bad image magic", 0);
  }
  if (read_be32(lab, 0, lname) != kIdxLabelsMagic) {
    fail(ErrorKind::FormatError, lname + ": bad label magic", 0);
  }
  const std::uint32_t n_img = read_be32(img, 4, iname);
  const std::uint32_t rows = read_be32(img, 8, iname);
  const std::uint32_t cols = read_be32(img, 12, iname);
  const std::uint32_t n_lab = read_be32(lab, 4, lname);
  if (n_img != n_lab) fail(ErrorKind::FormatError, "image/label counts differ", 4);
  if (subset < 0 || static_cast<std::uint64_t>(subset) > n_img) {
    fail(ErrorKind::FormatError, "requested " + std::to_string(subset) + " samples, file has " +
                                     std::to_string(n_img));
  }
  const std::size_t pix = std::size_t{rows} * cols;
  const std::size_t need_img = 16 + pix * static_cast<std::size_t>(subset);
  const std::size_t need_lab = 8 + static_cast<std::size_t>(subset);
  if (img.size() < need_img) fail(ErrorKind::FormatError, iname + ": truncated pixel data", img.size());
  if (lab.size() < need_lab) fail(ErrorKind::FormatError, lname + ": truncated label data", lab.size());
  MnistSet out;
  out.images.resize(subset, static_cast<Index>(pix));
  out.labels = Mat::Zero(subset, 10);
  for (Index i = 0; i < subset; ++i) {
    const std::size_t base = 16 + static_cast<std::size_t>(i) * pix;
    for (std::size_t p = 0; p < pix; ++p) {
      out.images(i, static_cast<Index>(p)) = static_cast<double>(img[base + p]) / 255.0;
    }
    const unsigned label = lab[8 + static_cast<std::size_t>(i)];
    if (label > 9) fail(ErrorKind::FormatError, lname + ": label out of range", 8 + i);
    out.labels(i, label) = 1.0;
  }
  return out;
}

/// Writes an IDX image/label pair (pixel bytes row-major, 28x28 or any square).
inline void write_mnist_idx(const std::filesystem::path& images_path,
                            const std::filesystem::path& labels_path,
                            const std::vector<std::vector<unsigned char>>& images,
                            const std::vector<unsigned char>& labels, std::uint32_t side) {
  std::vector<unsigned char> img;
  put_be32(img, kIdxImagesMagic);
  put_be32(img, static_cast<std::uint32_t>(images.size()));
  put_be32(img, side);
  put_be32(img, side);
  for (const auto& im : images) img.insert(img.end(), im.begin(), im.end());
  std::vector<unsigned char> lab;
  put_be32(lab, kIdxLabelsMagic);
  put_be32(lab, static_cast<std::uint32_t>(labels.size()));
  lab.insert(lab.end(), labels.begin(), labels.end());
  std::ofstream(images_path, std::ios::binary)
      .write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
  std::ofstream(labels_path, std::ios::binary)
      .write(reinterpret_cast<const char*>(lab.data()), static_cast<std::streamsize>(lab.size()));
}

// ---------------------------------------------------------------- token ids

using TokenIds = std::vector<std::int32_t>;

inline bool looks_like_text(const std::vector<unsigned char>& bytes) {
  for (unsigned char c : bytes) {
    if (!(std::isdigit(c) || std::isspace(c))) return false;
  }
  return true;
}

/// Reads a flat little-endian uint32 id file or whitespace-separated decimal
/// text (auto-detected) and keeps the first `take_first` ids.
inline TokenIds load_token_ids(const std::filesystem::path& path, std::size_t take_first,
                               Index vocab_size) {
  const auto bytes = read_file(path);
  TokenIds ids;
  auto push = [&](std::uint64_t v) {
    if (ids.size() >= take_first) return false;
    if (v >= static_cast<std::uint64_t>(vocab_size)) {
      fail(ErrorKind::InvalidToken, path.filename().string() + ": id " + std::to_string(v) +
                                        " >= vocab size " + std::to_string(vocab_size),
           ids.size());
    }
    ids.push_back(static_cast<std::int32_t>(v));
    return true;
  };
  if (looks_like_text(bytes)) {
    std::uint64_t cur = 0;
    bool in_num = false;
    for (unsigned char c : bytes) {
      if (std::isdigit(c)) {
        cur = cur * 10 + static_cast<std::uint64_t>(c - '0');
        in_num = true;
      } else if (in_num) {
        if (!push(cur)) return ids;
        cur = 0;
        in_num = false;
      }
    }
    if (in_num) push(cur);
    return ids;
  }
  if (bytes.size() % 4 != 0) {
    fail(ErrorKind::FormatError, path.filename().string() + ": binary id file length not a multiple of 4",
         bytes.size() - bytes.size() % 4);
  }
  for (std::size_t off = 0; off < bytes.size(); off += 4) {
    const std::uint32_t v = std::uint32_t{bytes[off]} | (std::uint32_t{bytes[off + 1]} << 8) |
                            (std::uint32_t{bytes[off + 2]} << 16) |
                            (std::uint32_t{bytes[off + 3]} << 24);
    if (!push(v)) break;
  }
  return ids;
}

inline void write_token_ids_binary(const std::filesystem::path& path, const TokenIds& ids) {
  std::vector<unsigned char> b;
  b.reserve(ids.size() * 4);
  for (std::int32_t id : ids) {
    const auto v = static_cast<std::uint32_t>(id);
    for (int s = 0; s < 32; s += 8) b.push_back(static_cast<unsigned char>(v >> s));
  }
  std::ofstream(path, std::ios::binary)
      .write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

struct TokenCorpus {
  TokenIds train;
  TokenIds test;
  Index vocab_size = 0;
  Index context_len = 0;
};

// ---------------------------------------------------------------- batching

/// Number of non-overlapping windows of `context_len` inputs (+1 target).
inline Index window_count(std::size_t corpus_len, Index context_len) {
  if (corpus_len < 1) return 0;
  return static_cast<Index>((corpus_len - 1) / static_cast<std::size_t>(context_len));
}

inline lm::TokenBatch make_batch(const TokenIds& ids, const std::vector<Index>& windows,
                                 Index context_len) {
  lm::TokenBatch b;
  b.batch = static_cast<Index>(windows.size());
  b.seq_len = context_len;
  b.inputs.reserve(static_cast<std::size_t>(b.tokens()));
  b.targets.reserve(static_cast<std::size_t>(b.tokens()));
  for (Index w : windows) {
    const auto start = static_cast<std::size_t>(w * context_len);
    for (Index t = 0; t < context_len; ++t) {
      b.inputs.push_back(ids[start + static_cast<std::size_t>(t)]);
      b.targets.push_back(ids[start + static_cast<std::size_t>(t) + 1]);
    }
  }
  return b;
}

inline std::vector<lm::TokenBatch> group(const TokenIds& ids, const std::vector<Index>& order,
                                         Index batch_size, Index context_len) {
  std::vector<lm::TokenBatch> out;
  for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(batch_size)) {
    const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(batch_size));
    out.push_back(make_batch(ids, std::vector<Index>(order.begin() + static_cast<std::ptrdiff_t>(s),
                                                     order.begin() + static_cast<std::ptrdiff_t>(e)),
                             context_len));
  }
  return out;
}

/// Batches for one epoch: non-overlapping windows in an order shuffled by
/// (seed, epoch). The last batch may be partial.
inline std::vector<lm::TokenBatch> batches(const TokenIds& ids, Index batch_size,
                                           Index context_len, std::uint64_t seed,
                                           std::int64_t epoch = 0) {
  if (batch_size < 1 || context_len < 1) fail(ErrorKind::InvalidArgument, "batch and context sizes must be >= 1");
  if (ids.size() < static_cast<std::size_t>(context_len) + 1) {
    fail(ErrorKind::InvalidArgument, "corpus of " + std::to_string(ids.size()) +
                                         " tokens is shorter than one window");
  }
  const Index n = window_count(ids.size(), context_len);
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng = Rng(seed).derive(static_cast<std::uint64_t>(epoch));
  rng.shuffle(order);
  return group(ids, order, batch_size, context_len);
}

/// All windows in corpus order, for evaluation. `max_windows` = 0 keeps all.
inline std::vector<lm::TokenBatch> sequential_batches(const TokenIds& ids, Index batch_size,
                                                      Index context_len, Index max_windows = 0) {
  if (ids.size() < static_cast<std::size_t>(context_len) + 1) {
    fail(ErrorKind::InvalidArgument, "split is shorter than one window");
  }
  Index n = window_count(ids.size(), context_len);
  if (max_windows > 0) n = std::min(n, max_windows);
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  return group(ids, order, batch_size, context_len);
}

}  // namespace yesbound::data
