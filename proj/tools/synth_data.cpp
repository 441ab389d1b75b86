// Writes the synthetic stand-in datasets:
//   synth_data digits <dir> [n] [seed]   -> <dir>/images-idx3-ubyte, labels-idx1-ubyte
//   synth_data corpus <dir> [seed]       -> <dir>/train.bin (100000 ids), test.bin (10000 ids)

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "yesbound/synth.hpp"

int main(int argc, char** argv) {
  using namespace yesbound;
  if (argc < 3) {
    std::fprintf(stderr, "usage: %s digits <dir> [n] [seed] | corpus <dir> [seed]\n", argv[0]);
    return 2;
  }
  const std::string what = argv[1];
  const std::filesystem::path dir = argv[2];
  std::filesystem::create_directories(dir);
  try {
    if (what == "digits") {
      const std::size_t n = argc > 3 ? std::strtoull(argv[3], nullptr, 10) : 5000;
      const std::uint64_t seed = argc > 4 ? std::strtoull(argv[4], nullptr, 10) : 0;
      const auto set = synth::digits(n, seed);
      data::write_mnist_idx(dir / "images-idx3-ubyte", dir / "labels-idx1-ubyte", set.images, set.labels, 28);
      std::printf("wrote %zu images to %s\n", n, dir.string().c_str());
    } else if (what == "corpus") {
      const std::uint64_t seed = argc > 3 ? std::strtoull(argv[3], nullptr, 10) : 0;
      const auto ids = synth::markov_corpus(110000, 256, seed);
      data::write_token_ids_binary(dir / "train.bin", data::TokenIds(ids.begin(), ids.begin() + 100000));
      data::write_token_ids_binary(dir / "test.bin", data::TokenIds(ids.begin() + 100000, ids.end()));
      std::printf("wrote 100000 train and 10000 test ids to %s\n", dir.string().c_str());
    } else {
      std::fprintf(stderr, "unknown dataset '%s'\n", what.c_str());
      return 2;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
  return 0;
}
