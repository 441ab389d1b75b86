// Trains a small binarized ReLU network on synthetic digits and prints the
// training loss next to the YES-0 / YES-k bounds and the active stair.

#include <cstdio>
#include <cstdlib>

#include "yesbound/yesbound.hpp"

using namespace yesbound;

int main(int argc, char** argv) {
  const std::size_t n = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 1000;
  const auto digits = synth::digits(n, 0);
  Mat x(784, static_cast<Index>(n));
  Mat y = Mat::Zero(10, static_cast<Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<Index>(i);
    for (Index p = 0; p < 784; ++p) x(p, c) = digits.images[i][static_cast<std::size_t>(p)] / 255.0;
    y(digits.labels[i], c) = 1.0;
  }

  harness::FcnnRunConfig rc;
  rc.spec = {{784, 64, 32, 10}, {quant::Scheme::BinaryChannelwise, 1.0, 1}, false};
  rc.optimizer.lr = 1e-5;
  rc.epochs = 40;
  rc.batch_size = 250;
  rc.monitor_every = 5;

  try {
    const auto res = harness::train_fcnn(x, y, rc, nullptr);
    std::printf("%6s %12s %12s %12s %12s\n", "epoch", "train", "YES-0", "YES-k", "stair");
    for (std::size_t i = 0; i < res.points.size(); ++i) {
      const auto& p = res.points[i];
      std::printf("%6lld %12.2f %12.2f %12.2f %12.2f\n", static_cast<long long>(p.epoch), p.train, p.yes0,
                  p.yesk.value_or(p.yes0), res.stairs.active_value[i]);
    }
    std::printf("stairs crossed: %zu\n", res.stairs.crossings());
  } catch (const Error& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  }
  return 0;
}
