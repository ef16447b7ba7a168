// Ten desk-scale epochs: the training loss should fall epoch over epoch while
// the held-out MAE of the predictive mean does not trend upward.

#include <vector>

#include <gtest/gtest.h>

#include "tfm/tfm.hpp"

namespace {

double slope(const std::vector<double>& y) {
  const double n = static_cast<double>(y.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double x = static_cast<double>(i);
    sx += x;
    sy += y[i];
    sxx += x * x;
    sxy += x * y[i];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

tfm::FrameSet frames(std::size_t n, std::uint64_t seed) {
  tfm::SynthConfig cfg;
  cfg.frames = n;
  cfg.seed = seed;
  return tfm::mask_forces(tfm::generate_frameset(cfg));
}

}  // namespace

TEST(LossMetricLink, FirstTenEpochs) {
  const auto train_set = frames(20, 7);
  const auto val_set = frames(10, 99);
  auto model = tfm::build_model(tfm::ModelConfig::desk(), 1);
  auto cfg = tfm::TrainConfig::desk();
  cfg.epochs = 10;
  cfg.seed = 1;
  tfm::AugmentConfig aug;
  aug.crop = 64;

  std::vector<double> val_mae;
  tfm::TrainOptions opts;
  opts.on_step = [&](const tfm::StepRecord& rec) {
    if (rec.step % cfg.steps_per_epoch == 0) val_mae.push_back(tfm::evaluate_mae(model, val_set, 32, 5).mean);
  };
  const auto result = tfm::train(model, train_set, cfg, aug, opts);
  const auto loss = result.epoch_means();
  ASSERT_EQ(val_mae.size(), 10u);

  for (std::size_t e = 0; e < loss.size(); ++e)
    std::printf("epoch %zu mean loss %.5f validation MAE %.6g\n", e + 1, loss[e], val_mae[e]);
  EXPECT_LT(slope(loss), 0.0);
  EXPECT_LE(slope(val_mae), 0.0);
}
