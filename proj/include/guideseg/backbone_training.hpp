#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "guideseg/backbone.hpp"
#include "guideseg/metrics.hpp"
#include "guideseg/shapes_dataset.hpp"

namespace guideseg {

struct BackboneTrainConfig {
  int epochs = 20;
  int batch_size = 8;
  double learning_rate = 2e-3;
  std::uint64_t seed = 0;
};

struct BackboneTrainLog {
  std::vector<double> epoch_loss;
  double train_miou = 0.0;
};

/// Pixel-wise cross-entropy training with Adam; ignore-labelled pixels do not
/// contribute. Only used for pre-training, before the weights are frozen.
BackboneTrainLog train_backbone(BackboneModel& model, std::span<const Sample> data,
                                const BackboneTrainConfig& cfg,
                                const std::function<void(int, double)>& on_epoch = {});

/// Unguided confusion matrix of the model on a sample set.
ConfusionMatrix evaluate_backbone(const BackboneModel& model, std::span<const Sample> data);

}  // namespace guideseg
