#include "guideseg/backbone_training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "guideseg/optim.hpp"

namespace guideseg {

BackboneTrainLog train_backbone(BackboneModel& model, std::span<const Sample> data,
                                const BackboneTrainConfig& cfg,
                                const std::function<void(int, double)>& on_epoch) {
  if (data.empty()) throw std::invalid_argument("backbone training needs at least one sample");
  if (cfg.batch_size < 1 || cfg.epochs < 0) throw std::invalid_argument("bad training config");
  Adam<float> opt(model.parameters(), cfg.learning_rate);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed);
  BackboneTrainLog log;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      auto grads = model.zero_grads();
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = data[order[i]];
        TailTrace<float> trace;
        const Volume<float> logits = model.forward(s.image, &trace);
        std::size_t valid = 0;
        for (int l : s.labels.labels) valid += (l != kIgnoreLabel);
        if (valid == 0) continue;
        Volume<float> grad;
        const double loss = weighted_cross_entropy(logits, s.labels, {}, &grad, 1.0 / valid);
        if (!std::isfinite(loss)) throw std::runtime_error("backbone training diverged (loss NaN)");
        epoch_loss += loss / valid;
        model.backward(trace, grad, &grads);
      }
      opt.step(grads, 1.0 / static_cast<double>(end - start));
    }
    epoch_loss /= static_cast<double>(data.size());
    log.epoch_loss.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch, epoch_loss);
  }
  log.train_miou = miou(evaluate_backbone(model, data));
  return log;
}

ConfusionMatrix evaluate_backbone(const BackboneModel& model, std::span<const Sample> data) {
  ConfusionMatrix cm(model.num_classes());
  for (const auto& s : data) cm.accumulate(model.predict(s.image).labels, s.labels);
  return cm;
}

}  // namespace guideseg
