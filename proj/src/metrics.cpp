#include "guideseg/metrics.hpp"

#include <numeric>
#include <stdexcept>
#include <string>

namespace guideseg {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : n_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
  if (num_classes <= 0) throw std::invalid_argument("confusion matrix needs at least one class");
}

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0});
}

void ConfusionMatrix::add(int gt, int pred, std::int64_t count) {
  if (gt < 0 || gt >= n_ || pred < 0 || pred >= n_) {
    throw std::out_of_range("class id out of range: gt=" + std::to_string(gt) +
                            " pred=" + std::to_string(pred));
  }
  counts_[static_cast<std::size_t>(gt) * n_ + pred] += count;
}

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw std::invalid_argument("prediction and ground truth shapes differ");
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt.labels[i] == kIgnoreLabel) continue;
    add(gt.labels[i], pred.labels[i]);
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw std::invalid_argument("cannot merge confusion matrices of different size");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::vector<std::optional<double>> ConfusionMatrix::class_iou() const {
  std::vector<std::optional<double>> iou(n_);
  for (int c = 0; c < n_; ++c) {
    std::int64_t row = 0, col = 0;
    for (int k = 0; k < n_; ++k) {
      row += at(c, k);
      col += at(k, c);
    }
    const std::int64_t uni = row + col - at(c, c);
    if (row + col == 0) continue;
    iou[c] = static_cast<double>(at(c, c)) / static_cast<double>(uni);
  }
  return iou;
}

double miou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw std::domain_error("mIoU of an empty confusion matrix is undefined");
  double sum = 0.0;
  int n = 0;
  for (const auto& v : cm.class_iou()) {
    if (!v) continue;
    sum += *v;
    ++n;
  }
  return sum / n;
}

double pixel_accuracy(const ConfusionMatrix& cm) {
  const std::int64_t total = cm.total();
  if (total == 0) throw std::domain_error("accuracy of an empty confusion matrix is undefined");
  std::int64_t diag = 0;
  for (int c = 0; c < cm.num_classes(); ++c) diag += cm.at(c, c);
  return static_cast<double>(diag) / static_cast<double>(total);
}

double image_miou(const LabelMap& pred, const LabelMap& gt, int num_classes) {
  ConfusionMatrix cm(num_classes);
  cm.accumulate(pred, gt);
  return miou(cm);
}

}  // namespace guideseg
