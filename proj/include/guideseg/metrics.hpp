#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "guideseg/volume.hpp"

namespace guideseg {

/// Rows are ground truth, columns are prediction. Ignore-labelled pixels are
/// never counted.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  int num_classes() const { return n_; }
  std::int64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt) * n_ + pred]; }
  std::int64_t total() const;

  /// Throws std::out_of_range for class ids outside [0, C) other than the ignore label.
  void accumulate(const LabelMap& pred, const LabelMap& gt);
  void add(int gt, int pred, std::int64_t count = 1);
  void merge(const ConfusionMatrix& other);

  /// IoU per class; nullopt for classes absent from both ground truth and prediction.
  std::vector<std::optional<double>> class_iou() const;

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  int n_;
  std::vector<std::int64_t> counts_;
};

/// Mean IoU over classes present in ground truth or prediction. Throws
/// std::domain_error on an empty matrix.
double miou(const ConfusionMatrix& cm);
double pixel_accuracy(const ConfusionMatrix& cm);

/// mIoU of a single prediction, as a convenience for per-image traces.
double image_miou(const LabelMap& pred, const LabelMap& gt, int num_classes);

}  // namespace guideseg
