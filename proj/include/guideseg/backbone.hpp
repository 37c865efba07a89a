#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "guideseg/layers.hpp"
#include "guideseg/volume.hpp"

namespace guideseg {

/// Layer boundaries of the realized architecture, from input-near to output-near:
/// s1..s4 follow the four stride-2 encoder stages, s5 follows the bottleneck.
inline constexpr std::array<std::string_view, 5> kBoundaryNames = {"s1", "s2", "s3", "s4", "s5"};

struct ModelConfig {
  int input_height = 64;
  int input_width = 64;
  int num_classes = 10;
  std::vector<int> channel_widths{16, 32, 64, 64};
  int decoder_width = 32;
  std::vector<std::string> split_points{"s1", "s2", "s3", "s4", "s5"};

  /// Throws std::invalid_argument when the configuration cannot be realized.
  void validate() const;
  /// Shape of the activation volume at a boundary (s1..s5), whether or not it
  /// is configured as a split point.
  Shape boundary_shape(int boundary) const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Boundary index 1..5 for a name, or 0 if the name is not a boundary.
int boundary_index(std::string_view name);

/// Output of the head at a split point. `features` is the volume the guiding
/// block modulates; `skips` holds earlier-stage activations the decoder reads
/// directly, which guidance at this split does not touch.
template <typename T>
struct HeadOutput {
  std::string split;
  Volume<T> features;
  std::optional<Volume<T>> skip_s2;
  std::optional<Volume<T>> skip_s3;

  template <typename U>
  HeadOutput<U> cast() const {
    HeadOutput<U> out;
    out.split = split;
    out.features = features.template cast<U>();
    if (skip_s2) out.skip_s2 = skip_s2->template cast<U>();
    if (skip_s3) out.skip_s3 = skip_s3->template cast<U>();
    return out;
  }
};

/// Intermediate activations of one tail pass, kept for back-propagation.
template <typename T>
struct TailTrace {
  int start = 0;
  std::array<Volume<T>, 6> boundary;  // [0] = input image, [k] = s_k
  std::array<Volume<T>, 5> stage_mid; // post-ReLU output of each stage's first conv
  Volume<T> cat3, dec3, cat2, dec2, low_logits, logits;
};

/// Per-parameter gradient buffers mirroring Backbone::parameters().
template <typename T>
using ParamGrads = std::vector<std::vector<T>>;

struct Prediction {
  LabelMap labels;
  Volume<float> posteriors;
};

/// Encoder-decoder segmentation network with named split points. Weights are
/// fixed after pre-training; every inference entry point is const.
template <typename T>
class Backbone {
 public:
  Backbone(ModelConfig config, std::vector<std::string> class_names, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  int num_classes() const { return config_.num_classes; }

  /// Boundary index for a configured split point; throws for unknown names.
  int split_boundary(std::string_view split) const;
  Shape split_shape(std::string_view split) const;
  /// (split name, activation shape) for every configured split point.
  std::vector<std::pair<std::string, Shape>> architecture_table() const;

  HeadOutput<T> forward_head(const Volume<T>& x, std::string_view split) const;
  Volume<T> forward_tail(const HeadOutput<T>& head, std::string_view split,
                         TailTrace<T>* trace = nullptr) const;
  Volume<T> forward(const Volume<T>& x, TailTrace<T>* trace = nullptr) const;

  /// Back-propagates d(loss)/d(logits) through a recorded pass down to the
  /// boundary the pass started from. Accumulates weight gradients into `grads`
  /// when non-null. Returns the gradient at that boundary (empty for the input).
  Volume<T> backward(const TailTrace<T>& trace, const Volume<T>& grad_logits,
                     ParamGrads<T>* grads) const;

  Prediction predict(const Volume<T>& x) const;
  Prediction predict_from(const HeadOutput<T>& head) const;

  std::vector<std::vector<T>*> parameters();
  std::vector<const std::vector<T>*> parameters() const;
  ParamGrads<T> zero_grads() const;
  std::uint64_t checksum() const;

  template <typename U>
  Backbone<U> cast() const;

 private:
  template <typename U>
  friend class Backbone;
  Backbone() = default;

  void check_input(const Volume<T>& x) const;
  void run_decoder(TailTrace<T>& t) const;
  Volume<T> run_stage(int stage, const Volume<T>& in, Volume<T>* mid) const;
  Volume<T> stage_backward(int stage, const Volume<T>& in, const Volume<T>& mid,
                           const Volume<T>& out, Volume<T> grad_out, ParamGrads<T>* grads,
                           bool want_input_grad) const;

  ModelConfig config_;
  std::vector<std::string> class_names_;
  std::array<Conv2d<T>, 4> enc_down_;
  std::array<Conv2d<T>, 4> enc_conv_;
  Conv2d<T> bottleneck_;
  Conv2d<T> dec3_;
  Conv2d<T> dec2_;
  Conv2d<T> classifier_;
};

using BackboneModel = Backbone<float>;

/// Weights file plus JSON sidecar holding config, class names, split shapes and
/// the training mIoU recorded at save time.
void save_backbone(const BackboneModel& model, const std::filesystem::path& weights_path,
                   double train_miou);
BackboneModel load_backbone(const std::filesystem::path& weights_path);
std::filesystem::path sidecar_path(const std::filesystem::path& weights_path);

/// FNV-1a over raw bytes; used for frozen-weight checks.
std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t seed = 1469598103934665603ULL);

}  // namespace guideseg
