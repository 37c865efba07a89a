#pragma once

#include <cstdint>
#include <functional>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "guideseg/backbone.hpp"
#include "guideseg/language_guide.hpp"
#include "guideseg/optim.hpp"
#include "guideseg/query_generator.hpp"
#include "guideseg/shapes_dataset.hpp"

namespace guideseg {

enum class HintRegime { find, remove, find_or_remove };
std::string to_string(HintRegime r);
HintRegime parse_hint_regime(const std::string& s);

/// Candidates whose operation the regime allows.
std::vector<QuerySpec> filter_by_regime(const std::vector<QuerySpec>& candidates, HintRegime regime);

struct GuideTrainConfig {
  HintRegime hint_regime = HintRegime::find;
  std::string split = "s3";
  GuideMode mode;
  int epochs = 20;
  int batch_size = 8;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  int gru_hidden = 128;
  int embedding_dim = 50;
  std::string embedding_source = "hashed";
  /// Must be the half unseen by backbone pre-training.
  std::string dataset_half = "train_b";
  /// Held-out images scored after every epoch (0 disables).
  int eval_images = 50;
  QueryGenConfig query;

  void validate() const;
};

void to_json(nlohmann::json& j, const GuideTrainConfig& c);
void from_json(const nlohmann::json& j, GuideTrainConfig& c);

/// Per-image quantities that do not depend on the guide, computed once.
struct CachedExample {
  HeadOutput<float> head;
  LabelMap prediction;  // unguided
  LabelMap truth;
};

std::vector<CachedExample> cache_examples(const BackboneModel& backbone, const std::string& split,
                                          std::span<const Sample> samples);

/// The query one example trains or is evaluated with: none means no candidate
/// survived the regime filter, and the example uses the empty (no-op) text.
struct DrawnQuery {
  std::optional<QuerySpec> spec;
  std::string text;
};
DrawnQuery draw_query(const LabelMap& prediction, const LabelMap& truth, HintRegime regime,
                      const QueryGenConfig& qcfg, const std::vector<std::string>& class_names,
                      std::mt19937_64& rng);

/// Loss weights for a drawn query; the no-op query weighs every labelled pixel 0.5.
std::vector<double> query_weights(const CachedExample& ex, const DrawnQuery& q);

/// Mean over all pixels of the weighted cross-entropy of the text-guided
/// prediction. Forward only.
double example_loss(const BackboneModel& backbone, const GuideModel& guide, const EmbeddingTable& table,
                    const CachedExample& ex, const std::string& text, std::span<const double> weights);

struct GuideGrads {
  std::vector<std::vector<double>> params;  // GuideModel::parameters() order
  std::vector<std::vector<float>> block;    // residual block, when present

  static GuideGrads zeros_like(const GuideModel& g);
  void clear();
};

/// Adds d(example_loss)/d(guide weights) * scale into `grads` and returns the loss.
double example_loss_backward(const BackboneModel& backbone, const GuideModel& guide,
                             const EmbeddingTable& table, const CachedExample& ex, const std::string& text,
                             std::span<const double> weights, GuideGrads& grads, double scale);

class GuideOptimizer {
 public:
  GuideOptimizer(GuideModel& guide, double learning_rate);
  void step(const GuideGrads& grads);

 private:
  Adam<double> main_;
  std::optional<Adam<float>> block_;
};

struct StepResult {
  double loss = 0.0;
  std::vector<DrawnQuery> queries;
};

/// One optimizer step on a batch: draw a query per example, guide with its
/// text, and descend the mean of the example losses. Only guide weights change.
StepResult train_step(std::span<const CachedExample* const> batch, GuideModel& guide,
                      const BackboneModel& backbone, const EmbeddingTable& table, const GuideTrainConfig& cfg,
                      std::mt19937_64& rng, GuideOptimizer& opt);

/// Seed of the per-image query stream used by evaluation, so results do not
/// depend on image order.
std::uint64_t query_stream_seed(std::uint64_t query_seed, std::size_t image_index);

struct GuideEval {
  double unguided_miou = 0.0;
  double guided_miou = 0.0;
  double gain() const { return guided_miou - unguided_miou; }
};

/// Dataset-level mIoU with and without one regime-drawn text hint per image.
/// Images without candidates keep their unguided prediction.
GuideEval evaluate_guide(const BackboneModel& backbone, const GuideModel& guide, const EmbeddingTable& table,
                         std::span<const CachedExample> examples, HintRegime regime, const QueryGenConfig& qcfg,
                         std::uint64_t query_seed);

struct TrainLogRecord {
  int step = 0;
  int epoch = 0;
  double loss = 0.0;
  HintRegime regime = HintRegime::find;
  std::vector<std::string> query_text;
  std::vector<std::string> query_op;  // "find", "remove" or "none"
  std::optional<double> miou_eval;
};
void to_json(nlohmann::json& j, const TrainLogRecord& r);

struct TrainedGuide {
  GuideModel guide;
  EmbeddingTable table;
  std::vector<TrainLogRecord> log;
};

/// Trains a fresh guide on `train` (the backbone-unseen half). `held_out`
/// supplies the periodic evaluation slice. Each log record is also streamed to
/// `log_out` as a JSON line when given. Throws std::runtime_error on a
/// non-finite loss.
TrainedGuide train_guide(const BackboneModel& backbone, std::span<const Sample> train,
                         std::span<const Sample> held_out, const GuideTrainConfig& cfg,
                         std::ostream* log_out = nullptr);

struct IterativeStep {
  int k = 0;
  std::optional<QuerySpec> query;
  std::string text;
  LabelMap prediction;
  double miou = 0.0;
};

/// Repeated text guiding: each turn draws a query from the latest prediction,
/// derives fresh params from its text and applies them to the original head
/// features in place of the previous ones. Stops early when no candidate is
/// left. Returns up to K+1 steps, steps[0] unguided.
std::vector<IterativeStep> iterative_guide(const BackboneModel& backbone, const GuideModel& guide,
                                           const EmbeddingTable& table, const CachedExample& ex, int K,
                                           HintRegime regime, const QueryGenConfig& qcfg, std::mt19937_64& rng);

}  // namespace guideseg
