#pragma once

#include <functional>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "guideseg/backbone.hpp"
#include "guideseg/guiding_block.hpp"

namespace guideseg {

using Pixel = std::pair<int, int>;  // (row, col)

/// Sparse target labels; the implied mask is 1 exactly at `positions`.
struct PixelHint {
  std::vector<Pixel> positions;
  std::vector<int> classes;

  void add(Pixel p, int cls);
  bool empty() const { return positions.empty(); }
  std::size_t size() const { return positions.size(); }
  /// Throws std::invalid_argument for duplicates, out-of-bounds positions or classes.
  void validate(int height, int width, int num_classes) const;
  /// Label map holding the hinted class at hinted pixels and -1 elsewhere.
  LabelMap as_targets(int height, int width) const;
};

struct GuideOptConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  int max_iterations = 30;
  /// Stop once the mean cross-entropy over hinted pixels drops below this.
  double stop_loss = 0.01;

  void validate() const;
};

class GuidanceDivergedError : public std::runtime_error {
 public:
  GuidanceDivergedError(int iteration, const std::string& what)
      : std::runtime_error(what), iteration_(iteration) {}
  int iteration() const { return iteration_; }

 private:
  int iteration_;
};

struct GuidanceResult {
  GuidingParams params;
  /// Masked loss before each update, plus the loss of the returned params.
  std::vector<double> loss_trace;
  int iterations = 0;
};

/// Mean cross-entropy at hinted pixels of the guided prediction, and its
/// gradient with respect to the guiding parameters when `grad` is non-null.
template <typename T>
double hint_objective(const Backbone<T>& model, const HeadOutput<T>& head, const GuidingParams& params,
                      const GuideMode& mode, const ResidualBlockWeights<T>* block,
                      const PixelHint& hints, GuidingParams* grad);

/// Head features with guidance applied, ready for the tail.
template <typename T>
HeadOutput<T> guided_head(const HeadOutput<T>& head, const GuidingParams& params, const GuideMode& mode,
                          const ResidualBlockWeights<T>* block);

/// Zero parameters sized for direct guidance at a split (alpha/beta match the
/// volume's height/width) or for a residual block.
GuidingParams zero_params_for(const Shape& split_shape, const GuideMode& mode);

/// Minimizes the masked hint loss over the guiding parameters with momentum
/// gradient descent, starting from zeros or `warm_start`. The model is not modified.
GuidanceResult optimize_guidance(const BackboneModel& model, const HeadOutput<float>& head,
                                 const PixelHint& hints, const GuideOptConfig& cfg,
                                 const std::optional<GuidingParams>& warm_start = std::nullopt,
                                 const GuideMode& mode = {},
                                 const ResidualBlockWeights<float>* block = nullptr);
GuidanceResult optimize_guidance(const BackboneModel& model, const std::string& split, const Image& x,
                                 const PixelHint& hints, const GuideOptConfig& cfg,
                                 const std::optional<GuidingParams>& warm_start = std::nullopt);

struct QueryPixel {
  Pixel pixel;
  double margin = 0.0;
};

/// Pixel with the smallest gap between its two most probable classes, skipping
/// `already_asked`; ties resolve to the first pixel in row-major order.
/// Throws std::runtime_error when every pixel has been asked.
QueryPixel select_query_pixel(const Volume<float>& posteriors, const std::set<Pixel>& already_asked);

struct ProtocolStep {
  int q = 0;
  std::optional<Pixel> pixel;  // none for the unguided step 0
  int answer = -1;
  double miou = 0.0;
  LabelMap prediction;
  GuidingParams params;
};

struct ProtocolTrace {
  std::vector<ProtocolStep> steps;  // steps[0] is the unguided prediction
  int skipped_unlabelled = 0;
};

/// Returns the true class at a pixel, or nullopt where ground truth is undefined.
using PixelOracle = std::function<std::optional<int>(Pixel)>;

/// Asks Q questions, one per step, each at the most uncertain not-yet-asked
/// pixel of the current prediction. Answers accumulate into the hint set and
/// guidance warm-starts from the previous step. Pixels the oracle cannot label
/// are skipped without consuming a question.
ProtocolTrace run_question_protocol(const BackboneModel& model, const std::string& split, const Image& x,
                                    const LabelMap& gt, const PixelOracle& oracle, int questions,
                                    const GuideOptConfig& cfg);

/// One JSON record per question: {q, pixel, answer, miou, params_ref}. Guiding
/// parameters go to `params_out` (one JSON line per step) and `params_ref`
/// names "<params_name>#<line>".
void write_protocol_trace(const ProtocolTrace& trace, std::ostream& out, std::ostream* params_out,
                          const std::string& params_name);

}  // namespace guideseg
