#pragma once

#include <filesystem>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "guideseg/guide_trainer.hpp"
#include "guideseg/heatmap.hpp"
#include "guideseg/metrics.hpp"

namespace guideseg {

enum class AblationAxis { guide_mode, split_location, hint_regime, num_hints };
std::string to_string(AblationAxis a);
AblationAxis parse_ablation_axis(const std::string& s);

/// Dataset-level mIoU after k = 0..K rounds of repeated text guiding (k = 0 is
/// unguided). Images that run out of candidates keep their last prediction.
std::vector<double> iterative_miou_curve(const BackboneModel& backbone, const GuideModel& guide,
                                         const EmbeddingTable& table, std::span<const CachedExample> examples,
                                         HintRegime regime, const QueryGenConfig& qcfg, std::uint64_t query_seed,
                                         int K);

/// One evaluated configuration: a trained guide, the regime its queries are
/// drawn from, and how many hints are given.
struct AblationSetting {
  std::string label;
  const GuideModel* guide = nullptr;
  const EmbeddingTable* table = nullptr;
  HintRegime regime = HintRegime::find;
  int num_hints = 1;
};

struct AblationRow {
  std::string setting;
  double unguided_miou = 0.0;
  double mean_miou = 0.0;
  std::optional<double> std_miou;  // only with more than one seed
  std::vector<double> per_seed_miou;
  double mean_gain() const { return mean_miou - unguided_miou; }
};

struct AblationReport {
  AblationAxis axis = AblationAxis::hint_regime;
  int num_seeds = 5;
  std::vector<AblationRow> rows;
};

/// Guided mIoU per setting over query seeds 0..num_seeds-1 on `samples`.
AblationReport run_ablation(AblationAxis axis, std::span<const AblationSetting> settings,
                            const BackboneModel& backbone, std::span<const Sample> samples, int num_seeds,
                            const QueryGenConfig& qcfg);

/// Checkpoint-driven variant: each entry is (label, guide weights path,
/// regime, num_hints). Throws with a remediation hint for a missing checkpoint.
struct AblationCheckpoint {
  std::string label;
  std::filesystem::path guide_path;
  HintRegime regime = HintRegime::find;
  int num_hints = 1;
};
AblationReport run_ablation(AblationAxis axis, std::span<const AblationCheckpoint> settings,
                            const BackboneModel& backbone, std::span<const Sample> samples, int num_seeds,
                            const QueryGenConfig& qcfg);

void write_ablation_csv(const AblationReport& report, std::ostream& out);
void to_json(nlohmann::json& j, const AblationReport& r);

/// Gamma_s predicted for "find the {class}"-style canonical queries, one row per class.
std::vector<std::pair<std::string, std::vector<double>>> export_gamma_vectors(
    const GuideModel& guide, const EmbeddingTable& table, const std::vector<std::string>& class_names,
    const std::string& canonical_template = "find the {c}");
void write_gamma_csv(const std::vector<std::pair<std::string, std::vector<double>>>& rows, std::ostream& out);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

}  // namespace guideseg
