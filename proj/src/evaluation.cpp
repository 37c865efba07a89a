#include "guideseg/evaluation.hpp"

#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>

namespace guideseg {

std::string to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::guide_mode: return "guide_mode";
    case AblationAxis::split_location: return "split_location";
    case AblationAxis::hint_regime: return "hint_regime";
    default: return "num_hints";
  }
}

AblationAxis parse_ablation_axis(const std::string& s) {
  if (s == "guide_mode") return AblationAxis::guide_mode;
  if (s == "split_location") return AblationAxis::split_location;
  if (s == "hint_regime") return AblationAxis::hint_regime;
  if (s == "num_hints") return AblationAxis::num_hints;
  throw std::invalid_argument("unknown ablation axis '" + s +
                              "' (expected guide_mode, split_location, hint_regime or num_hints)");
}

std::vector<double> iterative_miou_curve(const BackboneModel& backbone, const GuideModel& guide,
                                         const EmbeddingTable& table, std::span<const CachedExample> examples,
                                         HintRegime regime, const QueryGenConfig& qcfg, std::uint64_t query_seed,
                                         int K) {
  if (K < 0) throw std::invalid_argument("number of hints must be >= 0");
  const int C = backbone.num_classes();
  std::vector<ConfusionMatrix> cms(K + 1, ConfusionMatrix(C));
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const CachedExample& ex = examples[i];
    cms[0].accumulate(ex.prediction, ex.truth);
    if (K == 0) continue;
    std::mt19937_64 rng(query_stream_seed(query_seed, i));
    const auto steps = iterative_guide(backbone, guide, table, ex, K, regime, qcfg, rng);
    for (int k = 1; k <= K; ++k) {
      const std::size_t at = std::min<std::size_t>(k, steps.size() - 1);
      cms[k].accumulate(steps[at].prediction, ex.truth);
    }
  }
  std::vector<double> curve;
  for (const auto& cm : cms) curve.push_back(miou(cm));
  return curve;
}

AblationReport run_ablation(AblationAxis axis, std::span<const AblationSetting> settings,
                            const BackboneModel& backbone, std::span<const Sample> samples, int num_seeds,
                            const QueryGenConfig& qcfg) {
  if (num_seeds < 1) throw std::invalid_argument("num_seeds must be >= 1");
  if (samples.empty()) throw std::invalid_argument("ablation needs at least one evaluation image");
  AblationReport report;
  report.axis = axis;
  report.num_seeds = num_seeds;
  std::map<std::string, std::vector<CachedExample>> cache;  // per split
  for (const AblationSetting& s : settings) {
    if (s.guide == nullptr || s.table == nullptr) {
      throw std::invalid_argument("ablation setting '" + s.label + "' has no guide");
    }
    auto it = cache.find(s.guide->split);
    if (it == cache.end()) {
      it = cache.emplace(s.guide->split, cache_examples(backbone, s.guide->split, samples)).first;
    }
    AblationRow row;
    row.setting = s.label;
    for (int seed = 0; seed < num_seeds; ++seed) {
      const auto curve =
          iterative_miou_curve(backbone, *s.guide, *s.table, it->second, s.regime, qcfg, seed, s.num_hints);
      row.unguided_miou = curve.front();
      row.per_seed_miou.push_back(curve.back());
    }
    const double n = static_cast<double>(num_seeds);
    row.mean_miou = std::accumulate(row.per_seed_miou.begin(), row.per_seed_miou.end(), 0.0) / n;
    if (num_seeds > 1) {
      double ss = 0.0;
      for (double v : row.per_seed_miou) ss += (v - row.mean_miou) * (v - row.mean_miou);
      row.std_miou = std::sqrt(ss / (n - 1.0));
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

AblationReport run_ablation(AblationAxis axis, std::span<const AblationCheckpoint> settings,
                            const BackboneModel& backbone, std::span<const Sample> samples, int num_seeds,
                            const QueryGenConfig& qcfg) {
  std::vector<LoadedGuide> loaded;
  loaded.reserve(settings.size());
  for (const auto& s : settings) {
    if (!std::filesystem::exists(s.guide_path)) {
      throw std::runtime_error("missing guide checkpoint for setting '" + s.label + "': " + s.guide_path.string() +
                               " (train it with `guideseg train-guide`)");
    }
    loaded.push_back(load_guide(s.guide_path));
  }
  std::vector<AblationSetting> resolved;
  for (std::size_t i = 0; i < settings.size(); ++i) {
    resolved.push_back(
        {settings[i].label, &loaded[i].model, &loaded[i].table, settings[i].regime, settings[i].num_hints});
  }
  return run_ablation(axis, std::span<const AblationSetting>(resolved), backbone, samples, num_seeds, qcfg);
}

void write_ablation_csv(const AblationReport& report, std::ostream& out) {
  out << "# axis=" << to_string(report.axis) << " num_seeds=" << report.num_seeds
      << "; mIoU excludes classes absent from both ground truth and prediction\n";
  out << "setting,unguided_miou,mean_miou,std_miou,mean_gain";
  for (int s = 0; s < report.num_seeds; ++s) out << ",seed" << s;
  out << "\n";
  for (const auto& r : report.rows) {
    out << r.setting << "," << r.unguided_miou << "," << r.mean_miou << ",";
    if (r.std_miou) out << *r.std_miou;
    out << "," << r.mean_gain();
    for (double v : r.per_seed_miou) out << "," << v;
    out << "\n";
  }
}

void to_json(nlohmann::json& j, const AblationReport& r) {
  j = nlohmann::json{{"axis", to_string(r.axis)}, {"num_seeds", r.num_seeds}, {"rows", nlohmann::json::array()}};
  for (const auto& row : r.rows) {
    nlohmann::json jr{{"setting", row.setting},
                      {"unguided_miou", row.unguided_miou},
                      {"mean_miou", row.mean_miou},
                      {"mean_gain", row.mean_gain()},
                      {"per_seed_miou", row.per_seed_miou}};
    if (row.std_miou) jr["std_miou"] = *row.std_miou;
    j["rows"].push_back(jr);
  }
}

std::vector<std::pair<std::string, std::vector<double>>> export_gamma_vectors(
    const GuideModel& guide, const EmbeddingTable& table, const std::vector<std::string>& class_names,
    const std::string& canonical_template) {
  std::vector<std::pair<std::string, std::vector<double>>> rows;
  for (const auto& name : class_names) {
    std::string text = canonical_template;
    for (std::size_t pos = text.find("{c}"); pos != std::string::npos; pos = text.find("{c}", pos + name.size())) {
      text.replace(pos, 3, name);
    }
    rows.emplace_back(name, params_for_text(text, table, guide).gamma_s);
  }
  return rows;
}

void write_gamma_csv(const std::vector<std::pair<std::string, std::vector<double>>>& rows, std::ostream& out) {
  const std::size_t n = rows.empty() ? 0 : rows.front().second.size();
  out << "class";
  for (std::size_t k = 0; k < n; ++k) out << ",g" << k;
  out << "\n";
  out.precision(17);
  for (const auto& [name, v] : rows) {
    out << name;
    for (double x : v) out << "," << x;
    out << "\n";
  }
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine similarity of vectors of different length");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

}  // namespace guideseg
