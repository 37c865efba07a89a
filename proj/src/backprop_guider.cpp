#include <algorithm>
#include "guideseg/backprop_guider.hpp"

#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>

#include "guideseg/metrics.hpp"

namespace guideseg {

void PixelHint::add(Pixel p, int cls) {
  positions.push_back(p);
  classes.push_back(cls);
}

void PixelHint::validate(int height, int width, int num_classes) const {
  if (positions.size() != classes.size()) throw std::invalid_argument("hint positions/classes differ in length");
  std::set<Pixel> seen;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const auto [y, x] = positions[i];
    if (y < 0 || y >= height || x < 0 || x >= width) {
      throw std::invalid_argument("hint position (" + std::to_string(y) + "," + std::to_string(x) +
                                  ") is out of bounds");
    }
    if (classes[i] < 0 || classes[i] >= num_classes) {
      throw std::invalid_argument("hint class " + std::to_string(classes[i]) + " is out of range");
    }
    if (!seen.insert(positions[i]).second) throw std::invalid_argument("duplicate hint position");
  }
}

LabelMap PixelHint::as_targets(int height, int width) const {
  LabelMap t(height, width, -1);
  for (std::size_t i = 0; i < positions.size(); ++i) t.at(positions[i].first, positions[i].second) = classes[i];
  return t;
}

void GuideOptConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must be in [0, 1)");
  if (max_iterations < 0) throw std::invalid_argument("max_iterations must be >= 0");
}

GuidingParams zero_params_for(const Shape& split_shape, const GuideMode& mode) {
  return GuidingParams::zeros(split_shape.height, split_shape.width,
                              mode.modulated_channels(split_shape.channels));
}

template <typename T>
HeadOutput<T> guided_head(const HeadOutput<T>& head, const GuidingParams& params, const GuideMode& mode,
                          const ResidualBlockWeights<T>* block) {
  HeadOutput<T> out = head;
  out.features = apply_guidance(head.features, params, mode, block);
  return out;
}

template <typename T>
double hint_objective(const Backbone<T>& model, const HeadOutput<T>& head, const GuidingParams& params,
                      const GuideMode& mode, const ResidualBlockWeights<T>* block,
                      const PixelHint& hints, GuidingParams* grad) {
  if (hints.empty()) throw std::invalid_argument("hint objective needs at least one hint");
  const ModelConfig& cfg = model.config();
  GuidanceTrace<T> gtrace;
  HeadOutput<T> guided = head;
  guided.features = apply_guidance(head.features, params, mode, block, &gtrace);
  TailTrace<T> trace;
  const Volume<T> logits = model.forward_tail(guided, head.split, &trace);
  const LabelMap targets = hints.as_targets(cfg.input_height, cfg.input_width);
  const double scale = 1.0 / static_cast<double>(hints.size());
  Volume<T> grad_logits;
  const double loss =
      weighted_cross_entropy(logits, targets, {}, grad ? &grad_logits : nullptr, scale) * scale;
  if (grad != nullptr) {
    const Volume<T> grad_features = model.backward(trace, grad_logits, nullptr);
    apply_guidance_backward<T>(gtrace, grad_features, params, mode, block, grad, nullptr, nullptr);
  }
  return loss;
}

GuidanceResult optimize_guidance(const BackboneModel& model, const HeadOutput<float>& head,
                                 const PixelHint& hints, const GuideOptConfig& cfg,
                                 const std::optional<GuidingParams>& warm_start, const GuideMode& mode,
                                 const ResidualBlockWeights<float>* block) {
  cfg.validate();
  if (hints.empty()) throw std::invalid_argument("optimize_guidance needs at least one hint");
  const ModelConfig& mc = model.config();
  hints.validate(mc.input_height, mc.input_width, mc.num_classes);

  GuidanceResult result;
  result.params = warm_start ? *warm_start : zero_params_for(head.features.shape, mode);
  std::vector<double> velocity(result.params.size(), 0.0);
  std::vector<double> flat = result.params.flatten();
  GuidingParams grad;

  for (int it = 0;; ++it) {
    const bool final_eval = it >= cfg.max_iterations;
    const double loss =
        hint_objective(model, head, result.params, mode, block, hints, final_eval ? nullptr : &grad);
    if (!std::isfinite(loss)) {
      throw GuidanceDivergedError(it, "guidance loss became non-finite at iteration " + std::to_string(it));
    }
    result.loss_trace.push_back(loss);
    if (final_eval || loss < cfg.stop_loss) break;
    const std::vector<double> g = grad.flatten();
    for (std::size_t i = 0; i < flat.size(); ++i) {
      velocity[i] = cfg.momentum * velocity[i] + g[i];
      flat[i] -= cfg.learning_rate * velocity[i];
    }
    result.params.assign_flat(flat);
    // features are float, so anything beyond float range is already infinite there
    const bool overflow = std::any_of(flat.begin(), flat.end(), [](double v) {
      return !(std::abs(v) <= static_cast<double>(std::numeric_limits<float>::max()));
    });
    if (overflow) {
      throw GuidanceDivergedError(it + 1, "guidance parameters became non-finite at iteration " + std::to_string(it + 1));
    }
    result.iterations = it + 1;
  }
  return result;
}

GuidanceResult optimize_guidance(const BackboneModel& model, const std::string& split, const Image& x,
                                 const PixelHint& hints, const GuideOptConfig& cfg,
                                 const std::optional<GuidingParams>& warm_start) {
  return optimize_guidance(model, model.forward_head(x, split), hints, cfg, warm_start);
}

QueryPixel select_query_pixel(const Volume<float>& posteriors, const std::set<Pixel>& already_asked) {
  const int H = posteriors.height(), W = posteriors.width(), C = posteriors.channels();
  const std::size_t plane = posteriors.shape.plane();
  QueryPixel best{{-1, -1}, std::numeric_limits<double>::infinity()};
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      if (already_asked.count({y, x})) continue;
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      double top1 = -1.0, top2 = -1.0;
      for (int c = 0; c < C; ++c) {
        const double v = posteriors.data[c * plane + p];
        if (v > top1) {
          top2 = top1;
          top1 = v;
        } else if (v > top2) {
          top2 = v;
        }
      }
      const double margin = C > 1 ? top1 - top2 : top1;
      if (margin < best.margin) best = {{y, x}, margin};
    }
  }
  if (best.pixel.first < 0) throw std::runtime_error("every pixel has already been asked");
  return best;
}

ProtocolTrace run_question_protocol(const BackboneModel& model, const std::string& split, const Image& x,
                                    const LabelMap& gt, const PixelOracle& oracle, int questions,
                                    const GuideOptConfig& cfg) {
  if (questions < 0) throw std::invalid_argument("number of questions must be >= 0");
  const HeadOutput<float> head = model.forward_head(x, split);
  Prediction pred = model.predict_from(head);
  ProtocolTrace trace;
  GuidingParams params = zero_params_for(head.features.shape, {});
  trace.steps.push_back({0, std::nullopt, -1, image_miou(pred.labels, gt, model.num_classes()),
                         pred.labels, params});

  PixelHint hints;
  std::set<Pixel> asked;
  for (int q = 1; q <= questions; ++q) {
    std::optional<int> answer;
    Pixel pixel{-1, -1};
    while (!answer) {
      pixel = select_query_pixel(pred.posteriors, asked).pixel;
      asked.insert(pixel);
      answer = oracle(pixel);
      if (!answer) ++trace.skipped_unlabelled;
    }
    hints.add(pixel, *answer);
    params = optimize_guidance(model, head, hints, cfg, params).params;
    pred = model.predict_from(guided_head<float>(head, params, GuideMode{}, nullptr));
    trace.steps.push_back(
        {q, pixel, *answer, image_miou(pred.labels, gt, model.num_classes()), pred.labels, params});
  }
  return trace;
}

void write_protocol_trace(const ProtocolTrace& trace, std::ostream& out, std::ostream* params_out,
                          const std::string& params_name) {
  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    const ProtocolStep& s = trace.steps[i];
    nlohmann::json rec;
    rec["q"] = s.q;
    rec["pixel"] = s.pixel ? nlohmann::json{s.pixel->first, s.pixel->second} : nlohmann::json(nullptr);
    rec["answer"] = s.pixel ? nlohmann::json(s.answer) : nlohmann::json(nullptr);
    rec["miou"] = s.miou;
    rec["params_ref"] = params_name + "#" + std::to_string(i);
    out << rec.dump() << "\n";
    if (params_out) *params_out << nlohmann::json(s.params).dump() << "\n";
  }
}

template double hint_objective<float>(const Backbone<float>&, const HeadOutput<float>&, const GuidingParams&,
                                      const GuideMode&, const ResidualBlockWeights<float>*, const PixelHint&,
                                      GuidingParams*);
template double hint_objective<double>(const Backbone<double>&, const HeadOutput<double>&,
                                       const GuidingParams&, const GuideMode&,
                                       const ResidualBlockWeights<double>*, const PixelHint&, GuidingParams*);
template HeadOutput<float> guided_head<float>(const HeadOutput<float>&, const GuidingParams&, const GuideMode&,
                                              const ResidualBlockWeights<float>*);
template HeadOutput<double> guided_head<double>(const HeadOutput<double>&, const GuidingParams&,
                                                const GuideMode&, const ResidualBlockWeights<double>*);

}  // namespace guideseg
