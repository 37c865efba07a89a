#include "guideseg/guide_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>

#include "guideseg/backprop_guider.hpp"
#include "guideseg/metrics.hpp"

namespace guideseg {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

const ResidualBlockWeights<float>* block_of(const GuideModel& g) { return g.block ? &*g.block : nullptr; }

}  // namespace

std::string to_string(HintRegime r) {
  switch (r) {
    case HintRegime::find: return "find";
    case HintRegime::remove: return "remove";
    default: return "find_or_remove";
  }
}

HintRegime parse_hint_regime(const std::string& s) {
  if (s == "find") return HintRegime::find;
  if (s == "remove") return HintRegime::remove;
  if (s == "find_or_remove") return HintRegime::find_or_remove;
  throw std::invalid_argument("unknown hint regime '" + s + "' (expected find, remove or find_or_remove)");
}

std::vector<QuerySpec> filter_by_regime(const std::vector<QuerySpec>& candidates, HintRegime regime) {
  std::vector<QuerySpec> out;
  for (const auto& q : candidates) {
    if (regime == HintRegime::find_or_remove || (regime == HintRegime::find && q.operation == QueryOp::find) ||
        (regime == HintRegime::remove && q.operation == QueryOp::remove)) {
      out.push_back(q);
    }
  }
  return out;
}

void GuideTrainConfig::validate() const {
  mode.validate();
  query.validate();
  if (boundary_index(split) == 0) throw std::invalid_argument("unknown split '" + split + "' (expected s1..s5)");
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (gru_hidden < 1 || embedding_dim < 1) throw std::invalid_argument("gru_hidden and embedding_dim must be >= 1");
  if (dataset_half != "train_b") {
    throw std::invalid_argument("dataset_half must be train_b; train_a is reserved for backbone pre-training");
  }
  if (eval_images < 0) throw std::invalid_argument("eval_images must be >= 0");
}

void to_json(nlohmann::json& j, const GuideTrainConfig& c) {
  j = nlohmann::json{{"hint_regime", to_string(c.hint_regime)},
                     {"split", c.split},
                     {"mode", c.mode},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"seed", c.seed},
                     {"gru_hidden", c.gru_hidden},
                     {"embedding_dim", c.embedding_dim},
                     {"embedding_source", c.embedding_source},
                     {"dataset_half", c.dataset_half},
                     {"eval_images", c.eval_images},
                     {"query", c.query}};
}

void from_json(const nlohmann::json& j, GuideTrainConfig& c) {
  const GuideTrainConfig d;
  c.hint_regime = parse_hint_regime(j.value("hint_regime", to_string(d.hint_regime)));
  c.split = j.value("split", d.split);
  c.mode = j.contains("mode") ? j.at("mode").get<GuideMode>() : d.mode;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.seed = j.value("seed", d.seed);
  c.gru_hidden = j.value("gru_hidden", d.gru_hidden);
  c.embedding_dim = j.value("embedding_dim", d.embedding_dim);
  c.embedding_source = j.value("embedding_source", d.embedding_source);
  c.dataset_half = j.value("dataset_half", d.dataset_half);
  c.eval_images = j.value("eval_images", d.eval_images);
  c.query = j.contains("query") ? j.at("query").get<QueryGenConfig>() : d.query;
  c.validate();
}

std::vector<CachedExample> cache_examples(const BackboneModel& backbone, const std::string& split,
                                          std::span<const Sample> samples) {
  std::vector<CachedExample> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) {
    CachedExample ex;
    ex.head = backbone.forward_head(s.image, split);
    ex.prediction = backbone.predict_from(ex.head).labels;
    ex.truth = s.labels;
    out.push_back(std::move(ex));
  }
  return out;
}

DrawnQuery draw_query(const LabelMap& prediction, const LabelMap& truth, HintRegime regime,
                      const QueryGenConfig& qcfg, const std::vector<std::string>& class_names,
                      std::mt19937_64& rng) {
  const auto candidates = filter_by_regime(enumerate_errors(prediction, truth, qcfg, class_names), regime);
  if (candidates.empty()) return {};
  DrawnQuery q;
  q.spec = sample_query(candidates, rng);
  q.text = render_text(*q.spec, qcfg, rng);
  return q;
}

std::vector<double> query_weights(const CachedExample& ex, const DrawnQuery& q) {
  if (q.spec) return build_weight_map(ex.prediction, ex.truth, *q.spec);
  std::vector<double> w(ex.truth.size(), 0.0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (ex.truth.labels[i] != kIgnoreLabel) w[i] = 0.5;
  }
  return w;
}

double example_loss(const BackboneModel& backbone, const GuideModel& guide, const EmbeddingTable& table,
                    const CachedExample& ex, const std::string& text, std::span<const double> weights) {
  const GuidingParams p = params_for_text(text, table, guide);
  const Volume<float> logits =
      backbone.forward_tail(guided_head<float>(ex.head, p, guide.mode, block_of(guide)), guide.split);
  return weighted_cross_entropy<float>(logits, ex.truth, weights, nullptr) / static_cast<double>(ex.truth.size());
}

GuideGrads GuideGrads::zeros_like(const GuideModel& g) {
  GuideGrads gr;
  for (const auto* p : g.parameters()) gr.params.emplace_back(p->size(), 0.0);
  if (g.block) {
    for (const auto* p : g.block->parameters()) gr.block.emplace_back(p->size(), 0.0f);
  }
  return gr;
}

void GuideGrads::clear() {
  for (auto& v : params) std::fill(v.begin(), v.end(), 0.0);
  for (auto& v : block) std::fill(v.begin(), v.end(), 0.0f);
}

double example_loss_backward(const BackboneModel& backbone, const GuideModel& guide,
                             const EmbeddingTable& table, const CachedExample& ex, const std::string& text,
                             std::span<const double> weights, GuideGrads& grads, double scale) {
  const auto tokens = tokenize(text);
  GruTrace gru_trace;
  std::vector<double> hidden;
  GuidingParams p = GuidingParams::zeros(guide.alpha_len, guide.beta_len, guide.channels);
  if (!tokens.empty()) {
    hidden = encode_query(tokens, table, guide, &gru_trace);
    p = project_guidance(hidden, guide);
  }
  GuidanceTrace<float> gtrace;
  HeadOutput<float> guided = ex.head;
  guided.features = apply_guidance(ex.head.features, p, guide.mode, block_of(guide), &gtrace);
  TailTrace<float> trace;
  const Volume<float> logits = backbone.forward_tail(guided, guide.split, &trace);
  const double n = static_cast<double>(ex.truth.size());
  Volume<float> grad_logits;
  const double loss = weighted_cross_entropy(logits, ex.truth, weights, &grad_logits, scale / n) / n;

  const Volume<float> grad_features = backbone.backward(trace, grad_logits, nullptr);
  GuidingParams gp;
  apply_guidance_backward<float>(gtrace, grad_features, p, guide.mode, block_of(guide), &gp,
                                 guide.block ? &grads.block : nullptr, nullptr);
  if (tokens.empty()) return loss;  // params fixed at zero; nothing upstream to train

  const std::vector<double> dp = gp.flatten();
  const int H = guide.gru.hidden;
  const int P = guide.output_size();
  std::vector<double> dh(H, 0.0);
  auto& gw = grads.params[4];
  auto& gb = grads.params[5];
  for (int i = 0; i < P; ++i) {
    if (dp[i] == 0.0) continue;
    gb[i] += dp[i];
    const double* w = guide.proj_w.data() + static_cast<std::size_t>(i) * H;
    double* g = gw.data() + static_cast<std::size_t>(i) * H;
    for (int k = 0; k < H; ++k) {
      g[k] += dp[i] * hidden[k];
      dh[k] += dp[i] * w[k];
    }
  }
  std::vector<std::vector<double>> gru_grads(4);
  for (int i = 0; i < 4; ++i) gru_grads[i].assign(grads.params[i].size(), 0.0);
  gru_backward(guide.gru, gru_trace, dh, gru_grads);
  for (int i = 0; i < 4; ++i) {
    for (std::size_t k = 0; k < gru_grads[i].size(); ++k) grads.params[i][k] += gru_grads[i][k];
  }
  return loss;
}

GuideOptimizer::GuideOptimizer(GuideModel& guide, double learning_rate)
    : main_(guide.parameters(), learning_rate) {
  if (guide.block) block_.emplace(guide.block->parameters(), learning_rate);
}

void GuideOptimizer::step(const GuideGrads& grads) {
  main_.step(grads.params);
  if (block_) block_->step(grads.block);
}

StepResult train_step(std::span<const CachedExample* const> batch, GuideModel& guide,
                      const BackboneModel& backbone, const EmbeddingTable& table, const GuideTrainConfig& cfg,
                      std::mt19937_64& rng, GuideOptimizer& opt) {
  if (batch.empty()) throw std::invalid_argument("empty training batch");
  StepResult res;
  GuideGrads grads = GuideGrads::zeros_like(guide);
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const CachedExample* ex : batch) {
    DrawnQuery q =
        draw_query(ex->prediction, ex->truth, cfg.hint_regime, cfg.query, backbone.class_names(), rng);
    const std::vector<double> w = query_weights(*ex, q);
    res.loss += scale * example_loss_backward(backbone, guide, table, *ex, q.text, w, grads, scale);
    res.queries.push_back(std::move(q));
  }
  if (!std::isfinite(res.loss)) throw std::runtime_error("guide training loss became non-finite");
  opt.step(grads);
  return res;
}

std::uint64_t query_stream_seed(std::uint64_t query_seed, std::size_t image_index) {
  return mix(query_seed, image_index);
}

GuideEval evaluate_guide(const BackboneModel& backbone, const GuideModel& guide, const EmbeddingTable& table,
                         std::span<const CachedExample> examples, HintRegime regime, const QueryGenConfig& qcfg,
                         std::uint64_t query_seed) {
  const int C = backbone.num_classes();
  ConfusionMatrix base(C), guided(C);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const CachedExample& ex = examples[i];
    std::mt19937_64 rng(query_stream_seed(query_seed, i));
    const DrawnQuery q = draw_query(ex.prediction, ex.truth, regime, qcfg, backbone.class_names(), rng);
    base.accumulate(ex.prediction, ex.truth);
    if (!q.spec) {
      guided.accumulate(ex.prediction, ex.truth);
      continue;
    }
    guided.accumulate(guide_with_text(backbone, guide, table, ex.head, q.text).labels, ex.truth);
  }
  return {miou(base), miou(guided)};
}

void to_json(nlohmann::json& j, const TrainLogRecord& r) {
  j = nlohmann::json{{"step", r.step},           {"epoch", r.epoch},
                     {"loss", r.loss},           {"regime", to_string(r.regime)},
                     {"query_text", r.query_text}, {"query_op", r.query_op}};
  if (r.miou_eval) j["miou_eval"] = *r.miou_eval;
}

TrainedGuide train_guide(const BackboneModel& backbone, std::span<const Sample> train,
                         std::span<const Sample> held_out, const GuideTrainConfig& cfg, std::ostream* log_out) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("guide training needs at least one image");
  EmbeddingTable table = EmbeddingTable::load(cfg.embedding_source, cfg.embedding_dim, cfg.seed);
  GuideModel guide = init_guide_model(backbone, cfg.split, cfg.mode, cfg.embedding_dim, cfg.gru_hidden, cfg.seed);
  const std::vector<CachedExample> examples = cache_examples(backbone, cfg.split, train);
  const std::size_t n_eval = std::min<std::size_t>(held_out.size(), cfg.eval_images);
  const std::vector<CachedExample> eval_set = cache_examples(backbone, cfg.split, held_out.first(n_eval));

  TrainedGuide out{std::move(guide), std::move(table), {}};
  GuideOptimizer opt(out.guide, cfg.learning_rate);  // holds pointers into out.guide
  std::mt19937_64 rng(mix(cfg.seed, 0x747261696eULL));
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);

  auto emit = [&](const TrainLogRecord& r) {
    if (log_out) *log_out << nlohmann::json(r).dump() << "\n" << std::flush;
    out.log.push_back(r);
  };

  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::vector<const CachedExample*> batch;
      for (std::size_t k = b; k < std::min(order.size(), b + cfg.batch_size); ++k) {
        batch.push_back(&examples[order[k]]);
      }
      StepResult r;
      try {
        r = train_step(batch, out.guide, backbone, out.table, cfg, rng, opt);
      } catch (const std::runtime_error& e) {
        throw std::runtime_error(std::string(e.what()) + " at step " + std::to_string(step) + " (epoch " +
                                 std::to_string(epoch) + "); try a lower --lr");
      }
      TrainLogRecord rec;
      rec.step = step++;
      rec.epoch = epoch;
      rec.loss = r.loss;
      rec.regime = cfg.hint_regime;
      for (const auto& q : r.queries) {
        rec.query_text.push_back(q.text);
        rec.query_op.push_back(q.spec ? to_string(q.spec->operation) : "none");
      }
      const bool epoch_end = b + cfg.batch_size >= order.size();
      if (epoch_end && !eval_set.empty()) {
        rec.miou_eval =
            evaluate_guide(backbone, out.guide, out.table, eval_set, cfg.hint_regime, cfg.query, cfg.seed)
                .guided_miou;
      }
      emit(rec);
    }
  }
  return out;
}

std::vector<IterativeStep> iterative_guide(const BackboneModel& backbone, const GuideModel& guide,
                                           const EmbeddingTable& table, const CachedExample& ex, int K,
                                           HintRegime regime, const QueryGenConfig& qcfg, std::mt19937_64& rng) {
  if (K < 1) throw std::invalid_argument("iterative guiding needs K >= 1");
  const int C = backbone.num_classes();
  std::vector<IterativeStep> steps;
  steps.push_back({0, std::nullopt, "", ex.prediction, image_miou(ex.prediction, ex.truth, C)});
  for (int k = 1; k <= K; ++k) {
    const DrawnQuery q = draw_query(steps.back().prediction, ex.truth, regime, qcfg, backbone.class_names(), rng);
    if (!q.spec) break;
    // swap: new params act on the original features, not on the previous guided ones
    LabelMap pred = guide_with_text(backbone, guide, table, ex.head, q.text).labels;
    const double m = image_miou(pred, ex.truth, C);
    steps.push_back({k, q.spec, q.text, std::move(pred), m});
  }
  return steps;
}

}  // namespace guideseg
