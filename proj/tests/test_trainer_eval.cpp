#include <doctest.h>

#include <cmath>
#include <nlohmann/json.hpp>
#include <random>
#include <sstream>

#include "guideseg/evaluation.hpp"
#include "oracles.hpp"

using namespace guideseg;

namespace {

ModelConfig tiny_config() {
  ModelConfig mc;
  mc.channel_widths = {4, 8, 16, 16};
  mc.decoder_width = 8;
  return mc;
}

struct Fixture {
  Dataset data = build_dataset(SceneConfig{}, 16, 6);
  BackboneModel backbone{tiny_config(), shapes_class_names(), 2};
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

GuideTrainConfig tiny_train_config() {
  GuideTrainConfig c;
  c.epochs = 2;
  c.batch_size = 4;
  c.gru_hidden = 6;
  c.embedding_dim = 5;
  c.eval_images = 0;
  c.learning_rate = 1e-2;
  return c;
}

/// All maps stacked into one, so the single-map oracle scores a whole dataset.
LabelMap stack(const std::vector<LabelMap>& maps) {
  LabelMap out(0, maps.front().width);
  for (const auto& m : maps) {
    out.labels.insert(out.labels.end(), m.labels.begin(), m.labels.end());
    out.height += m.height;
  }
  return out;
}

}  // namespace

TEST_SUITE("guide_trainer") {
  TEST_CASE("config validation") {
    GuideTrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.dataset_half = "train_a";
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = {};
    c.epochs = -1;
    CHECK_THROWS(c.validate());
    c = {};
    c.split = "s9";
    CHECK_THROWS(c.validate());
    nlohmann::json j = tiny_train_config();
    CHECK(j.get<GuideTrainConfig>().gru_hidden == 6);
    CHECK(parse_hint_regime("find_or_remove") == HintRegime::find_or_remove);
    CHECK_THROWS(parse_hint_regime("maybe"));
  }

  TEST_CASE("regime filtering keeps only the allowed operations") {
    const auto& f = fixture();
    const auto ex = cache_examples(f.backbone, "s3", std::span(f.data.test).first(3));
    std::mt19937_64 rng(1);
    const QueryGenConfig q;
    for (const auto& e : ex) {
      const auto all = enumerate_errors(e.prediction, e.truth, q, shapes_class_names());
      CHECK(filter_by_regime(all, HintRegime::find_or_remove).size() == all.size());
      for (auto regime : {HintRegime::find, HintRegime::remove}) {
        const auto kept = filter_by_regime(all, regime);
        for (const auto& s : kept) CHECK((s.operation == QueryOp::find) == (regime == HintRegime::find));
        for (int t = 0; t < 5; ++t) {
          const auto d = draw_query(e.prediction, e.truth, regime, q, shapes_class_names(), rng);
          CHECK(d.spec.has_value() == !kept.empty());
          if (d.spec) CHECK((d.spec->operation == QueryOp::find) == (regime == HintRegime::find));
          if (!d.spec) CHECK(d.text.empty());
        }
      }
    }
  }

  TEST_CASE("query weights") {
    const auto& f = fixture();
    const auto ex = cache_examples(f.backbone, "s3", std::span(f.data.test).first(2));
    const auto noop = query_weights(ex[0], DrawnQuery{});
    for (std::size_t i = 0; i < noop.size(); ++i) {
      CHECK(noop[i] == (ex[0].truth.labels[i] == kIgnoreLabel ? 0.0 : 0.5));
    }
    std::mt19937_64 rng(2);
    const auto d = draw_query(ex[1].prediction, ex[1].truth, HintRegime::find_or_remove, QueryGenConfig{},
                              shapes_class_names(), rng);
    REQUIRE(d.spec.has_value());
    CHECK(query_weights(ex[1], d) == build_weight_map(ex[1].prediction, ex[1].truth, *d.spec));
  }

  TEST_CASE("example loss gradient matches finite differences") {
    const auto& f = fixture();
    const auto ex = cache_examples(f.backbone, "s3", std::span(f.data.test).first(1));
    const EmbeddingTable table(4, 3);
    GuideMode mode;
    GuideModel g = init_guide_model(f.backbone, "s3", mode, 4, 3, 5);
    std::mt19937_64 rng(3);
    for (double& w : g.proj_w) w = std::normal_distribution<double>(0, 0.3)(rng);
    std::vector<double> weights(ex[0].truth.labels.size());
    for (double& w : weights) w = std::uniform_real_distribution<double>(0, 1)(rng);
    const std::string text = "find the ball";

    GuideGrads grads = GuideGrads::zeros_like(g);
    const double loss = example_loss_backward(f.backbone, g, table, ex[0], text, weights, grads, 1.0);
    CHECK(loss == doctest::Approx(example_loss(f.backbone, g, table, ex[0], text, weights)).epsilon(1e-9));
    auto params = g.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      CAPTURE(k);
      const auto numeric = oracle::numeric_gradient(
          [&](const std::vector<double>& v) {
            GuideModel h = g;
            *h.parameters()[k] = v;
            return example_loss(f.backbone, h, table, ex[0], text, weights);
          },
          *params[k], 1e-3);  // float features: a wide step keeps rounding noise small
      CHECK(oracle::relative_error(grads.params[k], numeric) < 2e-2);
    }
  }

  TEST_CASE("a train step changes the guide and nothing else") {
    const auto& f = fixture();
    const auto ex = cache_examples(f.backbone, "s3", std::span(f.data.train_b).first(4));
    std::vector<const CachedExample*> batch;
    for (const auto& e : ex) batch.push_back(&e);
    const auto cfg = tiny_train_config();
    const EmbeddingTable table(cfg.embedding_dim, 0);
    GuideModel g = init_guide_model(f.backbone, "s3", cfg.mode, cfg.embedding_dim, cfg.gru_hidden, 1);
    const auto guide_before = g.checksum(), backbone_before = f.backbone.checksum();
    GuideOptimizer opt(g, cfg.learning_rate);
    std::mt19937_64 rng(4);
    const GuideModel before = g;
    const auto table_before = table.checksum();
    const auto r = train_step(batch, g, f.backbone, table, cfg, rng, opt);
    CHECK(std::isfinite(r.loss));
    CHECK(table.checksum() == table_before);

    // recompute the batch loss from the logged queries with weights written from the rule
    double recomputed = 0.0;
    for (std::size_t i = 0; i < ex.size(); ++i) {
      const auto& q = r.queries[i];
      const auto& gt = ex[i].truth.labels;
      const auto& pred = ex[i].prediction.labels;
      std::vector<double> w(gt.size(), 0.0);
      for (std::size_t k = 0; k < gt.size(); ++k) {
        if (gt[k] == kIgnoreLabel) continue;
        if (pred[k] == gt[k]) {
          w[k] = 0.5;
        } else if (q.spec) {
          const bool named = q.spec->operation == QueryOp::find ? gt[k] == q.spec->class_id : pred[k] == q.spec->class_id;
          w[k] = named ? 1.0 : 0.0;
        }
      }
      recomputed += example_loss(f.backbone, before, table, ex[i], q.text, w);
    }
    CHECK(recomputed / ex.size() == doctest::Approx(r.loss).epsilon(1e-6));
    CHECK(r.queries.size() == 4);
    CHECK(g.checksum() != guide_before);
    CHECK(f.backbone.checksum() == backbone_before);
  }

  TEST_CASE("training is deterministic in its seed") {
    const auto& f = fixture();
    auto cfg = tiny_train_config();
    std::stringstream log1, log2;
    const auto a = train_guide(f.backbone, f.data.train_b, f.data.test, cfg, &log1);
    const auto b = train_guide(f.backbone, f.data.train_b, f.data.test, cfg, &log2);
    CHECK(a.guide.checksum() == b.guide.checksum());
    CHECK(log1.str() == log2.str());
    CHECK(a.log.size() == 2 * 2);  // 8 images, batch 4, 2 epochs
    CHECK(a.table.checksum() == EmbeddingTable(cfg.embedding_dim, cfg.seed).checksum());
    for (const auto& rec : a.log) {
      for (const auto& op : rec.query_op) CHECK((op == "find" || op == "none"));
    }
    std::string line;
    while (std::getline(log1, line)) {
      const auto j = nlohmann::json::parse(line);
      for (const char* key : {"step", "epoch", "loss", "regime", "query_text", "query_op"}) CHECK(j.contains(key));
    }
    cfg.seed = 1;
    CHECK(train_guide(f.backbone, f.data.train_b, f.data.test, cfg).guide.checksum() != a.guide.checksum());
  }
}

TEST_SUITE("evaluation") {
  TEST_CASE("an untrained guide gains nothing and the baseline matches a pixel count") {
    const auto& f = fixture();
    const EmbeddingTable table(5, 0);
    const GuideModel g = init_guide_model(f.backbone, "s3", GuideMode{}, 5, 6, 1);
    const auto ex = cache_examples(f.backbone, "s3", f.data.test);
    const auto curve = iterative_miou_curve(f.backbone, g, table, ex, HintRegime::find_or_remove, QueryGenConfig{}, 0, 3);
    REQUIRE(curve.size() == 4);
    std::vector<LabelMap> preds, truths;
    for (const auto& e : ex) {
      preds.push_back(e.prediction);
      truths.push_back(e.truth);
    }
    const double expected = oracle::brute_miou(stack(preds), stack(truths), 10);
    for (double v : curve) CHECK(v == doctest::Approx(expected).epsilon(1e-12));
    const auto e = evaluate_guide(f.backbone, g, table, ex, HintRegime::find, QueryGenConfig{}, 0);
    CHECK(e.gain() == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(iterative_miou_curve(f.backbone, g, table, ex, HintRegime::find, QueryGenConfig{}, 0, 0).size() == 1);
  }

  TEST_CASE("iterative guiding returns at most K+1 steps starting unguided") {
    const auto& f = fixture();
    const EmbeddingTable table(5, 0);
    const GuideModel g = init_guide_model(f.backbone, "s3", GuideMode{}, 5, 6, 1);
    const auto ex = cache_examples(f.backbone, "s3", std::span(f.data.test).first(2));
    std::mt19937_64 rng(9);
    const auto steps = iterative_guide(f.backbone, g, table, ex[0], 4, HintRegime::find, QueryGenConfig{}, rng);
    CHECK(steps.size() <= 5);
    CHECK(steps[0].k == 0);
    CHECK(!steps[0].query.has_value());
    CHECK(steps[0].prediction == ex[0].prediction);
    for (std::size_t k = 1; k < steps.size(); ++k) {
      CHECK(steps[k].k == static_cast<int>(k));
      REQUIRE(steps[k].query.has_value());
      CHECK(steps[k].query->operation == QueryOp::find);
    }
  }

  TEST_CASE("ablation report: seeds, spread and CSV layout") {
    const auto& f = fixture();
    const EmbeddingTable table(5, 0);
    GuideModel trained = init_guide_model(f.backbone, "s3", GuideMode{}, 5, 6, 1);
    std::mt19937_64 rng(5);
    for (double& w : trained.proj_w) w = std::normal_distribution<double>(0, 0.5)(rng);
    const std::vector<AblationSetting> settings{{"find", &trained, &table, HintRegime::find, 1},
                                                {"remove", &trained, &table, HintRegime::remove, 2}};
    const std::span<const Sample> test(f.data.test);
    const auto one = run_ablation(AblationAxis::hint_regime, std::span(settings), f.backbone, test, 1, {});
    for (const auto& r : one.rows) CHECK(!r.std_miou.has_value());
    const auto three = run_ablation(AblationAxis::hint_regime, std::span(settings), f.backbone, test, 3, {});
    const auto again = run_ablation(AblationAxis::hint_regime, std::span(settings), f.backbone, test, 3, {});
    REQUIRE(three.rows.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
      const auto& r = three.rows[i];
      CHECK(r.per_seed_miou == again.rows[i].per_seed_miou);
      CHECK(r.per_seed_miou.front() == one.rows[i].per_seed_miou.front());
      REQUIRE(r.std_miou.has_value());
      const double m = (r.per_seed_miou[0] + r.per_seed_miou[1] + r.per_seed_miou[2]) / 3.0;
      double ss = 0;
      for (double v : r.per_seed_miou) ss += (v - m) * (v - m);
      CHECK(r.mean_miou == doctest::Approx(m));
      CHECK(*r.std_miou == doctest::Approx(std::sqrt(ss / 2.0)));
    }
    std::stringstream csv;
    write_ablation_csv(three, csv);
    std::string comment, header, row;
    std::getline(csv, comment);
    std::getline(csv, header);
    CHECK(comment.rfind("# axis=hint_regime", 0) == 0);
    CHECK(header == "setting,unguided_miou,mean_miou,std_miou,mean_gain,seed0,seed1,seed2");
    int rows = 0;
    while (std::getline(csv, row)) ++rows;
    CHECK(rows == 2);
    CHECK_THROWS(run_ablation(AblationAxis::hint_regime, std::span(settings), f.backbone, test, 0, {}));
    const std::vector<AblationCheckpoint> missing{{"x", "/nonexistent/guide.bin", HintRegime::find, 1}};
    CHECK_THROWS_AS(run_ablation(AblationAxis::guide_mode, std::span(missing), f.backbone, test, 1, {}),
                    std::runtime_error);
  }

  TEST_CASE("gamma export and cosine similarity") {
    const auto& f = fixture();
    const EmbeddingTable table(5, 0);
    GuideModel g = init_guide_model(f.backbone, "s3", GuideMode{}, 5, 6, 1);
    std::mt19937_64 rng(6);
    for (double& w : g.proj_w) w = std::normal_distribution<double>(0, 0.5)(rng);
    const auto rows = export_gamma_vectors(g, table, shapes_class_names());
    REQUIRE(rows.size() == 10);
    for (const auto& [name, gamma] : rows) CHECK(gamma.size() == 16);
    CHECK(rows[2].first == "cloud");
    CHECK(rows[2].second == params_for_text("find the cloud", table, g).gamma_s);
    CHECK(export_gamma_vectors(g, table, shapes_class_names()) == rows);
    std::stringstream csv;
    write_gamma_csv(rows, csv);
    std::string line;
    int n = 0;
    while (std::getline(csv, line)) ++n;
    CHECK(n == 11);

    const std::vector<double> a{1, 2, 3}, b{2, 4, 6}, c{-3, 0, 1}, zero{0, 0, 0};
    CHECK(cosine_similarity(a, b) == doctest::Approx(1.0));
    CHECK(cosine_similarity(a, c) == doctest::Approx(0.0));
    CHECK(cosine_similarity(a, std::vector<double>{-1, -2, -3}) == doctest::Approx(-1.0));
    CHECK(cosine_similarity(a, zero) == 0.0);
    CHECK_THROWS_AS(cosine_similarity(a, std::vector<double>{1.0}), std::invalid_argument);
  }
}
