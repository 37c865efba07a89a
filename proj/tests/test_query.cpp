#include <doctest.h>

#include <map>
#include <nlohmann/json.hpp>
#include <random>
#include <set>

#include "guideseg/query_generator.hpp"
#include "oracles.hpp"

using namespace guideseg;

namespace {

const std::vector<std::string> kNames{"c0", "c1", "c2", "c3", "c4"};

QueryGenConfig small_cfg(int threshold) {
  QueryGenConfig cfg;
  cfg.min_region_pixels = threshold;
  return cfg;
}

oracle::ErrorTable as_table(const std::vector<QuerySpec>& qs) {
  oracle::ErrorTable t;
  for (const auto& q : qs) {
    auto& cells = t[{q.operation == QueryOp::find ? 0 : 1, q.class_id}];
    int sum = 0;
    for (std::size_t i = 0; i < q.cells.size(); ++i) {
      cells[q.cells[i]] = q.cell_improvement[i];
      sum += q.cell_improvement[i];
    }
    CHECK(sum == q.improvement);
  }
  return t;
}

QuerySpec spec(QueryOp op, int cls, std::string name, std::vector<GridCell> cells) {
  QuerySpec q;
  q.operation = op;
  q.class_id = cls;
  q.class_name = std::move(name);
  q.cells = std::move(cells);
  q.cell_improvement.assign(q.cells.size(), 1);
  q.improvement = static_cast<int>(q.cells.size());
  return q;
}

}  // namespace

TEST_SUITE("query_generator") {
  TEST_CASE("identical maps have no candidates") {
    std::mt19937_64 rng(1);
    const auto m = oracle::random_labels(6, 6, 5, rng);
    CHECK(enumerate_errors(m, m, small_cfg(1), kNames).empty());
  }

  TEST_CASE("one wrong cell yields one find and one remove candidate") {
    LabelMap gt(6, 6, 0), pred(6, 6, 0);
    for (int y = 0; y < 2; ++y) {
      for (int x = 0; x < 2; ++x) {
        gt.at(y, x) = 2;
        pred.at(y, x) = 1;
      }
    }
    const auto qs = enumerate_errors(pred, gt, small_cfg(1), kNames);
    REQUIRE(qs.size() == 2);
    CHECK(qs[0].operation == QueryOp::find);
    CHECK(qs[0].class_id == 2);
    CHECK(qs[0].cells == std::vector<GridCell>{{0, 0}});
    CHECK(qs[0].improvement == 4);
    CHECK(qs[1].operation == QueryOp::remove);
    CHECK(qs[1].class_id == 1);
    CHECK(qs[1].improvement == 4);
    CHECK(as_table(qs) == oracle::brute_errors(pred, gt, 5, 3, 1));
  }

  TEST_CASE("regions below the pixel threshold are dropped") {
    LabelMap gt(6, 6, 0), pred(6, 6, 0);
    pred.at(0, 0) = pred.at(0, 1) = pred.at(1, 0) = 3;
    CHECK(enumerate_errors(pred, gt, small_cfg(5), kNames).empty());
    CHECK(enumerate_errors(pred, gt, small_cfg(3), kNames).size() == 2);
  }

  TEST_CASE("ignore-labelled ground truth never produces candidates") {
    LabelMap gt(6, 6, kIgnoreLabel), pred(6, 6, 1);
    CHECK(enumerate_errors(pred, gt, small_cfg(1), kNames).empty());
  }

  TEST_CASE("default threshold is max(20, 0.1% of pixels)") {
    const QueryGenConfig cfg;
    CHECK(cfg.region_threshold(64, 64) == 20);
    CHECK(cfg.region_threshold(1000, 1000) == 1000);
  }

  TEST_CASE("shape mismatch is rejected") {
    CHECK_THROWS_AS(enumerate_errors(LabelMap(6, 6), LabelMap(6, 5), small_cfg(1), kNames), std::invalid_argument);
  }

  TEST_CASE("equals the brute-force enumerator on random map pairs") {
    std::mt19937_64 rng(7);
    for (int t = 0; t < 300; ++t) {
      const int h = 6 + t % 7, w = 5 + t % 9, n = 1 + t % 4, thr = t % 4;
      const auto gt = oracle::random_labels(h, w, 5, rng, 0.1);
      auto pred = oracle::random_labels(h, w, 5, rng);
      // keep some agreement so not every cell is an error
      for (std::size_t i = 0; i < pred.size(); i += 2) {
        if (gt.labels[i] != kIgnoreLabel) pred.labels[i] = gt.labels[i];
      }
      QueryGenConfig cfg = small_cfg(thr);
      cfg.grid_n = n;
      CHECK(as_table(enumerate_errors(pred, gt, cfg, kNames)) == oracle::brute_errors(pred, gt, 5, n, thr));
    }
  }

  TEST_CASE("fixing a candidate's pixels gains exactly its improvement") {
    std::mt19937_64 rng(11);
    for (int t = 0; t < 100; ++t) {
      const int h = 6 + t % 5, w = 6 + t % 7;
      const auto gt = oracle::random_labels(h, w, 4, rng, 0.1);
      const auto pred = oracle::random_labels(h, w, 4, rng);
      QueryGenConfig cfg = small_cfg(t % 3);
      cfg.grid_n = 1 + t % 3;
      for (const auto& q : enumerate_errors(pred, gt, cfg, kNames)) {
        const std::set<GridCell> cells(q.cells.begin(), q.cells.end());
        LabelMap fixed = pred;
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            const GridCell c{oracle::cell_index(y, h, cfg.grid_n), oracle::cell_index(x, w, cfg.grid_n)};
            const int g = gt.at(y, x), p = pred.at(y, x);
            if (!cells.count(c) || g == kIgnoreLabel || g == p) continue;
            const bool designated = q.operation == QueryOp::find ? g == q.class_id : p == q.class_id;
            if (designated) fixed.at(y, x) = g;
          }
        }
        auto correct = [&](const LabelMap& m) {
          int n = 0;
          for (std::size_t i = 0; i < m.size(); ++i) n += m.labels[i] == gt.labels[i];
          return n;
        };
        CHECK(correct(fixed) - correct(pred) == q.improvement);
      }
    }
  }

  TEST_CASE("sampling frequency is proportional to improvement") {
    std::vector<QuerySpec> cands{spec(QueryOp::find, 1, "a", {{0, 0}}), spec(QueryOp::remove, 2, "b", {{0, 1}})};
    cands[0].improvement = 30;
    cands[1].improvement = 10;
    std::mt19937_64 rng(12345);
    int first = 0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) first += sample_query(cands, rng) == cands[0];
    CHECK(std::abs(first / double(draws) - 0.75) < 0.05);

    std::vector<QuerySpec> one{cands[1]};
    for (int i = 0; i < 20; ++i) CHECK(sample_query(one, rng) == cands[1]);
    CHECK_THROWS_AS(sample_query({}, rng), std::invalid_argument);
    cands[0].improvement = 0;
    CHECK_THROWS_AS(sample_query(cands, rng), std::invalid_argument);
  }

  TEST_CASE("location phrases") {
    const QueryGenConfig cfg;
    CHECK(location_phrase(spec(QueryOp::find, 0, "person", {{0, 2}}), cfg) == "on the top right");
    CHECK(location_phrase(spec(QueryOp::remove, 0, "horse", {{1, 1}}), cfg) == "in the middle");
    std::vector<GridCell> all;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) all.emplace_back(r, c);
    }
    CHECK(location_phrase(spec(QueryOp::find, 0, "sky", all), cfg) == "in the image");
    CHECK(location_phrase(spec(QueryOp::find, 0, "sky", {{2, 0}, {2, 1}, {2, 2}}), cfg) == "on the bottom");
    CHECK(location_phrase(spec(QueryOp::find, 0, "sky", {{0, 0}, {1, 0}, {2, 0}}), cfg) == "on the left");
    // mixed cells: the cell with the largest improvement names the location
    QuerySpec mixed = spec(QueryOp::find, 0, "x", {{0, 0}, {2, 2}});
    mixed.cell_improvement = {3, 9};
    CHECK(location_phrase(mixed, cfg) == "on the bottom right");
  }

  TEST_CASE("rendered text uses the operation's templates") {
    QueryGenConfig cfg;
    cfg.templates[QueryOp::remove] = {"remove the {c} {loc}"};
    cfg.templates[QueryOp::find] = {"find the {c} {loc}"};
    std::mt19937_64 rng(3);
    CHECK(render_text(spec(QueryOp::remove, 0, "horse", {{1, 1}}), cfg, rng) == "remove the horse in the middle");
    CHECK(render_text(spec(QueryOp::find, 0, "person", {{0, 2}}), cfg, rng) == "find the person on the top right");
    std::vector<GridCell> all;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) all.emplace_back(r, c);
    }
    cfg.templates[QueryOp::find] = {"there is a {c} {loc}"};
    CHECK(render_text(spec(QueryOp::find, 0, "sky", all), cfg, rng) == "there is a sky in the image");
    cfg.templates[QueryOp::find].clear();
    CHECK_THROWS(render_text(spec(QueryOp::find, 0, "sky", all), cfg, rng));
  }

  TEST_CASE("every rendering parses back to its operation and class") {
    const QueryGenConfig cfg;
    std::mt19937_64 rng(5);
    for (int t = 0; t < 200; ++t) {
      const int cls = static_cast<int>(rng() % kNames.size());
      const QueryOp op = rng() % 2 ? QueryOp::find : QueryOp::remove;
      const GridCell cell{static_cast<int>(rng() % 3), static_cast<int>(rng() % 3)};
      const auto text = render_text(spec(op, cls, kNames[cls], {cell}), cfg, rng);
      const auto parsed = parse_query_text(text, cfg, kNames);
      REQUIRE(parsed.has_value());
      CHECK(parsed->first == op);
      CHECK(parsed->second == cls);
    }
    CHECK(!parse_query_text("make it prettier", cfg, kNames).has_value());
  }

  TEST_CASE("weight map fixture and rules") {
    LabelMap gt(2, 2), pred(2, 2);
    gt.labels = {1, 1, 0, 2};
    pred.labels = {0, 1, 0, 0};
    const auto w = build_weight_map(pred, gt, spec(QueryOp::find, 1, "c1", {{0, 0}}));
    CHECK(w == std::vector<double>{1.0, 0.5, 0.5, 0.0});

    std::mt19937_64 rng(9);
    const auto m = oracle::random_labels(5, 5, 4, rng, 0.2);
    for (double v : build_weight_map(m, m, spec(QueryOp::remove, 1, "c1", {{0, 0}}))) {
      CHECK((v == 0.5 || v == 0.0));
    }
    const auto other = oracle::random_labels(5, 5, 3, rng);
    for (double v : build_weight_map(other, m, spec(QueryOp::remove, 3, "c3", {{0, 0}}))) CHECK(v != 1.0);
    CHECK_THROWS_AS(build_weight_map(LabelMap(2, 2), LabelMap(2, 3), spec(QueryOp::find, 0, "c", {})),
                    std::invalid_argument);
  }

  TEST_CASE("config json round trip and validation") {
    QueryGenConfig cfg;
    cfg.grid_n = 4;
    cfg.templates[QueryOp::find] = {"look for the {c} {loc}"};
    nlohmann::json j = cfg;
    const auto back = j.get<QueryGenConfig>();
    CHECK(back.grid_n == 4);
    CHECK(back.templates.at(QueryOp::find) == cfg.templates.at(QueryOp::find));
    j["grid_n"] = 0;
    CHECK_THROWS(j.get<QueryGenConfig>());
  }
}
