#include <doctest.h>

#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <fstream>
#include <random>
#include <set>

#include "guideseg/backbone.hpp"
#include "guideseg/guiding_block.hpp"
#include "guideseg/image_io.hpp"
#include "guideseg/layers.hpp"
#include "guideseg/metrics.hpp"
#include "guideseg/shapes_dataset.hpp"
#include "oracles.hpp"

using namespace guideseg;
namespace fs = std::filesystem;

namespace {

Image random_image(int h, int w, std::mt19937_64& rng) {
  Image x(3, h, w);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  for (float& v : x.data) v = u(rng);
  return x;
}

template <typename T>
Volume<T> random_volume(Shape s, std::mt19937_64& rng, double scale = 1.0) {
  Volume<T> v(s);
  std::normal_distribution<double> n(0.0, scale);
  for (T& x : v.data) x = static_cast<T>(n(rng));
  return v;
}

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

double dot(const Volume<double>& a, const Volume<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("guideseg_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_SUITE("seg_backbone") {
  TEST_CASE("split shapes come from the realized architecture table") {
    BackboneModel m(ModelConfig{}, shapes_class_names(), 1);
    std::mt19937_64 rng(3);
    const Image x = random_image(64, 64, rng);
    const auto table = m.architecture_table();
    REQUIRE(table.size() == 5);
    for (const auto& [name, shape] : table) {
      const auto head = m.forward_head(x, name);
      CHECK(head.features.shape == shape);
      CHECK(m.split_shape(name) == shape);
    }
    // 64x64 input, stride-2 stages: s2 sits at a quarter of the input size
    CHECK(m.split_shape("s2").height == 16);
    CHECK(m.split_shape("s2").width == 16);
    CHECK_THROWS_AS(m.split_shape("s9"), std::invalid_argument);
  }

  TEST_CASE("head then tail equals the full forward pass at every split") {
    BackboneModel m(ModelConfig{}, shapes_class_names(), 2);
    std::mt19937_64 rng(4);
    const Image x = random_image(64, 64, rng);
    const Volume<float> full = m.forward(x);
    for (const auto& name : m.config().split_points) {
      CHECK(m.forward_tail(m.forward_head(x, name), name) == full);
    }
  }

  TEST_CASE("argmax label agrees with the maximum posterior") {
    BackboneModel m(ModelConfig{}, shapes_class_names(), 5);
    std::mt19937_64 rng(6);
    const Prediction p = m.predict(random_image(64, 64, rng));
    std::uniform_int_distribution<int> coord(0, 63);
    for (int k = 0; k < 100; ++k) {
      const int y = coord(rng), x = coord(rng);
      int best = 0;
      for (int c = 1; c < p.posteriors.channels(); ++c) {
        if (p.posteriors.at(c, y, x) > p.posteriors.at(best, y, x)) best = c;
      }
      CHECK(p.labels.at(y, x) == best);
    }
    for (int y = 0; y < 64; y += 9) {
      float sum = 0.f;
      for (int c = 0; c < p.posteriors.channels(); ++c) sum += p.posteriors.at(c, y, y);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    }
  }

  TEST_CASE("wrong input size is rejected") {
    BackboneModel m(ModelConfig{}, shapes_class_names(), 1);
    CHECK_THROWS(m.forward(Image(3, 32, 32)));
  }

  TEST_CASE("checkpoint round trip keeps weights and checksum") {
    const auto dir = temp_dir("bb");
    BackboneModel m(ModelConfig{}, shapes_class_names(), 9);
    save_backbone(m, dir / "m.bin", 0.5);
    const BackboneModel back = load_backbone(dir / "m.bin");
    CHECK(back.checksum() == m.checksum());
    CHECK(back.class_names() == m.class_names());
    CHECK(fs::exists(sidecar_path(dir / "m.bin")));
    {
      std::ofstream out(dir / "m.bin", std::ios::binary | std::ios::trunc);
      out << "garbage";
    }
    CHECK_THROWS(load_backbone(dir / "m.bin"));
    CHECK_THROWS(load_backbone(dir / "absent.bin"));
  }

  TEST_CASE("convolution backward matches central differences") {
    std::mt19937_64 rng(11);
    Conv2d<double> conv(3, 4, 3, 2);
    for (double& w : conv.weight) w = std::normal_distribution<double>(0, 0.3)(rng);
    for (double& b : conv.bias) b = std::normal_distribution<double>(0, 0.1)(rng);
    const Volume<double> in = random_volume<double>({3, 6, 6}, rng);
    const Volume<double> G = random_volume<double>(conv.output_shape(in.shape), rng);
    std::vector<double> gw(conv.weight.size(), 0.0), gb(conv.bias.size(), 0.0);
    const Volume<double> gin = conv.backward(in, G, gw.data(), gb.data());
    const auto num_in = oracle::numeric_gradient(
        [&](const std::vector<double>& v) {
          Volume<double> x = in;
          x.data = v;
          return dot(conv.forward(x), G);
        },
        in.data);
    CHECK(oracle::relative_error(gin.data, num_in) < 1e-7);
    const auto num_w = oracle::numeric_gradient(
        [&](const std::vector<double>& v) {
          Conv2d<double> c = conv;
          c.weight = v;
          return dot(c.forward(in), G);
        },
        conv.weight);
    CHECK(oracle::relative_error(gw, num_w) < 1e-7);
  }

  TEST_CASE("float bias gradient is the sequential sum, bit for bit") {
    // a reduction whose order depends on buffer addresses makes training depend on heap layout
    std::mt19937_64 rng(12);
    Conv2d<float> conv(2, 3, 3, 1);
    const Volume<float> in = random_volume<float>({2, 7, 9}, rng);
    const Volume<float> G = random_volume<float>(conv.output_shape(in.shape), rng);
    const int positions = G.shape.height * G.shape.width;
    for (int shift = 0; shift < 16; ++shift) {
      // a live spacer allocation moves the copy to another heap address
      std::vector<float> spacer(static_cast<std::size_t>(shift) + 1);
      const Volume<float> moved = G;
      std::vector<float> gb(3, 0.0f);
      conv.backward(in, moved, nullptr, gb.data(), false);
      for (int o = 0; o < 3; ++o) {
        float seq = 0.0f;
        for (int i = 0; i < positions; ++i) seq += G.data[static_cast<std::size_t>(o) * positions + i];
        CHECK(gb[o] == seq);
      }
    }
  }

  TEST_CASE("bilinear resize is endpoint aligned") {
    Volume<double> v(1, 1, 2);
    v.at(0, 0, 0) = 0.0;
    v.at(0, 0, 1) = 1.0;
    const auto r = resize_bilinear(v, 1, 3);
    CHECK(r.at(0, 0, 0) == 0.0);
    CHECK(r.at(0, 0, 1) == doctest::Approx(0.5));
    CHECK(r.at(0, 0, 2) == 1.0);
  }
}

TEST_SUITE("guiding_block") {
  TEST_CASE("channel rule on a single value") {
    Volume<double> A(1, 1, 1, 1.5);
    const std::vector<double> gs{1.0}, gb{0.25};
    CHECK(apply_channel_guidance(A, gs, gb).at(0, 0, 0) == doctest::Approx(3.25));
  }

  TEST_CASE("full rule on a single value") {
    Volume<double> A(1, 1, 1, 2.0);
    GuidingParams p{{0.5}, {-0.25}, {0.25}, {0.1}};
    CHECK(apply_full_guidance(A, p).at(0, 0, 0) == doctest::Approx(3.1));
  }

  TEST_CASE("spatial vectors resample linearly with aligned endpoints") {
    const std::vector<double> a{0.0, 1.0}, b{2.0, 4.0};
    const auto [ra, rb] = resample_spatial_vectors(a, b, 3, 5);
    REQUIRE(ra.size() == 3);
    CHECK(ra[0] == 0.0);
    CHECK(ra[1] == doctest::Approx(0.5));
    CHECK(ra[2] == 1.0);
    CHECK(rb == std::vector<double>{2.0, 2.5, 3.0, 3.5, 4.0});
    const auto [same, _] = resample_spatial_vectors(a, b, 2, 2);
    CHECK(same == a);
  }

  TEST_CASE("gamma_s of -2 inverts a channel exactly") {
    std::mt19937_64 rng(23);
    const auto A = random_volume<double>({3, 5, 4}, rng);
    GuidingParams p = GuidingParams::zeros(4, 5, 3);
    p.gamma_s = {-2.0, 0.0, 0.0};
    const auto out = apply_full_guidance(A, p);
    for (int y = 0; y < 5; ++y) {
      for (int x = 0; x < 4; ++x) {
        CHECK(out.at(0, y, x) == -A.at(0, y, x));
        CHECK(out.at(1, y, x) == A.at(1, y, x));
      }
    }
  }

  TEST_CASE("full guidance is linear in the features when gamma_b is zero") {
    std::mt19937_64 rng(24);
    for (int t = 0; t < 20; ++t) {
      const auto A = random_volume<double>({4, 6, 5}, rng);
      GuidingParams p = GuidingParams::zeros(3 + t % 4, 2 + t % 5, 4);
      p.alpha = random_vec(p.alpha.size(), rng, 0.5);
      p.beta = random_vec(p.beta.size(), rng, 0.5);
      p.gamma_s = random_vec(4, rng, 0.5);
      const double lambda = std::uniform_real_distribution<double>(-3, 3)(rng);
      Volume<double> scaled = A;
      for (double& v : scaled.data) v *= lambda;
      const auto lhs = apply_full_guidance(scaled, p), rhs = apply_full_guidance(A, p);
      for (std::size_t i = 0; i < lhs.data.size(); ++i) {
        CHECK(lhs.data[i] == doctest::Approx(lambda * rhs.data[i]).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("resampling is exact on affine ramps") {
    std::mt19937_64 rng(25);
    for (int t = 0; t < 20; ++t) {
      const int n = 2 + t % 6, m = 2 + (t * 7) % 11;
      const double a = std::normal_distribution<double>(0, 1)(rng), b = std::normal_distribution<double>(0, 1)(rng);
      std::vector<double> ramp(n);
      for (int i = 0; i < n; ++i) ramp[i] = a + b * i / (n - 1);
      const auto [r, _] = resample_spatial_vectors(ramp, ramp, m, n);
      REQUIRE(static_cast<int>(r.size()) == m);
      for (int i = 0; i < m; ++i) CHECK(r[i] == doctest::Approx(a + b * i / (m - 1)).epsilon(1e-12));
    }
  }

  TEST_CASE("dispatch: direct channel-only equals the channel rule") {
    std::mt19937_64 rng(21);
    const auto A = random_volume<double>({5, 4, 3}, rng);
    GuidingParams p = GuidingParams::zeros(0, 0, 5);
    p.gamma_s = random_vec(5, rng, 0.3);
    p.gamma_b = random_vec(5, rng, 0.3);
    GuideMode mode;
    mode.variant = GuideVariant::channel_only;
    CHECK(apply_guidance<double>(A, p, mode, nullptr) == apply_channel_guidance(A, p.gamma_s, p.gamma_b));
    GuidingParams full = GuidingParams::zeros(4, 3, 5);
    full.gamma_s = p.gamma_s;
    full.gamma_b = p.gamma_b;
    CHECK(apply_guidance<double>(A, full, GuideMode{}, nullptr) == apply_full_guidance(A, full));
  }

  TEST_CASE("zero parameters are the identity in every mode") {
    std::mt19937_64 rng(22);
    const auto A = random_volume<float>({16, 8, 8}, rng);
    for (auto variant : {GuideVariant::channel_only, GuideVariant::spatio_semantic}) {
      for (auto wrapping : {GuideWrapping::direct, GuideWrapping::residual_block}) {
        GuideMode mode{variant, wrapping, 12};
        const auto block = ResidualBlockWeights<float>::init(16, 12, rng);
        const int alpha = variant == GuideVariant::channel_only ? 0 : 8;
        const GuidingParams p = GuidingParams::zeros(alpha, alpha, mode.modulated_channels(16));
        const auto* b = wrapping == GuideWrapping::residual_block ? &block : nullptr;
        CHECK(apply_guidance<float>(A, p, mode, b) == A);
      }
    }
  }

  TEST_CASE("guidance gradients match central differences at 8x8x16") {
    std::mt19937_64 rng(23);
    const Shape s{16, 8, 8};
    const auto A = random_volume<double>(s, rng);
    const auto G = random_volume<double>(s, rng);
    for (auto variant : {GuideVariant::channel_only, GuideVariant::spatio_semantic}) {
      for (auto wrapping : {GuideWrapping::direct, GuideWrapping::residual_block}) {
        CAPTURE(to_string(variant));
        CAPTURE(to_string(wrapping));
        GuideMode mode{variant, wrapping, 6};
        auto block = ResidualBlockWeights<double>::init(16, 6, rng);
        for (double& w : block.project_out.weight) w = std::normal_distribution<double>(0, 0.3)(rng);
        for (double& w : block.project_in.bias) w = std::normal_distribution<double>(0, 0.3)(rng);
        const auto* b = wrapping == GuideWrapping::residual_block ? &block : nullptr;
        // alpha/beta shorter than the volume exercises resampling
        const int len = variant == GuideVariant::channel_only ? 0 : 5;
        GuidingParams p = GuidingParams::zeros(len, len ? len + 1 : 0, mode.modulated_channels(16));
        p.assign_flat(random_vec(p.size(), rng, 0.2));

        GuidanceTrace<double> trace;
        apply_guidance<double>(A, p, mode, b, &trace);
        GuidingParams gp = p.zeros_like();
        std::vector<std::vector<double>> gblock;
        for (auto* w : block.parameters()) gblock.emplace_back(w->size(), 0.0);
        Volume<double> gin;
        apply_guidance_backward<double>(trace, G, p, mode, b, &gp, b ? &gblock : nullptr, &gin);

        const auto num_p = oracle::numeric_gradient(
            [&](const std::vector<double>& v) {
              GuidingParams q = p;
              q.assign_flat(v);
              return dot(apply_guidance<double>(A, q, mode, b), G);
            },
            p.flatten());
        CHECK(oracle::relative_error(gp.flatten(), num_p) < 1e-4);
        const auto num_in = oracle::numeric_gradient(
            [&](const std::vector<double>& v) {
              Volume<double> x = A;
              x.data = v;
              return dot(apply_guidance<double>(x, p, mode, b), G);
            },
            A.data);
        CHECK(oracle::relative_error(gin.data, num_in) < 1e-4);
        if (b) {
          auto params = block.parameters();
          for (std::size_t k = 0; k < params.size(); ++k) {
            const auto num_w = oracle::numeric_gradient(
                [&](const std::vector<double>& v) {
                  auto bb = block;
                  *bb.parameters()[k] = v;
                  return dot(apply_guidance<double>(A, p, mode, &bb), G);
                },
                *params[k]);
            CHECK(oracle::relative_error(gblock[k], num_w) < 1e-4);
          }
        }
      }
    }
  }

  TEST_CASE("parameter length mismatch is rejected") {
    Volume<double> A(4, 2, 2, 1.0);
    const GuidingParams p = GuidingParams::zeros(2, 2, 3);
    CHECK_THROWS_AS(apply_guidance<double>(A, p, GuideMode{}, nullptr), std::invalid_argument);
  }

  TEST_CASE("params json round trip") {
    std::mt19937_64 rng(24);
    GuidingParams p = GuidingParams::zeros(3, 4, 5);
    p.assign_flat(random_vec(p.size(), rng, 1.0));
    nlohmann::json j = p;
    CHECK(j.get<GuidingParams>() == p);
  }
}

TEST_SUITE("metrics") {
  TEST_CASE("two-class fixture") {
    ConfusionMatrix cm(2);
    cm.add(0, 0, 3);
    cm.add(0, 1, 1);
    cm.add(1, 0, 1);
    cm.add(1, 1, 3);
    const auto iou = cm.class_iou();
    CHECK(*iou[0] == doctest::Approx(0.6));
    CHECK(*iou[1] == doctest::Approx(0.6));
    CHECK(miou(cm) == doctest::Approx(0.6));
    CHECK(pixel_accuracy(cm) == 0.75);
  }

  TEST_CASE("accumulate matches a hand count on a mixed 2x2 map") {
    LabelMap gt(2, 2), pred(2, 2);
    gt.labels = {0, 1, 1, kIgnoreLabel};
    pred.labels = {0, 0, 1, 1};
    ConfusionMatrix cm(2);
    cm.accumulate(pred, gt);
    CHECK(cm.at(0, 0) == 1);
    CHECK(cm.at(1, 0) == 1);
    CHECK(cm.at(1, 1) == 1);
    CHECK(cm.at(0, 1) == 0);
    CHECK(cm.total() == 3);
  }

  TEST_CASE("diagonal, all-ignore, absent classes, out of range") {
    LabelMap gt(2, 5, 0), pred(2, 5, 0);
    ConfusionMatrix cm(3);
    cm.accumulate(pred, gt);
    CHECK(cm.at(0, 0) == 10);
    CHECK(miou(cm) == 1.0);
    CHECK(pixel_accuracy(cm) == 1.0);
    ConfusionMatrix empty(3);
    empty.accumulate(pred, LabelMap(2, 5, kIgnoreLabel));
    CHECK(empty.total() == 0);
    CHECK_THROWS_AS(miou(empty), std::domain_error);
    CHECK(!cm.class_iou()[2].has_value());
    CHECK_THROWS_AS(cm.accumulate(LabelMap(2, 5, 7), gt), std::out_of_range);
  }

  TEST_CASE("agrees with brute force on 100 random map pairs") {
    std::mt19937_64 rng(31);
    for (int t = 0; t < 100; ++t) {
      const int C = 2 + t % 6;
      const auto gt = oracle::random_labels(7 + t % 5, 9, C, rng, 0.1);
      const auto pred = oracle::random_labels(7 + t % 5, 9, C, rng);
      ConfusionMatrix cm(C);
      cm.accumulate(pred, gt);
      CHECK(miou(cm) == oracle::brute_miou(pred, gt, C));
      CHECK(pixel_accuracy(cm) == oracle::brute_accuracy(pred, gt));
    }
  }

  TEST_CASE("merge is order independent") {
    std::mt19937_64 rng(32);
    ConfusionMatrix a(4), b(4), ab(4), ba(4);
    const auto g1 = oracle::random_labels(5, 5, 4, rng), p1 = oracle::random_labels(5, 5, 4, rng);
    const auto g2 = oracle::random_labels(5, 5, 4, rng), p2 = oracle::random_labels(5, 5, 4, rng);
    a.accumulate(p1, g1);
    b.accumulate(p2, g2);
    ab.merge(a);
    ab.merge(b);
    ba.merge(b);
    ba.merge(a);
    CHECK(ab == ba);
  }
}

TEST_SUITE("image_io") {
  TEST_CASE("png and base64 round trips are exact") {
    std::mt19937_64 rng(41);
    Raster r{5, 3, 3, {}};
    for (int i = 0; i < 45; ++i) r.pixels.push_back(static_cast<std::uint8_t>(rng()));
    const Raster back = decode_png(encode_png(r));
    CHECK(back.pixels == r.pixels);
    CHECK(back.width == 5);
    const std::vector<std::uint8_t> bytes{0, 1, 2, 250, 255, 7, 8};
    for (std::size_t n = 0; n <= bytes.size(); ++n) {
      std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + n);
      CHECK(base64_decode(base64_encode(part)) == part);
    }
    CHECK(base64_encode(std::vector<std::uint8_t>{'M', 'a', 'n'}) == "TWFu");
  }

  TEST_CASE("garbage is not a png") {
    const std::vector<std::uint8_t> junk{1, 2, 3, 4, 5};
    CHECK_THROWS_AS(decode_png(junk), ImageDecodeError);
    CHECK_THROWS_AS(base64_decode("@@@@"), std::invalid_argument);
  }
}

TEST_SUITE("shapes_dataset") {
  TEST_CASE("scenes are deterministic in seed and index") {
    SceneConfig cfg;
    const Scene a = generate_scene(cfg, 17), b = generate_scene(cfg, 17), c = generate_scene(cfg, 18);
    CHECK(a.image == b.image);
    CHECK(a.labels == b.labels);
    CHECK(!(a.labels == c.labels && a.image == c.image));
    cfg.seed = 1;
    CHECK(!(generate_scene(cfg, 17).image == a.image));
  }

  TEST_CASE("no objects leaves only background strata") {
    SceneConfig cfg;
    cfg.min_objects = cfg.max_objects = 0;
    for (int i = 0; i < 10; ++i) {
      for (int v : generate_scene(cfg, i).labels.labels) CHECK((v == 0 || v == 1));
    }
  }

  TEST_CASE("label histogram matches the placement log") {
    SceneConfig cfg;
    for (int i = 0; i < 50; ++i) {
      const Scene s = generate_scene(cfg, i);
      std::map<int, int> hist;
      for (int v : s.labels.labels) ++hist[v];
      std::map<int, int> expected;
      int outline = 0;
      for (const auto& p : s.placements) {
        expected[p.class_id] += p.interior_pixels;
        outline += p.outline_pixels;
        CHECK(p.interior_pixels >= cfg.min_region_pixels);
      }
      for (int c = 2; c < cfg.num_classes; ++c) CHECK(hist[c] == expected[c]);
      CHECK(hist[kIgnoreLabel] == outline);
    }
  }

  TEST_CASE("every class appears in at least 5% of 1000 scenes") {
    SceneConfig cfg;
    std::vector<int> seen(cfg.num_classes, 0);
    for (int i = 0; i < 1000; ++i) {
      std::set<int> present;
      for (int v : generate_scene(cfg, i).labels.labels) {
        if (v != kIgnoreLabel) present.insert(v);
      }
      for (int c : present) ++seen[c];
    }
    for (int c = 0; c < cfg.num_classes; ++c) {
      CAPTURE(c);
      CHECK(seen[c] >= 50);
    }
  }

  TEST_CASE("write then read round trips and halves are disjoint") {
    const auto dir = temp_dir("data");
    SceneConfig cfg;
    const Dataset d = build_dataset(cfg, 12, 4);
    write_dataset(d, dir);
    const Dataset back = read_dataset(dir);
    REQUIRE(back.train_a.size() == 6);
    REQUIRE(back.train_b.size() == 6);
    REQUIRE(back.test.size() == 4);
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(back.train_a[i].image == d.train_a[i].image);
      CHECK(back.train_b[i].labels == d.train_b[i].labels);
    }
    std::set<std::uint64_t> a;
    for (const auto& s : back.train_a) a.insert(s.index);
    for (const auto& s : back.train_b) CHECK(a.count(s.index) == 0);
    const auto manifest = nlohmann::json::parse(std::ifstream(dir / "manifest.json"));
    CHECK(manifest.at("confusable_pairs").size() >= 1);
    fs::remove(dir / "labels" / "test" / (std::to_string(d.test[0].index) + ".png"));
    CHECK_THROWS(read_dataset(dir));
    {
      std::ofstream(dir / "manifest.json") << "{ not json";
    }
    CHECK_THROWS(read_dataset(dir));
  }

  TEST_CASE("config validation") {
    SceneConfig cfg;
    cfg.num_classes = 3;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = SceneConfig{};
    cfg.max_objects = 1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    CHECK(SceneConfig{}.confusable_pairs().size() >= 2);
  }
}
