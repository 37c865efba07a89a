#include "guideseg/shapes_dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <nlohmann/json.hpp>
#include <random>

#include "guideseg/image_io.hpp"

namespace guideseg {

namespace {

constexpr int kSky = 0, kGrass = 1, kCloud = 2, kSand = 3, kMud = 4, kBall = 5, kBox = 6,
              kTree = 7, kWall = 8, kStone = 9;

using Rgb = std::array<float, 3>;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

class SceneRng {
 public:
  explicit SceneRng(std::uint64_t seed) : engine_(seed) {}
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  double normal(double sigma) { return std::normal_distribution<double>(0.0, sigma)(engine_); }
  Rgb jitter(const Rgb& base, double amount) {
    Rgb out;
    for (int c = 0; c < 3; ++c) out[c] = static_cast<float>(base[c] + uniform(-amount, amount));
    return out;
  }

 private:
  std::mt19937_64 engine_;
};

struct Mask {
  int height, width;
  std::vector<std::uint8_t> on;
  Mask(int h, int w) : height(h), width(w), on(static_cast<std::size_t>(h) * w, 0) {}
  std::uint8_t at(int y, int x) const { return on[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int y, int x) { return on[static_cast<std::size_t>(y) * width + x]; }
};

Mask rasterize(int H, int W, const std::function<bool(double, double)>& inside) {
  Mask m(H, W);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) m.at(y, x) = inside(y + 0.5, x + 0.5) ? 1 : 0;
  }
  return m;
}

Mask shape_for(int cls, int H, int W, int horizon, SceneRng& rng) {
  auto ellipse = [&](double cy, double cx, double ry, double rx) {
    return rasterize(H, W, [=](double y, double x) {
      const double dy = (y - cy) / ry, dx = (x - cx) / rx;
      return dy * dy + dx * dx <= 1.0;
    });
  };
  auto rect = [&](double cy, double cx, double hh, double hw) {
    return rasterize(H, W, [=](double y, double x) {
      return std::abs(y - cy) <= hh && std::abs(x - cx) <= hw;
    });
  };
  auto ground_y = [&](double r) { return rng.uniform(std::min(horizon + r * 0.5, H - r - 1.0), H - r - 1.0); };
  switch (cls) {
    case kCloud: {
      const double rx = rng.uniform(6, 12), ry = rng.uniform(4, 7);
      const double cy = rng.uniform(ry + 1, std::max(ry + 1.5, horizon - ry * 0.5));
      return ellipse(cy, rng.uniform(rx + 1, W - rx - 1), ry, rx);
    }
    case kSand:
    case kMud: {
      const double rx = rng.uniform(6, 12), ry = rng.uniform(4, 8);
      return ellipse(ground_y(ry), rng.uniform(rx + 1, W - rx - 1), ry, rx);
    }
    case kBall: {
      const double r = rng.uniform(4, 8);
      return ellipse(rng.uniform(r + 1, H - r - 1), rng.uniform(r + 1, W - r - 1), r, r);
    }
    case kBox: {
      const double h = rng.uniform(4, 8);
      return rect(rng.uniform(h + 1, H - h - 1), rng.uniform(h + 1, W - h - 1), h, h);
    }
    case kTree: {
      const double h = rng.uniform(10, 18);
      const double cy = ground_y(h * 0.5), cx = rng.uniform(h * 0.5 + 1, W - h * 0.5 - 1);
      return rasterize(H, W, [=](double y, double x) {
        const double top = cy - h / 2, bottom = cy + h / 2;
        if (y < top || y > bottom) return false;
        const double half = (y - top) / h * (h / 2);
        return std::abs(x - cx) <= half;
      });
    }
    case kWall: {
      const double hw = rng.uniform(6, 11), hh = rng.uniform(4, 7);
      return rect(ground_y(hh), rng.uniform(hw + 1, W - hw - 1), hh, hw);
    }
    case kStone:
    default: {
      const double rx = rng.uniform(4, 8), ry = rng.uniform(3, 6);
      return ellipse(ground_y(ry), rng.uniform(rx + 1, W - rx - 1), ry, rx);
    }
  }
}

struct ObjectStyle {
  Rgb base;
  double jitter;
  double noise;
};

ObjectStyle style_for(int cls, const Rgb& sky) {
  switch (cls) {
    case kCloud: return {{sky[0] + 0.09f, sky[1] + 0.07f, sky[2] + 0.03f}, 0.03, 0.03};
    case kSand: return {{0.80f, 0.68f, 0.46f}, 0.07, 0.05};
    case kMud: return {{0.73f, 0.61f, 0.41f}, 0.07, 0.05};
    case kBall: return {{0.85f, 0.18f, 0.15f}, 0.06, 0.02};
    case kBox: return {{0.55f, 0.28f, 0.68f}, 0.06, 0.02};
    case kTree: return {{0.10f, 0.34f, 0.12f}, 0.04, 0.03};
    case kWall: return {{0.62f, 0.60f, 0.58f}, 0.05, 0.02};
    case kStone:
    default: return {{0.48f, 0.48f, 0.52f}, 0.05, 0.06};
  }
}

float quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

}  // namespace

void SceneConfig::validate() const {
  if (num_classes < 4 || num_classes > static_cast<int>(shapes_class_names().size())) {
    throw std::invalid_argument("num_classes must be in [4, 10]");
  }
  if (height < 16 || width < 16) throw std::invalid_argument("scene size must be at least 16x16");
  if (min_objects < 0 || max_objects < min_objects) throw std::invalid_argument("bad object range");
  if (min_region_pixels < 0) throw std::invalid_argument("min_region_pixels must be >= 0");
}

std::vector<std::string> SceneConfig::class_names() const {
  const auto& all = shapes_class_names();
  return {all.begin(), all.begin() + num_classes};
}

std::vector<std::pair<int, int>> SceneConfig::confusable_pairs() const {
  std::vector<std::pair<int, int>> pairs{{kSky, kCloud}};
  if (num_classes > kMud) pairs.emplace_back(kSand, kMud);
  return pairs;
}

void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = nlohmann::json{{"height", c.height},
                     {"width", c.width},
                     {"num_classes", c.num_classes},
                     {"min_objects", c.min_objects},
                     {"max_objects", c.max_objects},
                     {"min_region_pixels", c.min_region_pixels},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
  SceneConfig d;
  c.height = j.value("height", d.height);
  c.width = j.value("width", d.width);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.min_objects = j.value("min_objects", d.min_objects);
  c.max_objects = j.value("max_objects", d.max_objects);
  c.min_region_pixels = j.value("min_region_pixels", d.min_region_pixels);
  c.seed = j.value("seed", d.seed);
}

Scene generate_scene(const SceneConfig& cfg, std::uint64_t index) {
  cfg.validate();
  const int H = cfg.height, W = cfg.width;
  SceneRng rng(splitmix64(splitmix64(cfg.seed) ^ index));

  const int horizon = rng.integer(static_cast<int>(H * 0.35), static_cast<int>(H * 0.65));
  const Rgb sky = rng.jitter({0.45f, 0.65f, 0.90f}, 0.06);
  const Rgb grass = rng.jitter({0.30f, 0.58f, 0.25f}, 0.06);

  std::vector<double> canvas(static_cast<std::size_t>(3) * H * W);
  auto px = [&](int c, int y, int x) -> double& {
    return canvas[(static_cast<std::size_t>(c) * H + y) * W + x];
  };
  Scene scene;
  scene.labels = LabelMap(H, W);
  for (int y = 0; y < H; ++y) {
    const bool upper = y < horizon;
    const double shade = upper ? 0.10 * y / std::max(1, horizon) : 0.0;
    for (int x = 0; x < W; ++x) {
      const Rgb& base = upper ? sky : grass;
      const double tex = upper ? 0.0 : rng.normal(0.04);
      for (int c = 0; c < 3; ++c) px(c, y, x) = base[c] + shade + tex;
      scene.labels.at(y, x) = upper ? kSky : kGrass;
    }
  }

  Mask occupied(H, W);
  const int n_objects = rng.integer(cfg.min_objects, cfg.max_objects);
  for (int n = 0; n < n_objects; ++n) {
    const int cls = rng.integer(2, cfg.num_classes - 1);
    for (int attempt = 0; attempt < 20; ++attempt) {
      const Mask m = shape_for(cls, H, W, horizon, rng);
      bool clash = false;
      int area = 0;
      for (int y = 0; y < H && !clash; ++y) {
        for (int x = 0; x < W; ++x) {
          if (!m.at(y, x)) continue;
          ++area;
          for (int dy = -1; dy <= 1 && !clash; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = y + dy, xx = x + dx;
              if (yy >= 0 && yy < H && xx >= 0 && xx < W && occupied.at(yy, xx)) {
                clash = true;
                break;
              }
            }
          }
        }
      }
      if (clash || area == 0) continue;
      std::vector<std::pair<int, int>> interior, outline;
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          if (!m.at(y, x)) continue;
          bool edge = false;
          const int ny[4] = {y - 1, y + 1, y, y};
          const int nx[4] = {x, x, x - 1, x + 1};
          for (int k = 0; k < 4; ++k) {
            if (ny[k] >= 0 && ny[k] < H && nx[k] >= 0 && nx[k] < W && !m.at(ny[k], nx[k])) edge = true;
          }
          (edge ? outline : interior).emplace_back(y, x);
        }
      }
      if (static_cast<int>(interior.size()) < std::max(1, cfg.min_region_pixels)) continue;

      const ObjectStyle style = style_for(cls, sky);
      const Rgb color = rng.jitter(style.base, style.jitter);
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          if (!m.at(y, x)) continue;
          occupied.at(y, x) = 1;
          double stripe = 0.0;
          if (cls == kWall && y % 3 == 0) stripe = -0.12;
          const double tex = rng.normal(style.noise);
          for (int c = 0; c < 3; ++c) px(c, y, x) = color[c] + stripe + tex;
        }
      }
      for (auto [y, x] : interior) scene.labels.at(y, x) = cls;
      for (auto [y, x] : outline) scene.labels.at(y, x) = kIgnoreLabel;
      scene.placements.push_back(
          {cls, static_cast<int>(interior.size()), static_cast<int>(outline.size())});
      break;
    }
  }

  scene.image = Image(3, H, W);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) scene.image.at(c, y, x) = quantize(px(c, y, x) + rng.normal(0.02));
    }
  }
  return scene;
}

Dataset build_dataset(const SceneConfig& cfg, int n_train, int n_test) {
  if (n_train < 2 || n_test < 0) throw std::invalid_argument("need n_train >= 2 and n_test >= 0");
  Dataset data;
  data.config = cfg;
  const int half = n_train / 2;
  for (int i = 0; i < n_train + n_test; ++i) {
    Scene s = generate_scene(cfg, static_cast<std::uint64_t>(i));
    Sample sample{static_cast<std::uint64_t>(i), std::move(s.image), std::move(s.labels)};
    if (i < half) {
      data.train_a.push_back(std::move(sample));
    } else if (i < n_train) {
      data.train_b.push_back(std::move(sample));
    } else {
      data.test.push_back(std::move(sample));
    }
  }
  return data;
}

namespace {

std::vector<std::uint64_t> indices_of(const std::vector<Sample>& v) {
  std::vector<std::uint64_t> out;
  for (const auto& s : v) out.push_back(s.index);
  return out;
}

std::string file_name(std::uint64_t index) { return std::to_string(index) + ".png"; }

}  // namespace

void write_dataset(const Dataset& data, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  for (const char* split : {"train", "test"}) {
    fs::create_directories(dir / "images" / split);
    fs::create_directories(dir / "labels" / split);
  }
  auto dump = [&](const std::vector<Sample>& samples, const char* split) {
    for (const auto& s : samples) {
      write_png(dir / "images" / split / file_name(s.index), image_to_raster(s.image));
      write_png(dir / "labels" / split / file_name(s.index), labels_to_raster(s.labels));
    }
  };
  dump(data.train_a, "train");
  dump(data.train_b, "train");
  dump(data.test, "test");

  nlohmann::json manifest;
  manifest["class_names"] = data.config.class_names();
  nlohmann::json pairs = nlohmann::json::array();
  for (auto [a, b] : data.config.confusable_pairs()) pairs.push_back({a, b});
  manifest["confusable_pairs"] = pairs;
  manifest["seed"] = data.config.seed;
  manifest["scene_config"] = data.config;
  manifest["ignore_label"] = kIgnoreLabel;
  auto train = indices_of(data.train_a);
  const auto b = indices_of(data.train_b);
  train.insert(train.end(), b.begin(), b.end());
  manifest["splits"] = {{"train", train},
                        {"train_a", indices_of(data.train_a)},
                        {"train_b", b},
                        {"test", indices_of(data.test)}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) {
    throw std::runtime_error("missing " + (dir / "manifest.json").string() +
                             " (run `guideseg gen-data --out " + dir.string() + "` first)");
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("corrupt manifest: " + std::string(e.what()));
  }
  Dataset data;
  try {
    data.config = manifest.at("scene_config").get<SceneConfig>();
    auto load = [&](const std::string& key, const char* split) {
      std::vector<Sample> out;
      for (auto idx : manifest.at("splits").at(key).get<std::vector<std::uint64_t>>()) {
        Sample s;
        s.index = idx;
        s.image = raster_to_image(read_png(dir / "images" / split / file_name(idx)));
        s.labels = raster_to_labels(read_png(dir / "labels" / split / file_name(idx)));
        out.push_back(std::move(s));
      }
      return out;
    };
    data.train_a = load("train_a", "train");
    data.train_b = load("train_b", "train");
    data.test = load("test", "test");
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("corrupt manifest: " + std::string(e.what()));
  }
  return data;
}

}  // namespace guideseg
