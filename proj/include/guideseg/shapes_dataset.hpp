#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json_fwd.hpp>
#include <string>
#include <utility>
#include <vector>

#include "guideseg/volume.hpp"

namespace guideseg {

/// Full class list of the shapes world. Classes 0 and 1 are the background
/// strata; (sky, cloud) and (sand, mud) are the declared confusable pairs.
inline const std::vector<std::string>& shapes_class_names() {
  static const std::vector<std::string> names = {"sky", "grass", "cloud", "sand", "mud",
                                                 "ball", "box", "tree", "wall", "stone"};
  return names;
}

struct SceneConfig {
  int height = 64;
  int width = 64;
  int num_classes = 10;
  int min_objects = 2;
  int max_objects = 4;
  int min_region_pixels = 20;
  std::uint64_t seed = 0;

  void validate() const;
  std::vector<std::string> class_names() const;
  /// Pairs of class ids that differ only in subtle color/texture.
  std::vector<std::pair<int, int>> confusable_pairs() const;
};

void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);

struct PlacementRecord {
  int class_id = 0;
  int interior_pixels = 0;  // labelled with class_id
  int outline_pixels = 0;   // labelled ignore
};

struct Scene {
  Image image;  // values are multiples of 1/255 so PNG storage is lossless
  LabelMap labels;
  std::vector<PlacementRecord> placements;
};

/// Deterministic in (cfg.seed, index).
Scene generate_scene(const SceneConfig& cfg, std::uint64_t index);

struct Sample {
  std::uint64_t index = 0;
  Image image;
  LabelMap labels;
};

struct Dataset {
  SceneConfig config;
  std::vector<Sample> train_a;  // backbone pre-training half
  std::vector<Sample> train_b;  // guide training half
  std::vector<Sample> test;
};

/// Scenes 0..n_train-1 form the training split (first half A, second half B);
/// scenes n_train..n_train+n_test-1 form the test split.
Dataset build_dataset(const SceneConfig& cfg, int n_train, int n_test);

/// images/{split}/{index}.png, labels/{split}/{index}.png, manifest.json.
void write_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace guideseg
