#pragma once

#include <filesystem>
#include <map>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "guideseg/volume.hpp"

namespace guideseg {

enum class QueryOp { find, remove };

std::string to_string(QueryOp op);
QueryOp parse_query_op(const std::string& s);

using GridCell = std::pair<int, int>;  // (row, col)

/// Location phrases for an N x N grid. Indexing uses thirds of the grid, so the
/// table is independent of N.
struct PhraseTable {
  std::string whole_image = "in the image";
  std::vector<std::string> rows{"on the top", "in the vertical middle", "on the bottom"};
  std::vector<std::string> cols{"on the left", "in the horizontal middle", "on the right"};
  /// cells[row_third][col_third]
  std::vector<std::vector<std::string>> cells{
      {"on the top left", "on the top", "on the top right"},
      {"on the left", "in the middle", "on the right"},
      {"on the bottom left", "on the bottom", "on the bottom right"}};
};

struct QueryGenConfig {
  int grid_n = 3;
  /// Negative selects max(20, 0.1% of image pixels).
  int min_region_pixels = -1;
  std::map<QueryOp, std::vector<std::string>> templates{
      {QueryOp::find, {"find the {c} {loc}", "the {c} is missing {loc}", "there is a {c} {loc}"}},
      {QueryOp::remove, {"remove the {c} {loc}", "there is no {c} {loc}", "the {c} is wrong {loc}"}}};
  PhraseTable phrases;
  std::uint64_t seed = 0;

  void validate() const;
  int region_threshold(int height, int width) const;
};

void to_json(nlohmann::json& j, const QueryGenConfig& c);
void from_json(const nlohmann::json& j, QueryGenConfig& c);
QueryGenConfig load_query_config(const std::filesystem::path& path);

struct QuerySpec {
  QueryOp operation = QueryOp::find;
  int class_id = 0;
  std::string class_name;
  std::vector<GridCell> cells;           // sorted row-major
  std::vector<int> cell_improvement;     // parallel to cells
  int improvement = 0;

  friend bool operator==(const QuerySpec&, const QuerySpec&) = default;
};

void to_json(nlohmann::json& j, const QuerySpec& q);
void from_json(const nlohmann::json& j, QuerySpec& q);

/// Pixel rows/cols [begin, end) of grid row/col `i`.
std::pair<int, int> grid_span(int extent, int n, int i);

/// All fixable errors, one candidate per (operation, class), sorted by
/// (operation, class). Ignore-labelled ground truth never produces candidates.
std::vector<QuerySpec> enumerate_errors(const LabelMap& pred, const LabelMap& gt,
                                        const QueryGenConfig& cfg,
                                        const std::vector<std::string>& class_names);

/// Draws a candidate with probability proportional to its improvement.
QuerySpec sample_query(const std::vector<QuerySpec>& candidates, std::mt19937_64& rng);

/// Location phrase for a query's cells.
std::string location_phrase(const QuerySpec& spec, const QueryGenConfig& cfg);
std::string render_text(const QuerySpec& spec, const QueryGenConfig& cfg, std::mt19937_64& rng);

/// Recovers (operation, class id) from any rendering produced by render_text.
std::optional<std::pair<QueryOp, int>> parse_query_text(const std::string& text,
                                                        const QueryGenConfig& cfg,
                                                        const std::vector<std::string>& class_names);

/// Per-pixel loss weights: 0.5 for initially correct pixels, 1 for wrong pixels
/// the query addresses, 0 for other wrong pixels and ignore-labelled pixels.
std::vector<double> build_weight_map(const LabelMap& pred, const LabelMap& gt, const QuerySpec& spec);

}  // namespace guideseg
