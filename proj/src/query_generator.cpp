#include "guideseg/query_generator.hpp"

#include <algorithm>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>

namespace guideseg {

std::string to_string(QueryOp op) { return op == QueryOp::find ? "find" : "remove"; }

QueryOp parse_query_op(const std::string& s) {
  if (s == "find") return QueryOp::find;
  if (s == "remove") return QueryOp::remove;
  throw std::invalid_argument("unknown query operation '" + s + "'");
}

void QueryGenConfig::validate() const {
  if (grid_n < 1) throw std::invalid_argument("grid_n must be >= 1");
  for (QueryOp op : {QueryOp::find, QueryOp::remove}) {
    auto it = templates.find(op);
    if (it == templates.end() || it->second.empty()) {
      throw std::invalid_argument("no template for operation '" + to_string(op) + "'");
    }
  }
  if (phrases.rows.size() != 3 || phrases.cols.size() != 3 || phrases.cells.size() != 3) {
    throw std::invalid_argument("phrase table needs 3 row, 3 column and 3x3 cell phrases");
  }
  for (const auto& r : phrases.cells) {
    if (r.size() != 3) throw std::invalid_argument("phrase table needs 3x3 cell phrases");
  }
}

int QueryGenConfig::region_threshold(int height, int width) const {
  if (min_region_pixels >= 0) return min_region_pixels;
  return std::max(20, static_cast<int>(0.001 * height * width));
}

void to_json(nlohmann::json& j, const QueryGenConfig& c) {
  j = nlohmann::json{{"grid_n", c.grid_n},
                     {"min_region_pixels", c.min_region_pixels},
                     {"seed", c.seed},
                     {"templates",
                      {{"find", c.templates.at(QueryOp::find)},
                       {"remove", c.templates.at(QueryOp::remove)}}},
                     {"phrases",
                      {{"whole_image", c.phrases.whole_image},
                       {"rows", c.phrases.rows},
                       {"cols", c.phrases.cols},
                       {"cells", c.phrases.cells}}}};
}

void from_json(const nlohmann::json& j, QueryGenConfig& c) {
  QueryGenConfig d;
  c.grid_n = j.value("grid_n", d.grid_n);
  c.min_region_pixels = j.value("min_region_pixels", d.min_region_pixels);
  c.seed = j.value("seed", d.seed);
  c.templates = d.templates;
  if (j.contains("templates")) {
    const auto& t = j.at("templates");
    if (t.contains("find")) c.templates[QueryOp::find] = t.at("find").get<std::vector<std::string>>();
    if (t.contains("remove")) {
      c.templates[QueryOp::remove] = t.at("remove").get<std::vector<std::string>>();
    }
  }
  c.phrases = d.phrases;
  if (j.contains("phrases")) {
    const auto& p = j.at("phrases");
    c.phrases.whole_image = p.value("whole_image", d.phrases.whole_image);
    c.phrases.rows = p.value("rows", d.phrases.rows);
    c.phrases.cols = p.value("cols", d.phrases.cols);
    c.phrases.cells = p.value("cells", d.phrases.cells);
  }
  c.validate();
}

QueryGenConfig load_query_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read query config " + path.string());
  return nlohmann::json::parse(in).get<QueryGenConfig>();
}

void to_json(nlohmann::json& j, const QuerySpec& q) {
  nlohmann::json cells = nlohmann::json::array();
  for (auto [r, c] : q.cells) cells.push_back({r, c});
  j = nlohmann::json{{"operation", to_string(q.operation)},
                     {"class_id", q.class_id},
                     {"class_name", q.class_name},
                     {"cells", cells},
                     {"cell_improvement", q.cell_improvement},
                     {"improvement", q.improvement}};
}

void from_json(const nlohmann::json& j, QuerySpec& q) {
  q.operation = parse_query_op(j.at("operation").get<std::string>());
  q.class_id = j.at("class_id").get<int>();
  q.class_name = j.at("class_name").get<std::string>();
  q.cells.clear();
  for (const auto& c : j.at("cells")) q.cells.emplace_back(c.at(0).get<int>(), c.at(1).get<int>());
  q.cell_improvement = j.value("cell_improvement", std::vector<int>(q.cells.size(), 0));
  q.improvement = j.at("improvement").get<int>();
}

std::pair<int, int> grid_span(int extent, int n, int i) {
  return {i * extent / n, (i + 1) * extent / n};
}

std::vector<QuerySpec> enumerate_errors(const LabelMap& pred, const LabelMap& gt,
                                        const QueryGenConfig& cfg,
                                        const std::vector<std::string>& class_names) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw std::invalid_argument("prediction and ground truth shapes differ");
  }
  cfg.validate();
  const int C = static_cast<int>(class_names.size());
  const int N = cfg.grid_n;
  const int threshold = cfg.region_threshold(gt.height, gt.width);
  // [op][class] -> candidate under construction
  std::vector<std::vector<QuerySpec>> acc(2, std::vector<QuerySpec>(C));
  std::vector<int> missing(C), wrong(C);
  for (int r = 0; r < N; ++r) {
    const auto [y0, y1] = grid_span(gt.height, N, r);
    for (int c = 0; c < N; ++c) {
      const auto [x0, x1] = grid_span(gt.width, N, c);
      std::fill(missing.begin(), missing.end(), 0);
      std::fill(wrong.begin(), wrong.end(), 0);
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
          const int g = gt.at(y, x);
          const int p = pred.at(y, x);
          if (g == kIgnoreLabel || g == p) continue;
          if (g >= 0 && g < C) ++missing[g];
          if (p >= 0 && p < C) ++wrong[p];
        }
      }
      for (int k = 0; k < C; ++k) {
        for (int op = 0; op < 2; ++op) {
          const int count = op == 0 ? missing[k] : wrong[k];
          if (count <= 0 || count < threshold) continue;
          QuerySpec& q = acc[op][k];
          q.cells.emplace_back(r, c);
          q.cell_improvement.push_back(count);
          q.improvement += count;
        }
      }
    }
  }
  std::vector<QuerySpec> out;
  for (int op = 0; op < 2; ++op) {
    for (int k = 0; k < C; ++k) {
      QuerySpec& q = acc[op][k];
      if (q.improvement <= 0) continue;
      q.operation = op == 0 ? QueryOp::find : QueryOp::remove;
      q.class_id = k;
      q.class_name = class_names[k];
      out.push_back(std::move(q));
    }
  }
  return out;
}

QuerySpec sample_query(const std::vector<QuerySpec>& candidates, std::mt19937_64& rng) {
  if (candidates.empty()) throw std::invalid_argument("cannot sample from an empty candidate list");
  long long total = 0;
  for (const auto& q : candidates) {
    if (q.improvement <= 0) throw std::invalid_argument("candidate with non-positive improvement");
    total += q.improvement;
  }
  long long draw = std::uniform_int_distribution<long long>(0, total - 1)(rng);
  for (const auto& q : candidates) {
    if (draw < q.improvement) return q;
    draw -= q.improvement;
  }
  return candidates.back();
}

namespace {

int third(int i, int n) { return std::min(2, i * 3 / n); }

void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

std::string squeeze_spaces(const std::string& s) {
  std::string out;
  bool space = true;
  for (char ch : s) {
    if (ch == ' ') {
      if (!space) out += ch;
      space = true;
    } else {
      out += ch;
      space = false;
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

std::string fill_template(const std::string& tmpl, const std::string& cls, const std::string& loc) {
  std::string text = tmpl;
  replace_all(text, "{c}", cls);
  replace_all(text, "{loc}", loc);
  return squeeze_spaces(text);
}

}  // namespace

std::string location_phrase(const QuerySpec& spec, const QueryGenConfig& cfg) {
  const int N = cfg.grid_n;
  const auto& ph = cfg.phrases;
  if (spec.cells.empty() || static_cast<int>(spec.cells.size()) == N * N) return ph.whole_image;
  const std::set<GridCell> cells(spec.cells.begin(), spec.cells.end());
  if (static_cast<int>(cells.size()) == N && N > 1) {
    const int r0 = spec.cells.front().first;
    const int c0 = spec.cells.front().second;
    if (std::all_of(cells.begin(), cells.end(), [&](const GridCell& g) { return g.first == r0; })) {
      return ph.rows[third(r0, N)];
    }
    if (std::all_of(cells.begin(), cells.end(), [&](const GridCell& g) { return g.second == c0; })) {
      return ph.cols[third(c0, N)];
    }
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < spec.cells.size(); ++i) {
    const int a = i < spec.cell_improvement.size() ? spec.cell_improvement[i] : 0;
    const int b = best < spec.cell_improvement.size() ? spec.cell_improvement[best] : 0;
    if (a > b) best = i;
  }
  const auto [r, c] = spec.cells[best];
  return ph.cells[third(r, N)][third(c, N)];
}

std::string render_text(const QuerySpec& spec, const QueryGenConfig& cfg, std::mt19937_64& rng) {
  auto it = cfg.templates.find(spec.operation);
  if (it == cfg.templates.end() || it->second.empty()) {
    throw std::invalid_argument("no template for operation '" + to_string(spec.operation) + "'");
  }
  const auto& options = it->second;
  const std::size_t pick =
      std::uniform_int_distribution<std::size_t>(0, options.size() - 1)(rng);
  return fill_template(options[pick], spec.class_name, location_phrase(spec, cfg));
}

std::optional<std::pair<QueryOp, int>> parse_query_text(const std::string& text,
                                                        const QueryGenConfig& cfg,
                                                        const std::vector<std::string>& class_names) {
  std::vector<std::string> locations{cfg.phrases.whole_image, ""};
  locations.insert(locations.end(), cfg.phrases.rows.begin(), cfg.phrases.rows.end());
  locations.insert(locations.end(), cfg.phrases.cols.begin(), cfg.phrases.cols.end());
  for (const auto& row : cfg.phrases.cells) locations.insert(locations.end(), row.begin(), row.end());
  for (const auto& [op, options] : cfg.templates) {
    for (const auto& tmpl : options) {
      for (std::size_t k = 0; k < class_names.size(); ++k) {
        for (const auto& loc : locations) {
          if (fill_template(tmpl, class_names[k], loc) == text) {
            return std::make_pair(op, static_cast<int>(k));
          }
        }
      }
    }
  }
  return std::nullopt;
}

std::vector<double> build_weight_map(const LabelMap& pred, const LabelMap& gt, const QuerySpec& spec) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw std::invalid_argument("prediction and ground truth shapes differ");
  }
  std::vector<double> w(gt.size(), 0.0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const int g = gt.labels[i];
    const int p = pred.labels[i];
    if (g == kIgnoreLabel) continue;
    if (p == g) {
      w[i] = 0.5;
    } else if ((spec.operation == QueryOp::find && g == spec.class_id) ||
               (spec.operation == QueryOp::remove && p == spec.class_id)) {
      w[i] = 1.0;
    }
  }
  return w;
}

}  // namespace guideseg
