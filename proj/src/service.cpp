#include "guideseg/service.hpp"

#include <httplib.h>

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <random>
#include <set>

#include "guideseg/heatmap.hpp"
#include "guideseg/image_io.hpp"
#include "guideseg/metrics.hpp"

namespace guideseg {

namespace {

constexpr int kSchemaVersion = 1;

const std::vector<std::array<int, 3>> kPalette = {
    {70, 130, 230}, {60, 170, 60},  {200, 220, 245}, {230, 200, 120}, {140, 100, 60},
    {220, 40, 40},  {150, 70, 190}, {20, 90, 30},    {160, 160, 160}, {90, 90, 110}};

nlohmann::json with_schema(nlohmann::json body) {
  body["schema_version"] = kSchemaVersion;
  return body;
}

std::string now_iso8601() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::vector<std::uint8_t> as_bytes(const std::string& s) { return {s.begin(), s.end()}; }

double l2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

nlohmann::json params_summary(const GuidingParams& p) {
  double max_abs = 0.0;
  for (double x : p.flatten()) max_abs = std::max(max_abs, std::abs(x));
  return {{"alpha_l2", l2(p.alpha)},
          {"beta_l2", l2(p.beta)},
          {"gamma_s_l2", l2(p.gamma_s)},
          {"gamma_b_l2", l2(p.gamma_b)},
          {"max_abs", max_abs}};
}

int count_changed(const LabelMap& a, const LabelMap& b) {
  int n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a.labels[i] != b.labels[i];
  return n;
}

}  // namespace

ApiResponse api_error(int status, const std::string& code, const std::string& message) {
  return {status, with_schema({{"error", {{"code", code}, {"message", message}}}})};
}

nlohmann::json encode_rle(const LabelMap& labels) {
  nlohmann::json runs = nlohmann::json::array();
  std::size_t i = 0;
  while (i < labels.size()) {
    std::size_t j = i;
    while (j < labels.size() && labels.labels[j] == labels.labels[i]) ++j;
    runs.push_back(labels.labels[i]);
    runs.push_back(j - i);
    i = j;
  }
  return {{"height", labels.height}, {"width", labels.width}, {"rle", runs}};
}

LabelMap decode_rle(const nlohmann::json& j) {
  const int h = j.at("height").get<int>(), w = j.at("width").get<int>();
  const auto& runs = j.at("rle");
  if (h < 0 || w < 0 || runs.size() % 2 != 0) throw std::invalid_argument("malformed run-length label map");
  LabelMap out(h, w, 0);
  std::size_t at = 0;
  for (std::size_t k = 0; k < runs.size(); k += 2) {
    const int v = runs[k].get<int>();
    const std::size_t n = runs[k + 1].get<std::size_t>();
    if (at + n > out.size()) throw std::invalid_argument("run-length label map overflows its dimensions");
    std::fill_n(out.labels.begin() + static_cast<std::ptrdiff_t>(at), n, v);
    at += n;
  }
  if (at != out.size()) throw std::invalid_argument("run-length label map does not cover its dimensions");
  return out;
}

SessionService::SessionService(const BackboneModel& backbone, const GuideModel* guide,
                               const EmbeddingTable* table, ServiceConfig cfg)
    : backbone_(backbone), guide_(guide), table_(table), cfg_(std::move(cfg)) {
  if ((guide_ == nullptr) != (table_ == nullptr)) {
    throw std::invalid_argument("a text guide needs its embedding table");
  }
  cfg_.pixel_opt.validate();
  if (guide_) {
    split_ = guide_->split;
    mode_ = guide_->mode;
    block_ = guide_->block ? &*guide_->block : nullptr;
  } else {
    split_ = cfg_.pixel_split;
  }
  backbone.split_shape(split_);  // validates the split name
  backbone_checksum_ = backbone.checksum();
  id_salt_ = mix64(std::random_device{}() ^ (static_cast<std::uint64_t>(std::random_device{}()) << 32));
  if (cfg_.persist_dir) std::filesystem::create_directories(*cfg_.persist_dir);
}

std::size_t SessionService::session_count() const {
  std::shared_lock lock(store_mu_);
  return sessions_.size();
}

std::string SessionService::new_id() {
  std::lock_guard lock(id_mu_);
  char buf[33];
  const std::uint64_t a = mix64(id_salt_ ^ ++id_counter_);
  const std::uint64_t b = mix64(a ^ id_salt_);
  std::snprintf(buf, sizeof(buf), "%016llx%016llx", static_cast<unsigned long long>(a),
                static_cast<unsigned long long>(b));
  return buf;
}

std::shared_ptr<SessionService::Session> SessionService::find(const std::string& id) {
  std::shared_lock lock(store_mu_);
  auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

void SessionService::insert(const std::shared_ptr<Session>& s) {
  std::unique_lock lock(store_mu_);
  sessions_[s->id] = s;
}

nlohmann::json SessionService::legend() const {
  nlohmann::json out = nlohmann::json::array();
  const auto& names = backbone_.class_names();
  for (std::size_t c = 0; c < names.size(); ++c) {
    const auto& col = kPalette[c % kPalette.size()];
    out.push_back({{"id", c}, {"name", names[c]}, {"color", {col[0], col[1], col[2]}}});
  }
  return out;
}

nlohmann::json SessionService::prediction_body(const Session& s) const { return encode_rle(s.prediction.labels); }

void SessionService::reset_guidance(Session& s) {
  s.params = guide_ ? GuidingParams::zeros(guide_->alpha_len, guide_->beta_len, guide_->channels)
                   : zero_params_for(backbone_.split_shape(split_), mode_);
  s.hints = PixelHint{};
  s.prediction = backbone_.predict_from(s.head);
  s.turns.clear();
}

std::shared_ptr<SessionService::Session> SessionService::build_session(
    std::vector<std::uint8_t> image_png, std::optional<std::vector<std::uint8_t>> labels_png) {
  const ModelConfig& mc = backbone_.config();
  auto s = std::make_shared<Session>();
  const Raster raster = decode_png(image_png);
  s->image = raster_to_image(raster);
  if (raster.height != mc.input_height || raster.width != mc.input_width) {
    s->image = resize_image(s->image, mc.input_height, mc.input_width);
  }
  if (labels_png) {
    LabelMap truth = raster_to_labels(decode_png(*labels_png));
    if (truth.height != mc.input_height || truth.width != mc.input_width) {
      throw std::invalid_argument("labels must be " + std::to_string(mc.input_height) + "x" +
                                  std::to_string(mc.input_width));
    }
    s->truth = std::move(truth);
  }
  s->image_png = std::move(image_png);
  s->labels_png = std::move(labels_png);
  s->head = backbone_.forward_head(s->image, split_);
  s->created_at = now_iso8601();
  reset_guidance(*s);
  return s;
}

ApiResponse SessionService::create_session(const std::string& body, const std::string& content_type) {
  if (body.size() > cfg_.max_upload_bytes * 2) {
    return api_error(413, "payload_too_large", "upload exceeds " + std::to_string(cfg_.max_upload_bytes) + " bytes");
  }
  std::vector<std::uint8_t> image;
  std::optional<std::vector<std::uint8_t>> labels;
  if (content_type.rfind("application/json", 0) == 0) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
      image = base64_decode(j.at("image").get<std::string>());
      if (j.contains("labels") && !j.at("labels").is_null()) labels = base64_decode(j.at("labels").get<std::string>());
    } catch (const std::exception& e) {
      return api_error(400, "bad_request", std::string("expected {\"image\": base64 PNG}: ") + e.what());
    }
  } else {
    image = as_bytes(body);
  }
  if (image.size() > cfg_.max_upload_bytes) {
    return api_error(413, "payload_too_large", "image exceeds " + std::to_string(cfg_.max_upload_bytes) + " bytes");
  }
  std::shared_ptr<Session> s;
  try {
    s = build_session(std::move(image), std::move(labels));
  } catch (const ImageDecodeError& e) {
    return api_error(400, "undecodable_image", e.what());
  } catch (const std::invalid_argument& e) {
    return api_error(400, "bad_request", e.what());
  }
  s->id = new_id();
  insert(s);
  std::lock_guard lock(s->mu);
  persist(*s);
  return {200, with_schema({{"session_id", s->id}, {"prediction", prediction_body(*s)}, {"legend", legend()}})};
}

ApiResponse SessionService::get_session(const std::string& id) {
  auto s = find(id);
  if (!s) return api_error(404, "unknown_session", "no session " + id);
  std::lock_guard lock(s->mu);
  return {200, with_schema({{"session_id", s->id},
                            {"created_at", s->created_at},
                            {"prediction", prediction_body(*s)},
                            {"legend", legend()},
                            {"num_turns", s->turns.size()},
                            {"params", s->params}})};
}

ApiResponse SessionService::apply_text(Session& s, const std::string& text) {
  Turn turn;
  turn.kind = "text";
  turn.payload = {{"text", text}};
  nlohmann::json body;
  if (tokenize(text).empty()) {
    turn.noop = true;
    body["changed_pixels"] = 0;
  } else {
    if (!guide_) return api_error(409, "no_guide", "the service was started without a text guide");
    TextGuidance g = guide_with_text(backbone_, *guide_, *table_, s.head, text);
    turn.changed_pixels = count_changed(s.prediction.labels, g.labels);
    s.params = std::move(g.params);
    s.prediction = {std::move(g.labels), std::move(g.posteriors)};
    const ModelConfig& mc = backbone_.config();
    turn.heatmap_png = encode_png(heatmap_to_raster(g.heatmap, mc.input_height, mc.input_width));
    body["changed_pixels"] = turn.changed_pixels;
    body["heatmap_png_base64"] = base64_encode(*turn.heatmap_png);
  }
  if (s.truth) turn.miou = image_miou(s.prediction.labels, *s.truth, backbone_.num_classes());
  body["noop"] = turn.noop;
  body["prediction"] = prediction_body(s);
  body["params_summary"] = params_summary(s.params);
  body["turn_index"] = s.turns.size();
  if (turn.miou) body["miou"] = *turn.miou;
  s.turns.push_back(std::move(turn));
  persist(s);
  return {200, with_schema(std::move(body))};
}

ApiResponse SessionService::text_hint(const std::string& id, const std::string& body) {
  auto s = find(id);
  if (!s) return api_error(404, "unknown_session", "no session " + id);
  std::string text;
  try {
    const auto j = nlohmann::json::parse(body);
    text = j.value("text", std::string());
  } catch (const std::exception& e) {
    return api_error(400, "bad_request", std::string("expected {\"text\": string}: ") + e.what());
  }
  std::lock_guard lock(s->mu);
  return apply_text(*s, text);
}

ApiResponse SessionService::apply_pixel(Session& s, int x, int y, int class_id) {
  const ModelConfig& mc = backbone_.config();
  if (x < 0 || x >= mc.input_width || y < 0 || y >= mc.input_height) {
    return api_error(422, "out_of_bounds",
                     "pixel (" + std::to_string(x) + "," + std::to_string(y) + ") is outside the " +
                         std::to_string(mc.input_width) + "x" + std::to_string(mc.input_height) + " image");
  }
  if (class_id < 0 || class_id >= mc.num_classes) {
    return api_error(422, "invalid_class", "class_id " + std::to_string(class_id) + " is not in [0, " +
                                               std::to_string(mc.num_classes) + ")");
  }
  for (const Pixel& p : s.hints.positions) {
    if (p == Pixel{y, x}) return api_error(422, "duplicate_hint", "this pixel already carries a hint");
  }
  PixelHint hints = s.hints;
  hints.add({y, x}, class_id);
  GuidanceResult r;
  try {
    r = optimize_guidance(backbone_, s.head, hints, cfg_.pixel_opt, s.params, mode_, block_);
  } catch (const GuidanceDivergedError& e) {
    return api_error(500, "guidance_diverged", e.what());
  }
  const LabelMap before = s.prediction.labels;
  s.hints = std::move(hints);
  s.params = std::move(r.params);
  s.prediction = backbone_.predict_from(guided_head<float>(s.head, s.params, mode_, block_));
  Turn turn;
  turn.kind = "pixel";
  turn.payload = {{"x", x}, {"y", y}, {"class_id", class_id}};
  turn.changed_pixels = count_changed(before, s.prediction.labels);
  if (s.truth) turn.miou = image_miou(s.prediction.labels, *s.truth, backbone_.num_classes());
  nlohmann::json body{{"prediction", prediction_body(s)},
                      {"changed_pixels", turn.changed_pixels},
                      {"loss_trace", r.loss_trace},
                      {"iterations", r.iterations},
                      {"turn_index", s.turns.size()}};
  if (turn.miou) body["miou"] = *turn.miou;
  s.turns.push_back(std::move(turn));
  persist(s);
  return {200, with_schema(std::move(body))};
}

ApiResponse SessionService::pixel_hint(const std::string& id, const std::string& body) {
  auto s = find(id);
  if (!s) return api_error(404, "unknown_session", "no session " + id);
  int x = 0, y = 0, cls = 0;
  try {
    const auto j = nlohmann::json::parse(body);
    x = j.at("x").get<int>();
    y = j.at("y").get<int>();
    cls = j.at("class_id").get<int>();
  } catch (const std::exception& e) {
    return api_error(400, "bad_request", std::string("expected {\"x\", \"y\", \"class_id\"} integers: ") + e.what());
  }
  std::lock_guard lock(s->mu);
  return apply_pixel(*s, x, y, cls);
}

ApiResponse SessionService::suggest_pixel(const std::string& id) {
  auto s = find(id);
  if (!s) return api_error(404, "unknown_session", "no session " + id);
  std::lock_guard lock(s->mu);
  const std::set<Pixel> asked(s->hints.positions.begin(), s->hints.positions.end());
  try {
    const QueryPixel q = select_query_pixel(s->prediction.posteriors, asked);
    return {200, with_schema({{"x", q.pixel.second}, {"y", q.pixel.first}, {"margin", q.margin}})};
  } catch (const std::runtime_error&) {
    return api_error(409, "all_pixels_hinted", "every pixel already carries a hint");
  }
}

ApiResponse SessionService::history(const std::string& id) {
  auto s = find(id);
  if (!s) return api_error(404, "unknown_session", "no session " + id);
  std::lock_guard lock(s->mu);
  nlohmann::json turns = nlohmann::json::array();
  for (std::size_t i = 0; i < s->turns.size(); ++i) {
    const Turn& t = s->turns[i];
    nlohmann::json jt{{"index", i}, {"kind", t.kind}, {"payload", t.payload}, {"noop", t.noop},
                      {"changed_pixels", t.changed_pixels}};
    jt["miou"] = t.miou ? nlohmann::json(*t.miou) : nlohmann::json(nullptr);
    jt["heatmap_ref"] = t.heatmap_png ? nlohmann::json("/session/" + s->id + "/heatmap/" + std::to_string(i))
                                      : nlohmann::json(nullptr);
    turns.push_back(std::move(jt));
  }
  return {200, with_schema({{"session_id", s->id}, {"turns", turns}})};
}

ApiResponse SessionService::heatmap(const std::string& id, int turn) {
  auto s = find(id);
  if (!s) return api_error(404, "unknown_session", "no session " + id);
  std::lock_guard lock(s->mu);
  if (turn < 0 || turn >= static_cast<int>(s->turns.size()) || !s->turns[turn].heatmap_png) {
    return api_error(404, "unknown_heatmap", "turn " + std::to_string(turn) + " has no heatmap");
  }
  return {200, with_schema({{"turn", turn}, {"heatmap_png_base64", base64_encode(*s->turns[turn].heatmap_png)}})};
}

ApiResponse SessionService::reset(const std::string& id) {
  auto s = find(id);
  if (!s) return api_error(404, "unknown_session", "no session " + id);
  std::lock_guard lock(s->mu);
  reset_guidance(*s);
  persist(*s);
  return {200, with_schema({{"session_id", s->id}, {"prediction", prediction_body(*s)}})};
}

ApiResponse SessionService::remove(const std::string& id) {
  std::shared_ptr<Session> s;
  {
    std::unique_lock lock(store_mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) return api_error(404, "unknown_session", "no session " + id);
    s = it->second;
    sessions_.erase(it);
  }
  if (cfg_.persist_dir) std::filesystem::remove(*cfg_.persist_dir / (id + ".json"));
  return {200, with_schema({{"deleted", id}})};
}

nlohmann::json SessionService::serialize_locked(const Session& s) const {
  nlohmann::json turns = nlohmann::json::array();
  for (const Turn& t : s.turns) turns.push_back({{"kind", t.kind}, {"payload", t.payload}});
  nlohmann::json j{{"schema_version", kSchemaVersion},
                   {"session_id", s.id},
                   {"created_at", s.created_at},
                   {"image", base64_encode(s.image_png)},
                   {"turns", turns}};
  j["labels"] = s.labels_png ? nlohmann::json(base64_encode(*s.labels_png)) : nlohmann::json(nullptr);
  return j;
}

std::optional<nlohmann::json> SessionService::serialize(const std::string& id) {
  auto s = find(id);
  if (!s) return std::nullopt;
  std::lock_guard lock(s->mu);
  return serialize_locked(*s);
}

std::optional<LabelMap> SessionService::current_prediction(const std::string& id) {
  auto s = find(id);
  if (!s) return std::nullopt;
  std::lock_guard lock(s->mu);
  return s->prediction.labels;
}

void SessionService::persist(Session& s) {
  if (!cfg_.persist_dir) return;
  const auto path = *cfg_.persist_dir / (s.id + ".json");
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << serialize_locked(s).dump() << "\n";
  }
  std::filesystem::rename(tmp, path);
}

std::string SessionService::restore(const nlohmann::json& persisted) {
  std::optional<std::vector<std::uint8_t>> labels;
  if (persisted.contains("labels") && !persisted.at("labels").is_null()) {
    labels = base64_decode(persisted.at("labels").get<std::string>());
  }
  auto s = build_session(base64_decode(persisted.at("image").get<std::string>()), std::move(labels));
  const std::string wanted = persisted.value("session_id", std::string());
  s->id = (!wanted.empty() && !find(wanted)) ? wanted : new_id();
  s->created_at = persisted.value("created_at", s->created_at);
  std::lock_guard lock(s->mu);
  for (const auto& t : persisted.at("turns")) {
    const std::string kind = t.at("kind").get<std::string>();
    const auto& p = t.at("payload");
    ApiResponse r;
    if (kind == "text") {
      r = apply_text(*s, p.at("text").get<std::string>());
    } else if (kind == "pixel") {
      r = apply_pixel(*s, p.at("x").get<int>(), p.at("y").get<int>(), p.at("class_id").get<int>());
    } else {
      throw std::invalid_argument("unknown turn kind '" + kind + "' in persisted session");
    }
    if (r.status != 200) throw std::runtime_error("replaying turn failed: " + r.body.dump());
  }
  insert(s);
  return s->id;
}

int restore_persisted_sessions(SessionService& service) {
  const auto& dir = service.config().persist_dir;
  if (!dir || !std::filesystem::exists(*dir)) return 0;
  int n = 0;
  for (const auto& entry : std::filesystem::directory_iterator(*dir)) {
    if (entry.path().extension() != ".json") continue;
    std::ifstream in(entry.path());
    const auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("image") || !j.contains("turns")) continue;
    service.restore(j);
    ++n;
  }
  return n;
}

void register_routes(httplib::Server& server, SessionService& service) {
  const std::string origin = service.config().cors_origin;
  auto send = [origin](httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    if (!origin.empty()) res.set_header("Access-Control-Allow-Origin", origin);
    res.set_content(r.body.dump(), "application/json");
  };
  auto guarded = [send](auto fn) {
    return [send, fn](const httplib::Request& req, httplib::Response& res) {
      try {
        send(res, fn(req));
      } catch (const std::exception& e) {
        send(res, api_error(500, "internal_error", e.what()));
      }
    };
  };
  const std::string id = "/session/([^/]+)";

  server.set_payload_max_length(service.config().max_upload_bytes * 2 + (1 << 20));
  server.Post("/session", guarded([&](const httplib::Request& req) {
                return service.create_session(req.body, req.get_header_value("Content-Type"));
              }));
  server.Get(id, guarded([&](const httplib::Request& req) { return service.get_session(req.matches[1]); }));
  server.Post(id + "/hint/text",
              guarded([&](const httplib::Request& req) { return service.text_hint(req.matches[1], req.body); }));
  server.Post(id + "/hint/pixel",
              guarded([&](const httplib::Request& req) { return service.pixel_hint(req.matches[1], req.body); }));
  server.Get(id + "/suggest-pixel",
             guarded([&](const httplib::Request& req) { return service.suggest_pixel(req.matches[1]); }));
  server.Get(id + "/history", guarded([&](const httplib::Request& req) { return service.history(req.matches[1]); }));
  server.Get(id + "/heatmap/([0-9]+)", guarded([&](const httplib::Request& req) {
               return service.heatmap(req.matches[1], std::stoi(req.matches[2]));
             }));
  server.Post(id + "/reset", guarded([&](const httplib::Request& req) { return service.reset(req.matches[1]); }));
  server.Delete(id, guarded([&](const httplib::Request& req) { return service.remove(req.matches[1]); }));
  if (!origin.empty()) {
    server.Options(".*", [origin](const httplib::Request&, httplib::Response& res) {
      res.status = 204;
      res.set_header("Access-Control-Allow-Origin", origin);
      res.set_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
    });
  }
  server.set_error_handler([send](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    const int status = res.status;
    if (status == 413) {
      send(res, api_error(413, "payload_too_large", "request body is too large"));
    } else if (status == 404) {
      send(res, api_error(404, "not_found", "no such route"));
    } else {
      send(res, api_error(status, "http_error", "request failed with status " + std::to_string(status)));
    }
  });
}

}  // namespace guideseg
