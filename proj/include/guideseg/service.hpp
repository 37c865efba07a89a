#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "guideseg/backprop_guider.hpp"
#include "guideseg/language_guide.hpp"

namespace httplib {
class Server;
}

namespace guideseg {

/// Label map as {"height","width","rle":[value,count,value,count,...]} in row-major order.
nlohmann::json encode_rle(const LabelMap& labels);
/// Throws std::invalid_argument when runs do not cover height*width exactly.
LabelMap decode_rle(const nlohmann::json& j);

struct ServiceConfig {
  std::size_t max_upload_bytes = 4 << 20;
  /// One replayable JSON file per session when set.
  std::optional<std::filesystem::path> persist_dir;
  std::string cors_origin;
  GuideOptConfig pixel_opt;
  /// Split used for pixel hints when no text guide is loaded.
  std::string pixel_split = "s3";
};

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

/// Session store and request handlers, independent of the HTTP transport.
/// Every body carries {"schema_version":1}; failures are {"error":{"code","message"}}.
class SessionService {
 public:
  /// `guide`/`table` may be null, in which case text hints answer 409.
  SessionService(const BackboneModel& backbone, const GuideModel* guide, const EmbeddingTable* table,
                 ServiceConfig cfg = {});

  /// Body: raw PNG bytes, or JSON {"image": base64 PNG, "labels": optional base64 label PNG}.
  ApiResponse create_session(const std::string& body, const std::string& content_type);
  ApiResponse get_session(const std::string& id);
  ApiResponse text_hint(const std::string& id, const std::string& body);
  ApiResponse pixel_hint(const std::string& id, const std::string& body);
  ApiResponse suggest_pixel(const std::string& id);
  ApiResponse history(const std::string& id);
  ApiResponse heatmap(const std::string& id, int turn);
  ApiResponse reset(const std::string& id);
  ApiResponse remove(const std::string& id);

  /// Replayable form: image, optional labels, and the ordered turn payloads.
  std::optional<nlohmann::json> serialize(const std::string& id);
  /// Rebuilds a session by re-running every turn; returns its new id.
  std::string restore(const nlohmann::json& persisted);
  std::optional<LabelMap> current_prediction(const std::string& id);
  std::size_t session_count() const;

  const ServiceConfig& config() const { return cfg_; }
  std::uint64_t backbone_checksum() const { return backbone_checksum_; }

 private:
  struct Turn {
    std::string kind;  // "text" or "pixel"
    nlohmann::json payload;
    bool noop = false;
    std::optional<double> miou;
    int changed_pixels = 0;
    std::optional<std::vector<std::uint8_t>> heatmap_png;
  };
  struct Session {
    std::mutex mu;
    std::string id;
    std::string created_at;
    std::vector<std::uint8_t> image_png;
    std::optional<std::vector<std::uint8_t>> labels_png;
    Image image;
    std::optional<LabelMap> truth;
    HeadOutput<float> head;
    GuidingParams params;
    PixelHint hints;
    Prediction prediction;
    std::vector<Turn> turns;
  };

  std::shared_ptr<Session> find(const std::string& id);
  std::string new_id();
  std::shared_ptr<Session> build_session(std::vector<std::uint8_t> image_png,
                                         std::optional<std::vector<std::uint8_t>> labels_png);
  void insert(const std::shared_ptr<Session>& s);
  void persist(Session& s);
  void reset_guidance(Session& s);
  nlohmann::json prediction_body(const Session& s) const;
  nlohmann::json legend() const;
  ApiResponse apply_text(Session& s, const std::string& text);
  ApiResponse apply_pixel(Session& s, int x, int y, int class_id);
  nlohmann::json serialize_locked(const Session& s) const;

  const BackboneModel& backbone_;
  const GuideModel* guide_;
  const EmbeddingTable* table_;
  ServiceConfig cfg_;
  std::string split_;
  GuideMode mode_;
  const ResidualBlockWeights<float>* block_ = nullptr;
  std::uint64_t backbone_checksum_;

  mutable std::shared_mutex store_mu_;
  std::unordered_map<std::string, std::shared_ptr<Session>> sessions_;
  std::mutex id_mu_;
  std::uint64_t id_counter_ = 0;
  std::uint64_t id_salt_;
};

ApiResponse api_error(int status, const std::string& code, const std::string& message);

/// Registers every route of `service` on `server`, including CORS handling
/// when the service config names an origin.
void register_routes(httplib::Server& server, SessionService& service);

/// Loads every persisted session under cfg.persist_dir by replaying it.
int restore_persisted_sessions(SessionService& service);

}  // namespace guideseg
