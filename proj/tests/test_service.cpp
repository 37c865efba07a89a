#include <doctest.h>
#include <httplib.h>

#include <filesystem>
#include <random>
#include <thread>

#include "guideseg/image_io.hpp"
#include "guideseg/service.hpp"
#include "guideseg/shapes_dataset.hpp"
#include "oracles.hpp"

using namespace guideseg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ModelConfig tiny_config() {
  ModelConfig mc;
  mc.channel_widths = {4, 8, 16, 16};
  mc.decoder_width = 8;
  return mc;
}

struct World {
  BackboneModel backbone{tiny_config(), shapes_class_names(), 2};
  EmbeddingTable table{5, 0};
  GuideModel guide;
  Scene scene = generate_scene(SceneConfig{}, 7);
  Scene other = generate_scene(SceneConfig{}, 8);

  World() {
    guide = init_guide_model(backbone, "s3", GuideMode{}, 5, 6, 1);
    std::mt19937_64 rng(1);
    for (double& w : guide.proj_w) w = std::normal_distribution<double>(0, 2.0)(rng);
  }
};

const World& world() {
  static const World w;
  return w;
}

std::string png_of(const Image& img) {
  const auto bytes = encode_png(image_to_raster(img));
  return {bytes.begin(), bytes.end()};
}

std::string json_upload(const Scene& s, bool with_labels) {
  json j{{"image", base64_encode(encode_png(image_to_raster(s.image)))}};
  if (with_labels) j["labels"] = base64_encode(encode_png(labels_to_raster(s.labels)));
  return j.dump();
}

std::string pixel_body(int x, int y, int c) { return json{{"x", x}, {"y", y}, {"class_id", c}}.dump(); }

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("guideseg_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_SUITE("interaction_service") {
  TEST_CASE("run-length label encoding round trips") {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 50; ++t) {
      const auto m = oracle::random_labels(1 + t % 9, 1 + t % 13, 1 + t % 4, rng, 0.1);
      const auto j = encode_rle(m);
      long covered = 0;
      for (std::size_t i = 1; i < j["rle"].size(); i += 2) covered += j["rle"][i].get<long>();
      CHECK(covered == static_cast<long>(m.size()));
      CHECK(decode_rle(j) == m);
    }
    CHECK_THROWS_AS(decode_rle(json{{"height", 2}, {"width", 2}, {"rle", {1, 3}}}), std::invalid_argument);
  }

  TEST_CASE("session creation and upload errors") {
    const auto& w = world();
    SessionService svc(w.backbone, &w.guide, &w.table);
    const auto a = svc.create_session(png_of(w.scene.image), "image/png");
    REQUIRE(a.status == 200);
    CHECK(a.body["schema_version"] == 1);
    CHECK(a.body["legend"].size() == 10);
    CHECK(decode_rle(a.body["prediction"]) == w.backbone.predict(w.scene.image).labels);
    const auto b = svc.create_session(json_upload(w.scene, true), "application/json");
    REQUIRE(b.status == 200);
    CHECK(a.body["session_id"] != b.body["session_id"]);
    CHECK(svc.session_count() == 2);

    const auto bad = svc.create_session("not a png", "image/png");
    CHECK(bad.status == 400);
    CHECK(bad.body["error"].contains("code"));
    CHECK(bad.body["error"].contains("message"));
    CHECK(svc.create_session("{\"image\": \"@@@\"}", "application/json").status == 400);

    ServiceConfig small;
    small.max_upload_bytes = 200;
    SessionService tight(w.backbone, &w.guide, &w.table, small);
    Image noise(3, 64, 64);
    std::mt19937_64 rng(4);
    for (float& v : noise.data) v = static_cast<float>(rng() % 256) / 255.0f;
    CHECK(tight.create_session(png_of(noise), "image/png").status == 413);
    CHECK(tight.session_count() == 0);
  }

  TEST_CASE("text hints, no-op text and unknown sessions") {
    const auto& w = world();
    SessionService svc(w.backbone, &w.guide, &w.table);
    const std::string id = svc.create_session(json_upload(w.scene, true), "application/json").body["session_id"];
    const auto base = *svc.current_prediction(id);

    const auto noop = svc.text_hint(id, R"({"text": "  ?! "})");
    REQUIRE(noop.status == 200);
    CHECK(noop.body["noop"] == true);
    CHECK(noop.body["changed_pixels"] == 0);
    CHECK(*svc.current_prediction(id) == base);

    const auto r = svc.text_hint(id, R"({"text": "find the ball"})");
    REQUIRE(r.status == 200);
    CHECK(r.body["noop"] == false);
    CHECK(r.body.contains("miou"));
    CHECK(r.body["turn_index"] == 1);
    const LabelMap after = decode_rle(r.body["prediction"]);
    int changed = 0;
    for (std::size_t i = 0; i < after.size(); ++i) changed += after.labels[i] != base.labels[i];
    CHECK(r.body["changed_pixels"] == changed);
    const auto png = base64_decode(r.body["heatmap_png_base64"].get<std::string>());
    CHECK(decode_png(png).width == 64);

    CHECK(svc.text_hint("deadbeef", R"({"text": "x"})").status == 404);
    CHECK(svc.text_hint(id, "{").status == 400);
    CHECK(svc.heatmap(id, 1).status == 200);
    CHECK(svc.heatmap(id, 0).status == 404);  // no-op turns have no heatmap
    CHECK(svc.heatmap(id, 9).status == 404);

    SessionService no_guide(w.backbone, nullptr, nullptr);
    const std::string id2 = no_guide.create_session(png_of(w.scene.image), "image/png").body["session_id"];
    CHECK(no_guide.text_hint(id2, R"({"text": "find the ball"})").status == 409);
    CHECK(no_guide.text_hint(id2, R"({"text": ""})").status == 200);
  }

  TEST_CASE("pixel hints, suggestions, history, reset and delete") {
    const auto& w = world();
    SessionService svc(w.backbone, &w.guide, &w.table);
    const std::string id = svc.create_session(png_of(w.scene.image), "image/png").body["session_id"];
    const auto initial = svc.get_session(id).body;

    CHECK(svc.pixel_hint(id, pixel_body(64, 0, 1)).body["error"]["code"] == "out_of_bounds");
    CHECK(svc.pixel_hint(id, pixel_body(64, 0, 1)).status == 422);
    CHECK(svc.pixel_hint(id, pixel_body(0, 0, 10)).body["error"]["code"] == "invalid_class");
    CHECK(svc.pixel_hint(id, R"({"x": 1})").status == 400);

    const auto s = svc.suggest_pixel(id);
    REQUIRE(s.status == 200);
    const int x = s.body["x"], y = s.body["y"];
    const int current = svc.current_prediction(id)->at(y, x);
    const auto r = svc.pixel_hint(id, pixel_body(x, y, (current + 1) % 10));
    REQUIRE(r.status == 200);
    CHECK(!r.body["loss_trace"].empty());
    CHECK(svc.pixel_hint(id, pixel_body(x, y, current)).body["error"]["code"] == "duplicate_hint");
    // the hinted pixel is not suggested again
    const auto s2 = svc.suggest_pixel(id).body;
    CHECK((s2["x"] != x || s2["y"] != y));

    CHECK(svc.text_hint(id, R"({"text": "there is no sky"})").status == 200);
    const auto h = svc.history(id).body;
    REQUIRE(h["turns"].size() == 2);
    CHECK(h["turns"][0]["kind"] == "pixel");
    CHECK(h["turns"][1]["kind"] == "text");

    const auto reset = svc.reset(id);
    CHECK(reset.status == 200);
    const auto after = svc.get_session(id).body;
    CHECK(after["prediction"] == initial["prediction"]);
    CHECK(after["params"] == initial["params"]);
    CHECK(after["num_turns"] == 0);

    CHECK(svc.remove(id).status == 200);
    CHECK(svc.get_session(id).status == 404);
    CHECK(svc.remove(id).status == 404);
  }

  TEST_CASE("serialized sessions replay to the same state") {
    const auto& w = world();
    const auto dir = temp_dir("persist");
    ServiceConfig cfg;
    cfg.persist_dir = dir;
    SessionService svc(w.backbone, &w.guide, &w.table, cfg);
    const std::string id = svc.create_session(json_upload(w.scene, true), "application/json").body["session_id"];
    svc.text_hint(id, R"({"text": "remove the cloud"})");
    svc.pixel_hint(id, pixel_body(10, 20, 3));
    svc.pixel_hint(id, pixel_body(40, 5, 6));
    const auto state = svc.get_session(id).body;

    const auto copy_id = svc.restore(*svc.serialize(id));
    CHECK(copy_id != id);
    const auto copy = svc.get_session(copy_id).body;
    CHECK(copy["prediction"] == state["prediction"]);
    CHECK(copy["params"] == state["params"]);
    CHECK(copy["num_turns"] == 3);

    SessionService fresh(w.backbone, &w.guide, &w.table, cfg);
    CHECK(restore_persisted_sessions(fresh) == 2);
    const auto reloaded = fresh.get_session(id).body;  // original id kept
    CHECK(reloaded["prediction"] == state["prediction"]);
    CHECK(reloaded["params"] == state["params"]);
    CHECK(svc.remove(id).status == 200);
    CHECK(!fs::exists(dir / (id + ".json")));
  }

  TEST_CASE("interleaved sessions do not affect each other") {
    const auto& w = world();
    auto run = [&](SessionService& svc, const std::string& id, int step) {
      if (step == 0) svc.text_hint(id, R"({"text": "find the ball"})");
      if (step == 1) svc.pixel_hint(id, pixel_body(30, 30, 4));
      if (step == 2) svc.text_hint(id, R"({"text": "there is no mud"})");
    };
    SessionService solo(w.backbone, &w.guide, &w.table);
    const std::string s1 = solo.create_session(png_of(w.scene.image), "image/png").body["session_id"];
    for (int k = 0; k < 3; ++k) run(solo, s1, k);

    SessionService mixed(w.backbone, &w.guide, &w.table);
    const std::string a = mixed.create_session(png_of(w.scene.image), "image/png").body["session_id"];
    const std::string b = mixed.create_session(png_of(w.other.image), "image/png").body["session_id"];
    for (int k = 0; k < 3; ++k) {
      run(mixed, b, 2 - k);
      run(mixed, a, k);
    }
    CHECK(*mixed.current_prediction(a) == *solo.current_prediction(s1));
    CHECK(mixed.get_session(a).body["params"] == solo.get_session(s1).body["params"]);
  }

  TEST_CASE("routes over HTTP") {
    const auto& w = world();
    ServiceConfig cfg;
    cfg.cors_origin = "http://localhost:5173";
    SessionService svc(w.backbone, &w.guide, &w.table, cfg);
    httplib::Server server;
    register_routes(server, svc);
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    httplib::Client client("127.0.0.1", port);
    auto created = client.Post("/session", png_of(w.scene.image), "image/png");
    REQUIRE(created);
    CHECK(created->status == 200);
    CHECK(created->get_header_value("Access-Control-Allow-Origin") == cfg.cors_origin);
    const std::string id = json::parse(created->body)["session_id"];
    const std::string base = "/session/" + id;

    auto text = client.Post(base + "/hint/text", R"({"text": "find the box"})", "application/json");
    REQUIRE(text);
    CHECK(text->status == 200);
    auto pix = client.Post(base + "/hint/pixel", pixel_body(-1, 0, 0), "application/json");
    REQUIRE(pix);
    CHECK(pix->status == 422);
    CHECK(json::parse(pix->body)["error"]["code"] == "out_of_bounds");
    auto sug = client.Get(base + "/suggest-pixel");
    REQUIRE(sug);
    CHECK(json::parse(sug->body).contains("margin"));
    auto hist = client.Get(base + "/history");
    REQUIRE(hist);
    CHECK(json::parse(hist->body)["turns"].size() == 1);
    CHECK(client.Get(base + "/heatmap/0")->status == 200);
    CHECK(client.Post(base + "/reset", "", "application/json")->status == 200);
    auto pre = client.Options(base);
    REQUIRE(pre);
    CHECK(pre->status / 100 == 2);
    CHECK(client.Delete(base)->status == 200);
    auto gone = client.Get(base);
    REQUIRE(gone);
    CHECK(gone->status == 404);
    CHECK(json::parse(gone->body)["schema_version"] == 1);
    CHECK(client.Get("/nowhere")->status == 404);

    server.stop();
    t.join();
  }
}
