// guideseg: dataset generation, training, evaluation and serving from one binary.
#include <CLI11.hpp>
#include <httplib.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <nlohmann/json.hpp>
#include <sstream>

#include "guideseg/backbone_training.hpp"
#include "guideseg/backprop_guider.hpp"
#include "guideseg/evaluation.hpp"
#include "guideseg/guide_trainer.hpp"
#include "guideseg/service.hpp"
#include "guideseg/shapes_dataset.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace guideseg;

namespace {

class CliFailure : public std::runtime_error {
 public:
  CliFailure(std::string code, const std::string& message, std::string hint, int exit_code)
      : std::runtime_error(message), code(std::move(code)), hint(std::move(hint)), exit_code(exit_code) {}
  std::string code;
  std::string hint;
  int exit_code;
};

[[noreturn]] void missing_input(const std::string& what, const fs::path& path, const std::string& hint) {
  throw CliFailure("missing_input", what + " not found: " + path.string(), hint, 3);
}

void emit_error(const std::string& code, const std::string& message, const std::string& hint) {
  json e{{"code", code}, {"message", message}};
  if (!hint.empty()) e["hint"] = hint;
  std::cerr << json{{"error", e}}.dump() << "\n";
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  for (const auto& t : split_list(s)) out.push_back(std::stoi(t));
  return out;
}

fs::path with_suffix(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

std::uint64_t file_checksum(const fs::path& p, std::uint64_t seed = 1469598103934665603ULL) {
  std::ifstream in(p, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a(bytes.data(), bytes.size(), seed);
}

/// Hash over every file under `dir` (relative path + bytes, sorted), except the
/// resolved config, so two identical generations compare equal.
std::uint64_t directory_checksum(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() != "resolved_config.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& f : files) {
    const std::string rel = fs::relative(f, dir).generic_string();
    h = fnv1a(rel.data(), rel.size(), h);
    h = file_checksum(f, h);
  }
  return h;
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------- options

struct GenDataOpts {
  std::string out;
  std::uint64_t seed = 0;
  int n_train = 2000, n_test = 200;
  SceneConfig scene;
};

struct BackboneOpts {
  std::string data, out;
  BackboneTrainConfig train;
  ModelConfig model;
  std::string widths = "16,32,64,64";
};

struct GuideOpts {
  std::string data, backbone, out, query_config, log;
  std::string regime = "find", variant = "spatio_semantic", wrapping = "direct";
  GuideTrainConfig train;
};

struct EvalOpts {
  std::string data, backbone, axis, guides_dir = "guides", out = "ablation.csv";
  std::string splits = "s1,s2,s3,s4,s5", regimes = "find,find_or_remove,remove";
  std::string modes = "channel_only:direct,spatio_semantic:direct,channel_only:residual_block,"
                      "spatio_semantic:residual_block";
  std::string hints = "0,1,2,3,4";
  std::string split = "s3", regime = "find";
  int seeds = 5, num_test = 0;
  bool train_missing = false;
  GuideOpts train;  // used for --train-missing
};

struct GuideBpOpts {
  std::string data, backbone, out, split = "s3";
  int questions = 20, num_test = 200;
  GuideOptConfig opt;
};

struct GammaOpts {
  std::string guide, backbone, out, templ = "find the {c}";
};

struct ServeOpts {
  std::string backbone, guide, host = "127.0.0.1", cors_origin, persist_dir, pixel_split = "s3";
  int port = 8080;
  std::size_t max_upload_bytes = 4 << 20;
  GuideOptConfig opt;
};

struct Options {
  std::string config;
  GenDataOpts gen;
  BackboneOpts bb;
  GuideOpts guide;
  EvalOpts eval;
  GuideBpOpts bp;
  GammaOpts gamma;
  ServeOpts serve;
};

void add_guide_train_flags(CLI::App* c, GuideOpts& o, bool with_io) {
  if (with_io) {
    c->add_option("--data", o.data, "dataset directory")->required();
    c->add_option("--backbone", o.backbone, "frozen backbone weights")->required();
    c->add_option("--out", o.out, "guide weights output path")->required();
    c->add_option("--log", o.log, "JSONL training log (default <out>.log.jsonl)");
    c->add_option("--regime", o.regime, "find | remove | find_or_remove");
    c->add_option("--split", o.train.split, "split point the guide acts at");
  }
  c->add_option("--variant", o.variant, "spatio_semantic | channel_only");
  c->add_option("--wrapping", o.wrapping, "direct | residual_block");
  c->add_option("--residual-channels", o.train.mode.residual_channels);
  c->add_option("--epochs", o.train.epochs);
  c->add_option("--batch-size", o.train.batch_size);
  c->add_option("--lr", o.train.learning_rate);
  c->add_option("--seed", o.train.seed);
  c->add_option("--gru-hidden", o.train.gru_hidden);
  c->add_option("--embedding-dim", o.train.embedding_dim);
  c->add_option("--embedding-source", o.train.embedding_source, "'hashed' or a word-vector text file");
  c->add_option("--eval-images", o.train.eval_images, "held-out images scored after each epoch");
  c->add_option("--query-config", o.query_config, "JSON query-generator config");
}

std::unique_ptr<CLI::App> build_app(Options& o) {
  auto app = std::make_unique<CLI::App>("guideseg: guided segmentation toolkit");
  app->require_subcommand(1);
  app->option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app->allow_extras(false);

  auto with_config = [&](CLI::App* c) {
    c->add_option("--config", o.config, "JSON file of flag values; command-line flags override it");
  };

  auto* gen = app->add_subcommand("gen-data", "generate the synthetic shapes dataset");
  with_config(gen);
  gen->add_option("--out", o.gen.out, "output directory")->required();
  gen->add_option("--seed", o.gen.seed);
  gen->add_option("--n-train", o.gen.n_train, "training scenes (split into halves A and B)");
  gen->add_option("--n-test", o.gen.n_test);
  gen->add_option("--height", o.gen.scene.height);
  gen->add_option("--width", o.gen.scene.width);
  gen->add_option("--min-objects", o.gen.scene.min_objects);
  gen->add_option("--max-objects", o.gen.scene.max_objects);
  gen->add_option("--min-region-pixels", o.gen.scene.min_region_pixels);

  auto* bb = app->add_subcommand("train-backbone", "pre-train the segmentation backbone on half A");
  with_config(bb);
  bb->add_option("--data", o.bb.data)->required();
  bb->add_option("--out", o.bb.out, "weights output path")->required();
  bb->add_option("--epochs", o.bb.train.epochs);
  bb->add_option("--batch-size", o.bb.train.batch_size);
  bb->add_option("--lr", o.bb.train.learning_rate);
  bb->add_option("--seed", o.bb.train.seed);
  bb->add_option("--channel-widths", o.bb.widths, "four encoder widths, comma separated");
  bb->add_option("--decoder-width", o.bb.model.decoder_width);

  auto* tg = app->add_subcommand("train-guide", "train a text guide on half B against the frozen backbone");
  with_config(tg);
  add_guide_train_flags(tg, o.guide, true);

  auto* ev = app->add_subcommand("eval", "ablation sweep over trained guides");
  with_config(ev);
  ev->add_option("--data", o.eval.data)->required();
  ev->add_option("--backbone", o.eval.backbone)->required();
  ev->add_option("--axis", o.eval.axis, "split_location | hint_regime | guide_mode | num_hints")->required();
  ev->add_option("--guides-dir", o.eval.guides_dir, "where guide checkpoints are looked up");
  ev->add_option("--out", o.eval.out, "CSV report path (JSON written alongside)");
  ev->add_option("--splits", o.eval.splits, "split_location axis values");
  ev->add_option("--regimes", o.eval.regimes, "hint_regime axis values");
  ev->add_option("--modes", o.eval.modes, "guide_mode axis values, variant:wrapping");
  ev->add_option("--hints", o.eval.hints, "num_hints axis values");
  ev->add_option("--split", o.eval.split, "split for axes that do not vary it");
  ev->add_option("--regime", o.eval.regime, "regime for axes that do not vary it");
  ev->add_option("--seeds", o.eval.seeds, "query-sampling seeds per setting");
  ev->add_option("--num-test", o.eval.num_test, "test images used (0 = all)");
  ev->add_flag("--train-missing", o.eval.train_missing, "train absent checkpoints instead of failing");
  add_guide_train_flags(ev, o.eval.train, false);

  auto* bp = app->add_subcommand("guide-bp", "question protocol with back-propagation guiding");
  with_config(bp);
  bp->add_option("--data", o.bp.data)->required();
  bp->add_option("--backbone", o.bp.backbone)->required();
  bp->add_option("--out", o.bp.out, "per-question JSONL trace")->required();
  bp->add_option("--questions", o.bp.questions);
  bp->add_option("--split", o.bp.split);
  bp->add_option("--num-test", o.bp.num_test, "test images used (0 = all)");
  bp->add_option("--lr", o.bp.opt.learning_rate);
  bp->add_option("--momentum", o.bp.opt.momentum);
  bp->add_option("--max-iterations", o.bp.opt.max_iterations);
  bp->add_option("--stop-loss", o.bp.opt.stop_loss);

  auto* gm = app->add_subcommand("export-gamma", "per-class channel scale vectors from canonical queries");
  with_config(gm);
  gm->add_option("--guide", o.gamma.guide)->required();
  gm->add_option("--backbone", o.gamma.backbone, "backbone whose class names label the rows")->required();
  gm->add_option("--out", o.gamma.out, "CSV output path")->required();
  gm->add_option("--template", o.gamma.templ, "query text, {c} is replaced by the class name");

  auto* sv = app->add_subcommand("serve", "HTTP session service");
  with_config(sv);
  sv->add_option("--backbone", o.serve.backbone)->required();
  sv->add_option("--guide", o.serve.guide, "text guide checkpoint (text hints answer 409 without one)");
  sv->add_option("--host", o.serve.host);
  sv->add_option("--port", o.serve.port);
  sv->add_option("--cors-origin", o.serve.cors_origin);
  sv->add_option("--persist-dir", o.serve.persist_dir, "one replayable JSON file per session");
  sv->add_option("--max-upload-bytes", o.serve.max_upload_bytes);
  sv->add_option("--pixel-split", o.serve.pixel_split, "split for pixel hints without a guide");
  sv->add_option("--lr", o.serve.opt.learning_rate, "pixel-hint optimizer step size");
  sv->add_option("--momentum", o.serve.opt.momentum);
  sv->add_option("--max-iterations", o.serve.opt.max_iterations);
  sv->add_option("--stop-loss", o.serve.opt.stop_loss);
  return app;
}

/// Config-file values become leading flags so the command line overrides them.
std::vector<std::string> config_to_args(const fs::path& path) {
  std::ifstream in(path);
  if (!in) missing_input("config file", path, "pass an existing JSON file to --config");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw CliFailure("bad_config", "config file is not valid JSON: " + std::string(e.what()), "", 2);
  }
  if (j.contains("flags")) j = j["flags"];
  if (!j.is_object()) throw CliFailure("bad_config", "config file must hold a JSON object of flags", "", 2);
  std::vector<std::string> args;
  for (const auto& [key, v] : j.items()) {
    if (key == "config") continue;
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');  // gru_hidden and gru-hidden both work
    if (v.is_boolean()) {
      args.push_back(flag + "=" + (v.get<bool>() ? "true" : "false"));
    } else if (v.is_array()) {
      std::string joined;
      for (const auto& e : v) joined += (joined.empty() ? "" : ",") + (e.is_string() ? e.get<std::string>() : e.dump());
      args.push_back(flag + "=" + joined);
    } else if (v.is_string()) {
      args.push_back(flag + "=" + v.get<std::string>());
    } else if (!v.is_null()) {
      args.push_back(flag + "=" + v.dump());
    }
  }
  return args;
}

json flag_values(const CLI::App* sub) {
  json flags = json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config" || name.empty()) continue;
    if (opt->get_expected_min() == 0) {
      flags[name] = opt->count() > 0 ? opt->as<bool>() : false;
      continue;
    }
    const std::string v = opt->count() > 0 ? opt->as<std::string>() : opt->get_default_str();
    if (v.empty() && opt->count() == 0) continue;
    const json parsed = json::parse(v, nullptr, false);
    flags[name] = parsed.is_number() ? parsed : json(v);
  }
  return flags;
}

struct Context {
  const CLI::App* sub = nullptr;
  json resolved_config(const json& extra = json::object()) const {
    json j{{"tool", "guideseg"}, {"subcommand", sub->get_name()}, {"flags", flag_values(sub)}};
    for (const auto& [k, v] : extra.items()) j[k] = v;
    return j;
  }
};

Dataset load_data(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "manifest.json")) {
    missing_input("dataset", dir, "run `guideseg gen-data --out " + dir + "` first");
  }
  return read_dataset(dir);
}

BackboneModel load_model(const std::string& path) {
  if (!fs::exists(path)) {
    missing_input("backbone checkpoint", path, "run `guideseg train-backbone --data <dir> --out " + path + "` first");
  }
  return load_backbone(path);
}

LoadedGuide load_guide_checked(const std::string& path) {
  if (!fs::exists(path)) {
    missing_input("guide checkpoint", path,
                  "run `guideseg train-guide --data <dir> --backbone <ckpt> --out " + path + "` first");
  }
  return load_guide(path);
}

std::vector<Sample> first_n(const std::vector<Sample>& v, int n) {
  if (n <= 0 || n >= static_cast<int>(v.size())) return v;
  return {v.begin(), v.begin() + n};
}

GuideTrainConfig resolve_guide_cfg(const GuideOpts& o) {
  GuideTrainConfig cfg = o.train;
  cfg.hint_regime = parse_hint_regime(o.regime);
  cfg.mode.variant = parse_variant(o.variant);
  cfg.mode.wrapping = parse_wrapping(o.wrapping);
  if (!o.query_config.empty()) {
    if (!fs::exists(o.query_config)) missing_input("query config", o.query_config, "check the --query-config path");
    cfg.query = load_query_config(o.query_config);
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const GenDataOpts& o, const Context& ctx) {
  SceneConfig sc = o.scene;
  sc.seed = o.seed;
  sc.validate();
  const Dataset d = build_dataset(sc, o.n_train, o.n_test);
  write_dataset(d, o.out);
  const std::string checksum = hex64(directory_checksum(o.out));
  write_json(fs::path(o.out) / "resolved_config.json",
             ctx.resolved_config({{"scene_config", sc}, {"outputs", {{"dataset_checksum", checksum}}}}));
  std::cout << json{{"dataset", o.out},
                    {"checksum", checksum},
                    {"train_a", d.train_a.size()},
                    {"train_b", d.train_b.size()},
                    {"test", d.test.size()}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_train_backbone(BackboneOpts o, const Context& ctx) {
  const Dataset d = load_data(o.data);
  ModelConfig mc = o.model;
  mc.input_height = d.config.height;
  mc.input_width = d.config.width;
  mc.num_classes = d.config.num_classes;
  mc.channel_widths = split_ints(o.widths);
  mc.validate();
  BackboneModel model(mc, d.config.class_names(), o.train.seed);
  const auto log = train_backbone(model, d.train_a, o.train, [](int epoch, double loss) {
    std::cerr << json{{"epoch", epoch}, {"loss", loss}}.dump() << "\n";
  });
  save_backbone(model, o.out, log.train_miou);

  const ConfusionMatrix cm = evaluate_backbone(model, d.test);
  const auto iou = cm.class_iou();
  json per_class = json::object();
  double mean = 0.0;
  int present = 0;
  for (int c = 0; c < mc.num_classes; ++c) {
    per_class[model.class_names()[c]] = iou[c] ? json(*iou[c]) : json(nullptr);
    if (iou[c]) mean += *iou[c], ++present;
  }
  mean /= std::max(present, 1);
  json report{{"train_miou", log.train_miou},
              {"test_miou", miou(cm)},
              {"test_pixel_accuracy", pixel_accuracy(cm)},
              {"test_class_iou", per_class},
              {"epoch_loss", log.epoch_loss},
              {"checksum", hex64(model.checksum())}};
  write_json(with_suffix(o.out, ".eval.json"), report);
  write_json(with_suffix(o.out, ".config.json"),
             ctx.resolved_config({{"model_config", mc},
                                  {"inputs", {{"dataset_checksum", hex64(directory_checksum(o.data))}}}}));
  std::cout << report.dump() << "\n";
  return 0;
}

TrainedGuide train_and_save(const BackboneModel& model, const Dataset& d, const GuideTrainConfig& cfg,
                            const fs::path& out, const fs::path& log_path) {
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream log(log_path);
  const std::uint64_t before = model.checksum();
  TrainedGuide tg = train_guide(model, d.train_b, first_n(d.test, cfg.eval_images), cfg, &log);
  if (model.checksum() != before) throw std::logic_error("backbone weights changed during guide training");
  save_guide(tg.guide, tg.table, cfg.embedding_source, out);
  return tg;
}

int cmd_train_guide(const GuideOpts& o, const Context& ctx) {
  const GuideTrainConfig cfg = resolve_guide_cfg(o);
  const Dataset d = load_data(o.data);
  const BackboneModel model = load_model(o.backbone);
  const fs::path log_path = o.log.empty() ? with_suffix(o.out, ".log.jsonl") : fs::path(o.log);
  const TrainedGuide tg = train_and_save(model, d, cfg, o.out, log_path);
  write_json(with_suffix(o.out, ".config.json"),
             ctx.resolved_config({{"train_config", cfg},
                                  {"inputs",
                                   {{"dataset_checksum", hex64(directory_checksum(o.data))},
                                    {"backbone_checksum", hex64(model.checksum())}}}}));
  json summary{{"guide", o.out}, {"log", log_path.string()}, {"checksum", hex64(tg.guide.checksum())}};
  if (!tg.log.empty() && tg.log.back().miou_eval) summary["final_miou_eval"] = *tg.log.back().miou_eval;
  std::cout << summary.dump() << "\n";
  return 0;
}

std::string checkpoint_name(HintRegime regime, const std::string& split, const GuideMode& mode) {
  return to_string(regime) + "_" + split + "_" + to_string(mode.variant) + "_" + to_string(mode.wrapping) + ".bin";
}

int cmd_eval(const EvalOpts& o, const Context& ctx) {
  const AblationAxis axis = parse_ablation_axis(o.axis);
  const Dataset d = load_data(o.data);
  const BackboneModel model = load_model(o.backbone);
  const GuideTrainConfig base = resolve_guide_cfg(o.train);

  struct Wanted {
    std::string label;
    HintRegime regime;
    std::string split;
    GuideMode mode;
    int hints = 1;
  };
  std::vector<Wanted> wanted;
  const HintRegime regime = parse_hint_regime(o.regime);
  switch (axis) {
    case AblationAxis::split_location:
      for (const auto& s : split_list(o.splits)) wanted.push_back({s, regime, s, base.mode});
      break;
    case AblationAxis::hint_regime:
      for (const auto& r : split_list(o.regimes)) wanted.push_back({r, parse_hint_regime(r), o.split, base.mode});
      break;
    case AblationAxis::guide_mode:
      for (const auto& m : split_list(o.modes)) {
        const auto colon = m.find(':');
        if (colon == std::string::npos) {
          throw CliFailure("usage_error", "guide mode '" + m + "' is not variant:wrapping",
                           "e.g. --modes channel_only:direct,spatio_semantic:residual_block", 2);
        }
        GuideMode mode = base.mode;
        mode.variant = parse_variant(m.substr(0, colon));
        mode.wrapping = parse_wrapping(m.substr(colon + 1));
        wanted.push_back({m, regime, o.split, mode});
      }
      break;
    case AblationAxis::num_hints:
      for (int k : split_ints(o.hints)) wanted.push_back({std::to_string(k), regime, o.split, base.mode, k});
      break;
  }

  std::vector<AblationCheckpoint> settings;
  json trained = json::array();
  for (const auto& w : wanted) {
    const fs::path ckpt = fs::path(o.guides_dir) / checkpoint_name(w.regime, w.split, w.mode);
    if (!fs::exists(ckpt)) {
      if (!o.train_missing) {
        missing_input("guide checkpoint for setting '" + w.label + "'", ckpt,
                      "rerun with --train-missing, or `guideseg train-guide --regime " + to_string(w.regime) +
                          " --split " + w.split + " --variant " + to_string(w.mode.variant) + " --wrapping " +
                          to_string(w.mode.wrapping) + " --out " + ckpt.string() + "`");
      }
      GuideTrainConfig cfg = base;
      cfg.hint_regime = w.regime;
      cfg.split = w.split;
      cfg.mode = w.mode;
      cfg.validate();
      train_and_save(model, d, cfg, ckpt, with_suffix(ckpt, ".log.jsonl"));
      trained.push_back(ckpt.string());
    }
    settings.push_back({w.label, ckpt, w.regime, w.hints});
  }

  const auto test = first_n(d.test, o.num_test);
  const AblationReport report =
      run_ablation(axis, std::span<const AblationCheckpoint>(settings), model, test, o.seeds, base.query);
  fs::path out(o.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  {
    std::ofstream csv(out);
    write_ablation_csv(report, csv);
  }
  json jr = report;
  write_json(with_suffix(out, ".json"), jr);
  write_json(with_suffix(out, ".config.json"),
             ctx.resolved_config({{"trained_checkpoints", trained},
                                  {"inputs",
                                   {{"dataset_checksum", hex64(directory_checksum(o.data))},
                                    {"backbone_checksum", hex64(model.checksum())}}}}));
  write_ablation_csv(report, std::cout);
  return 0;
}

int cmd_guide_bp(const GuideBpOpts& o, const Context& ctx) {
  o.opt.validate();
  if (o.questions < 0) throw CliFailure("usage_error", "--questions must be >= 0", "", 2);
  const Dataset d = load_data(o.data);
  const BackboneModel model = load_model(o.backbone);
  const auto test = first_n(d.test, o.num_test);

  const fs::path out(o.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  const fs::path params_path = with_suffix(out, ".params.jsonl");
  std::ofstream trace_out(out), params_out(params_path);
  const std::string params_name = params_path.filename().string();

  std::vector<ConfusionMatrix> cms(o.questions + 1, ConfusionMatrix(model.num_classes()));
  std::vector<double> image_mean(o.questions + 1, 0.0);
  int params_offset = 0, skipped = 0;
  for (const Sample& s : test) {
    const PixelOracle oracle = [&](Pixel p) -> std::optional<int> {
      const int g = s.labels.at(p.first, p.second);
      if (g == kIgnoreLabel) return std::nullopt;
      return g;
    };
    const ProtocolTrace tr = run_question_protocol(model, o.split, s.image, s.labels, oracle, o.questions, o.opt);
    skipped += tr.skipped_unlabelled;
    for (int q = 0; q <= o.questions; ++q) {
      cms[q].accumulate(tr.steps[q].prediction, s.labels);
      image_mean[q] += tr.steps[q].miou;
    }
    std::stringstream records, params;
    write_protocol_trace(tr, records, &params, params_name);
    std::string line;
    while (std::getline(records, line)) {
      json r = json::parse(line);
      r["image"] = s.index;
      if (r.contains("params_ref")) {
        const std::string ref = r["params_ref"];
        const int local = std::stoi(ref.substr(ref.rfind('#') + 1));
        r["params_ref"] = params_name + "#" + std::to_string(params_offset + local);
      }
      trace_out << r.dump() << "\n";
    }
    while (std::getline(params, line)) {
      params_out << line << "\n";
      ++params_offset;
    }
  }

  std::ofstream curve(with_suffix(out, ".curve.csv"));
  curve << "q,miou,mean_image_miou\n";
  json summary = json::array();
  for (int q = 0; q <= o.questions; ++q) {
    const double m = miou(cms[q]);
    const double im = image_mean[q] / static_cast<double>(std::max<std::size_t>(test.size(), 1));
    curve << q << "," << m << "," << im << "\n";
    summary.push_back({{"q", q}, {"miou", m}, {"mean_image_miou", im}});
  }
  write_json(with_suffix(out, ".config.json"),
             ctx.resolved_config({{"inputs",
                                   {{"dataset_checksum", hex64(directory_checksum(o.data))},
                                    {"backbone_checksum", hex64(model.checksum())}}}}));
  std::cout << json{{"images", test.size()}, {"skipped_unlabelled", skipped}, {"curve", summary}}.dump() << "\n";
  return 0;
}

int cmd_export_gamma(const GammaOpts& o, const Context& ctx) {
  const LoadedGuide g = load_guide_checked(o.guide);
  const BackboneModel model = load_model(o.backbone);
  const auto rows = export_gamma_vectors(g.model, g.table, model.class_names(), o.templ);
  const fs::path out(o.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  {
    std::ofstream csv(out);
    write_gamma_csv(rows, csv);
  }
  // Pairwise cosine similarity, so confusable pairs can be compared to the rest.
  json sim = json::object();
  double sum = 0.0;
  int n = 0;
  for (std::size_t a = 0; a < rows.size(); ++a) {
    for (std::size_t b = a + 1; b < rows.size(); ++b) {
      const double c = cosine_similarity(rows[a].second, rows[b].second);
      sim[rows[a].first + "/" + rows[b].first] = c;
      sum += c;
      ++n;
    }
  }
  json summary{{"rows", rows.size()},
               {"length", rows.empty() ? 0 : rows.front().second.size()},
               {"mean_pairwise_cosine", n ? sum / n : 0.0},
               {"pairwise_cosine", sim}};
  write_json(with_suffix(out, ".json"), summary);
  write_json(with_suffix(out, ".config.json"),
             ctx.resolved_config({{"inputs", {{"guide_checksum", hex64(g.model.checksum())}}}}));
  std::cout << json{{"gamma_csv", o.out}, {"rows", rows.size()}, {"mean_pairwise_cosine", summary["mean_pairwise_cosine"]}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_serve(const ServeOpts& o, const Context& ctx) {
  const BackboneModel model = load_model(o.backbone);
  std::optional<LoadedGuide> guide;
  if (!o.guide.empty()) guide = load_guide_checked(o.guide);
  ServiceConfig cfg;
  cfg.max_upload_bytes = o.max_upload_bytes;
  cfg.cors_origin = o.cors_origin;
  cfg.pixel_opt = o.opt;
  cfg.pixel_split = o.pixel_split;
  if (!o.persist_dir.empty()) cfg.persist_dir = o.persist_dir;
  SessionService service(model, guide ? &guide->model : nullptr, guide ? &guide->table : nullptr, cfg);
  const int restored = restore_persisted_sessions(service);
  if (cfg.persist_dir) write_json(*cfg.persist_dir / "resolved_config.json", ctx.resolved_config());

  httplib::Server server;
  register_routes(server, service);
  if (!server.bind_to_port(o.host, o.port)) {
    throw CliFailure("bind_failed", "cannot listen on " + o.host + ":" + std::to_string(o.port),
                     "choose another --port or stop the process holding it", 1);
  }
  std::cerr << json{{"listening", o.host + ":" + std::to_string(o.port)},
                    {"restored_sessions", restored},
                    {"text_guide", guide.has_value()},
                    {"backbone_checksum", hex64(service.backbone_checksum())}}
                   .dump()
            << std::endl;
  server.listen_after_bind();
  return 0;
}

int dispatch(const Options& o, const CLI::App& app) {
  const CLI::App* sub = app.get_subcommands().front();
  const Context ctx{sub};
  const std::string name = sub->get_name();
  if (name == "gen-data") return cmd_gen_data(o.gen, ctx);
  if (name == "train-backbone") return cmd_train_backbone(o.bb, ctx);
  if (name == "train-guide") return cmd_train_guide(o.guide, ctx);
  if (name == "eval") return cmd_eval(o.eval, ctx);
  if (name == "guide-bp") return cmd_guide_bp(o.bp, ctx);
  if (name == "export-gamma") return cmd_export_gamma(o.gamma, ctx);
  return cmd_serve(o.serve, ctx);
}

bool parse_into(CLI::App& app, std::vector<std::string> args) {
  std::reverse(args.begin(), args.end());  // CLI11 consumes from the back
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e);
    return false;
  } catch (const CLI::ParseError& e) {
    throw CliFailure("usage_error", e.what(), "see `guideseg <subcommand> --help`", 2);
  }
  return true;
}

/// The config file is located before parsing so that required flags may come from it.
std::optional<std::string> find_config_path(const std::vector<std::string>& args) {
  std::optional<std::string> path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  return path;
}

int run(std::vector<std::string> args) {
  if (const auto config = find_config_path(args); config && !args.empty()) {
    // args[0] is the subcommand; file values go first so explicit flags win
    const auto from_file = config_to_args(*config);
    args.insert(args.begin() + 1, from_file.begin(), from_file.end());
  }
  Options opts;
  auto app = build_app(opts);
  if (!parse_into(*app, args)) return 0;
  return dispatch(opts, *app);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(std::vector<std::string>(argv + 1, argv + argc));
  } catch (const CliFailure& e) {
    emit_error(e.code, e.what(), e.hint);
    return e.exit_code;
  } catch (const std::invalid_argument& e) {
    emit_error("invalid_argument", e.what(), "check the flag values against `guideseg <subcommand> --help`");
    return 2;
  } catch (const std::exception& e) {
    emit_error("runtime_error", e.what(), "");
    return 1;
  }
}
