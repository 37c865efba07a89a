#include "guideseg/backbone.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>

namespace guideseg {

void ModelConfig::validate() const {
  if (input_height <= 0 || input_width <= 0 || input_height % 16 != 0 || input_width % 16 != 0) {
    throw std::invalid_argument("model input size must be positive multiples of 16");
  }
  if (num_classes < 2) throw std::invalid_argument("model needs at least 2 classes");
  if (channel_widths.size() != 4) {
    throw std::invalid_argument("channel_widths must list one width per encoder stage (4)");
  }
  for (int w : channel_widths) {
    if (w <= 0) throw std::invalid_argument("channel widths must be positive");
  }
  if (decoder_width <= 0) throw std::invalid_argument("decoder_width must be positive");
  if (split_points.size() < 3) {
    throw std::invalid_argument("at least 3 split points are required, got " +
                                std::to_string(split_points.size()));
  }
  int previous = 0;
  for (const auto& name : split_points) {
    const int b = boundary_index(name);
    if (b == 0) throw std::invalid_argument("unknown split point '" + name + "'");
    if (b <= previous) {
      throw std::invalid_argument("split points must be unique and ordered input-to-output");
    }
    previous = b;
    const Shape s = boundary_shape(b);
    if (s.height < 4 || s.width < 4) {
      throw std::invalid_argument("split point '" + name + "' has spatial size " + to_string(s) +
                                  ", below the 4x4 minimum");
    }
  }
}

Shape ModelConfig::boundary_shape(int boundary) const {
  if (boundary <= 0 || boundary > 5) throw std::out_of_range("boundary index out of range");
  const int stage = std::min(boundary, 4);
  const int factor = 1 << stage;
  return Shape{channel_widths.at(stage - 1), input_height / factor, input_width / factor};
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"input_height", c.input_height},   {"input_width", c.input_width},
                     {"num_classes", c.num_classes},     {"channel_widths", c.channel_widths},
                     {"decoder_width", c.decoder_width}, {"split_points", c.split_points}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.input_height = j.value("input_height", d.input_height);
  c.input_width = j.value("input_width", d.input_width);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.channel_widths = j.value("channel_widths", d.channel_widths);
  c.decoder_width = j.value("decoder_width", d.decoder_width);
  c.split_points = j.value("split_points", d.split_points);
}

int boundary_index(std::string_view name) {
  for (std::size_t i = 0; i < kBoundaryNames.size(); ++i) {
    if (kBoundaryNames[i] == name) return static_cast<int>(i) + 1;
  }
  return 0;
}

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

namespace {

template <typename T>
void init_conv(Conv2d<T>& conv, std::mt19937_64& rng, double gain) {
  const double fan_in = static_cast<double>(conv.in_channels) * conv.kernel * conv.kernel;
  std::normal_distribution<double> dist(0.0, std::sqrt(gain / fan_in));
  for (T& w : conv.weight) w = static_cast<T>(dist(rng));
}

}  // namespace

template <typename T>
Backbone<T>::Backbone(ModelConfig config, std::vector<std::string> class_names,
                      std::uint64_t seed)
    : config_(std::move(config)), class_names_(std::move(class_names)) {
  config_.validate();
  if (class_names_.empty()) {
    for (int c = 0; c < config_.num_classes; ++c) class_names_.push_back("class" + std::to_string(c));
  }
  if (static_cast<int>(class_names_.size()) != config_.num_classes) {
    throw std::invalid_argument("class_names length differs from num_classes");
  }
  const auto& w = config_.channel_widths;
  int in = 3;
  for (int s = 0; s < 4; ++s) {
    enc_down_[s] = Conv2d<T>(in, w[s], 3, 2);
    enc_conv_[s] = Conv2d<T>(w[s], w[s], 3, 1);
    in = w[s];
  }
  bottleneck_ = Conv2d<T>(w[3], w[3], 3, 1);
  dec3_ = Conv2d<T>(w[3] + w[2], config_.decoder_width, 3, 1);
  dec2_ = Conv2d<T>(config_.decoder_width + w[1], config_.decoder_width, 3, 1);
  classifier_ = Conv2d<T>(config_.decoder_width, config_.num_classes, 1, 1);

  std::mt19937_64 rng(seed);
  for (int s = 0; s < 4; ++s) {
    init_conv(enc_down_[s], rng, 2.0);
    init_conv(enc_conv_[s], rng, 2.0);
  }
  init_conv(bottleneck_, rng, 2.0);
  init_conv(dec3_, rng, 2.0);
  init_conv(dec2_, rng, 2.0);
  init_conv(classifier_, rng, 1.0);
}

template <typename T>
int Backbone<T>::split_boundary(std::string_view split) const {
  for (const auto& s : config_.split_points) {
    if (s == split) return boundary_index(split);
  }
  throw std::invalid_argument("unknown split point '" + std::string(split) + "'");
}

template <typename T>
Shape Backbone<T>::split_shape(std::string_view split) const {
  return config_.boundary_shape(split_boundary(split));
}

template <typename T>
std::vector<std::pair<std::string, Shape>> Backbone<T>::architecture_table() const {
  std::vector<std::pair<std::string, Shape>> table;
  for (const auto& s : config_.split_points) table.emplace_back(s, split_shape(s));
  return table;
}

template <typename T>
void Backbone<T>::check_input(const Volume<T>& x) const {
  if (x.channels() != 3 || x.height() != config_.input_height ||
      x.width() != config_.input_width) {
    throw std::invalid_argument("input shape " + to_string(x.shape) + " does not match model input " +
                                std::to_string(config_.input_height) + "x" +
                                std::to_string(config_.input_width) + "x3");
  }
}

template <typename T>
Volume<T> Backbone<T>::run_stage(int stage, const Volume<T>& in, Volume<T>* mid) const {
  if (stage == 5) {
    Volume<T> out = bottleneck_.forward(in);
    relu_inplace(out);
    return out;
  }
  Volume<T> m = enc_down_[stage - 1].forward(in);
  relu_inplace(m);
  Volume<T> out = enc_conv_[stage - 1].forward(m);
  relu_inplace(out);
  if (mid != nullptr) *mid = std::move(m);
  return out;
}

template <typename T>
void Backbone<T>::run_decoder(TailTrace<T>& t) const {
  const Volume<T>& s2 = t.boundary[2];
  const Volume<T>& s3 = t.boundary[3];
  t.cat3 = concat_channels(resize_bilinear(t.boundary[5], s3.height(), s3.width()), s3);
  t.dec3 = dec3_.forward(t.cat3);
  relu_inplace(t.dec3);
  t.cat2 = concat_channels(resize_bilinear(t.dec3, s2.height(), s2.width()), s2);
  t.dec2 = dec2_.forward(t.cat2);
  relu_inplace(t.dec2);
  t.low_logits = classifier_.forward(t.dec2);
  t.logits = resize_bilinear(t.low_logits, config_.input_height, config_.input_width);
}

template <typename T>
HeadOutput<T> Backbone<T>::forward_head(const Volume<T>& x, std::string_view split) const {
  const int k = split_boundary(split);
  check_input(x);
  HeadOutput<T> head;
  head.split = std::string(split);
  Volume<T> cur = x;
  for (int s = 1; s <= k; ++s) {
    cur = run_stage(s, cur, nullptr);
    if (s == 2 && k >= 3) head.skip_s2 = cur;
    if (s == 3 && k >= 4) head.skip_s3 = cur;
  }
  head.features = std::move(cur);
  return head;
}

template <typename T>
Volume<T> Backbone<T>::forward_tail(const HeadOutput<T>& head, std::string_view split,
                                    TailTrace<T>* trace) const {
  const int k = split_boundary(split);
  if (head.split != split) {
    throw std::invalid_argument("feature map was produced at split '" + head.split +
                                "' but the tail was requested at '" + std::string(split) + "'");
  }
  const Shape expected = config_.boundary_shape(k);
  if (head.features.shape != expected) {
    throw std::invalid_argument("feature map shape " + to_string(head.features.shape) +
                                " does not match split " + std::string(split) + " (" +
                                to_string(expected) + ")");
  }
  if ((k >= 3 && !head.skip_s2) || (k >= 4 && !head.skip_s3)) {
    throw std::invalid_argument("feature map lacks the skip activations for split " +
                                std::string(split));
  }
  TailTrace<T> local;
  TailTrace<T>& t = trace != nullptr ? *trace : local;
  t.start = k;
  t.boundary[k] = head.features;
  if (k >= 3) t.boundary[2] = *head.skip_s2;
  if (k >= 4) t.boundary[3] = *head.skip_s3;
  for (int s = k + 1; s <= 5; ++s) {
    t.boundary[s] = run_stage(s, t.boundary[s - 1], &t.stage_mid[s - 1]);
  }
  run_decoder(t);
  if (trace == nullptr) return std::move(t.logits);
  return t.logits;
}

template <typename T>
Volume<T> Backbone<T>::forward(const Volume<T>& x, TailTrace<T>* trace) const {
  check_input(x);
  TailTrace<T> local;
  TailTrace<T>& t = trace != nullptr ? *trace : local;
  t.start = 0;
  t.boundary[0] = x;
  for (int s = 1; s <= 5; ++s) t.boundary[s] = run_stage(s, t.boundary[s - 1], &t.stage_mid[s - 1]);
  run_decoder(t);
  return t.logits;
}

template <typename T>
Volume<T> Backbone<T>::stage_backward(int stage, const Volume<T>& in, const Volume<T>& mid,
                                      const Volume<T>& out, Volume<T> grad_out,
                                      ParamGrads<T>* grads, bool want_input_grad) const {
  relu_backward_inplace(out, grad_out);
  auto slot = [&](int idx) -> std::pair<T*, T*> {
    if (grads == nullptr) return {nullptr, nullptr};
    return {(*grads)[2 * idx].data(), (*grads)[2 * idx + 1].data()};
  };
  if (stage == 5) {
    auto [gw, gb] = slot(8);
    return bottleneck_.backward(in, grad_out, gw, gb, want_input_grad);
  }
  const int i = stage - 1;
  auto [gw2, gb2] = slot(4 + i);
  Volume<T> g_mid = enc_conv_[i].backward(mid, grad_out, gw2, gb2, true);
  relu_backward_inplace(mid, g_mid);
  auto [gw1, gb1] = slot(i);
  return enc_down_[i].backward(in, g_mid, gw1, gb1, want_input_grad);
}

template <typename T>
Volume<T> Backbone<T>::backward(const TailTrace<T>& t, const Volume<T>& grad_logits,
                                ParamGrads<T>* grads) const {
  auto slot = [&](int idx) -> std::pair<T*, T*> {
    if (grads == nullptr) return {nullptr, nullptr};
    return {(*grads)[2 * idx].data(), (*grads)[2 * idx + 1].data()};
  };
  const int k = t.start;
  Volume<T> g_low = resize_bilinear_backward(grad_logits, t.low_logits.shape);
  auto [gwc, gbc] = slot(11);
  Volume<T> g_dec2 = classifier_.backward(t.dec2, g_low, gwc, gbc, true);
  relu_backward_inplace(t.dec2, g_dec2);
  auto [gw2, gb2] = slot(10);
  Volume<T> g_cat2 = dec2_.backward(t.cat2, g_dec2, gw2, gb2, true);
  auto [g_up2, g_skip2] = split_channels(g_cat2, config_.decoder_width);
  Volume<T> g_dec3 = resize_bilinear_backward(g_up2, t.dec3.shape);
  relu_backward_inplace(t.dec3, g_dec3);
  auto [gw3, gb3] = slot(9);
  Volume<T> g_cat3 = dec3_.backward(t.cat3, g_dec3, gw3, gb3, true);
  auto [g_up3, g_skip3] = split_channels(g_cat3, t.boundary[5].channels());
  Volume<T> g = resize_bilinear_backward(g_up3, t.boundary[5].shape);

  for (int s = 5; s > k; --s) {
    const bool want_input = s - 1 > 0;
    g = stage_backward(s, t.boundary[s - 1], t.stage_mid[s - 1], t.boundary[s], std::move(g), grads,
                       want_input);
    if (!want_input) break;
    if (s - 1 == 3) {
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += g_skip3.data[i];
    }
    if (s - 1 == 2) {
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += g_skip2.data[i];
    }
  }
  return g;
}

template <typename T>
Prediction Backbone<T>::predict_from(const HeadOutput<T>& head) const {
  const Volume<T> logits = forward_tail(head, head.split);
  const Volume<T> post = softmax_channels(logits);
  return Prediction{argmax_channels(post), post.template cast<float>()};
}

template <typename T>
Prediction Backbone<T>::predict(const Volume<T>& x) const {
  const Volume<T> post = softmax_channels(forward(x));
  return Prediction{argmax_channels(post), post.template cast<float>()};
}

template <typename T>
std::vector<std::vector<T>*> Backbone<T>::parameters() {
  std::vector<std::vector<T>*> out;
  auto add = [&](Conv2d<T>& c) {
    out.push_back(&c.weight);
    out.push_back(&c.bias);
  };
  for (auto& c : enc_down_) add(c);
  for (auto& c : enc_conv_) add(c);
  add(bottleneck_);
  add(dec3_);
  add(dec2_);
  add(classifier_);
  return out;
}

template <typename T>
std::vector<const std::vector<T>*> Backbone<T>::parameters() const {
  auto mut = const_cast<Backbone<T>*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

template <typename T>
ParamGrads<T> Backbone<T>::zero_grads() const {
  ParamGrads<T> g;
  for (const auto* p : parameters()) g.emplace_back(p->size(), T(0));
  return g;
}

template <typename T>
std::uint64_t Backbone<T>::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto* p : parameters()) h = fnv1a(p->data(), p->size() * sizeof(T), h);
  return h;
}

template <typename T>
template <typename U>
Backbone<U> Backbone<T>::cast() const {
  Backbone<U> out;
  out.config_ = config_;
  out.class_names_ = class_names_;
  for (int i = 0; i < 4; ++i) {
    out.enc_down_[i] = enc_down_[i].template cast<U>();
    out.enc_conv_[i] = enc_conv_[i].template cast<U>();
  }
  out.bottleneck_ = bottleneck_.template cast<U>();
  out.dec3_ = dec3_.template cast<U>();
  out.dec2_ = dec2_.template cast<U>();
  out.classifier_ = classifier_.template cast<U>();
  return out;
}

template class Backbone<float>;
template class Backbone<double>;
template Backbone<double> Backbone<float>::cast<double>() const;
template Backbone<float> Backbone<double>::cast<float>() const;
template Backbone<float> Backbone<float>::cast<float>() const;

std::filesystem::path sidecar_path(const std::filesystem::path& weights_path) {
  auto p = weights_path;
  p += ".json";
  return p;
}

namespace {
constexpr char kWeightsMagic[8] = {'G', 'S', 'E', 'G', 'W', 'T', '0', '1'};
}

void save_backbone(const BackboneModel& model, const std::filesystem::path& weights_path,
                   double train_miou) {
  {
    std::ofstream out(weights_path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + weights_path.string());
    out.write(kWeightsMagic, sizeof(kWeightsMagic));
    const auto params = model.parameters();
    const std::uint64_t count = params.size();
    out.write(reinterpret_cast<const char*>(&count), sizeof(count));
    for (const auto* p : params) {
      const std::uint64_t n = p->size();
      out.write(reinterpret_cast<const char*>(&n), sizeof(n));
      out.write(reinterpret_cast<const char*>(p->data()), static_cast<std::streamsize>(n * sizeof(float)));
    }
  }
  nlohmann::json side;
  side["config"] = model.config();
  side["class_names"] = model.class_names();
  nlohmann::json shapes = nlohmann::json::object();
  for (const auto& [name, s] : model.architecture_table()) {
    shapes[name] = {s.height, s.width, s.channels};
  }
  side["split_shapes"] = shapes;
  side["train_miou"] = train_miou;
  side["checksum"] = model.checksum();
  std::ofstream js(sidecar_path(weights_path));
  js << side.dump(2) << "\n";
}

BackboneModel load_backbone(const std::filesystem::path& weights_path) {
  std::ifstream js(sidecar_path(weights_path));
  if (!js) {
    throw std::runtime_error("missing backbone sidecar " + sidecar_path(weights_path).string() +
                             " (run `guideseg train-backbone` first)");
  }
  const nlohmann::json side = nlohmann::json::parse(js);
  BackboneModel model(side.at("config").get<ModelConfig>(),
                      side.at("class_names").get<std::vector<std::string>>(), 0);
  std::ifstream in(weights_path, std::ios::binary);
  if (!in) throw std::runtime_error("missing backbone weights " + weights_path.string());
  char magic[sizeof(kWeightsMagic)];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(magic, magic + sizeof(magic), kWeightsMagic)) {
    throw std::runtime_error("not a backbone weights file: " + weights_path.string());
  }
  std::uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof(count));
  auto params = model.parameters();
  if (count != params.size()) throw std::runtime_error("weights file layout does not match config");
  for (auto* p : params) {
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    if (n != p->size()) throw std::runtime_error("weights tensor size does not match config");
    in.read(reinterpret_cast<char*>(p->data()), static_cast<std::streamsize>(n * sizeof(float)));
  }
  if (!in) throw std::runtime_error("truncated weights file " + weights_path.string());
  return model;
}

}  // namespace guideseg
