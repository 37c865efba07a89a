#include "guideseg/language_guide.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "guideseg/backprop_guider.hpp"
#include "guideseg/heatmap.hpp"

namespace guideseg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<const Eigen::VectorXd>;

constexpr char kGuideMagic[8] = {'G', 'S', 'E', 'G', 'G', 'D', '0', '1'};

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isspace(ch)) {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    } else if (std::isalnum(ch) || ch >= 0x80) {
      cur += static_cast<char>(std::tolower(ch));
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

EmbeddingTable::EmbeddingTable(int dim, std::uint64_t hash_seed) : dim_(dim), hash_seed_(hash_seed) {
  if (dim < 1) throw std::invalid_argument("embedding dim must be >= 1");
  // no known vectors to take a norm from; sit in the range of typical 50-d word vectors
  fallback_norm_ = 0.5 * std::sqrt(static_cast<double>(dim));
}

EmbeddingTable EmbeddingTable::load(const std::string& source, int dim, std::uint64_t hash_seed) {
  EmbeddingTable table(dim, hash_seed);
  if (source == "hashed") return table;
  std::ifstream in(source);
  if (!in) throw std::runtime_error("cannot read embedding file " + source);
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    std::istringstream ss(line);
    std::string word;
    if (!(ss >> word)) continue;
    std::vector<double> vec;
    std::string tok;
    while (ss >> tok) {
      try {
        std::size_t used = 0;
        vec.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw std::runtime_error("embedding file line " + std::to_string(lineno) + ": malformed value '" +
                                 tok + "'");
      }
    }
    if (static_cast<int>(vec.size()) != dim) {
      throw std::runtime_error("embedding file line " + std::to_string(lineno) + ": expected " +
                               std::to_string(dim) + " values, got " + std::to_string(vec.size()));
    }
    table.vocab_[word] = std::move(vec);
  }
  if (!table.vocab_.empty()) {
    double total = 0.0;
    for (const auto& [w, v] : table.vocab_) total += norm(v);
    table.fallback_norm_ = total / static_cast<double>(table.vocab_.size());
  }
  return table;
}

void EmbeddingTable::insert(const std::string& word, std::vector<double> vec) {
  if (static_cast<int>(vec.size()) != dim_) throw std::invalid_argument("embedding has the wrong dimension");
  vocab_[word] = std::move(vec);
  double total = 0.0;
  for (const auto& [w, v] : vocab_) total += norm(v);
  fallback_norm_ = total / static_cast<double>(vocab_.size());
}

std::vector<double> EmbeddingTable::lookup(const std::string& word) const {
  if (auto it = vocab_.find(word); it != vocab_.end()) return it->second;
  std::mt19937_64 rng(splitmix(fnv1a(word.data(), word.size()) ^ splitmix(hash_seed_)));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(dim_);
  for (double& x : v) x = normal(rng);
  const double n = norm(v);
  for (double& x : v) x *= fallback_norm_ / n;
  return v;
}

std::uint64_t EmbeddingTable::checksum() const {
  std::vector<std::string> words;
  words.reserve(vocab_.size());
  for (const auto& [w, v] : vocab_) words.push_back(w);
  std::sort(words.begin(), words.end());
  std::uint64_t h = fnv1a(&dim_, sizeof(dim_));
  h = fnv1a(&hash_seed_, sizeof(hash_seed_), h);
  h = fnv1a(&fallback_norm_, sizeof(fallback_norm_), h);
  for (const auto& w : words) {
    h = fnv1a(w.data(), w.size(), h);
    const auto& v = vocab_.at(w);
    h = fnv1a(v.data(), v.size() * sizeof(double), h);
  }
  return h;
}

std::vector<std::vector<double>*> GuideModel::parameters() {
  return {&gru.w_ih, &gru.w_hh, &gru.b_ih, &gru.b_hh, &proj_w, &proj_b};
}

std::vector<const std::vector<double>*> GuideModel::parameters() const {
  return {&gru.w_ih, &gru.w_hh, &gru.b_ih, &gru.b_hh, &proj_w, &proj_b};
}

std::uint64_t GuideModel::checksum() const {
  std::uint64_t h = fnv1a(split.data(), split.size());
  for (const auto* p : parameters()) h = fnv1a(p->data(), p->size() * sizeof(double), h);
  if (block) {
    for (const auto* p : block->parameters()) h = fnv1a(p->data(), p->size() * sizeof(float), h);
  }
  return h;
}

GuideModel init_guide_model(const BackboneModel& backbone, const std::string& split, const GuideMode& mode,
                            int embedding_dim, int gru_hidden, std::uint64_t seed) {
  mode.validate();
  if (embedding_dim < 1 || gru_hidden < 1) throw std::invalid_argument("guide sizes must be >= 1");
  const Shape s = backbone.split_shape(split);
  GuideModel g;
  g.split = split;
  g.mode = mode;
  // channel-only guides never emit row/column vectors
  const bool spatial = mode.variant == GuideVariant::spatio_semantic;
  g.alpha_len = spatial ? s.height : 0;
  g.beta_len = spatial ? s.width : 0;
  g.channels = mode.modulated_channels(s.channels);
  std::mt19937_64 rng(splitmix(seed ^ 0x6775696465ULL));
  const double k = 1.0 / std::sqrt(static_cast<double>(gru_hidden));
  std::uniform_real_distribution<double> u(-k, k);
  auto fill = [&](std::vector<double>& v, std::size_t n) {
    v.resize(n);
    for (double& x : v) x = u(rng);
  };
  const std::size_t H = gru_hidden, D = embedding_dim;
  g.gru.input_dim = embedding_dim;
  g.gru.hidden = gru_hidden;
  fill(g.gru.w_ih, 3 * H * D);
  fill(g.gru.w_hh, 3 * H * H);
  fill(g.gru.b_ih, 3 * H);
  fill(g.gru.b_hh, 3 * H);
  // zero projection: an untrained guide is exactly the identity
  g.proj_w.assign(static_cast<std::size_t>(g.output_size()) * H, 0.0);
  g.proj_b.assign(g.output_size(), 0.0);
  if (mode.wrapping == GuideWrapping::residual_block) {
    g.block = ResidualBlockWeights<float>::init(s.channels, mode.residual_channels, rng);
  }
  return g;
}

std::vector<double> gru_forward(const GruWeights& gru, const std::vector<std::vector<double>>& inputs,
                                GruTrace* trace) {
  if (inputs.empty()) throw std::invalid_argument("cannot encode an empty token sequence");
  const int H = gru.hidden, D = gru.input_dim;
  const MapMat w_ih(gru.w_ih.data(), 3 * H, D);
  const MapMat w_hh(gru.w_hh.data(), 3 * H, H);
  const MapVec b_ih(gru.b_ih.data(), 3 * H);
  const MapVec b_hh(gru.b_hh.data(), 3 * H);
  Eigen::VectorXd h = Eigen::VectorXd::Zero(H);
  if (trace) *trace = GruTrace{};
  for (const auto& xv : inputs) {
    if (static_cast<int>(xv.size()) != D) throw std::invalid_argument("embedding size does not match encoder");
    const MapVec x(xv.data(), D);
    const Eigen::VectorXd gi = w_ih * x + b_ih;
    const Eigen::VectorXd gh = w_hh * h + b_hh;
    Eigen::VectorXd r(H), z(H), n(H), hn(H), next(H);
    for (int j = 0; j < H; ++j) {
      r[j] = sigmoid(gi[j] + gh[j]);
      z[j] = sigmoid(gi[H + j] + gh[H + j]);
      hn[j] = gh[2 * H + j];
      n[j] = std::tanh(gi[2 * H + j] + r[j] * hn[j]);
      next[j] = (1.0 - z[j]) * n[j] + z[j] * h[j];
    }
    if (trace) {
      auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
      trace->inputs.push_back(xv);
      trace->h_prev.push_back(vec(h));
      trace->r.push_back(vec(r));
      trace->z.push_back(vec(z));
      trace->n.push_back(vec(n));
      trace->hn_lin.push_back(vec(hn));
    }
    h = next;
  }
  std::vector<double> out(h.data(), h.data() + H);
  if (trace) trace->final_hidden = out;
  return out;
}

void gru_backward(const GruWeights& gru, const GruTrace& trace, const std::vector<double>& grad_hidden,
                  std::vector<std::vector<double>>& grads) {
  const int H = gru.hidden, D = gru.input_dim;
  if (static_cast<int>(grad_hidden.size()) != H) throw std::invalid_argument("hidden gradient has wrong length");
  grads.resize(4);
  grads[0].resize(gru.w_ih.size(), 0.0);
  grads[1].resize(gru.w_hh.size(), 0.0);
  grads[2].resize(gru.b_ih.size(), 0.0);
  grads[3].resize(gru.b_hh.size(), 0.0);
  const MapMat w_ih(gru.w_ih.data(), 3 * H, D);
  const MapMat w_hh(gru.w_hh.data(), 3 * H, H);
  Eigen::Map<RowMat> g_wih(grads[0].data(), 3 * H, D);
  Eigen::Map<RowMat> g_whh(grads[1].data(), 3 * H, H);
  Eigen::Map<Eigen::VectorXd> g_bih(grads[2].data(), 3 * H);
  Eigen::Map<Eigen::VectorXd> g_bhh(grads[3].data(), 3 * H);

  Eigen::VectorXd dh = MapVec(grad_hidden.data(), H);
  for (int t = static_cast<int>(trace.inputs.size()) - 1; t >= 0; --t) {
    const MapVec x(trace.inputs[t].data(), D);
    const MapVec hp(trace.h_prev[t].data(), H);
    const auto& r = trace.r[t];
    const auto& z = trace.z[t];
    const auto& n = trace.n[t];
    const auto& hn = trace.hn_lin[t];
    Eigen::VectorXd d_gi(3 * H), d_gh(3 * H), dh_prev(H);
    for (int j = 0; j < H; ++j) {
      const double dn = dh[j] * (1.0 - z[j]);
      const double dz = dh[j] * (hp[j] - n[j]);
      dh_prev[j] = dh[j] * z[j];
      const double da_n = dn * (1.0 - n[j] * n[j]);
      const double dr = da_n * hn[j];
      const double da_r = dr * r[j] * (1.0 - r[j]);
      const double da_z = dz * z[j] * (1.0 - z[j]);
      d_gi[j] = da_r;
      d_gi[H + j] = da_z;
      d_gi[2 * H + j] = da_n;
      d_gh[j] = da_r;
      d_gh[H + j] = da_z;
      d_gh[2 * H + j] = da_n * r[j];
    }
    g_wih.noalias() += d_gi * x.transpose();
    g_whh.noalias() += d_gh * hp.transpose();
    g_bih += d_gi;
    g_bhh += d_gh;
    dh = dh_prev + w_hh.transpose() * d_gh;
  }
}

std::vector<double> encode_query(const std::vector<std::string>& tokens, const EmbeddingTable& table,
                                 const GuideModel& model, GruTrace* trace) {
  if (tokens.empty()) throw std::invalid_argument("cannot encode an empty token sequence");
  if (table.dim() != model.gru.input_dim) throw std::invalid_argument("embedding dim does not match guide");
  std::vector<std::vector<double>> inputs;
  inputs.reserve(tokens.size());
  for (const auto& t : tokens) inputs.push_back(table.lookup(t));
  return gru_forward(model.gru, inputs, trace);
}

GuidingParams project_guidance(const std::vector<double>& hidden, const GuideModel& model) {
  const int H = model.gru.hidden;
  if (static_cast<int>(hidden.size()) != H) {
    throw std::invalid_argument("hidden state has length " + std::to_string(hidden.size()) + ", expected " +
                                std::to_string(H));
  }
  const int P = model.output_size();
  const Eigen::VectorXd out =
      MapMat(model.proj_w.data(), P, H) * MapVec(hidden.data(), H) + MapVec(model.proj_b.data(), P);
  GuidingParams p = GuidingParams::zeros(model.alpha_len, model.beta_len, model.channels);
  p.assign_flat(std::span<const double>(out.data(), out.size()));
  return p;
}

GuidingParams params_for_text(const std::string& text, const EmbeddingTable& table, const GuideModel& model) {
  const auto tokens = tokenize(text);
  if (tokens.empty()) return GuidingParams::zeros(model.alpha_len, model.beta_len, model.channels);
  return project_guidance(encode_query(tokens, table, model), model);
}

TextGuidance guide_with_text(const BackboneModel& backbone, const GuideModel& guide,
                             const EmbeddingTable& table, const HeadOutput<float>& head,
                             const std::string& text) {
  if (head.split != guide.split) {
    throw std::invalid_argument("head features come from split " + head.split + " but the guide expects " +
                                guide.split);
  }
  TextGuidance out;
  out.params = params_for_text(text, table, guide);
  const HeadOutput<float> guided =
      guided_head<float>(head, out.params, guide.mode, guide.block ? &*guide.block : nullptr);
  Prediction pred = backbone.predict_from(guided);
  out.labels = std::move(pred.labels);
  out.posteriors = std::move(pred.posteriors);
  const ModelConfig& mc = backbone.config();
  out.heatmap = guidance_heatmap(head.features, guided.features, mc.input_height, mc.input_width);
  return out;
}

TextGuidance guide_with_text(const BackboneModel& backbone, const GuideModel& guide,
                             const EmbeddingTable& table, const Image& x, const std::string& text) {
  return guide_with_text(backbone, guide, table, backbone.forward_head(x, guide.split), text);
}

namespace {

template <typename T>
void write_tensor(std::ostream& out, const std::vector<T>& v) {
  const std::uint64_t n = v.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
}

template <typename T>
void read_tensor(std::istream& in, std::vector<T>& v, const std::string& path) {
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!in || n != v.size()) throw std::runtime_error("guide weights do not match sidecar layout: " + path);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
}

}  // namespace

void save_guide(const GuideModel& guide, const EmbeddingTable& table, const std::string& embedding_source,
                const std::filesystem::path& weights_path) {
  {
    std::ofstream out(weights_path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + weights_path.string());
    out.write(kGuideMagic, sizeof(kGuideMagic));
    for (const auto* p : guide.parameters()) write_tensor(out, *p);
    if (guide.block) {
      for (const auto* p : guide.block->parameters()) write_tensor(out, *p);
    }
  }
  nlohmann::json side;
  side["gru_hidden"] = guide.gru.hidden;
  side["split"] = guide.split;
  side["mode"] = guide.mode;
  side["embedding_dim"] = table.dim();
  side["embedding_source"] = embedding_source;
  side["embedding_seed"] = table.hash_seed();
  side["vocab_hash"] = table.checksum();
  side["alpha_len"] = guide.alpha_len;
  side["beta_len"] = guide.beta_len;
  side["channels"] = guide.channels;
  side["checksum"] = guide.checksum();
  if (guide.block) side["block_feature_channels"] = guide.block->project_in.in_channels;
  std::ofstream js(sidecar_path(weights_path));
  js << side.dump(2) << "\n";
}

LoadedGuide load_guide(const std::filesystem::path& weights_path) {
  std::ifstream js(sidecar_path(weights_path));
  if (!js) {
    throw std::runtime_error("missing guide sidecar " + sidecar_path(weights_path).string() +
                             " (run `guideseg train-guide` first)");
  }
  const nlohmann::json side = nlohmann::json::parse(js);
  const std::string source = side.at("embedding_source").get<std::string>();
  EmbeddingTable table = EmbeddingTable::load(source, side.at("embedding_dim").get<int>(),
                                              side.value("embedding_seed", std::uint64_t{0}));
  if (table.checksum() != side.at("vocab_hash").get<std::uint64_t>()) {
    throw std::runtime_error("embedding table " + source + " does not match the one the guide was trained with");
  }
  GuideModel g;
  g.split = side.at("split").get<std::string>();
  g.mode = side.at("mode").get<GuideMode>();
  g.alpha_len = side.at("alpha_len").get<int>();
  g.beta_len = side.at("beta_len").get<int>();
  g.channels = side.at("channels").get<int>();
  const std::size_t H = side.at("gru_hidden").get<int>(), D = table.dim();
  g.gru.hidden = static_cast<int>(H);
  g.gru.input_dim = static_cast<int>(D);
  g.gru.w_ih.resize(3 * H * D);
  g.gru.w_hh.resize(3 * H * H);
  g.gru.b_ih.resize(3 * H);
  g.gru.b_hh.resize(3 * H);
  g.proj_w.resize(static_cast<std::size_t>(g.output_size()) * H);
  g.proj_b.resize(g.output_size());
  if (g.mode.wrapping == GuideWrapping::residual_block) {
    std::mt19937_64 rng(0);
    g.block = ResidualBlockWeights<float>::init(side.at("block_feature_channels").get<int>(),
                                                g.mode.residual_channels, rng);
  }
  std::ifstream in(weights_path, std::ios::binary);
  if (!in) throw std::runtime_error("missing guide weights " + weights_path.string());
  char magic[sizeof(kGuideMagic)];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(magic, magic + sizeof(magic), kGuideMagic)) {
    throw std::runtime_error("not a guide weights file: " + weights_path.string());
  }
  for (auto* p : g.parameters()) read_tensor(in, *p, weights_path.string());
  if (g.block) {
    for (auto* p : g.block->parameters()) read_tensor(in, *p, weights_path.string());
  }
  return {std::move(g), std::move(table), source};
}

}  // namespace guideseg
