#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "guideseg/backbone.hpp"
#include "guideseg/guiding_block.hpp"

namespace guideseg {

/// Lowercases, drops punctuation and splits on whitespace.
std::vector<std::string> tokenize(const std::string& text);

/// Frozen word vectors. Unknown words map to a deterministic hash-seeded
/// vector scaled to the mean norm of the known vectors, so lookup is total.
class EmbeddingTable {
 public:
  EmbeddingTable(int dim, std::uint64_t hash_seed = 0);

  /// "hashed" builds an empty vocabulary (every word uses the hash fallback);
  /// anything else is read as a text file of "word v1 ... v_dim" lines.
  static EmbeddingTable load(const std::string& source, int dim, std::uint64_t hash_seed = 0);

  int dim() const { return dim_; }
  std::size_t vocabulary_size() const { return vocab_.size(); }
  bool contains(const std::string& word) const { return vocab_.count(word) > 0; }
  std::vector<double> lookup(const std::string& word) const;
  void insert(const std::string& word, std::vector<double> vec);
  std::uint64_t checksum() const;
  std::uint64_t hash_seed() const { return hash_seed_; }

 private:
  int dim_;
  std::uint64_t hash_seed_;
  double fallback_norm_ = 1.0;
  std::unordered_map<std::string, std::vector<double>> vocab_;
};

/// Recurrent encoder weights, gate order (reset, update, candidate).
struct GruWeights {
  int input_dim = 0;
  int hidden = 0;
  std::vector<double> w_ih;  // 3H x D
  std::vector<double> w_hh;  // 3H x H
  std::vector<double> b_ih;  // 3H
  std::vector<double> b_hh;  // 3H
};

/// Per-step intermediates of the recurrence, kept for back-propagation.
struct GruTrace {
  std::vector<std::vector<double>> inputs;
  std::vector<std::vector<double>> h_prev, r, z, n, hn_lin;
  std::vector<double> final_hidden;
};

struct GuideModel {
  std::string split;
  GuideMode mode;
  int alpha_len = 0;
  int beta_len = 0;
  int channels = 0;  // length of gamma_s / gamma_b
  GruWeights gru;
  std::vector<double> proj_w;  // output_size x hidden
  std::vector<double> proj_b;  // output_size
  std::optional<ResidualBlockWeights<float>> block;

  int output_size() const { return alpha_len + beta_len + 2 * channels; }
  std::vector<std::vector<double>*> parameters();
  std::vector<const std::vector<double>*> parameters() const;
  std::uint64_t checksum() const;
};

/// Fresh guide for a split of `backbone`: small random recurrent/projection
/// weights, zero projection bias, and a zero-initialized residual output.
GuideModel init_guide_model(const BackboneModel& backbone, const std::string& split, const GuideMode& mode,
                            int embedding_dim, int gru_hidden, std::uint64_t seed);

/// Runs the recurrence from a zero state over the embedded tokens.
std::vector<double> encode_query(const std::vector<std::string>& tokens, const EmbeddingTable& table,
                                 const GuideModel& model, GruTrace* trace = nullptr);
std::vector<double> gru_forward(const GruWeights& gru, const std::vector<std::vector<double>>& inputs,
                                GruTrace* trace = nullptr);
/// Accumulates weight gradients (w_ih, w_hh, b_ih, b_hh order) for d(loss)/d(final hidden).
void gru_backward(const GruWeights& gru, const GruTrace& trace, const std::vector<double>& grad_hidden,
                  std::vector<std::vector<double>>& grads);

GuidingParams project_guidance(const std::vector<double>& hidden, const GuideModel& model);

/// Parameters predicted for a text; empty or token-less text yields zeros.
GuidingParams params_for_text(const std::string& text, const EmbeddingTable& table, const GuideModel& model);

struct TextGuidance {
  LabelMap labels;
  Volume<float> posteriors;
  GuidingParams params;
  std::vector<double> heatmap;  // input-resolution, row-major, values in [0,1]
};

TextGuidance guide_with_text(const BackboneModel& backbone, const GuideModel& guide,
                             const EmbeddingTable& table, const HeadOutput<float>& head,
                             const std::string& text);
TextGuidance guide_with_text(const BackboneModel& backbone, const GuideModel& guide,
                             const EmbeddingTable& table, const Image& x, const std::string& text);

/// Weights file plus JSON sidecar {gru_hidden, split, mode, embedding_dim,
/// embedding_source, vocab_hash, ...}.
void save_guide(const GuideModel& guide, const EmbeddingTable& table, const std::string& embedding_source,
                const std::filesystem::path& weights_path);
struct LoadedGuide {
  GuideModel model;
  EmbeddingTable table;
  std::string embedding_source;
};
LoadedGuide load_guide(const std::filesystem::path& weights_path);

}  // namespace guideseg
