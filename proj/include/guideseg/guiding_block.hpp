#pragma once

#include <cstdint>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "guideseg/layers.hpp"
#include "guideseg/volume.hpp"

namespace guideseg {

/// The guide's control surface: a row vector, a column vector, and per-channel
/// scale and bias. All zeros is the identity.
struct GuidingParams {
  std::vector<double> alpha;
  std::vector<double> beta;
  std::vector<double> gamma_s;
  std::vector<double> gamma_b;

  static GuidingParams zeros(int alpha_len, int beta_len, int channels);

  std::size_t size() const { return alpha.size() + beta.size() + gamma_s.size() + gamma_b.size(); }
  bool all_finite() const;
  bool is_zero() const;
  /// Concatenation alpha | beta | gamma_s | gamma_b.
  std::vector<double> flatten() const;
  void assign_flat(std::span<const double> flat);
  /// Same layout, all zeros.
  GuidingParams zeros_like() const;

  friend bool operator==(const GuidingParams&, const GuidingParams&) = default;
};

void to_json(nlohmann::json& j, const GuidingParams& p);
void from_json(const nlohmann::json& j, GuidingParams& p);

enum class GuideVariant { channel_only, spatio_semantic };
enum class GuideWrapping { direct, residual_block };

struct GuideMode {
  GuideVariant variant = GuideVariant::spatio_semantic;
  GuideWrapping wrapping = GuideWrapping::direct;
  int residual_channels = 256;

  void validate() const;
  /// Number of channels the channel vectors modulate for a guided volume with
  /// `feature_channels` channels.
  int modulated_channels(int feature_channels) const {
    return wrapping == GuideWrapping::residual_block ? residual_channels : feature_channels;
  }
  friend bool operator==(const GuideMode&, const GuideMode&) = default;
};

std::string to_string(GuideVariant v);
std::string to_string(GuideWrapping w);
GuideVariant parse_variant(const std::string& s);
GuideWrapping parse_wrapping(const std::string& s);
void to_json(nlohmann::json& j, const GuideMode& m);
void from_json(const nlohmann::json& j, GuideMode& m);

/// 1x1 projection into `residual_channels`, modulation, ReLU, 1x1 projection
/// back. The output projection starts at zero so the block starts as identity.
template <typename T>
struct ResidualBlockWeights {
  Conv2d<T> project_in;
  Conv2d<T> project_out;

  static ResidualBlockWeights init(int feature_channels, int residual_channels, std::mt19937_64& rng);
  std::vector<std::vector<T>*> parameters() {
    return {&project_in.weight, &project_in.bias, &project_out.weight, &project_out.bias};
  }
  std::vector<const std::vector<T>*> parameters() const {
    return {&project_in.weight, &project_in.bias, &project_out.weight, &project_out.bias};
  }
  template <typename U>
  ResidualBlockWeights<U> cast() const {
    return {project_in.template cast<U>(), project_out.template cast<U>()};
  }
};

/// A'_c = (1 + gamma_s[c]) * A_c + gamma_b[c].
template <typename T>
Volume<T> apply_channel_guidance(const Volume<T>& A, std::span<const double> gamma_s,
                                 std::span<const double> gamma_b);

/// A'_{h,w,c} = (1 + alpha_h + beta_w + gamma_s[c]) * A_{h,w,c} + gamma_b[c], with
/// alpha/beta linearly resampled to the volume's height/width.
template <typename T>
Volume<T> apply_full_guidance(const Volume<T>& A, const GuidingParams& p);

/// Endpoint-aligned linear resampling; equal lengths return the input unchanged.
std::pair<std::vector<double>, std::vector<double>> resample_spatial_vectors(
    std::span<const double> alpha, std::span<const double> beta, int target_h, int target_w);

/// Intermediates of one guided application, for back-propagation.
template <typename T>
struct GuidanceTrace {
  Volume<T> input;      // A
  Volume<T> projected;  // f(A), residual wrapping only
  Volume<T> activated;  // ReLU(modulate(f(A))), residual wrapping only
};

/// Dispatches on mode: direct applies the variant's affine rule to A; the
/// residual wrapping returns A + g(ReLU(modulate(f(A)))).
template <typename T>
Volume<T> apply_guidance(const Volume<T>& A, const GuidingParams& p, const GuideMode& mode,
                         const ResidualBlockWeights<T>* block, GuidanceTrace<T>* trace = nullptr);

/// Gradients of apply_guidance. `grad_params` receives gradients in the
/// original (pre-resampling) alpha/beta lengths. Any output pointer may be null.
template <typename T>
void apply_guidance_backward(const GuidanceTrace<T>& trace, const Volume<T>& grad_out,
                             const GuidingParams& p, const GuideMode& mode,
                             const ResidualBlockWeights<T>* block, GuidingParams* grad_params,
                             std::vector<std::vector<T>>* grad_block, Volume<T>* grad_input);

}  // namespace guideseg
