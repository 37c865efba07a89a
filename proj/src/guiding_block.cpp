#include "guideseg/guiding_block.hpp"

#include <cmath>
#include <nlohmann/json.hpp>

namespace guideseg {

GuidingParams GuidingParams::zeros(int alpha_len, int beta_len, int channels) {
  GuidingParams p;
  p.alpha.assign(alpha_len, 0.0);
  p.beta.assign(beta_len, 0.0);
  p.gamma_s.assign(channels, 0.0);
  p.gamma_b.assign(channels, 0.0);
  return p;
}

bool GuidingParams::all_finite() const {
  for (const auto* v : {&alpha, &beta, &gamma_s, &gamma_b}) {
    for (double x : *v) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

bool GuidingParams::is_zero() const {
  for (const auto* v : {&alpha, &beta, &gamma_s, &gamma_b}) {
    for (double x : *v) {
      if (x != 0.0) return false;
    }
  }
  return true;
}

std::vector<double> GuidingParams::flatten() const {
  std::vector<double> out;
  out.reserve(size());
  for (const auto* v : {&alpha, &beta, &gamma_s, &gamma_b}) out.insert(out.end(), v->begin(), v->end());
  return out;
}

void GuidingParams::assign_flat(std::span<const double> flat) {
  if (flat.size() != size()) throw std::invalid_argument("flat parameter length mismatch");
  std::size_t off = 0;
  for (auto* v : {&alpha, &beta, &gamma_s, &gamma_b}) {
    std::copy(flat.begin() + off, flat.begin() + off + v->size(), v->begin());
    off += v->size();
  }
}

GuidingParams GuidingParams::zeros_like() const {
  return zeros(static_cast<int>(alpha.size()), static_cast<int>(beta.size()),
               static_cast<int>(gamma_s.size()));
}

void to_json(nlohmann::json& j, const GuidingParams& p) {
  j = nlohmann::json{{"alpha", p.alpha}, {"beta", p.beta}, {"gamma_s", p.gamma_s}, {"gamma_b", p.gamma_b}};
}

void from_json(const nlohmann::json& j, GuidingParams& p) {
  j.at("alpha").get_to(p.alpha);
  j.at("beta").get_to(p.beta);
  j.at("gamma_s").get_to(p.gamma_s);
  j.at("gamma_b").get_to(p.gamma_b);
}

void GuideMode::validate() const {
  if (residual_channels <= 0) throw std::invalid_argument("residual_channels must be positive");
}

std::string to_string(GuideVariant v) {
  return v == GuideVariant::channel_only ? "channel_only" : "spatio_semantic";
}
std::string to_string(GuideWrapping w) {
  return w == GuideWrapping::direct ? "direct" : "residual_block";
}
GuideVariant parse_variant(const std::string& s) {
  if (s == "channel_only") return GuideVariant::channel_only;
  if (s == "spatio_semantic") return GuideVariant::spatio_semantic;
  throw std::invalid_argument("unknown guide variant '" + s + "'");
}
GuideWrapping parse_wrapping(const std::string& s) {
  if (s == "direct") return GuideWrapping::direct;
  if (s == "residual_block") return GuideWrapping::residual_block;
  throw std::invalid_argument("unknown guide wrapping '" + s + "'");
}

void to_json(nlohmann::json& j, const GuideMode& m) {
  j = nlohmann::json{{"variant", to_string(m.variant)},
                     {"wrapping", to_string(m.wrapping)},
                     {"residual_channels", m.residual_channels}};
}

void from_json(const nlohmann::json& j, GuideMode& m) {
  m.variant = parse_variant(j.value("variant", std::string("spatio_semantic")));
  m.wrapping = parse_wrapping(j.value("wrapping", std::string("direct")));
  m.residual_channels = j.value("residual_channels", 256);
  m.validate();
}

template <typename T>
ResidualBlockWeights<T> ResidualBlockWeights<T>::init(int feature_channels, int residual_channels,
                                                      std::mt19937_64& rng) {
  ResidualBlockWeights<T> b{Conv2d<T>(feature_channels, residual_channels, 1, 1),
                            Conv2d<T>(residual_channels, feature_channels, 1, 1)};
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / feature_channels));
  for (T& w : b.project_in.weight) w = static_cast<T>(dist(rng));
  return b;
}

std::pair<std::vector<double>, std::vector<double>> resample_spatial_vectors(
    std::span<const double> alpha, std::span<const double> beta, int target_h, int target_w) {
  if (alpha.empty() || beta.empty()) {
    throw std::invalid_argument("spatial guiding vectors must not be empty");
  }
  auto resample = [](std::span<const double> src, int n) {
    std::vector<double> out(n);
    if (static_cast<int>(src.size()) == n) {
      std::copy(src.begin(), src.end(), out.begin());
      return out;
    }
    LinearResampler(static_cast<int>(src.size()), n).apply<double>(src, out);
    return out;
  };
  return {resample(alpha, target_h), resample(beta, target_w)};
}

namespace {

void check_channel_vectors(std::size_t gs, std::size_t gb, int channels) {
  if (gs != static_cast<std::size_t>(channels) || gb != static_cast<std::size_t>(channels)) {
    throw std::invalid_argument("channel guiding vectors have length " + std::to_string(gs) + "/" +
                                std::to_string(gb) + ", expected " + std::to_string(channels));
  }
}

bool spatial_active(const GuidingParams& p) {
  for (double a : p.alpha) {
    if (a != 0.0) return true;
  }
  for (double b : p.beta) {
    if (b != 0.0) return true;
  }
  return false;
}

/// Eq.-2 style modulation with already resampled spatial vectors (may be empty
/// for "no spatial term").
template <typename T>
Volume<T> modulate(const Volume<T>& X, std::span<const double> alpha, std::span<const double> beta,
                   std::span<const double> gamma_s, std::span<const double> gamma_b) {
  Volume<T> out(X.shape);
  const int H = X.height();
  const int W = X.width();
  std::vector<T> row_term(H, T(0));
  std::vector<T> col_term(W, T(0));
  for (int h = 0; h < H && !alpha.empty(); ++h) row_term[h] = static_cast<T>(alpha[h]);
  for (int w = 0; w < W && !beta.empty(); ++w) col_term[w] = static_cast<T>(beta[w]);
  for (int c = 0; c < X.channels(); ++c) {
    const T gs = static_cast<T>(gamma_s[c]);
    const T gb = static_cast<T>(gamma_b[c]);
    const T* src = X.channel(c);
    T* dst = out.channel(c);
    for (int h = 0; h < H; ++h) {
      for (int w = 0; w < W; ++w) {
        const T scale = T(1) + row_term[h] + col_term[w] + gs;
        dst[h * W + w] = scale * src[h * W + w] + gb;
      }
    }
  }
  return out;
}

/// Gradient of modulate. Spatial gradients are in resampled coordinates.
template <typename T>
void modulate_backward(const Volume<T>& X, const Volume<T>& G, std::span<const double> alpha,
                       std::span<const double> beta, std::span<const double> gamma_s,
                       std::vector<double>* d_alpha, std::vector<double>* d_beta,
                       std::vector<double>* d_gs, std::vector<double>* d_gb, Volume<T>* dX) {
  const int H = X.height();
  const int W = X.width();
  const int C = X.channels();
  if (d_alpha) d_alpha->assign(H, 0.0);
  if (d_beta) d_beta->assign(W, 0.0);
  if (d_gs) d_gs->assign(C, 0.0);
  if (d_gb) d_gb->assign(C, 0.0);
  if (dX) *dX = Volume<T>(X.shape);
  for (int c = 0; c < C; ++c) {
    const T* x = X.channel(c);
    const T* g = G.channel(c);
    double sum_gx = 0.0;
    double sum_g = 0.0;
    for (int h = 0; h < H; ++h) {
      double row_gx = 0.0;
      for (int w = 0; w < W; ++w) {
        const double gx = static_cast<double>(g[h * W + w]) * static_cast<double>(x[h * W + w]);
        row_gx += gx;
        if (d_beta) (*d_beta)[w] += gx;
        sum_g += static_cast<double>(g[h * W + w]);
      }
      if (d_alpha) (*d_alpha)[h] += row_gx;
      sum_gx += row_gx;
    }
    if (d_gs) (*d_gs)[c] = sum_gx;
    if (d_gb) (*d_gb)[c] = sum_g;
    if (dX) {
      const T gs = static_cast<T>(gamma_s[c]);
      T* dx = dX->channel(c);
      for (int h = 0; h < H; ++h) {
        const T a = alpha.empty() ? T(0) : static_cast<T>(alpha[h]);
        for (int w = 0; w < W; ++w) {
          const T b = beta.empty() ? T(0) : static_cast<T>(beta[w]);
          dx[h * W + w] = (T(1) + a + b + gs) * g[h * W + w];
        }
      }
    }
  }
}

struct Resampled {
  std::vector<double> alpha;
  std::vector<double> beta;
};

Resampled resampled_for(const GuidingParams& p, const GuideMode& mode, int H, int W) {
  if (mode.variant == GuideVariant::channel_only) {
    if (spatial_active(p)) {
      throw std::invalid_argument("channel_only guidance given non-zero alpha/beta");
    }
    return {};
  }
  auto [a, b] = resample_spatial_vectors(p.alpha, p.beta, H, W);
  return {std::move(a), std::move(b)};
}

}  // namespace

template <typename T>
Volume<T> apply_channel_guidance(const Volume<T>& A, std::span<const double> gamma_s,
                                 std::span<const double> gamma_b) {
  check_channel_vectors(gamma_s.size(), gamma_b.size(), A.channels());
  Volume<T> out(A.shape);
  const std::size_t plane = A.shape.plane();
  for (int c = 0; c < A.channels(); ++c) {
    const T scale = T(1) + static_cast<T>(gamma_s[c]);
    const T bias = static_cast<T>(gamma_b[c]);
    const T* src = A.channel(c);
    T* dst = out.channel(c);
    for (std::size_t i = 0; i < plane; ++i) dst[i] = scale * src[i] + bias;
  }
  return out;
}

template <typename T>
Volume<T> apply_full_guidance(const Volume<T>& A, const GuidingParams& p) {
  if (!p.all_finite()) throw std::invalid_argument("guiding parameters contain non-finite values");
  check_channel_vectors(p.gamma_s.size(), p.gamma_b.size(), A.channels());
  auto [alpha, beta] = resample_spatial_vectors(p.alpha, p.beta, A.height(), A.width());
  return modulate(A, alpha, beta, p.gamma_s, p.gamma_b);
}

template <typename T>
Volume<T> apply_guidance(const Volume<T>& A, const GuidingParams& p, const GuideMode& mode,
                         const ResidualBlockWeights<T>* block, GuidanceTrace<T>* trace) {
  mode.validate();
  if (!p.all_finite()) throw std::invalid_argument("guiding parameters contain non-finite values");
  if (trace) trace->input = A;
  if (mode.wrapping == GuideWrapping::direct) {
    if (block != nullptr) throw std::invalid_argument("direct guidance takes no block weights");
    check_channel_vectors(p.gamma_s.size(), p.gamma_b.size(), A.channels());
    if (mode.variant == GuideVariant::channel_only) {
      if (spatial_active(p)) {
        throw std::invalid_argument("channel_only guidance given non-zero alpha/beta");
      }
      return apply_channel_guidance(A, p.gamma_s, p.gamma_b);
    }
    return apply_full_guidance(A, p);
  }

  if (block == nullptr) throw std::invalid_argument("residual guidance requires block weights");
  if (block->project_in.in_channels != A.channels() ||
      block->project_in.out_channels != mode.residual_channels) {
    throw std::invalid_argument("residual block weights do not match feature/residual channels");
  }
  check_channel_vectors(p.gamma_s.size(), p.gamma_b.size(), mode.residual_channels);
  const Resampled rs = resampled_for(p, mode, A.height(), A.width());
  Volume<T> u = block->project_in.forward(A);
  Volume<T> r = modulate(u, rs.alpha, rs.beta, p.gamma_s, p.gamma_b);
  relu_inplace(r);
  Volume<T> out = block->project_out.forward(r);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += A.data[i];
  if (trace) {
    trace->projected = std::move(u);
    trace->activated = std::move(r);
  }
  return out;
}

template <typename T>
void apply_guidance_backward(const GuidanceTrace<T>& trace, const Volume<T>& grad_out,
                             const GuidingParams& p, const GuideMode& mode,
                             const ResidualBlockWeights<T>* block, GuidingParams* grad_params,
                             std::vector<std::vector<T>>* grad_block, Volume<T>* grad_input) {
  const Volume<T>& A = trace.input;
  const bool spatial = mode.variant == GuideVariant::spatio_semantic;
  std::vector<double> da, db, dgs, dgb;

  auto finish_params = [&](int H, int W) {
    if (!grad_params) return;
    *grad_params = p.zeros_like();
    grad_params->gamma_s = dgs;
    grad_params->gamma_b = dgb;
    if (spatial) {
      LinearResampler(static_cast<int>(p.alpha.size()), H)
          .apply_transpose<double>(da, grad_params->alpha);
      LinearResampler(static_cast<int>(p.beta.size()), W)
          .apply_transpose<double>(db, grad_params->beta);
    }
  };

  if (mode.wrapping == GuideWrapping::direct) {
    const Resampled rs = resampled_for(p, mode, A.height(), A.width());
    modulate_backward(A, grad_out, rs.alpha, rs.beta, p.gamma_s, spatial ? &da : nullptr,
                      spatial ? &db : nullptr, &dgs, &dgb, grad_input);
    finish_params(A.height(), A.width());
    return;
  }

  if (block == nullptr) throw std::invalid_argument("residual guidance requires block weights");
  T* gw_out = nullptr;
  T* gb_out = nullptr;
  T* gw_in = nullptr;
  T* gb_in = nullptr;
  if (grad_block) {
    if (grad_block->size() != 4) {
      grad_block->clear();
      for (const auto* v : block->parameters()) grad_block->emplace_back(v->size(), T(0));
    }
    gw_in = (*grad_block)[0].data();
    gb_in = (*grad_block)[1].data();
    gw_out = (*grad_block)[2].data();
    gb_out = (*grad_block)[3].data();
  }
  Volume<T> dr = block->project_out.backward(trace.activated, grad_out, gw_out, gb_out, true);
  relu_backward_inplace(trace.activated, dr);
  const Resampled rs = resampled_for(p, mode, A.height(), A.width());
  Volume<T> du;
  modulate_backward(trace.projected, dr, rs.alpha, rs.beta, p.gamma_s, spatial ? &da : nullptr,
                    spatial ? &db : nullptr, &dgs, &dgb, &du);
  finish_params(A.height(), A.width());
  const bool want_input = grad_input != nullptr;
  Volume<T> dA = block->project_in.backward(A, du, gw_in, gb_in, want_input);
  if (want_input) {
    for (std::size_t i = 0; i < dA.size(); ++i) dA.data[i] += grad_out.data[i];
    *grad_input = std::move(dA);
  }
}

#define GUIDESEG_INSTANTIATE(T)                                                                  \
  template struct ResidualBlockWeights<T>;                                                       \
  template Volume<T> apply_channel_guidance<T>(const Volume<T>&, std::span<const double>,        \
                                               std::span<const double>);                         \
  template Volume<T> apply_full_guidance<T>(const Volume<T>&, const GuidingParams&);             \
  template Volume<T> apply_guidance<T>(const Volume<T>&, const GuidingParams&, const GuideMode&, \
                                       const ResidualBlockWeights<T>*, GuidanceTrace<T>*);       \
  template void apply_guidance_backward<T>(                                                      \
      const GuidanceTrace<T>&, const Volume<T>&, const GuidingParams&, const GuideMode&,         \
      const ResidualBlockWeights<T>*, GuidingParams*, std::vector<std::vector<T>>*, Volume<T>*);

GUIDESEG_INSTANTIATE(float)
GUIDESEG_INSTANTIATE(double)
#undef GUIDESEG_INSTANTIATE

}  // namespace guideseg
