#include "guideseg/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace guideseg {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void im2col(const Volume<T>& in, int k, int stride, int out_h, int out_w, std::vector<T>& cols) {
  const int pad = k / 2;
  const int positions = out_h * out_w;
  cols.assign(static_cast<std::size_t>(in.channels()) * k * k * positions, T(0));
  for (int c = 0; c < in.channels(); ++c) {
    const T* src = in.channel(c);
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * positions;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= in.height()) continue;
          const T* src_row = src + static_cast<std::size_t>(iy) * in.width();
          T* dst = row + static_cast<std::size_t>(oy) * out_w;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < in.width()) dst[ox] = src_row[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const std::vector<T>& cols, int k, int stride, int out_h, int out_w, Volume<T>& grad_in) {
  const int pad = k / 2;
  const int positions = out_h * out_w;
  for (int c = 0; c < grad_in.channels(); ++c) {
    T* dst = grad_in.channel(c);
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * positions;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= grad_in.height()) continue;
          T* dst_row = dst + static_cast<std::size_t>(iy) * grad_in.width();
          const T* src = row + static_cast<std::size_t>(oy) * out_w;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < grad_in.width()) dst_row[ix] += src[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(int kernel, int stride) { return kernel == 1 && stride == 1; }

}  // namespace

template <typename T>
Conv2d<T>::Conv2d(int in, int out, int k, int s)
    : in_channels(in),
      out_channels(out),
      kernel(k),
      stride(s),
      weight(static_cast<std::size_t>(out) * in * k * k, T(0)),
      bias(static_cast<std::size_t>(out), T(0)) {}

template <typename T>
Shape Conv2d<T>::output_shape(const Shape& in) const {
  const int pad = kernel / 2;
  return Shape{out_channels, (in.height + 2 * pad - kernel) / stride + 1,
               (in.width + 2 * pad - kernel) / stride + 1};
}

template <typename T>
Volume<T> Conv2d<T>::forward(const Volume<T>& in) const {
  if (in.channels() != in_channels) {
    throw std::invalid_argument("conv2d: expected " + std::to_string(in_channels) +
                                " input channels, got " + std::to_string(in.channels()));
  }
  const Shape os = output_shape(in.shape);
  const int positions = os.height * os.width;
  const int patch = in_channels * kernel * kernel;
  Volume<T> out(os);
  MapMat<T> out_m(out.data.data(), out_channels, positions);
  ConstMapMat<T> w(weight.data(), out_channels, patch);
  if (is_pointwise(kernel, stride)) {
    ConstMapMat<T> cols(in.data.data(), patch, positions);
    out_m.noalias() = w * cols;
  } else {
    std::vector<T> buf;
    im2col(in, kernel, stride, os.height, os.width, buf);
    ConstMapMat<T> cols(buf.data(), patch, positions);
    out_m.noalias() = w * cols;
  }
  for (int o = 0; o < out_channels; ++o) out_m.row(o).array() += bias[o];
  return out;
}

template <typename T>
Volume<T> Conv2d<T>::backward(const Volume<T>& in, const Volume<T>& grad_out, T* grad_weight,
                              T* grad_bias, bool want_input_grad) const {
  const Shape os = grad_out.shape;
  const int positions = os.height * os.width;
  const int patch = in_channels * kernel * kernel;
  ConstMapMat<T> g(grad_out.data.data(), out_channels, positions);
  ConstMapMat<T> w(weight.data(), out_channels, patch);

  std::vector<T> buf;
  const T* cols_ptr = nullptr;
  if (is_pointwise(kernel, stride)) {
    cols_ptr = in.data.data();
  } else if (grad_weight != nullptr) {
    im2col(in, kernel, stride, os.height, os.width, buf);
    cols_ptr = buf.data();
  }
  if (grad_weight != nullptr) {
    ConstMapMat<T> cols(cols_ptr, patch, positions);
    MapMat<T> gw(grad_weight, out_channels, patch);
    gw.noalias() += g * cols.transpose();
  }
  if (grad_bias != nullptr) {
    // plain loop: Eigen's vectorized sum peels by address, which made training depend on heap layout
    for (int o = 0; o < out_channels; ++o) {
      const T* row = grad_out.data.data() + static_cast<std::size_t>(o) * positions;
      T acc = 0;
      for (int i = 0; i < positions; ++i) acc += row[i];
      grad_bias[o] += acc;
    }
  }
  if (!want_input_grad) return {};

  Volume<T> grad_in(in.shape);
  if (is_pointwise(kernel, stride)) {
    MapMat<T> gi(grad_in.data.data(), patch, positions);
    gi.noalias() = w.transpose() * g;
  } else {
    std::vector<T> dcols(static_cast<std::size_t>(patch) * positions);
    MapMat<T> dc(dcols.data(), patch, positions);
    dc.noalias() = w.transpose() * g;
    col2im(dcols, kernel, stride, os.height, os.width, grad_in);
  }
  return grad_in;
}

template <typename T>
void relu_inplace(Volume<T>& v) {
  for (T& x : v.data) x = x > T(0) ? x : T(0);
}

template <typename T>
void relu_backward_inplace(const Volume<T>& activated, Volume<T>& grad) {
  for (std::size_t i = 0; i < grad.data.size(); ++i) {
    if (!(activated.data[i] > T(0))) grad.data[i] = T(0);
  }
}

LinearResampler::LinearResampler(int src_len, int dst_len) : src_len_(src_len) {
  if (src_len <= 0 || dst_len <= 0) {
    throw std::invalid_argument("linear resampling needs non-empty source and target");
  }
  lo.resize(dst_len);
  hi.resize(dst_len);
  frac.resize(dst_len);
  for (int i = 0; i < dst_len; ++i) {
    if (src_len == 1) {
      lo[i] = hi[i] = 0;
      frac[i] = 0.0;
      continue;
    }
    if (src_len == dst_len) {
      lo[i] = hi[i] = i;
      frac[i] = 0.0;
      continue;
    }
    const double pos =
        dst_len == 1 ? 0.0 : static_cast<double>(i) * (src_len - 1) / (dst_len - 1);
    int l = static_cast<int>(std::floor(pos));
    l = std::clamp(l, 0, src_len - 1);
    lo[i] = l;
    hi[i] = std::min(l + 1, src_len - 1);
    frac[i] = pos - l;
  }
}

template <typename T>
void LinearResampler::apply(std::span<const T> src, std::span<T> dst) const {
  for (std::size_t i = 0; i < lo.size(); ++i) {
    if (frac[i] == 0.0) {
      dst[i] = src[lo[i]];
    } else {
      const T f = static_cast<T>(frac[i]);
      dst[i] = src[lo[i]] * (T(1) - f) + src[hi[i]] * f;
    }
  }
}

template <typename T>
void LinearResampler::apply_transpose(std::span<const T> grad_dst, std::span<T> grad_src) const {
  for (std::size_t i = 0; i < lo.size(); ++i) {
    const T f = static_cast<T>(frac[i]);
    grad_src[lo[i]] += grad_dst[i] * (T(1) - f);
    if (frac[i] != 0.0) grad_src[hi[i]] += grad_dst[i] * f;
  }
}

template <typename T>
Volume<T> resize_bilinear(const Volume<T>& in, int out_h, int out_w) {
  const LinearResampler ry(in.height(), out_h);
  const LinearResampler rx(in.width(), out_w);
  Volume<T> out(in.channels(), out_h, out_w);
  std::vector<T> row_buf(static_cast<std::size_t>(in.height()) * out_w);
  for (int c = 0; c < in.channels(); ++c) {
    const T* src = in.channel(c);
    for (int y = 0; y < in.height(); ++y) {
      rx.apply<T>(std::span<const T>(src + static_cast<std::size_t>(y) * in.width(), in.width()),
                  std::span<T>(row_buf.data() + static_cast<std::size_t>(y) * out_w, out_w));
    }
    T* dst = out.channel(c);
    for (int y = 0; y < out_h; ++y) {
      const T f = static_cast<T>(ry.frac[y]);
      const T* a = row_buf.data() + static_cast<std::size_t>(ry.lo[y]) * out_w;
      const T* b = row_buf.data() + static_cast<std::size_t>(ry.hi[y]) * out_w;
      T* d = dst + static_cast<std::size_t>(y) * out_w;
      if (ry.frac[y] == 0.0) {
        std::copy(a, a + out_w, d);
      } else {
        for (int x = 0; x < out_w; ++x) d[x] = a[x] * (T(1) - f) + b[x] * f;
      }
    }
  }
  return out;
}

template <typename T>
Volume<T> resize_bilinear_backward(const Volume<T>& grad_out, const Shape& in_shape) {
  const LinearResampler ry(in_shape.height, grad_out.height());
  const LinearResampler rx(in_shape.width, grad_out.width());
  const int out_w = grad_out.width();
  Volume<T> grad_in(in_shape);
  std::vector<T> row_buf(static_cast<std::size_t>(in_shape.height) * out_w);
  for (int c = 0; c < in_shape.channels; ++c) {
    std::fill(row_buf.begin(), row_buf.end(), T(0));
    const T* g = grad_out.channel(c);
    for (int y = 0; y < grad_out.height(); ++y) {
      const T f = static_cast<T>(ry.frac[y]);
      const T* gr = g + static_cast<std::size_t>(y) * out_w;
      T* a = row_buf.data() + static_cast<std::size_t>(ry.lo[y]) * out_w;
      T* b = row_buf.data() + static_cast<std::size_t>(ry.hi[y]) * out_w;
      if (ry.frac[y] == 0.0) {
        for (int x = 0; x < out_w; ++x) a[x] += gr[x];
      } else {
        for (int x = 0; x < out_w; ++x) {
          a[x] += gr[x] * (T(1) - f);
          b[x] += gr[x] * f;
        }
      }
    }
    T* dst = grad_in.channel(c);
    for (int y = 0; y < in_shape.height; ++y) {
      rx.apply_transpose<T>(
          std::span<const T>(row_buf.data() + static_cast<std::size_t>(y) * out_w, out_w),
          std::span<T>(dst + static_cast<std::size_t>(y) * in_shape.width, in_shape.width));
    }
  }
  return grad_in;
}

template <typename T>
Volume<T> concat_channels(const Volume<T>& a, const Volume<T>& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw std::invalid_argument("concat_channels: spatial size mismatch");
  }
  Volume<T> out(a.channels() + b.channels(), a.height(), a.width());
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

template <typename T>
std::pair<Volume<T>, Volume<T>> split_channels(const Volume<T>& grad, int first_channels) {
  Volume<T> a(first_channels, grad.height(), grad.width());
  Volume<T> b(grad.channels() - first_channels, grad.height(), grad.width());
  std::copy(grad.data.begin(), grad.data.begin() + static_cast<std::ptrdiff_t>(a.size()),
            a.data.begin());
  std::copy(grad.data.begin() + static_cast<std::ptrdiff_t>(a.size()), grad.data.end(),
            b.data.begin());
  return {std::move(a), std::move(b)};
}

template <typename T>
Volume<T> softmax_channels(const Volume<T>& logits) {
  Volume<T> out(logits.shape);
  const std::size_t plane = logits.shape.plane();
  const int C = logits.channels();
  for (std::size_t p = 0; p < plane; ++p) {
    T mx = logits.data[p];
    for (int c = 1; c < C; ++c) mx = std::max(mx, logits.data[c * plane + p]);
    T sum(0);
    for (int c = 0; c < C; ++c) {
      const T e = std::exp(logits.data[c * plane + p] - mx);
      out.data[c * plane + p] = e;
      sum += e;
    }
    for (int c = 0; c < C; ++c) out.data[c * plane + p] /= sum;
  }
  return out;
}

template <typename T>
double weighted_cross_entropy(const Volume<T>& logits, const LabelMap& labels,
                              std::span<const double> weights, Volume<T>* grad,
                              double grad_scale) {
  const std::size_t plane = logits.shape.plane();
  const int C = logits.channels();
  if (labels.size() != plane || (!weights.empty() && weights.size() != plane)) {
    throw std::invalid_argument("cross entropy: label/weight size does not match logits");
  }
  if (grad != nullptr) *grad = Volume<T>(logits.shape);
  double total = 0.0;
  std::vector<double> prob(C);
  for (std::size_t p = 0; p < plane; ++p) {
    const int label = labels.labels[p];
    if (label < 0 || label >= C) continue;
    const double w = weights.empty() ? 1.0 : weights[p];
    if (w == 0.0) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(logits.data[c * plane + p]));
    double sum = 0.0;
    for (int c = 0; c < C; ++c) {
      prob[c] = std::exp(static_cast<double>(logits.data[c * plane + p]) - mx);
      sum += prob[c];
    }
    const double log_sum = std::log(sum) + mx;
    total += w * (log_sum - static_cast<double>(logits.data[label * plane + p]));
    if (grad != nullptr) {
      for (int c = 0; c < C; ++c) {
        const double d = prob[c] / sum - (c == label ? 1.0 : 0.0);
        grad->data[c * plane + p] = static_cast<T>(w * d * grad_scale);
      }
    }
  }
  return total;
}

template <typename T>
LabelMap argmax_channels(const Volume<T>& scores) {
  LabelMap out(scores.height(), scores.width());
  const std::size_t plane = scores.shape.plane();
  for (std::size_t p = 0; p < plane; ++p) {
    int best = 0;
    T best_v = scores.data[p];
    for (int c = 1; c < scores.channels(); ++c) {
      const T v = scores.data[c * plane + p];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    out.labels[p] = best;
  }
  return out;
}

#define GUIDESEG_INSTANTIATE(T)                                                               \
  template struct Conv2d<T>;                                                                  \
  template void relu_inplace<T>(Volume<T>&);                                                  \
  template void relu_backward_inplace<T>(const Volume<T>&, Volume<T>&);                       \
  template void LinearResampler::apply<T>(std::span<const T>, std::span<T>) const;            \
  template void LinearResampler::apply_transpose<T>(std::span<const T>, std::span<T>) const;  \
  template Volume<T> resize_bilinear<T>(const Volume<T>&, int, int);                          \
  template Volume<T> resize_bilinear_backward<T>(const Volume<T>&, const Shape&);             \
  template Volume<T> concat_channels<T>(const Volume<T>&, const Volume<T>&);                  \
  template std::pair<Volume<T>, Volume<T>> split_channels<T>(const Volume<T>&, int);          \
  template Volume<T> softmax_channels<T>(const Volume<T>&);                                   \
  template double weighted_cross_entropy<T>(const Volume<T>&, const LabelMap&,                \
                                            std::span<const double>, Volume<T>*, double);     \
  template LabelMap argmax_channels<T>(const Volume<T>&);

GUIDESEG_INSTANTIATE(float)
GUIDESEG_INSTANTIATE(double)
#undef GUIDESEG_INSTANTIATE

}  // namespace guideseg
