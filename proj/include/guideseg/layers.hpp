#pragma once

#include <span>
#include <vector>

#include "guideseg/volume.hpp"

namespace guideseg {

/// Square convolution with zero padding of kernel/2 on each side.
template <typename T>
struct Conv2d {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  std::vector<T> weight;  // out_channels x (in_channels * kernel * kernel)
  std::vector<T> bias;    // out_channels

  Conv2d() = default;
  Conv2d(int in, int out, int k, int s);

  Shape output_shape(const Shape& in) const;
  Volume<T> forward(const Volume<T>& in) const;

  /// Gradient with respect to `in`. Weight gradients are accumulated into
  /// `grad_weight`/`grad_bias` when those are non-null.
  Volume<T> backward(const Volume<T>& in, const Volume<T>& grad_out, T* grad_weight,
                     T* grad_bias, bool want_input_grad = true) const;

  template <typename U>
  Conv2d<U> cast() const {
    Conv2d<U> out;
    out.in_channels = in_channels;
    out.out_channels = out_channels;
    out.kernel = kernel;
    out.stride = stride;
    out.weight.assign(weight.begin(), weight.end());
    out.bias.assign(bias.begin(), bias.end());
    return out;
  }
};

template <typename T>
void relu_inplace(Volume<T>& v);

/// Multiplies `grad` by the ReLU derivative evaluated at the activation output.
template <typename T>
void relu_backward_inplace(const Volume<T>& activated, Volume<T>& grad);

/// Endpoint-aligned 1-D linear interpolation weights.
struct LinearResampler {
  std::vector<int> lo;
  std::vector<int> hi;
  std::vector<double> frac;

  LinearResampler(int src_len, int dst_len);
  int source_length() const { return src_len_; }
  int target_length() const { return static_cast<int>(lo.size()); }

  template <typename T>
  void apply(std::span<const T> src, std::span<T> dst) const;
  /// Transpose of apply: accumulates dst gradients back onto the source.
  template <typename T>
  void apply_transpose(std::span<const T> grad_dst, std::span<T> grad_src) const;

 private:
  int src_len_;
};

/// Bilinear, endpoint-aligned resize of every channel.
template <typename T>
Volume<T> resize_bilinear(const Volume<T>& in, int out_h, int out_w);
template <typename T>
Volume<T> resize_bilinear_backward(const Volume<T>& grad_out, const Shape& in_shape);

template <typename T>
Volume<T> concat_channels(const Volume<T>& a, const Volume<T>& b);
/// Splits a gradient of concat_channels(a, b) into its two parts.
template <typename T>
std::pair<Volume<T>, Volume<T>> split_channels(const Volume<T>& grad, int first_channels);

/// Per-pixel softmax over the channel axis.
template <typename T>
Volume<T> softmax_channels(const Volume<T>& logits);

/// Sum over pixels of weight[p] * -log softmax(logits)[label[p]]. Pixels whose
/// label is outside [0, C) or whose weight is zero do not contribute.
/// When `grad` is non-null it receives d(sum)/d(logits) scaled by `grad_scale`.
template <typename T>
double weighted_cross_entropy(const Volume<T>& logits, const LabelMap& labels,
                              std::span<const double> weights, Volume<T>* grad,
                              double grad_scale = 1.0);

/// Argmax over channels.
template <typename T>
LabelMap argmax_channels(const Volume<T>& scores);

}  // namespace guideseg
