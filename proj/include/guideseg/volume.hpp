#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace guideseg {

struct Shape {
  int channels = 0;
  int height = 0;
  int width = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" +
         std::to_string(s.channels);
}

/// Dense activation volume stored channel-major (C, H, W).
template <typename T>
struct Volume {
  Shape shape;
  std::vector<T> data;

  Volume() = default;
  explicit Volume(Shape s, T fill = T(0)) : shape(s), data(s.size(), fill) {}
  Volume(int c, int h, int w, T fill = T(0)) : Volume(Shape{c, h, w}, fill) {}

  int channels() const { return shape.channels; }
  int height() const { return shape.height; }
  int width() const { return shape.width; }
  std::size_t size() const { return data.size(); }

  T& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * shape.height + y) * shape.width + x];
  }
  const T& at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * shape.height + y) * shape.width + x];
  }
  T* channel(int c) { return data.data() + static_cast<std::size_t>(c) * shape.plane(); }
  const T* channel(int c) const {
    return data.data() + static_cast<std::size_t>(c) * shape.plane();
  }

  template <typename U>
  Volume<U> cast() const {
    Volume<U> out(shape);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  friend bool operator==(const Volume&, const Volume&) = default;
};

/// Row-major integer map, used for label maps and class predictions.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<int> labels;

  LabelMap() = default;
  LabelMap(int h, int w, int fill = 0)
      : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

  int& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  int at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return labels.size(); }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

inline constexpr int kIgnoreLabel = 255;

using Image = Volume<float>;  // RGB in [0,1], 3 x H x W

}  // namespace guideseg
