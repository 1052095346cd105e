#pragma once

#include <cstdint>
#include <vector>

namespace aligndet {

/// 8-bit interleaved (HWC) image; channel values map to [0,1] as v / 255.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int h, int w, int c = 3)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h * w * c), 0) {}

  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
            static_cast<std::size_t>(x)) * static_cast<std::size_t>(channels) +
           static_cast<std::size_t>(c);
  }
  double at(int y, int x, int c) const { return pixels[index(y, x, c)] / 255.0; }
  std::uint8_t& raw(int y, int x, int c) { return pixels[index(y, x, c)]; }

  bool operator==(const Image&) const = default;
};

}  // namespace aligndet
