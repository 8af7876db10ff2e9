#include "mvapad/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include "mvapad/keyvalue.hpp"

namespace mvapad {

namespace {

// Skips whitespace and '#' comments, then reads one unsigned header field.
std::size_t read_header_field(const std::string& bytes, std::size_t& pos, const std::string& source) {
  while (pos < bytes.size()) {
    const auto c = static_cast<unsigned char>(bytes[pos]);
    if (c == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(c)) {
      ++pos;
    } else {
      break;
    }
  }
  const std::size_t start = pos;
  while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
  if (start == pos) throw FormatError(source + ": corrupt PGM header");
  return parse_size(std::string_view(bytes).substr(start, pos - start), source + ": PGM header");
}

}  // namespace

GrayImage decode_pgm(const std::string& bytes, const std::string& source) {
  if (bytes.size() >= 8 && bytes.compare(0, 8, "\x89PNG\r\n\x1a\n") == 0) {
    throw FormatError(source + ": PNG input is not supported; convert to binary PGM (P5)");
  }
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw FormatError(source + ": unsupported image format (expected binary PGM, magic P5)");
  }
  std::size_t pos = 2;
  GrayImage img;
  img.width = read_header_field(bytes, pos, source);
  img.height = read_header_field(bytes, pos, source);
  const std::size_t maxval = read_header_field(bytes, pos, source);
  if (img.width == 0 || img.height == 0) throw FormatError(source + ": PGM with zero size");
  if (maxval == 0 || maxval > 255) {
    throw FormatError(source + ": PGM maxval " + std::to_string(maxval) + " unsupported (need 1..255)");
  }
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw FormatError(source + ": corrupt PGM header");
  }
  ++pos;
  const std::size_t n = img.width * img.height;
  if (bytes.size() - pos < n) {
    throw FormatError(source + ": truncated PGM payload (" + std::to_string(bytes.size() - pos) + " of " +
                      std::to_string(n) + " bytes)");
  }
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  if (maxval != 255) {
    for (auto& p : img.pixels) {
      if (p > maxval) throw FormatError(source + ": PGM sample exceeds maxval");
      p = static_cast<std::uint8_t>(std::lround(p * 255.0 / static_cast<double>(maxval)));
    }
  }
  return img;
}

std::string encode_pgm(const GrayImage& image) {
  if (image.pixels.size() != image.width * image.height || image.pixels.empty()) {
    throw ContractError("encode_pgm: pixel count does not match " + std::to_string(image.width) + "x" +
                        std::to_string(image.height));
  }
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.append(image.pixels.begin(), image.pixels.end());
  return out;
}

GrayImage read_pgm(const std::string& path) { return decode_pgm(read_text_file(path), path); }

void write_pgm(const std::string& path, const GrayImage& image) {
  const std::string bytes = encode_pgm(image);
  std::ofstream out(path, std::ios::binary);
  if (!out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw IoError("cannot write '" + path + "'");
  }
}

Tensor image_to_tensor(const GrayImage& image, DType dtype) {
  Tensor t({1, image.height, image.width}, dtype);
  t.visit([&](auto d) {
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<typename decltype(d)::value_type>(image.pixels[i] / 255.0);
  });
  return t;
}

GrayImage tensor_to_image(const Tensor& t) {
  const bool planar = t.rank() == 3 && t.dim(0) == 1;
  if (t.rank() != 2 && !planar) {
    throw DimensionError("tensor_to_image: expected [H,W] or [1,H,W], got " + shape_string(t.shape()));
  }
  GrayImage img;
  img.height = t.dim(t.rank() - 2);
  img.width = t.dim(t.rank() - 1);
  img.pixels.resize(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(t.at(i), 0.0, 1.0) * 255.0));
  }
  return img;
}

Tensor resize_bilinear(const Tensor& image, std::size_t out_height, std::size_t out_width) {
  if (image.rank() != 3) throw DimensionError("resize_bilinear: expected [C,H,W], got " + shape_string(image.shape()));
  if (out_height == 0 || out_width == 0) throw DimensionError("resize_bilinear: zero target size");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == out_height && w == out_width) return image;

  // Source coordinate of an output index, half-pixel centered and clamped.
  auto taps = [](std::size_t out, std::size_t in, std::size_t n) {
    std::vector<std::pair<std::size_t, double>> t(n);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < n; ++i) {
      const double s = std::clamp((static_cast<double>(i) + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(s));
      t[i] = {i0, s - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(out_height, h, out_height);
  const auto tx = taps(out_width, w, out_width);

  Tensor out({c, out_height, out_width}, image.dtype());
  out.visit([&](auto dst) {
    using T = typename decltype(dst)::value_type;
    const auto src = image.data<T>();
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* p = src.data() + ch * h * w;
      for (std::size_t y = 0; y < out_height; ++y) {
        const auto [y0, fy] = ty[y];
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        for (std::size_t x = 0; x < out_width; ++x) {
          const auto [x0, fx] = tx[x];
          const std::size_t x1 = std::min(x0 + 1, w - 1);
          const double top = p[y0 * w + x0] * (1 - fx) + p[y0 * w + x1] * fx;
          const double bottom = p[y1 * w + x0] * (1 - fx) + p[y1 * w + x1] * fx;
          dst[(ch * out_height + y) * out_width + x] = static_cast<T>(top * (1 - fy) + bottom * fy);
        }
      }
    }
  });
  return out;
}

Tensor decode_image(const std::string& path, std::size_t size, DType dtype) {
  return resize_bilinear(image_to_tensor(read_pgm(path), dtype), size, size);
}

GrayImage normalize_to_image(const std::vector<double>& values, std::size_t height, std::size_t width) {
  if (values.size() != height * width || values.empty()) {
    throw DimensionError("normalize_to_image: " + std::to_string(values.size()) + " values for " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  GrayImage img{width, height, std::vector<std::uint8_t>(values.size(), 0)};
  const double range = *hi - *lo;
  if (range > 0) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      img.pixels[i] = static_cast<std::uint8_t>(std::lround((values[i] - *lo) / range * 255.0));
    }
  }
  return img;
}

}  // namespace mvapad
