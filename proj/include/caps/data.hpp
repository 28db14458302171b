#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "caps/errors.hpp"
#include "caps/rng.hpp"
#include "caps/tensor.hpp"

namespace caps {

template <typename S>
struct Dataset {
  Tensor<S> images;  // [n, c, h, w], values in [0, 1]
  std::vector<int> labels;
  std::string split;

  std::int64_t size() const {
    return images.rank() == 4 ? images.shape()[0] : 0;
  }

  Tensor<S> image(std::int64_t i) const {
    const Shape& s = images.shape();
    const std::int64_t per = s[1] * s[2] * s[3];
    Tensor<S> out({s[1], s[2], s[3]});
    for (std::int64_t p = 0; p < per; ++p) out[p] = images[i * per + p];
    return out;
  }

  Dataset take(std::int64_t from, std::int64_t count) const {
    const Shape& s = images.shape();
    const std::int64_t per = s[1] * s[2] * s[3];
    Dataset out;
    out.split = split;
    out.images = Tensor<S>({count, s[1], s[2], s[3]});
    out.labels.assign(labels.begin() + from, labels.begin() + from + count);
    for (std::int64_t p = 0; p < count * per; ++p)
      out.images[p] = images[from * per + p];
    return out;
  }
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw FormatError("truncated IDX header");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace detail

// IDX image/label pair (big-endian headers, magic 0x00000803 / 0x00000801);
// pixel bytes are scaled to [0, 1] by /255.
template <typename S>
Dataset<S> load_idx(const std::string& images_path,
                    const std::string& labels_path) {
  std::ifstream imf(images_path, std::ios::binary);
  if (!imf) throw FormatError("cannot open " + images_path);
  std::ifstream lbf(labels_path, std::ios::binary);
  if (!lbf) throw FormatError("cannot open " + labels_path);

  const std::uint32_t im_magic = detail::read_be32(imf);
  if (im_magic != 0x00000803u)
    throw FormatError("bad image magic in " + images_path);
  const std::uint32_t n = detail::read_be32(imf);
  const std::uint32_t h = detail::read_be32(imf);
  const std::uint32_t w = detail::read_be32(imf);

  const std::uint32_t lb_magic = detail::read_be32(lbf);
  if (lb_magic != 0x00000801u)
    throw FormatError("bad label magic in " + labels_path);
  const std::uint32_t ln = detail::read_be32(lbf);
  if (ln != n)
    throw FormatError("image count " + std::to_string(n) +
                      " != label count " + std::to_string(ln));

  Dataset<S> ds;
  ds.images = Tensor<S>({static_cast<std::int64_t>(n), 1,
                         static_cast<std::int64_t>(h),
                         static_cast<std::int64_t>(w)});
  std::vector<unsigned char> buf(static_cast<std::size_t>(h) * w);
  for (std::uint32_t i = 0; i < n; ++i) {
    imf.read(reinterpret_cast<char*>(buf.data()),
             static_cast<std::streamsize>(buf.size()));
    if (!imf) throw FormatError("truncated image payload in " + images_path);
    S* dst = ds.images.data() + static_cast<std::int64_t>(i) * h * w;
    for (std::size_t p = 0; p < buf.size(); ++p)
      dst[p] = static_cast<S>(buf[p]) / S(255);
  }
  ds.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    unsigned char c;
    lbf.read(reinterpret_cast<char*>(&c), 1);
    if (!lbf) throw FormatError("truncated label payload in " + labels_path);
    ds.labels[i] = static_cast<int>(c);
  }
  return ds;
}

namespace detail {

// Glyph families drawn with two-pixel strokes on a centered box; the
// positional jitter moves the whole figure. Stroke thickness keeps the
// jittered class supports overlapping, which is what caps a linear classifier
// well below the conv models.
inline void draw_glyph(std::vector<double>& img, std::int64_t size, int family,
                       std::int64_t dx, std::int64_t dy, double intensity) {
  const auto set = [&](std::int64_t y, std::int64_t x) {
    y += dy;
    x += dx;
    if (y < 0 || y >= size || x < 0 || x >= size) return;
    img[static_cast<std::size_t>(y * size + x)] = intensity;
  };
  const std::int64_t lo = size / 4, hi = size - 1 - size / 4;
  const std::int64_t mid = size / 2;
  switch (family % 8) {
    case 0:  // horizontal bar
      for (std::int64_t x = lo; x <= hi; ++x) {
        set(mid - 1, x);
        set(mid, x);
      }
      break;
    case 1:  // vertical bar
      for (std::int64_t y = lo; y <= hi; ++y) {
        set(y, mid - 1);
        set(y, mid);
      }
      break;
    case 2:  // cross
      for (std::int64_t x = lo; x <= hi; ++x) {
        set(mid - 1, x);
        set(mid, x);
      }
      for (std::int64_t y = lo; y <= hi; ++y) {
        set(y, mid - 1);
        set(y, mid);
      }
      break;
    case 3:  // box outline
      for (std::int64_t x = lo; x <= hi; ++x) {
        set(lo, x);
        set(hi, x);
      }
      for (std::int64_t y = lo; y <= hi; ++y) {
        set(y, lo);
        set(y, hi);
      }
      break;
    case 4:  // main diagonal
      for (std::int64_t i = lo; i <= hi; ++i) {
        set(i, i);
        set(i, i - 1);
      }
      break;
    case 5:  // anti-diagonal
      for (std::int64_t i = lo; i <= hi; ++i) {
        set(i, size - 1 - i);
        set(i, size - i);
      }
      break;
    case 6:  // X
      for (std::int64_t i = lo; i <= hi; ++i) {
        set(i, i);
        set(i, size - 1 - i);
      }
      break;
    case 7:  // T
      for (std::int64_t x = lo; x <= hi; ++x) set(lo, x);
      for (std::int64_t y = lo; y <= hi; ++y) {
        set(y, mid - 1);
        set(y, mid);
      }
      break;
  }
}

}  // namespace detail

// Deterministic desk-scale dataset: M glyph families with positional jitter,
// per-example intensity variation and pixel noise. Classes appear round-robin
// so any prefix is close to balanced.
template <typename S>
Dataset<S> synthetic_dataset(int num_classes, std::int64_t per_class,
                             std::int64_t size, std::uint64_t seed,
                             std::int64_t jitter = 3, double noise = 0.05) {
  if (num_classes < 1 || num_classes > 8)
    throw ConfigError("synthetic_dataset supports 1..8 classes");
  const std::int64_t n = per_class * num_classes;
  Rng rng(mix_seed(seed, 0xda7a));
  Dataset<S> ds;
  ds.images = Tensor<S>({n, 1, size, size});
  ds.labels.resize(static_cast<std::size_t>(n));
  std::vector<double> canvas(static_cast<std::size_t>(size * size));
  for (std::int64_t i = 0; i < n; ++i) {
    const int family = static_cast<int>(i % num_classes);
    ds.labels[static_cast<std::size_t>(i)] = family;
    std::fill(canvas.begin(), canvas.end(), 0.0);
    const std::int64_t dx = rng.uniform_int(2 * jitter + 1) - jitter;
    const std::int64_t dy = rng.uniform_int(2 * jitter + 1) - jitter;
    const double intensity = rng.uniform(0.7, 1.0);
    detail::draw_glyph(canvas, size, family, dx, dy, intensity);
    S* dst = ds.images.data() + i * size * size;
    for (std::int64_t p = 0; p < size * size; ++p) {
      double v = canvas[static_cast<std::size_t>(p)] + rng.normal(0.0, noise);
      v = std::min(1.0, std::max(0.0, v));
      dst[p] = static_cast<S>(v);
    }
  }
  return ds;
}

// Rotate about the center, then translate by (tx, ty); inverse-mapped with
// bilinear interpolation and zero padding.
template <typename S>
Tensor<S> affine_transform(const Tensor<S>& image, std::int64_t tx,
                           std::int64_t ty, double rotate_deg) {
  const std::int64_t c = image.shape()[0];
  const std::int64_t h = image.shape()[1];
  const std::int64_t w = image.shape()[2];
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double rad = rotate_deg * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  Tensor<S> out({c, h, w});
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const S* src = image.data() + ch * h * w;
    S* dst = out.data() + ch * h * w;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        // undo translation, then rotate backwards about the center
        const double py = static_cast<double>(y - ty) - cy;
        const double px = static_cast<double>(x - tx) - cx;
        const double sy = cs * py + sn * px + cy;
        const double sx = -sn * py + cs * px + cx;
        const std::int64_t y0 = static_cast<std::int64_t>(std::floor(sy));
        const std::int64_t x0 = static_cast<std::int64_t>(std::floor(sx));
        const double fy = sy - static_cast<double>(y0);
        const double fx = sx - static_cast<double>(x0);
        double acc = 0.0;
        const auto sample = [&](std::int64_t yy, std::int64_t xx) -> double {
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
          return static_cast<double>(src[yy * w + xx]);
        };
        acc += sample(y0, x0) * (1.0 - fy) * (1.0 - fx);
        acc += sample(y0, x0 + 1) * (1.0 - fy) * fx;
        acc += sample(y0 + 1, x0) * fy * (1.0 - fx);
        acc += sample(y0 + 1, x0 + 1) * fy * fx;
        dst[y * w + x] = static_cast<S>(acc);
      }
  }
  return out;
}

// Random affine: integer translation in [-t, t] per axis, rotation uniform in
// [-d, d] degrees about the image center; bilinear resampling, zero fill.
template <typename S>
Tensor<S> random_affine(const Tensor<S>& image, std::int64_t max_translate_px,
                        double max_rotate_deg, Rng& rng) {
  if (image.rank() != 3) throw ShapeError("random_affine expects [c, h, w]");
  if (max_translate_px < 0 || max_rotate_deg < 0)
    throw ConfigError("affine parameters must be >= 0");
  const std::int64_t tx =
      rng.uniform_int(2 * max_translate_px + 1) - max_translate_px;
  const std::int64_t ty =
      rng.uniform_int(2 * max_translate_px + 1) - max_translate_px;
  const double deg = rng.uniform(-max_rotate_deg, max_rotate_deg);
  return affine_transform(image, tx, ty, deg);
}

}  // namespace caps
