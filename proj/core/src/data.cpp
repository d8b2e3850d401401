#include "freqexit/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>

#include "freqexit/errors.hpp"
#include "freqexit/rng.hpp"
#include "freqexit/serialize.hpp"

namespace freqexit {

std::vector<const TensorR*> Dataset::pixel_ptrs() const {
  std::vector<const TensorR*> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(&it.pixels);
  return out;
}

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.label);
  return out;
}

const std::vector<std::string>& texture_families() {
  static const std::vector<std::string> names{
      "horizontal-stripes", "vertical-stripes", "checker",         "radial-gradient",
      "diagonal-bands",     "blobs",            "rings",           "noise-low-freq",
      "noise-high-freq",    "solid-with-spots"};
  return names;
}

// ---------------------------------------------------------------------------
// Texture synthesis. Each family draws a gray pattern f in [0, 1], which is
// colourised with a per-image background, amplitude and tint, then jittered by
// pixel noise and quantised to 8 bits.

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

using Pattern = std::vector<double>;  // size*size, row-major

Pattern stripes(Rng& rng, std::size_t n, int dir) {
  const double k = rng.uniform(2.0, 4.5), phase = rng.uniform(0.0, kTwoPi);
  Pattern f(n * n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      double t = 0.0;
      if (dir == 0) t = static_cast<double>(y);
      else if (dir == 1) t = static_cast<double>(x);
      else if (dir == 2) t = (static_cast<double>(x) + static_cast<double>(y)) / std::numbers::sqrt2;
      else t = (static_cast<double>(x) - static_cast<double>(y)) / std::numbers::sqrt2;
      f[y * n + x] = 0.5 + 0.5 * std::sin(kTwoPi * k * t / static_cast<double>(n) + phase);
    }
  return f;
}

Pattern checker(Rng& rng, std::size_t n) {
  const double k = rng.uniform(2.0, 4.5);
  const double px = rng.uniform(0.0, kTwoPi), py = rng.uniform(0.0, kTwoPi);
  Pattern f(n * n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double s = std::sin(kTwoPi * k * static_cast<double>(x) / static_cast<double>(n) + px) *
                       std::sin(kTwoPi * k * static_cast<double>(y) / static_cast<double>(n) + py);
      f[y * n + x] = s >= 0.0 ? 1.0 : 0.0;
    }
  return f;
}

std::pair<double, double> centre(Rng& rng, std::size_t n) {
  const double lo = 0.25 * static_cast<double>(n), hi = 0.75 * static_cast<double>(n);
  return {rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

Pattern radial(Rng& rng, std::size_t n) {
  const auto [cx, cy] = centre(rng, n);
  const double radius = rng.uniform(0.4, 0.8) * static_cast<double>(n);
  Pattern f(n * n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double r = std::hypot(static_cast<double>(x) - cx, static_cast<double>(y) - cy);
      f[y * n + x] = std::clamp(1.0 - r / radius, 0.0, 1.0);
    }
  return f;
}

Pattern rings(Rng& rng, std::size_t n) {
  const auto [cx, cy] = centre(rng, n);
  const double period = rng.uniform(4.0, 7.0), phase = rng.uniform(0.0, kTwoPi);
  Pattern f(n * n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double r = std::hypot(static_cast<double>(x) - cx, static_cast<double>(y) - cy);
      f[y * n + x] = 0.5 + 0.5 * std::cos(kTwoPi * r / period + phase);
    }
  return f;
}

Pattern spots(Rng& rng, std::size_t n, std::size_t count_lo, std::size_t count_hi, double r_lo,
              double r_hi, bool gaussian) {
  const std::size_t count = count_lo + rng.below(count_hi - count_lo + 1);
  Pattern f(n * n, 0.0);
  for (std::size_t i = 0; i < count; ++i) {
    const double cx = rng.uniform(0.0, static_cast<double>(n));
    const double cy = rng.uniform(0.0, static_cast<double>(n));
    const double r = rng.uniform(r_lo, r_hi);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double d = std::hypot(static_cast<double>(x) - cx, static_cast<double>(y) - cy);
        double& v = f[y * n + x];
        if (gaussian) v += std::exp(-0.5 * d * d / (r * r));
        else if (d <= r) v = 1.0;
      }
  }
  for (auto& v : f) v = std::min(v, 1.0);
  return f;
}

Pattern smooth_noise(Rng& rng, std::size_t n) {
  // Sum of a few random plane waves with at most two cycles per image.
  Pattern f(n * n, 0.0);
  const int waves = 4;
  for (int w = 0; w < waves; ++w) {
    const double fx = rng.uniform(-2.0, 2.0), fy = rng.uniform(-2.0, 2.0);
    const double phase = rng.uniform(0.0, kTwoPi), amp = rng.uniform(0.5, 1.0);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x)
        f[y * n + x] += amp * std::cos(kTwoPi * (fx * static_cast<double>(x) +
                                                 fy * static_cast<double>(y)) /
                                           static_cast<double>(n) +
                                       phase);
  }
  const auto [lo, hi] = std::minmax_element(f.begin(), f.end());
  const double a = *lo, span = std::max(*hi - *lo, 1e-9);
  for (auto& v : f) v = (v - a) / span;
  return f;
}

Pattern white_noise(Rng& rng, std::size_t n) {
  Pattern f(n * n);
  for (auto& v : f) v = rng.uniform();
  return f;
}

Pattern draw_pattern(std::size_t family, Rng& rng, std::size_t n) {
  switch (family) {
    case 0: return stripes(rng, n, 0);
    case 1: return stripes(rng, n, 1);
    case 2: return checker(rng, n);
    case 3: return radial(rng, n);
    case 4: return stripes(rng, n, rng.below(2) == 0 ? 2 : 3);
    case 5: return spots(rng, n, 3, 6, 0.08 * static_cast<double>(n), 0.13 * static_cast<double>(n), true);
    case 6: return rings(rng, n);
    case 7: return smooth_noise(rng, n);
    case 8: return white_noise(rng, n);
    default: return spots(rng, n, 4, 10, 1.0, 2.0, false);
  }
}

double quantise(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

TensorR colourise(const Pattern& f, Rng& rng, std::size_t n) {
  double bg[3], tint[3];
  const double amp = rng.uniform(0.45, 0.8);
  for (int c = 0; c < 3; ++c) {
    bg[c] = rng.uniform(0.35, 0.65);
    tint[c] = rng.uniform(0.6, 1.0);
  }
  const double noise = 0.04;
  TensorR img({n, n, 3});
  for (std::size_t i = 0; i < n * n; ++i)
    for (int c = 0; c < 3; ++c)
      img[i * 3 + static_cast<std::size_t>(c)] =
          quantise(bg[c] + amp * tint[c] * (f[i] - 0.5) + noise * rng.normal());
  return img;
}

std::string pad(std::size_t i, int width) {
  std::string s = std::to_string(i);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

}  // namespace

Dataset generate_synthetic(std::size_t n_per_class, std::size_t num_classes, std::size_t size,
                           std::uint64_t seed) {
  const auto& families = texture_families();
  if (num_classes > families.size()) {
    throw DataError("unsupported class count " + std::to_string(num_classes) + " (at most " +
                    std::to_string(families.size()) + " texture families)");
  }
  if (num_classes < 1 || size < 1) throw DataError("empty synthetic dataset requested");
  Dataset out;
  out.class_names.assign(families.begin(), families.begin() + static_cast<std::ptrdiff_t>(num_classes));
  out.items.reserve(n_per_class * num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    Rng rng(derive_seed(seed, "synthetic/" + families[c]));
    for (std::size_t i = 0; i < n_per_class; ++i) {
      const Pattern f = draw_pattern(c, rng, size);
      out.items.push_back({colourise(f, rng, size), static_cast<int>(c), families[c] + "_" + pad(i, 4)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Netpbm

namespace {

class HeaderReader {
 public:
  HeaderReader(std::string_view bytes, const std::string& name) : b_(bytes), name_(name) {}

  std::size_t number(const char* what) {
    skip_space_and_comments();
    if (pos_ >= b_.size() || !std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
      fail(std::string("expected ") + what);
    }
    std::size_t v = 0;
    while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(b_[pos_] - '0');
      if (v > (1u << 24)) fail(std::string(what) + " too large");
      ++pos_;
    }
    return v;
  }

  /// Consumes the single whitespace byte that ends the header.
  std::size_t raster_start() {
    if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_]))) {
      fail("missing whitespace after maxval");
    }
    return pos_ + 1;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError(name_ + ": malformed pixmap header: " + msg);
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (std::isspace(static_cast<unsigned char>(b_[pos_]))) {
        ++pos_;
      } else if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n' && b_[pos_] != '\r') ++pos_;
      } else {
        break;
      }
    }
  }

  std::string_view b_;
  const std::string& name_;
  std::size_t pos_ = 2;
};

}  // namespace

TensorR decode_pixmap(std::string_view bytes, const std::string& name) {
  HeaderReader rd(bytes, name);
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    rd.fail("magic is not P5 or P6");
  }
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  const std::size_t width = rd.number("width");
  const std::size_t height = rd.number("height");
  const std::size_t maxval = rd.number("maxval");
  if (width == 0 || height == 0) rd.fail("zero extent");
  if (maxval == 0 || maxval > 255) rd.fail("maxval must be in [1, 255]");
  const std::size_t start = rd.raster_start();
  const std::size_t count = width * height * channels;
  if (bytes.size() - std::min(bytes.size(), start) < count) {
    throw ParseError(name + ": truncated raster (" + std::to_string(count) + " samples expected)");
  }
  TensorR out({height, width, channels});
  const auto denom = static_cast<double>(maxval);
  for (std::size_t i = 0; i < count; ++i) {
    const auto s = static_cast<unsigned char>(bytes[start + i]);
    if (s > maxval) throw ParseError(name + ": sample exceeds maxval");
    out[i] = static_cast<double>(s) / denom;
  }
  return out;
}

std::string encode_pixmap(const TensorR& pixels) {
  if (pixels.rank() != 3 || (pixels.extent(2) != 1 && pixels.extent(2) != 3)) {
    throw DimensionError("encode_pixmap expects [H, W, 1] or [H, W, 3], got " +
                         shape_string(pixels.shape()));
  }
  std::string out = (pixels.extent(2) == 1 ? "P5\n" : "P6\n") + std::to_string(pixels.extent(1)) +
                    " " + std::to_string(pixels.extent(0)) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    out[header + i] = static_cast<char>(
        static_cast<unsigned char>(std::lround(std::clamp(pixels[i], 0.0, 1.0) * 255.0)));
  }
  return out;
}

TensorR read_pixmap(const std::filesystem::path& path) {
  return decode_pixmap(read_file(path), path.string());
}

void write_pixmap(const std::filesystem::path& path, const TensorR& pixels) {
  write_file_atomic(path, encode_pixmap(pixels));
}

TensorR resize_nearest(const TensorR& pixels, std::size_t height, std::size_t width) {
  if (pixels.rank() != 3) throw DimensionError("resize_nearest expects [H, W, C]");
  const std::size_t h = pixels.extent(0), w = pixels.extent(1), c = pixels.extent(2);
  if (h == height && w == width) return pixels;
  TensorR out({height, width, c});
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = y * h / height;
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t sx = x * w / width;
      for (std::size_t k = 0; k < c; ++k) out[(y * width + x) * c + k] = pixels[(sy * w + sx) * c + k];
    }
  }
  return out;
}

namespace {

TensorR to_rgb(const TensorR& gray) {
  if (gray.extent(2) == 3) return gray;
  TensorR out({gray.extent(0), gray.extent(1), 3});
  for (std::size_t i = 0; i < gray.size(); ++i)
    for (std::size_t k = 0; k < 3; ++k) out[i * 3 + k] = gray[i];
  return out;
}

bool is_pixmap(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  return ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

}  // namespace

Dataset load_pixmap_dir(const std::filesystem::path& root, std::size_t size) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DataError(root.string() + " is not a directory");
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) classes.push_back(e.path());
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw DataError(root.string() + " has no class subdirectories");
  Dataset out;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(classes[c]))
      if (e.is_regular_file() && is_pixmap(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("class directory " + classes[c].string() + " is empty");
    const std::string cname = classes[c].filename().string();
    out.class_names.push_back(cname);
    for (const auto& f : files) {
      out.items.push_back({to_rgb(resize_nearest(read_pixmap(f), size, size)), static_cast<int>(c),
                           cname + "/" + f.stem().string()});
    }
  }
  return out;
}

void write_pixmap_dir(const std::filesystem::path& root, const Dataset& data) {
  namespace fs = std::filesystem;
  std::vector<fs::path> dirs;
  for (std::size_t c = 0; c < data.num_classes(); ++c) {
    dirs.push_back(root / (std::to_string(c) + "_" + data.class_names[c]));
    fs::create_directories(dirs.back());
  }
  for (const auto& it : data.items) {
    std::string stem = it.id;
    std::replace(stem.begin(), stem.end(), '/', '_');
    write_pixmap(dirs.at(static_cast<std::size_t>(it.label)) / (stem + ".ppm"), it.pixels);
  }
}

// ---------------------------------------------------------------------------
// Splits

SplitIndices split_indices(const Dataset& data, const SplitSpec& spec) {
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
    throw ConfigError("train_fraction must lie in (0, 1)");
  }
  if (data.size() < 2) throw DataError("cannot split fewer than 2 samples");
  std::vector<std::vector<std::size_t>> by_class(data.num_classes());
  for (std::size_t i = 0; i < data.size(); ++i) {
    by_class.at(static_cast<std::size_t>(data.items[i].label)).push_back(i);
  }
  Rng rng(derive_seed(spec.seed, "split"));
  SplitIndices out;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.empty()) continue;
    if (idx.size() < 2) {
      throw DataError("class " + data.class_names[c] + " has fewer than 2 samples; cannot stratify");
    }
    for (std::size_t i = idx.size() - 1; i > 0; --i) std::swap(idx[i], idx[rng.below(i + 1)]);
    auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(idx.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    out.train.insert(out.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.test.insert(out.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

Dataset subset(const Dataset& data, const std::vector<std::size_t>& indices) {
  Dataset out;
  out.class_names = data.class_names;
  out.items.reserve(indices.size());
  for (std::size_t i : indices) out.items.push_back(data.items.at(i));
  return out;
}

DatasetSplit split(const Dataset& data, const SplitSpec& spec) {
  const SplitIndices idx = split_indices(data, spec);
  return {subset(data, idx.train), subset(data, idx.test)};
}

}  // namespace freqexit
