#include "bornovit/data.hpp"

#include "bornovit/errors.hpp"
#include "bornovit/random.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

namespace fs = std::filesystem;

namespace bornovit {

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

void read_into(Dataset& ds, const fs::path& file, int label) {
  try {
    ds.samples.push_back({read_image(file), label, ds.class_names[static_cast<std::size_t>(label)], file.string()});
  } catch (const DataError& e) {
    ds.errors.push_back(e.what());
  }
}

}  // namespace

Dataset load_dataset(const fs::path& root, const std::optional<fs::path>& manifest) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw DataError("data directory not found: " + root.string());
  Dataset ds;

  if (manifest) {
    std::ifstream in(*manifest);
    if (!in) throw DataError("cannot open manifest " + manifest->string());
    std::vector<std::pair<std::string, std::string>> records;
    std::string line;
    Index line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      line = trim(line);
      if (line.empty() || line[0] == '#') continue;
      auto sep = line.rfind('\t');
      if (sep == std::string::npos) sep = line.rfind(',');
      if (sep == std::string::npos) {
        throw DataError(manifest->string() + ":" + std::to_string(line_no) + ": expected 'path<TAB>class'");
      }
      records.emplace_back(trim(line.substr(0, sep)), trim(line.substr(sep + 1)));
    }
    std::set<std::string> names;
    for (const auto& r : records) names.insert(r.second);
    ds.class_names.assign(names.begin(), names.end());
    std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [rel, cls] : records) {
      const int label = static_cast<int>(
          std::lower_bound(ds.class_names.begin(), ds.class_names.end(), cls) - ds.class_names.begin());
      read_into(ds, root / rel, label);
    }
  } else {
    std::vector<fs::path> class_dirs;
    for (const auto& entry : fs::directory_iterator(root)) {
      if (entry.is_directory()) class_dirs.push_back(entry.path());
    }
    std::sort(class_dirs.begin(), class_dirs.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
    for (const auto& dir : class_dirs) ds.class_names.push_back(dir.filename().string());

    for (std::size_t label = 0; label < class_dirs.size(); ++label) {
      std::vector<fs::path> files;
      for (const auto& entry : fs::directory_iterator(class_dirs[label])) {
        if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
      }
      std::sort(files.begin(), files.end());
      if (files.empty()) ds.warnings.push_back("class directory has no images: " + class_dirs[label].string());
      for (const auto& f : files) read_into(ds, f, static_cast<int>(label));
    }
  }
  if (ds.samples.empty()) throw DataError("no readable images under " + root.string());
  return ds;
}

PreparedData prepare(const Dataset& dataset, Index image_size) {
  PreparedData out;
  out.class_names = dataset.class_names;
  out.inputs.reserve(dataset.samples.size());
  for (const auto& s : dataset.samples) {
    out.inputs.push_back(resize_to_input(s.image, image_size));
    out.labels.push_back(s.label);
  }
  return out;
}

Tensor<float> stack(const std::vector<Tensor<float>>& images, std::span<const Index> indices) {
  if (indices.empty()) throw ShapeError("stack: no images selected");
  const Shape inner = images.at(static_cast<std::size_t>(indices[0])).shape();
  const Index per = shape_numel(inner);
  Tensor<float>::Storage data(per * static_cast<Index>(indices.size()));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& t = images.at(static_cast<std::size_t>(indices[i]));
    if (t.shape() != inner) throw ShapeError("stack: mixed shapes " + shape_str(inner) + " and " + shape_str(t.shape()));
    data.segment(static_cast<Index>(i) * per, per) = t.data();
  }
  Shape shape{static_cast<Index>(indices.size())};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return Tensor<float>(shape, std::move(data));
}

void AugmentConfig::validate() const {
  auto require = [](bool ok, const std::string& field, const std::string& msg) {
    if (!ok) throw ConfigError("augment." + field + ": " + msg);
  };
  require(translate_frac >= 0.0 && translate_frac <= 1.0, "translate_frac", "must lie in [0, 1]");
  require(shear_deg >= 0.0 && shear_deg < 90.0, "shear_deg", "must lie in [0, 90)");
  require(brightness >= 0.0 && brightness < 1.0, "brightness", "must lie in [0, 1)");
  require(contrast >= 0.0 && contrast < 1.0, "contrast", "must lie in [0, 1)");
  require(saturation >= 0.0 && saturation < 1.0, "saturation", "must lie in [0, 1)");
  require(hue >= 0.0 && hue <= 0.5, "hue", "must lie in [0, 0.5]");
  require(fill >= 0.0f && fill <= 1.0f, "fill", "must lie in [0, 1]");
}

AugmentParams sample_augment(const AugmentConfig& cfg, std::mt19937_64& rng) {
  AugmentParams p;
  // Always draw the same number of values so streams stay aligned when a range is zero.
  p.translate_x = uniform(rng, -cfg.translate_frac, cfg.translate_frac);
  p.translate_y = uniform(rng, -cfg.translate_frac, cfg.translate_frac);
  p.shear_deg = uniform(rng, -cfg.shear_deg, cfg.shear_deg);
  p.brightness = uniform(rng, 1.0 - cfg.brightness, 1.0 + cfg.brightness);
  p.contrast = uniform(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast);
  p.saturation = uniform(rng, 1.0 - cfg.saturation, 1.0 + cfg.saturation);
  p.hue = uniform(rng, -cfg.hue, cfg.hue);
  return p;
}

namespace {

constexpr double kPi = 3.14159265358979323846;

using Planes = std::array<Eigen::ArrayXXf, 3>;

Planes to_planes(const Tensor<float>& t) {
  const Index h = t.dim(1), w = t.dim(2);
  Planes p;
  for (Index c = 0; c < 3; ++c) {
    p[static_cast<std::size_t>(c)] = Eigen::Map<const Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        t.data().data() + c * h * w, h, w);
  }
  return p;
}

Tensor<float> from_planes(const Planes& p) {
  const Index h = p[0].rows(), w = p[0].cols();
  Tensor<float>::Storage d(3 * h * w);
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) d[(c * h + y) * w + x] = p[static_cast<std::size_t>(c)](y, x);
  return Tensor<float>({3, h, w}, std::move(d));
}

Planes warp(const Planes& src, const AugmentParams& a, float fill) {
  const Index h = src[0].rows(), w = src[0].cols();
  const double tx = std::round(a.translate_x * static_cast<double>(w));
  const double ty = std::round(a.translate_y * static_cast<double>(h));
  const double sh = std::tan(a.shear_deg * kPi / 180.0);
  const double cy = 0.5 * static_cast<double>(h - 1);
  Planes out;
  for (auto& p : out) p.resize(h, w);
  auto sample = [&](const Eigen::ArrayXXf& plane, Index y, Index x) {
    return (y < 0 || y >= h || x < 0 || x >= w) ? fill : plane(y, x);
  };
  for (Index y = 0; y < h; ++y) {
    const double sy = static_cast<double>(y) - ty;
    for (Index x = 0; x < w; ++x) {
      const double sx = static_cast<double>(x) - tx - sh * (sy - cy);
      const double fy = std::floor(sy), fx = std::floor(sx);
      const auto y0 = static_cast<Index>(fy), x0 = static_cast<Index>(fx);
      const auto wy = static_cast<float>(sy - fy), wx = static_cast<float>(sx - fx);
      for (std::size_t c = 0; c < 3; ++c) {
        const auto& s = src[c];
        const float top = sample(s, y0, x0) * (1 - wx) + sample(s, y0, x0 + 1) * wx;
        const float bot = sample(s, y0 + 1, x0) * (1 - wx) + sample(s, y0 + 1, x0 + 1) * wx;
        out[c](y, x) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

void clamp01(Planes& p) {
  for (auto& c : p) c = c.max(0.0f).min(1.0f);
}

Eigen::ArrayXXf gray(const Planes& p) { return 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2]; }

void shift_hue(Planes& p, double shift) {
  const Index h = p[0].rows(), w = p[0].cols();
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const double r = p[0](y, x), g = p[1](y, x), b = p[2](y, x);
      const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
      const double v = mx, delta = mx - mn;
      if (delta <= 0.0) continue;  // grey pixels have no hue
      const double s = delta / mx;
      double hue;
      if (mx == r) {
        hue = (g - b) / delta;
      } else if (mx == g) {
        hue = 2.0 + (b - r) / delta;
      } else {
        hue = 4.0 + (r - g) / delta;
      }
      hue = hue / 6.0 + shift;
      hue -= std::floor(hue);
      const double hh = hue * 6.0;
      const int sector = static_cast<int>(std::floor(hh)) % 6;
      const double f = hh - std::floor(hh);
      const double pp = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
      double rr, gg, bb;
      switch (sector) {
        case 0: rr = v, gg = t, bb = pp; break;
        case 1: rr = q, gg = v, bb = pp; break;
        case 2: rr = pp, gg = v, bb = t; break;
        case 3: rr = pp, gg = q, bb = v; break;
        case 4: rr = t, gg = pp, bb = v; break;
        default: rr = v, gg = pp, bb = q; break;
      }
      p[0](y, x) = static_cast<float>(rr);
      p[1](y, x) = static_cast<float>(gg);
      p[2](y, x) = static_cast<float>(bb);
    }
}

}  // namespace

Tensor<float> apply_augment(const Tensor<float>& image, const AugmentParams& a, float fill) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("augment expects [3, H, W], got " + shape_str(image.shape()));
  Planes p = to_planes(image);
  const bool moves = std::round(a.translate_x * static_cast<double>(image.dim(2))) != 0.0 ||
                     std::round(a.translate_y * static_cast<double>(image.dim(1))) != 0.0 || a.shear_deg != 0.0;
  if (moves) p = warp(p, a, fill);
  if (a.brightness != 1.0) {
    for (auto& c : p) c *= static_cast<float>(a.brightness);
    clamp01(p);
  }
  if (a.contrast != 1.0) {
    const float mean = gray(p).mean();
    const auto f = static_cast<float>(a.contrast);
    for (auto& c : p) c = f * c + (1 - f) * mean;
    clamp01(p);
  }
  if (a.saturation != 1.0) {
    const Eigen::ArrayXXf g = gray(p);
    const auto f = static_cast<float>(a.saturation);
    for (auto& c : p) c = f * c + (1 - f) * g;
    clamp01(p);
  }
  if (a.hue != 0.0) shift_hue(p, a.hue);
  clamp01(p);
  return from_planes(p);
}

Tensor<float> augment(const Tensor<float>& image, const AugmentConfig& cfg, std::mt19937_64& rng) {
  if (!cfg.enabled) return image.clone();
  return apply_augment(image, sample_augment(cfg, rng), cfg.fill);
}

std::vector<Index> FoldSplit::fold(Index f) const {
  std::vector<Index> out;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] == f) out.push_back(static_cast<Index>(i));
  }
  return out;
}

FoldRoles FoldSplit::roles(Index rotation) const {
  if (rotation < 0 || rotation >= k) {
    throw IndexError("rotation " + std::to_string(rotation) + " outside [0, " + std::to_string(k) + ")");
  }
  const Index val = (rotation + 1) % k;
  FoldRoles r;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    const Index f = assignments[i];
    const auto idx = static_cast<Index>(i);
    if (f == rotation) {
      r.test.push_back(idx);
    } else if (f == val) {
      r.validation.push_back(idx);
    } else {
      r.train.push_back(idx);
    }
  }
  return r;
}

FoldSplit kfold_split(Index n_samples, Index k, std::uint64_t seed, bool stratified, std::span<const int> labels) {
  if (k < 3) throw ConfigError("k must be at least 3 (train, validation and test folds), got " + std::to_string(k));
  if (n_samples < k) {
    throw ConfigError("need at least k=" + std::to_string(k) + " samples, got " + std::to_string(n_samples));
  }
  std::vector<Index> order(static_cast<std::size_t>(n_samples));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(derive_seed(seed, {0x6b666f6c64ULL}));

  if (stratified) {
    if (static_cast<Index>(labels.size()) != n_samples) {
      throw ConfigError("stratified split needs one label per sample");
    }
    std::map<int, std::vector<Index>> by_class;
    for (Index i = 0; i < n_samples; ++i) by_class[labels[static_cast<std::size_t>(i)]].push_back(i);
    order.clear();
    for (auto& [label, members] : by_class) {
      shuffle(members.begin(), members.end(), rng);
      order.insert(order.end(), members.begin(), members.end());
    }
  } else {
    shuffle(order.begin(), order.end(), rng);
  }

  FoldSplit split;
  split.k = k;
  split.assignments.assign(static_cast<std::size_t>(n_samples), 0);
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    split.assignments[static_cast<std::size_t>(order[pos])] = static_cast<Index>(pos) % k;
  }
  return split;
}

std::vector<Image> crop_page_grid(const Image& page, Index rows, Index cols) {
  if (rows < 1 || cols < 1) throw ConfigError("grid needs at least one row and one column");
  if (page.height < rows || page.width < cols) {
    throw DataError("page " + std::to_string(page.height) + "x" + std::to_string(page.width) + " is smaller than a " +
                    std::to_string(rows) + "x" + std::to_string(cols) + " grid");
  }
  std::vector<Image> cells;
  cells.reserve(static_cast<std::size_t>(rows * cols));
  for (Index r = 0; r < rows; ++r) {
    const Index y0 = r * page.height / rows, y1 = (r + 1) * page.height / rows;
    for (Index c = 0; c < cols; ++c) {
      const Index x0 = c * page.width / cols, x1 = (c + 1) * page.width / cols;
      Image cell(y1 - y0, x1 - x0, page.channels);
      for (Index y = y0; y < y1; ++y) {
        const auto* src = &page.pixels[static_cast<std::size_t>((y * page.width + x0) * page.channels)];
        std::copy(src, src + (x1 - x0) * page.channels, &cell.at(y - y0, 0, 0));
      }
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

}  // namespace bornovit
