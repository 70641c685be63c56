#include "bornovit/image.hpp"

#include "bornovit/errors.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>

namespace bornovit {

Image read_image(const std::filesystem::path& path) {
  cv::Mat m;
  try {
    m = cv::imread(path.string(), cv::IMREAD_UNCHANGED | cv::IMREAD_IGNORE_ORIENTATION);
  } catch (const cv::Exception& e) {
    throw DataError("cannot decode image " + path.string() + ": " + e.what());
  }
  if (m.empty()) throw DataError("cannot decode image " + path.string());
  if (m.depth() == CV_16U) m.convertTo(m, CV_8U, 1.0 / 257.0);
  if (m.depth() != CV_8U) throw DataError("unsupported pixel depth in " + path.string());

  Index out_c = 0;
  switch (m.channels()) {
    case 1:
      out_c = 1;
      break;
    case 2:  // gray + alpha
      out_c = 1;
      break;
    case 3:
    case 4:
      out_c = 3;
      break;
    default:
      throw DataError("unsupported channel count in " + path.string());
  }
  Image img(m.rows, m.cols, out_c);
  const int in_c = m.channels();
  for (int y = 0; y < m.rows; ++y) {
    const std::uint8_t* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      const std::uint8_t* px = row + x * in_c;
      if (out_c == 1) {
        img.at(y, x, 0) = px[0];
      } else {  // BGR(A) -> RGB
        img.at(y, x, 0) = px[2];
        img.at(y, x, 1) = px[1];
        img.at(y, x, 2) = px[0];
      }
    }
  }
  return img;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw DataError("PNG output needs 1 or 3 channels");
  const int type = image.channels == 1 ? CV_8UC1 : CV_8UC3;
  cv::Mat m(static_cast<int>(image.height), static_cast<int>(image.width), type);
  for (Index y = 0; y < image.height; ++y) {
    std::uint8_t* row = m.ptr<std::uint8_t>(static_cast<int>(y));
    for (Index x = 0; x < image.width; ++x) {
      if (image.channels == 1) {
        row[x] = image.at(y, x, 0);
      } else {
        row[3 * x + 0] = image.at(y, x, 2);
        row[3 * x + 1] = image.at(y, x, 1);
        row[3 * x + 2] = image.at(y, x, 0);
      }
    }
  }
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), m);
  } catch (const cv::Exception& e) {
    throw DataError("cannot write " + path.string() + ": " + e.what());
  }
  if (!ok) throw DataError("cannot write " + path.string());
}

namespace {

// Source coordinate and interpolation weight for one output index.
struct Tap {
  Index lo, hi;
  float w;
};

std::vector<Tap> taps(Index in, Index out) {
  std::vector<Tap> t(static_cast<std::size_t>(out));
  const double scale = out > 1 ? static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
  for (Index i = 0; i < out; ++i) {
    const double s = static_cast<double>(i) * scale;
    Index lo = static_cast<Index>(std::floor(s));
    lo = std::clamp<Index>(lo, 0, in - 1);
    const Index hi = std::min<Index>(lo + 1, in - 1);
    t[static_cast<std::size_t>(i)] = {lo, hi, static_cast<float>(s - static_cast<double>(lo))};
  }
  return t;
}

}  // namespace

Eigen::ArrayXXf resize_bilinear(const Eigen::ArrayXXf& plane, Index out_h, Index out_w) {
  if (plane.size() == 0 || out_h <= 0 || out_w <= 0) throw ShapeError("resize_bilinear: empty input or output");
  if (plane.rows() == out_h && plane.cols() == out_w) return plane;
  const auto ty = taps(plane.rows(), out_h);
  const auto tx = taps(plane.cols(), out_w);
  Eigen::ArrayXXf out(out_h, out_w);
  for (Index y = 0; y < out_h; ++y) {
    const auto& a = ty[static_cast<std::size_t>(y)];
    for (Index x = 0; x < out_w; ++x) {
      const auto& b = tx[static_cast<std::size_t>(x)];
      const float top = plane(a.lo, b.lo) * (1 - b.w) + plane(a.lo, b.hi) * b.w;
      const float bot = plane(a.hi, b.lo) * (1 - b.w) + plane(a.hi, b.hi) * b.w;
      out(y, x) = top * (1 - a.w) + bot * a.w;
    }
  }
  return out;
}

Tensor<float> resize_to_input(const Image& image, Index size) {
  if (image.empty()) throw DataError("cannot resize an image with a zero dimension");
  if (image.channels != 1 && image.channels != 3) throw DataError("expected 1 or 3 channels");
  Tensor<float>::Storage out(3 * size * size);
  for (Index c = 0; c < 3; ++c) {
    const Index src_c = image.channels == 1 ? 0 : c;
    if (image.channels == 1 && c > 0) {
      out.segment(c * size * size, size * size) = out.segment(0, size * size);
      continue;
    }
    Eigen::ArrayXXf plane(image.height, image.width);
    for (Index y = 0; y < image.height; ++y)
      for (Index x = 0; x < image.width; ++x) plane(y, x) = static_cast<float>(image.at(y, x, src_c)) / 255.0f;
    const Eigen::ArrayXXf r = resize_bilinear(plane, size, size);
    for (Index y = 0; y < size; ++y)
      for (Index x = 0; x < size; ++x) out[(c * size + y) * size + x] = r(y, x);
  }
  return Tensor<float>({3, size, size}, std::move(out));
}

Image tensor_to_image(const Tensor<float>& chw) {
  if (chw.rank() != 3 || chw.dim(0) != 3) throw ShapeError("tensor_to_image expects [3, H, W], got " + shape_str(chw.shape()));
  const Index h = chw.dim(1), w = chw.dim(2);
  Image img(h, w, 3);
  const auto& d = chw.data();
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const float v = std::clamp(d[(c * h + y) * w + x], 0.0f, 1.0f);
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
  return img;
}

}  // namespace bornovit
