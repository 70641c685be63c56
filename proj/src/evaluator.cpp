#include "bornovit/evaluator.hpp"

#include "bornovit/data.hpp"
#include "bornovit/errors.hpp"
#include "bornovit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace bornovit {

namespace {

double ratio(Index num, Index den) { return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den); }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

ClassificationReport classification_report(std::span<const int> truth, std::span<const int> predicted,
                                           Index num_classes, const std::vector<std::string>& class_names) {
  if (truth.size() != predicted.size()) {
    throw ShapeError("classification_report: " + std::to_string(truth.size()) + " labels vs " +
                     std::to_string(predicted.size()) + " predictions");
  }
  if (num_classes < 1) throw ConfigError("classification_report needs at least one class");
  const auto C = static_cast<std::size_t>(num_classes);
  ClassificationReport r;
  r.confusion.assign(C, std::vector<Index>(C, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (int v : {truth[i], predicted[i]}) {
      if (v < 0 || v >= num_classes) {
        throw IndexError("label " + std::to_string(v) + " outside [0, " + std::to_string(num_classes) + ")");
      }
    }
    ++r.confusion[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predicted[i])];
  }
  r.total = static_cast<Index>(truth.size());
  Index diag = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const Index tp = r.confusion[c][c];
    Index row = 0, col = 0;
    for (std::size_t k = 0; k < C; ++k) {
      row += r.confusion[c][k];
      col += r.confusion[k][c];
    }
    ClassMetrics m;
    m.name = c < class_names.size() ? class_names[c] : std::to_string(c);
    m.precision = ratio(tp, col);
    m.recall = ratio(tp, row);
    m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    m.support = row;
    diag += tp;
    r.classes.push_back(m);
  }
  r.accuracy = ratio(diag, r.total);
  for (const auto& m : r.classes) {
    r.macro_precision += m.precision;
    r.macro_recall += m.recall;
    r.macro_f1 += m.f1;
  }
  r.macro_precision /= static_cast<double>(C);
  r.macro_recall /= static_cast<double>(C);
  r.macro_f1 /= static_cast<double>(C);
  return r;
}

nlohmann::json ClassificationReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const auto& m = classes[i];
    rows.push_back({{"index", i},
                    {"name", m.name},
                    {"precision", m.precision},
                    {"recall", m.recall},
                    {"f1", m.f1},
                    {"support", m.support}});
  }
  return {{"accuracy", accuracy},       {"macro_precision", macro_precision},
          {"macro_recall", macro_recall}, {"macro_f1", macro_f1},
          {"total", total},             {"classes", rows},
          {"confusion_matrix", confusion}};
}

std::string ClassificationReport::to_text() const {
  std::size_t w = 9;
  for (const auto& m : classes) w = std::max(w, m.name.size());
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << std::left << std::setw(static_cast<int>(w)) << "class" << std::right << std::setw(11) << "precision"
     << std::setw(11) << "recall" << std::setw(11) << "f1" << std::setw(9) << "support" << "\n";
  for (const auto& m : classes) {
    os << std::left << std::setw(static_cast<int>(w)) << m.name << std::right << std::setw(11) << m.precision
       << std::setw(11) << m.recall << std::setw(11) << m.f1 << std::setw(9) << m.support << "\n";
  }
  os << "\n"
     << std::left << std::setw(static_cast<int>(w)) << "macro avg" << std::right << std::setw(11) << macro_precision
     << std::setw(11) << macro_recall << std::setw(11) << macro_f1 << std::setw(9) << total << "\n";
  os << std::left << std::setw(static_cast<int>(w)) << "accuracy" << std::right << std::setw(33) << accuracy
     << std::setw(9) << total << "\n";
  return os.str();
}

std::string ClassificationReport::confusion_csv() const {
  std::ostringstream os;
  os << "true\\predicted";
  for (const auto& m : classes) os << "," << csv_field(m.name);
  os << "\n";
  for (std::size_t r = 0; r < confusion.size(); ++r) {
    os << csv_field(classes[r].name);
    for (Index v : confusion[r]) os << "," << v;
    os << "\n";
  }
  return os.str();
}

int argmax(std::span<const float> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

Predictions predict(const ViTParams<float>& params, const std::vector<Tensor<float>>& inputs,
                    std::span<const int> labels, std::span<const Index> indices, Index batch_size) {
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  std::vector<Index> all;
  if (indices.empty()) {
    all.resize(inputs.size());
    std::iota(all.begin(), all.end(), Index{0});
    indices = all;
  }
  NoGradGuard no_grad;
  Predictions out;
  double loss_sum = 0.0;
  const Index C = params.config.num_classes;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto batch = indices.subspan(start, std::min(indices.size() - start, static_cast<std::size_t>(batch_size)));
    std::vector<int> y;
    for (Index i : batch) y.push_back(labels[static_cast<std::size_t>(i)]);
    const auto logits = forward(params, stack(inputs, batch), Mode::Eval);
    const auto loss = cross_entropy(logits, std::span<const int>(y));
    loss_sum += static_cast<double>(loss.item()) * static_cast<double>(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const int p = argmax(std::span<const float>(logits.data().data() + static_cast<Index>(b) * C,
                                                  static_cast<std::size_t>(C)));
      out.predicted.push_back(p);
      out.truth.push_back(y[b]);
      out.correct += p == y[b];
    }
  }
  out.mean_loss = indices.empty() ? 0.0 : loss_sum / static_cast<double>(indices.size());
  return out;
}

ClassificationReport evaluate(const ViTParams<float>& params, const std::vector<Tensor<float>>& inputs,
                              std::span<const int> labels, const std::vector<std::string>& class_names,
                              Index batch_size) {
  if (inputs.empty()) throw DataError("evaluate: no samples");
  const auto p = predict(params, inputs, labels, {}, batch_size);
  return classification_report(p.truth, p.predicted, params.config.num_classes, class_names);
}

const std::array<std::array<std::uint8_t, 3>, 256>& heat_colormap() {
  static const auto table = [] {
    constexpr double anchors[5][3] = {{0, 0, 4}, {87, 16, 110}, {188, 55, 84}, {249, 142, 9}, {252, 255, 164}};
    std::array<std::array<std::uint8_t, 3>, 256> t{};
    for (int i = 0; i < 256; ++i) {
      const double pos = static_cast<double>(i) / 255.0 * 4.0;
      const int seg = std::min(3, static_cast<int>(pos));
      const double f = pos - seg;
      for (int c = 0; c < 3; ++c) {
        const double v = anchors[seg][c] * (1.0 - f) + anchors[seg + 1][c] * f;
        t[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(std::lround(v));
      }
    }
    return t;
  }();
  return table;
}

namespace {

Image colorize(const Eigen::ArrayXXf& map) {
  const auto& lut = heat_colormap();
  Image img(map.rows(), map.cols(), 3);
  for (Index y = 0; y < map.rows(); ++y)
    for (Index x = 0; x < map.cols(); ++x) {
      const auto idx = static_cast<std::size_t>(std::lround(std::clamp(map(y, x), 0.0f, 1.0f) * 255.0f));
      for (Index c = 0; c < 3; ++c) img.at(y, x, c) = lut[idx][static_cast<std::size_t>(c)];
    }
  return img;
}

}  // namespace

GradCamMap gradcam_from_activations(const Eigen::ArrayXXf& activations, const Eigen::ArrayXXf& gradients,
                                    Index grid, Index image_size) {
  if (activations.rows() != grid * grid + 1 || activations.rows() != gradients.rows() ||
      activations.cols() != gradients.cols()) {
    throw ShapeError("gradcam: expected matching [" + std::to_string(grid * grid + 1) + ", d] activations and gradients");
  }
  const Index n = grid * grid;
  const Eigen::ArrayXXf acts = activations.bottomRows(n);
  const Eigen::ArrayXf weights = gradients.bottomRows(n).colwise().mean().transpose();
  const Eigen::ArrayXf cam = (acts.matrix() * weights.matrix()).array().max(0.0f);

  GradCamMap m;
  m.raw_grid.resize(grid, grid);
  for (Index t = 0; t < n; ++t) m.raw_grid(t / grid, t % grid) = cam[t];
  Eigen::ArrayXXf up = resize_bilinear(m.raw_grid, image_size, image_size);
  const float lo = up.minCoeff(), hi = up.maxCoeff();
  if (hi > 0.0f) {
    up = hi > lo ? ((up - lo) / (hi - lo)).eval() : Eigen::ArrayXXf::Ones(image_size, image_size).eval();
  } else {
    up.setZero();
  }
  m.upsampled = up;
  m.heatmap = colorize(m.upsampled);
  return m;
}

GradCamMap gradcam(const ViTParams<float>& params, const Tensor<float>& image, std::optional<int> target_class) {
  const auto& c = params.config;
  if (c.depth < 1) throw ConfigError("gradcam needs at least one transformer block");
  if (image.shape() != Shape{c.in_channels, c.image_size, c.image_size}) {
    throw ShapeError("gradcam expects one image of shape " +
                     shape_str({c.in_channels, c.image_size, c.image_size}) + ", got " + shape_str(image.shape()));
  }
  if (target_class && (*target_class < 0 || *target_class >= c.num_classes)) {
    throw IndexError("class " + std::to_string(*target_class) + " outside [0, " + std::to_string(c.num_classes) + ")");
  }
  const auto local = params.clone();  // own tape and gradient buffers
  local.set_requires_grad(true);
  AttentionTrace<float> trace;
  const auto logits = forward(local, reshape(image, {1, c.in_channels, c.image_size, c.image_size}), Mode::Eval,
                              nullptr, &trace);
  if (!logits.data().allFinite()) throw NumericalError("gradcam: model produced non-finite logits");

  const int predicted =
      argmax(std::span<const float>(logits.data().data(), static_cast<std::size_t>(c.num_classes)));
  const int target = target_class.value_or(predicted);
  const float mx = logits.data().maxCoeff();
  const double denom = (logits.data() - mx).exp().sum();
  const double conf = std::exp(static_cast<double>(logits.data()[target] - mx)) / denom;

  backward(slice(logits, 1, target, 1));
  // Only CLS reaches the head, so patch rows of the last block's output carry
  // zero gradient. The attention input of that block still mixes into CLS.
  const auto& last = trace.attention_inputs.back();  // [1, T, d]
  if (!last.has_grad()) throw ContractError("gradcam: last block received no gradient");
  const Index T = c.seq_len(), d = c.embed_dim;
  using RowMajor = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::ArrayXXf acts = Eigen::Map<const RowMajor>(last.data().data(), T, d);
  const Eigen::ArrayXXf grads = Eigen::Map<const RowMajor>(last.grad().data(), T, d);

  auto cam = gradcam_from_activations(acts, grads, c.grid_size(), c.image_size);
  cam.target_class = target;
  cam.predicted_class = predicted;
  cam.confidence = conf;

  const Image input = tensor_to_image(image);
  cam.overlay = Image(c.image_size, c.image_size, 3);
  for (std::size_t i = 0; i < cam.overlay.pixels.size(); ++i) {
    cam.overlay.pixels[i] =
        static_cast<std::uint8_t>((static_cast<unsigned>(cam.heatmap.pixels[i]) + input.pixels[i] + 1) / 2);
  }
  return cam;
}

}  // namespace bornovit
