#pragma once

#include "bornovit/image.hpp"
#include "bornovit/model.hpp"

#include "json.hpp"

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace bornovit {

struct ClassMetrics {
  std::string name;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  Index support = 0;
};

struct ClassificationReport {
  std::vector<ClassMetrics> classes;
  std::vector<std::vector<Index>> confusion;  // rows = truth, columns = prediction
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  Index total = 0;

  nlohmann::json to_json() const;
  std::string to_text() const;
  std::string confusion_csv() const;
};

/// Precision, recall and F1 per class with 0/0 taken as 0; macro averages are
/// unweighted means over all `num_classes` classes. Throws IndexError on a label
/// outside [0, num_classes) and ShapeError on length mismatch.
ClassificationReport classification_report(std::span<const int> truth, std::span<const int> predicted,
                                           Index num_classes, const std::vector<std::string>& class_names = {});

/// Index of the largest value; ties go to the lowest index.
int argmax(std::span<const float> values);

struct Predictions {
  std::vector<int> predicted;
  std::vector<int> truth;
  double mean_loss = 0.0;  // exact mean of per-sample cross-entropy
  Index correct = 0;

  double accuracy() const {
    return predicted.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(predicted.size());
  }
};

/// Eval-mode forward over `indices` (all samples when empty), in batches.
Predictions predict(const ViTParams<float>& params, const std::vector<Tensor<float>>& inputs,
                    std::span<const int> labels, std::span<const Index> indices = {}, Index batch_size = 64);

ClassificationReport evaluate(const ViTParams<float>& params, const std::vector<Tensor<float>>& inputs,
                              std::span<const int> labels, const std::vector<std::string>& class_names,
                              Index batch_size = 64);

struct GradCamMap {
  Eigen::ArrayXXf raw_grid;   // grid x grid, non-negative
  Eigen::ArrayXXf upsampled;  // image_size x image_size, in [0, 1]
  int target_class = 0;
  int predicted_class = 0;
  double confidence = 0.0;  // softmax probability of target_class
  Image heatmap;            // colour-mapped upsampled map
  Image overlay;            // 0.5 * heatmap + 0.5 * input
};

/// 256-entry dark-to-warm lookup table: linear interpolation between the
/// anchors (0,0,4) (87,16,110) (188,55,84) (249,142,9) (252,255,164) at
/// 0, 1/4, 1/2, 3/4 and 1, rounded to the nearest integer.
const std::array<std::array<std::uint8_t, 3>, 256>& heat_colormap();

/// Pure GradCAM arithmetic. `activations` and `gradients` are [T, d] with the
/// CLS token in row 0; the remaining tokens form a row-major grid.
GradCamMap gradcam_from_activations(const Eigen::ArrayXXf& activations, const Eigen::ArrayXXf& gradients,
                                    Index grid, Index image_size);

/// Grad-CAM over the tokens entering the last block's attention (its LN1
/// output) for one [3,H,W] image. The target defaults to the predicted class.
/// Throws IndexError for a target out of range, NumericalError for non-finite
/// logits and ConfigError for depth 0.
GradCamMap gradcam(const ViTParams<float>& params, const Tensor<float>& image,
                   std::optional<int> target_class = std::nullopt);

}  // namespace bornovit
