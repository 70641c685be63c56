#pragma once

#include "bornovit/image.hpp"
#include "bornovit/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace bornovit {

struct LabeledImage {
  Image image;
  int label = 0;
  std::string class_name;
  std::string source_path;
};

struct Dataset {
  std::vector<LabeledImage> samples;
  std::vector<std::string> class_names;
  std::vector<std::string> errors;    // undecodable files, skipped
  std::vector<std::string> warnings;  // e.g. empty class directories

  Index num_classes() const { return static_cast<Index>(class_names.size()); }
};

/// Reads `root/<class>/<file>.{png,jpg,jpeg}`. Classes are sorted by name and
/// files by path, so the order is reproducible. With a manifest (one
/// "relative/path<TAB or comma>class" record per line) only listed files are read.
/// Throws DataError if the root is missing or no image could be read.
Dataset load_dataset(const std::filesystem::path& root,
                     const std::optional<std::filesystem::path>& manifest = std::nullopt);

/// Resized model inputs plus labels; what training and evaluation consume.
struct PreparedData {
  std::vector<Tensor<float>> inputs;  // each [3, size, size]
  std::vector<int> labels;
  std::vector<std::string> class_names;

  Index size() const { return static_cast<Index>(inputs.size()); }
};

PreparedData prepare(const Dataset& dataset, Index image_size);

/// Stacks [3,H,W] tensors selected by `indices` into [B,3,H,W].
Tensor<float> stack(const std::vector<Tensor<float>>& images, std::span<const Index> indices);

struct AugmentConfig {
  bool enabled = true;
  double translate_frac = 0.1;  // per-axis shift drawn from [-f, f] of the size
  double shear_deg = 20.0;      // x-shear angle drawn from [-s, s]
  double brightness = 0.2;      // factors drawn from [1 - b, 1 + b]
  double contrast = 0.2;
  double saturation = 0.2;
  double hue = 0.1;  // fraction of the hue circle
  float fill = 0.0f;

  /// Throws ConfigError naming the field for a negative range, hue > 0.5,
  /// or a factor range reaching zero.
  void validate() const;
};

/// One concrete draw of the random transform.
struct AugmentParams {
  double translate_x = 0.0;  // fraction of width, positive moves content right
  double translate_y = 0.0;  // fraction of height, positive moves content down
  double shear_deg = 0.0;
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue = 0.0;
};

AugmentParams sample_augment(const AugmentConfig& cfg, std::mt19937_64& rng);

/// Affine warp (integer-rounded shift, x-shear about the centre, bilinear
/// sampling, `fill` outside) then brightness, contrast, saturation and hue.
/// Input and output are [3,H,W] in [0,1].
Tensor<float> apply_augment(const Tensor<float>& image, const AugmentParams& p, float fill = 0.0f);

/// Identity copy when disabled, otherwise a fresh draw from `rng`.
Tensor<float> augment(const Tensor<float>& image, const AugmentConfig& cfg, std::mt19937_64& rng);

struct FoldRoles {
  std::vector<Index> train, validation, test;
};

struct FoldSplit {
  Index k = 0;
  std::vector<Index> assignments;  // per-sample fold index

  std::vector<Index> fold(Index f) const;
  /// Rotation r: fold r tests, fold (r+1) mod k validates, the rest train.
  FoldRoles roles(Index rotation) const;
};

/// Seeded shuffle then round-robin fold assignment. In stratified mode each
/// class is shuffled separately and dealt out in label order, so every fold
/// gets a near-equal share of each class. Requires 3 <= k <= n_samples.
FoldSplit kfold_split(Index n_samples, Index k, std::uint64_t seed, bool stratified = false,
                      std::span<const int> labels = {});

/// Uniform grid crop. Cell (r, c) spans rows [r*H/rows, (r+1)*H/rows) and
/// columns [c*W/cols, (c+1)*W/cols), returned in row-major order.
std::vector<Image> crop_page_grid(const Image& page, Index rows = 10, Index cols = 6);

}  // namespace bornovit
