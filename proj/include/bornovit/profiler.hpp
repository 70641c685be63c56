#pragma once

#include "bornovit/model.hpp"

#include "json.hpp"

#include <string>
#include <vector>

namespace bornovit {

struct ProfileRow {
  std::string key;  // stable identifier, e.g. "head"
  std::string layer;
  std::string description;
  std::string input_shape;
  std::string output_shape;
  Index params = 0;
};

/// Multiply-accumulate counts at batch size 1. Elementwise work (LayerNorm,
/// GELU, softmax, residual adds, biases) is not counted.
struct MacCounts {
  Index patch_embed = 0;
  Index per_block = 0;
  Index blocks = 0;
  Index head = 0;
  Index total = 0;
};

struct ProfileReport {
  ModelConfig config;
  std::vector<ProfileRow> rows;        // whole-model breakdown
  std::vector<ProfileRow> block_rows;  // one transformer block
  Index block_params = 0;
  Index total_params = 0;
  MacCounts macs;
  Index size_fp32_bytes = 0;
  Index size_int8_bytes = 0;

  const ProfileRow& row(const std::string& key) const;
  const ProfileRow& block_row(const std::string& key) const;
};

/// Closed-form per-layer parameter counts; independent of any ViTParams.
ProfileReport count_params(const ModelConfig& config);
MacCounts count_macs(const ModelConfig& config);
/// count_params plus MACs.
ProfileReport profile(const ModelConfig& config);

struct CountMismatch {
  std::string layer;
  Index expected = 0;
  Index actual = 0;
};

struct VerifyResult {
  std::vector<CountMismatch> mismatches;
  Index enumerated_total = 0;
  bool ok() const { return mismatches.empty(); }
};

/// Walks the concrete tensors and compares them with the closed-form report.
template <typename S>
VerifyResult verify_against_model(const ViTParams<S>& params, const ProfileReport& report);

std::string render_text(const ProfileReport& report);
nlohmann::json to_json(const ProfileReport& report);

}  // namespace bornovit
