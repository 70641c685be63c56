#include "bornovit/profiler.hpp"

#include "bornovit/errors.hpp"

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <map>
#include <sstream>

namespace bornovit {

namespace {

std::string dims(std::initializer_list<std::string> parts) {
  std::string s = "(";
  bool first = true;
  for (const auto& p : parts) {
    if (!first) s += ", ";
    s += p;
    first = false;
  }
  return s + ")";
}

std::string n(Index v) { return std::to_string(v); }

std::string grouped(Index v) {
  std::string digits = std::to_string(v < 0 ? -v : v);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i > 0 && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return v < 0 ? "-" + out : out;
}

const ProfileRow& find_row(const std::vector<ProfileRow>& rows, const std::string& key) {
  auto it = std::find_if(rows.begin(), rows.end(), [&](const ProfileRow& r) { return r.key == key; });
  if (it == rows.end()) throw ContractError("no profile row '" + key + "'");
  return *it;
}

}  // namespace

const ProfileRow& ProfileReport::row(const std::string& key) const { return find_row(rows, key); }
const ProfileRow& ProfileReport::block_row(const std::string& key) const { return find_row(block_rows, key); }

ProfileReport count_params(const ModelConfig& c) {
  c.validate();
  const Index d = c.embed_dim, h = c.mlp_hidden_dim, p = c.patch_size, N = c.num_patches(), T = c.seq_len();
  const std::string seq = dims({"B", n(T), n(d)});

  ProfileReport r;
  r.config = c;
  r.block_rows = {
      {"ln1", "LayerNorm 1", "Layer normalization", seq, seq, 2 * d},
      {"attn_qkv", "Multi-Head Attention (QKV)", "Fused query/key/value projection, no bias", seq,
       dims({"B", n(T), n(3 * d)}), 3 * d * d},
      {"attn_out", "Multi-Head Attention (O)", "Output projection of " + n(c.num_heads) + " heads, with bias",
       dims({"B", n(T), n(d)}), seq, d * d + d},
      {"ln2", "LayerNorm 2", "Layer normalization", seq, seq, 2 * d},
      {"mlp_fc1", "MLP fc1", "Linear + GELU + dropout", seq, dims({"B", n(T), n(h)}), d * h + h},
      {"mlp_fc2", "MLP fc2", "Linear + dropout", dims({"B", n(T), n(h)}), seq, h * d + d},
  };
  for (const auto& row : r.block_rows) r.block_params += row.params;

  r.rows = {
      {"patch_embedding", "PatchEmbedding", "Conv2D, kernel = stride = " + n(p) + ", to embedding dimension",
       dims({"B", n(c.in_channels), n(c.image_size), n(c.image_size)}), dims({"B", n(N), n(d)}),
       c.in_channels * p * p * d + d},
      {"positional_embedding", "Positional Embedding", "Learnable, added after CLS concatenation", seq, seq, T * d},
      {"cls_token", "CLS Token", "Learnable classification token", dims({"1", "1", n(d)}), dims({"B", "1", n(d)}), d},
      {"dropout", "Dropout", "p = " + [&] {
         std::ostringstream os;
         os << c.dropout_p;
         return os.str();
       }() + " on patch + position embeddings",
       seq, seq, 0},
      {"transformer_blocks", "Transformer Blocks (x" + n(c.depth) + ")", "Pre-norm attention + MLP blocks", seq,
       seq, c.depth * r.block_params},
      {"layer_norm", "LayerNorm", "Final normalization", seq, seq, 2 * d},
      {"head", "Linear (Classification)", "Classifier on the CLS token", dims({"B", n(d)}),
       dims({"B", n(c.num_classes)}), d * c.num_classes + c.num_classes},
  };
  for (const auto& row : r.rows) r.total_params += row.params;
  r.size_fp32_bytes = 4 * r.total_params;
  r.size_int8_bytes = r.total_params;
  return r;
}

MacCounts count_macs(const ModelConfig& c) {
  c.validate();
  const Index d = c.embed_dim, h = c.mlp_hidden_dim, N = c.num_patches(), T = c.seq_len();
  MacCounts m;
  m.patch_embed = N * d * (c.in_channels * c.patch_size * c.patch_size);
  const Index qkv = T * d * 3 * d;
  const Index scores = 2 * c.num_heads * T * T * c.head_dim();  // QK^T and attention-weighted V
  const Index out = T * d * d;
  const Index mlp = 2 * T * d * h;
  m.per_block = qkv + scores + out + mlp;
  m.blocks = c.depth * m.per_block;
  m.head = d * c.num_classes;
  m.total = m.patch_embed + m.blocks + m.head;
  return m;
}

ProfileReport profile(const ModelConfig& config) {
  auto r = count_params(config);
  r.macs = count_macs(config);
  return r;
}

namespace {

std::string layer_of(const std::string& name) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  if (starts("patch_embed.")) return "patch_embedding";
  if (name == "pos_embed") return "positional_embedding";
  if (name == "cls_token") return "cls_token";
  if (starts("blocks.")) return "transformer_blocks";
  if (starts("norm.")) return "layer_norm";
  if (starts("head.")) return "head";
  return "unknown:" + name;
}

std::string block_sublayer_of(const std::string& name) {
  // blocks.<i>.<rest>
  const auto second_dot = name.find('.', 7);
  const std::string rest = name.substr(second_dot + 1);
  auto starts = [&](const char* p) { return rest.rfind(p, 0) == 0; };
  if (starts("ln1.")) return "ln1";
  if (starts("attn.qkv.")) return "attn_qkv";
  if (starts("attn.out.")) return "attn_out";
  if (starts("ln2.")) return "ln2";
  if (starts("mlp.fc1.")) return "mlp_fc1";
  if (starts("mlp.fc2.")) return "mlp_fc2";
  return "unknown:" + rest;
}

}  // namespace

template <typename S>
VerifyResult verify_against_model(const ViTParams<S>& params, const ProfileReport& report) {
  std::map<std::string, Index> per_layer;
  std::map<std::string, std::map<std::string, Index>> per_block;  // block prefix -> sublayer -> count
  VerifyResult result;
  for (const auto& [name, tensor] : params.named()) {
    const auto layer = layer_of(name);
    per_layer[layer] += tensor.numel();
    result.enumerated_total += tensor.numel();
    if (layer == "transformer_blocks") {
      const auto prefix = name.substr(0, name.find('.', 7));
      per_block[prefix][block_sublayer_of(name)] += tensor.numel();
    }
  }
  for (const auto& row : report.rows) {
    const Index actual = per_layer.count(row.key) ? per_layer.at(row.key) : 0;
    if (actual != row.params) result.mismatches.push_back({row.key, row.params, actual});
    per_layer.erase(row.key);
  }
  for (const auto& [layer, count] : per_layer) result.mismatches.push_back({layer, 0, count});
  for (auto& [prefix, subs] : per_block) {
    for (const auto& row : report.block_rows) {
      const Index actual = subs.count(row.key) ? subs.at(row.key) : 0;
      if (actual != row.params) result.mismatches.push_back({prefix + "." + row.key, row.params, actual});
      subs.erase(row.key);
    }
    for (const auto& [sub, count] : subs) result.mismatches.push_back({prefix + "." + sub, 0, count});
  }
  if (result.enumerated_total != report.total_params) {
    result.mismatches.push_back({"total", report.total_params, result.enumerated_total});
  }
  return result;
}

template VerifyResult verify_against_model(const ViTParams<float>&, const ProfileReport&);
template VerifyResult verify_against_model(const ViTParams<double>&, const ProfileReport&);

std::string render_text(const ProfileReport& r) {
  std::ostringstream os;
  auto table = [&](const std::vector<ProfileRow>& rows, const std::string& total_label, Index total) {
    std::size_t w_layer = 5, w_in = 11, w_out = 12;
    for (const auto& row : rows) {
      w_layer = std::max(w_layer, row.layer.size());
      w_in = std::max(w_in, row.input_shape.size());
      w_out = std::max(w_out, row.output_shape.size());
    }
    os << std::left << std::setw(static_cast<int>(w_layer)) << "Layer" << "  " << std::setw(static_cast<int>(w_in))
       << "Input Shape" << "  " << std::setw(static_cast<int>(w_out)) << "Output Shape" << "  " << std::right
       << std::setw(12) << "Parameters" << "\n";
    os << std::string(w_layer + w_in + w_out + 18, '-') << "\n";
    for (const auto& row : rows) {
      os << std::left << std::setw(static_cast<int>(w_layer)) << row.layer << "  " << std::setw(static_cast<int>(w_in))
         << row.input_shape << "  " << std::setw(static_cast<int>(w_out)) << row.output_shape << "  " << std::right
         << std::setw(12) << grouped(row.params) << "\n";
    }
    os << std::string(w_layer + w_in + w_out + 18, '-') << "\n";
    os << std::left << std::setw(static_cast<int>(w_layer + w_in + w_out + 4)) << total_label << "  " << std::right
       << std::setw(12) << grouped(total) << "\n";
  };

  os << "Model breakdown (" << r.config.num_classes << " classes)\n\n";
  table(r.rows, "Total", r.total_params);
  os << "\nTransformer block breakdown\n\n";
  table(r.block_rows, "Total per block", r.block_params);

  char buf[160];
  os << "\nCompute (batch 1)\n";
  std::snprintf(buf, sizeof buf, "  MACs         %15s  (%.3f G)\n", grouped(r.macs.total).c_str(),
                static_cast<double>(r.macs.total) / 1e9);
  os << buf;
  std::snprintf(buf, sizeof buf, "  FLOPs (2xMAC)%15s  (%.3f G)\n", grouped(2 * r.macs.total).c_str(),
                2.0 * static_cast<double>(r.macs.total) / 1e9);
  os << buf;
  os << "\nModel size\n";
  std::snprintf(buf, sizeof buf, "  int8 (1 B/param)  %12s bytes  %.2f MiB  <- reported size convention\n",
                grouped(r.size_int8_bytes).c_str(), static_cast<double>(r.size_int8_bytes) / (1024.0 * 1024.0));
  os << buf;
  std::snprintf(buf, sizeof buf, "  fp32 (4 B/param)  %12s bytes  %.2f MiB\n", grouped(r.size_fp32_bytes).c_str(),
                static_cast<double>(r.size_fp32_bytes) / (1024.0 * 1024.0));
  os << buf;
  os << "\nNotes: MACs count patch projection, QKV, attention scores and weighted sum, output\n"
        "projection, MLP and classifier matmuls. LayerNorm, GELU, softmax, bias and residual\n"
        "additions are excluded. Many profilers report the MAC figure under the label FLOPs.\n";
  return os.str();
}

nlohmann::json to_json(const ProfileReport& r) {
  auto rows_json = [](const std::vector<ProfileRow>& rows) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& row : rows) {
      arr.push_back({{"key", row.key},
                     {"layer", row.layer},
                     {"description", row.description},
                     {"input_shape", row.input_shape},
                     {"output_shape", row.output_shape},
                     {"params", row.params}});
    }
    return arr;
  };
  return {
      {"num_classes", r.config.num_classes},
      {"rows", rows_json(r.rows)},
      {"block_rows", rows_json(r.block_rows)},
      {"block_params", r.block_params},
      {"total_params", r.total_params},
      {"macs",
       {{"patch_embed", r.macs.patch_embed},
        {"per_block", r.macs.per_block},
        {"blocks", r.macs.blocks},
        {"head", r.macs.head},
        {"total", r.macs.total}}},
      {"gmacs", static_cast<double>(r.macs.total) / 1e9},
      {"gflops", 2.0 * static_cast<double>(r.macs.total) / 1e9},
      {"size_int8_bytes", r.size_int8_bytes},
      {"size_fp32_bytes", r.size_fp32_bytes},
      {"size_int8_mib", static_cast<double>(r.size_int8_bytes) / (1024.0 * 1024.0)},
      {"size_fp32_mib", static_cast<double>(r.size_fp32_bytes) / (1024.0 * 1024.0)},
      {"size_convention", "int8"},
  };
}

}  // namespace bornovit
