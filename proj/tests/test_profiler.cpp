#include "doctest.h"

#include "bornovit/errors.hpp"
#include "bornovit/model.hpp"
#include "bornovit/profiler.hpp"

using namespace bornovit;

namespace {

std::vector<ModelConfig> sweep_configs() {
  std::vector<ModelConfig> out;
  for (Index d : {32, 64, 128})
    for (Index depth = 1; depth <= 4; ++depth)
      for (Index heads : {1, 2, 4}) {
        if (d % heads != 0) continue;
        ModelConfig c;
        c.image_size = 32;
        c.patch_size = 8;
        c.embed_dim = d;
        c.depth = depth;
        c.num_heads = heads;
        c.mlp_hidden_dim = 2 * d;
        c.num_classes = 3 + depth;
        out.push_back(c);
      }
  return out;
}

}  // namespace

TEST_CASE("default rows reproduce the published breakdown") {
  const auto r = profile(ModelConfig{});
  CHECK(r.row("patch_embedding").params == 98432);
  CHECK(r.row("positional_embedding").params == 25216);
  CHECK(r.row("cls_token").params == 128);
  CHECK(r.row("dropout").params == 0);
  CHECK(r.row("transformer_blocks").params == 4 * 132096);
  CHECK(r.row("layer_norm").params == 256);
  CHECK(r.row("head").params == 1290);
  CHECK(r.total_params == 653706);
  CHECK(r.block_params == 132096);
  CHECK(r.block_row("ln1").params == 256);
  CHECK(r.block_row("attn_qkv").params == 49152);
  CHECK(r.block_row("ln2").params == 256);
  CHECK(r.block_row("mlp_fc1").params == 33024);
  CHECK(r.size_fp32_bytes == 2614824);
  CHECK(r.size_int8_bytes == 653706);
  CHECK(r.row("transformer_blocks").input_shape == "(B, 197, 128)");
  CHECK(r.row("patch_embedding").output_shape == "(B, 196, 128)");
}

TEST_CASE("total equals the sum of rows") {
  for (const auto& c : sweep_configs()) {
    const auto r = count_params(c);
    Index sum = 0;
    for (const auto& row : r.rows) sum += row.params;
    CHECK(sum == r.total_params);
  }
}

TEST_CASE("depth zero degenerates to the embedding and head") {
  ModelConfig c;
  c.depth = 0;
  CHECK(count_params(c).total_params == 125322);
}

TEST_CASE("MAC counts") {
  const auto m = count_macs(ModelConfig{});
  CHECK(m.patch_embed == 196 * 128 * 768);
  CHECK(m.patch_embed == 19267584);
  CHECK(m.per_block == 35756288);
  CHECK(m.head == 1280);
  CHECK(m.total == 162294016);

  ModelConfig deep;
  deep.depth = 8;
  CHECK(count_macs(deep).total - m.total == 4 * 35756288);
}

TEST_CASE("MACs are linear in depth") {
  for (const auto& c : sweep_configs()) {
    auto c1 = c;
    c1.depth = 1;
    const auto base = count_macs(c1);
    const auto m = count_macs(c);
    CHECK(m.blocks == c.depth * base.per_block);
    CHECK(m.total == base.total + (c.depth - 1) * base.per_block);
  }
}

TEST_CASE("per-token block cost scales as the formula dictates") {
  // With T tokens, per block = T*(4d^2 + 2dh) + 2*T^2*d, independent of heads.
  for (Index img : {32, 64, 96}) {
    ModelConfig c;
    c.image_size = img;
    c.patch_size = 16;
    c.embed_dim = 64;
    c.mlp_hidden_dim = 128;
    for (Index heads : {1, 2, 4}) {
      c.num_heads = heads;
      const Index T = c.seq_len(), d = 64, h = 128;
      CHECK(count_macs(c).per_block == T * (4 * d * d + 2 * d * h) + 2 * T * T * d);
    }
  }
}

TEST_CASE("closed form agrees with enumerated tensors across a sweep") {
  const auto configs = sweep_configs();
  CHECK(configs.size() >= 20);
  for (const auto& c : configs) {
    CAPTURE(c.embed_dim);
    CAPTURE(c.depth);
    CAPTURE(c.num_heads);
    const auto params = init_params<float>(c, 1);
    const auto v = verify_against_model(params, count_params(c));
    CHECK(v.ok());
    CHECK(v.enumerated_total == params.count());
  }
}

TEST_CASE("verification on the default model") {
  const auto params = init_params<float>(ModelConfig{}, 3);
  const auto report = count_params(ModelConfig{});
  const auto ok = verify_against_model(params, report);
  CHECK(ok.ok());
  CHECK(ok.enumerated_total == 653706);

  const auto adapted = adapt_head(params, 84, 4);
  const auto bad = verify_against_model(adapted, report);
  REQUIRE_FALSE(bad.ok());
  bool names_head = false;
  for (const auto& m : bad.mismatches) {
    if (m.layer == "head") {
      names_head = true;
      CHECK(m.expected == 1290);
      CHECK(m.actual == 10836);
    }
  }
  CHECK(names_head);
}

TEST_CASE("head row for 84 classes") {
  ModelConfig c;
  c.num_classes = 84;
  CHECK(count_params(c).row("head").params == 10836);
}

TEST_CASE("size conventions") {
  const auto r = profile(ModelConfig{});
  const double mib = static_cast<double>(r.size_int8_bytes) / (1024.0 * 1024.0);
  CHECK(mib == doctest::Approx(0.6234).epsilon(1e-3));
  const auto j = to_json(r);
  CHECK(j["total_params"] == 653706);
  CHECK(j["macs"]["total"] == 162294016);
  CHECK(j["rows"].size() == 7);
  CHECK(j["block_rows"].size() == 6);
}

TEST_CASE("text rendering") {
  const auto text = render_text(profile(ModelConfig{}));
  CHECK(text.find("653,706") != std::string::npos);
  CHECK(text.find("132,096") != std::string::npos);
  CHECK(text.find("98,432") != std::string::npos);
  CHECK(text.find("162,294,016") != std::string::npos);
  CHECK(text.find("0.62 MiB") != std::string::npos);
}

TEST_CASE("invalid configs are rejected") {
  ModelConfig c;
  c.patch_size = 15;
  CHECK_THROWS_AS(count_params(c), ConfigError);
  CHECK_THROWS_AS(count_macs(c), ConfigError);
}
