#include "doctest.h"

#include "bornovit/errors.hpp"
#include "bornovit/model.hpp"
#include "bornovit/ops.hpp"
#include "support/gradcheck.hpp"

#include <cmath>
#include <numeric>

using namespace bornovit;

namespace {

Tensor<float> random_images(Index B, const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float>::Storage v(B * c.in_channels * c.image_size * c.image_size);
  for (Index i = 0; i < v.size(); ++i) v[i] = u(rng);
  return Tensor<float>({B, c.in_channels, c.image_size, c.image_size}, std::move(v));
}

// Independent oracle: explicit patch loops, flatten (c, y, x), then W*p + b.
Tensor<float> naive_patch_embed(const ViTParams<float>& p, const Tensor<float>& img) {
  const auto& c = p.config;
  const Index B = img.dim(0), P = c.patch_size, g = c.grid_size(), d = c.embed_dim;
  Tensor<float>::Storage out(B * g * g * d);
  for (Index b = 0; b < B; ++b)
    for (Index gy = 0; gy < g; ++gy)
      for (Index gx = 0; gx < g; ++gx) {
        std::vector<double> flat;
        for (Index ch = 0; ch < c.in_channels; ++ch)
          for (Index y = 0; y < P; ++y)
            for (Index x = 0; x < P; ++x) flat.push_back(img.at({b, ch, gy * P + y, gx * P + x}));
        for (Index o = 0; o < d; ++o) {
          double acc = p.patch_proj_bias.data()[o];
          for (std::size_t k = 0; k < flat.size(); ++k) {
            acc += static_cast<double>(p.patch_proj_weight.data()[o * static_cast<Index>(flat.size()) + static_cast<Index>(k)]) * flat[k];
          }
          out[((b * g + gy) * g + gx) * d + o] = static_cast<float>(acc);
        }
      }
  return Tensor<float>({B, g * g, d}, std::move(out));
}

ModelConfig small_config() {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.embed_dim = 32;
  c.depth = 2;
  c.num_heads = 2;
  c.mlp_hidden_dim = 64;
  c.num_classes = 5;
  return c;
}

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && (a.data() == b.data()).all();
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.num_patches() == 196);
  CHECK(c.head_dim() == 64);
  c.patch_size = 15;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.dropout_p = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(init_params<float>(c, 1), ConfigError);
}

TEST_CASE("init_params: exact parameter total of the default 10-class model") {
  auto p = init_params<float>(ModelConfig{}, 0);
  CHECK(p.count() == 653706);
}

TEST_CASE("init_params: per-layer counts") {
  auto p = init_params<float>(ModelConfig{}, 0);
  CHECK(p.patch_proj_weight.numel() + p.patch_proj_bias.numel() == 98432);
  CHECK(p.pos_embedding.numel() == 25216);
  CHECK(p.cls_token.numel() == 128);
  for (const auto& b : p.blocks) {
    CHECK(b.ln1_gamma.numel() + b.ln1_beta.numel() == 256);
    CHECK(b.qkv_weight.numel() == 49152);
    CHECK(b.out_proj_weight.numel() == 16384);
    CHECK(b.out_proj_bias.numel() == 128);
    CHECK(b.ln2_gamma.numel() + b.ln2_beta.numel() == 256);
    CHECK(b.fc1_weight.numel() + b.fc1_bias.numel() == 33024);
    CHECK(b.fc2_weight.numel() + b.fc2_bias.numel() == 32896);
    Index block_total = 0;
    for (const auto& t : {b.ln1_gamma, b.ln1_beta, b.qkv_weight, b.out_proj_weight, b.out_proj_bias, b.ln2_gamma,
                          b.ln2_beta, b.fc1_weight, b.fc1_bias, b.fc2_weight, b.fc2_bias}) {
      block_total += t.numel();
    }
    CHECK(block_total == 132096);
  }
  CHECK(p.final_ln_gamma.numel() + p.final_ln_beta.numel() == 256);
  CHECK(p.head_weight.numel() + p.head_bias.numel() == 1290);
}

TEST_CASE("init_params is deterministic per seed") {
  auto a = init_params<float>(small_config(), 42);
  auto b = init_params<float>(small_config(), 42);
  auto c = init_params<float>(small_config(), 43);
  const auto na = a.named(), nb = b.named(), nc = c.named();
  bool any_diff = false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    CHECK(bit_equal(na[i].tensor, nb[i].tensor));
    any_diff = any_diff || !bit_equal(na[i].tensor, nc[i].tensor);
  }
  CHECK(any_diff);
}

TEST_CASE("init_params distributions") {
  auto p = init_params<float>(ModelConfig{}, 3);
  CHECK(p.pos_embedding.data().abs().maxCoeff() <= 0.04f);
  const double sd = std::sqrt(p.pos_embedding.data().square().mean());
  CHECK(sd == doctest::Approx(0.0176).epsilon(0.1));  // 0.02 * 0.88 for a +-2 sigma truncation
  const float limit = std::sqrt(6.0f / (128.0f + 384.0f));
  CHECK(p.blocks[0].qkv_weight.data().abs().maxCoeff() <= limit);
  CHECK((p.blocks[0].ln1_gamma.data() == 1.0f).all());
  CHECK((p.head_bias.data() == 0.0f).all());
  CHECK(p.head_weight.requires_grad());
}

TEST_CASE("patch_embed: zero image maps to the bias row") {
  auto p = init_params<float>(ModelConfig{}, 1);
  auto out = patch_embed(p, Tensor<float>::zeros({1, 3, 224, 224}));
  CHECK(out.shape() == Shape{1, 196, 128});
  for (Index n = 0; n < 196; ++n)
    for (Index j = 0; j < 128; ++j) CHECK(out.at({0, n, j}) == p.patch_proj_bias.data()[j]);
}

TEST_CASE("patch_embed: one nonzero pixel changes exactly one patch row") {
  auto p = init_params<float>(ModelConfig{}, 1);
  auto img = Tensor<float>::zeros({1, 3, 224, 224});
  // channel 1, row 37, column 200 -> patch (2, 12) = index 2*14+12
  img.mutable_data()[(1 * 224 + 37) * 224 + 200] = 1.0f;
  auto out = patch_embed(p, img);
  std::vector<Index> changed;
  for (Index n = 0; n < 196; ++n) {
    bool differs = false;
    for (Index j = 0; j < 128; ++j) differs = differs || out.at({0, n, j}) != p.patch_proj_bias.data()[j];
    if (differs) changed.push_back(n);
  }
  REQUIRE(changed.size() == 1);
  CHECK(changed[0] == 2 * 14 + 12);
}

TEST_CASE("patch_embed: convolution, flatten+linear and naive oracle agree") {
  auto p = init_params<float>(ModelConfig{}, 2);
  auto img = random_images(2, p.config, 5);
  auto conv = patch_embed(p, img);
  auto lin = patch_embed_linear(p, img);
  auto oracle = naive_patch_embed(p, img);
  CHECK((conv.data() - oracle.data()).abs().maxCoeff() <= 1e-5f);
  CHECK((lin.data() - oracle.data()).abs().maxCoeff() <= 1e-5f);
}

TEST_CASE("patch_embed rejects wrong spatial size") {
  auto p = init_params<float>(ModelConfig{}, 2);
  CHECK_THROWS_AS(patch_embed(p, Tensor<float>::zeros({1, 3, 200, 200})), ShapeError);
  CHECK_THROWS_AS(forward(p, Tensor<float>::zeros({3, 224, 224}), Mode::Eval), ShapeError);
}

TEST_CASE("forward: shapes, trace, and attention simplex") {
  auto p = init_params<float>(ModelConfig{}, 4);
  auto img = random_images(2, p.config, 6);
  AttentionTrace<float> trace;
  NoGradGuard no_grad;
  auto logits = forward(p, img, Mode::Eval, nullptr, &trace);
  CHECK(logits.shape() == Shape{2, 10});
  REQUIRE(trace.block_outputs.size() == 4);
  for (std::size_t b = 0; b < 4; ++b) {
    CHECK(trace.block_outputs[b].shape() == Shape{2, 197, 128});
    const auto& a = trace.attention[b];
    CHECK(a.shape() == Shape{2, 2, 197, 197});
    const Index rows = a.numel() / 197;
    for (Index r = 0; r < rows; ++r) {
      const auto row = a.data().segment(r * 197, 197);
      CHECK(row.minCoeff() >= 0.0f);
      CHECK(std::abs(row.sum() - 1.0f) <= 1e-5f);
    }
  }
}

TEST_CASE("forward: eval mode is a pure function of params and input") {
  auto p = init_params<float>(small_config(), 4);
  auto img = random_images(3, p.config, 7);
  auto a = forward(p, img, Mode::Eval);
  auto b = forward(p, img, Mode::Eval);
  CHECK(bit_equal(a, b));
}

TEST_CASE("forward: train mode applies dropout and needs a generator") {
  auto p = init_params<float>(small_config(), 4);
  auto img = random_images(2, p.config, 8);
  CHECK_THROWS_AS(forward(p, img, Mode::Train), ContractError);
  std::mt19937_64 r1(1), r2(1), r3(2);
  auto a = forward(p, img, Mode::Train, &r1);
  auto b = forward(p, img, Mode::Train, &r2);
  auto c = forward(p, img, Mode::Train, &r3);
  CHECK(bit_equal(a, b));
  CHECK_FALSE(bit_equal(a, c));
}

TEST_CASE("forward: doubling the head doubles the logits exactly") {
  auto p = init_params<float>(small_config(), 9);
  auto img = random_images(2, p.config, 10);
  p.head_bias.mutable_data() = Tensor<float>::Storage::LinSpaced(p.head_bias.numel(), -0.5f, 0.5f);
  auto q = p.clone();
  q.head_weight.mutable_data() *= 2.0f;
  q.head_bias.mutable_data() *= 2.0f;
  auto before = forward(p, img, Mode::Eval);
  auto after = forward(q, img, Mode::Eval);
  CHECK(((after.data() - 2.0f * before.data()) == 0.0f).all());
}

TEST_CASE("forward: permuting patches and positional rows together leaves logits unchanged") {
  ModelConfig c;
  c.depth = 2;
  auto p = init_params<float>(c, 11);
  auto img = random_images(1, c, 12);

  std::vector<Index> perm(196);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(13);
  std::shuffle(perm.begin(), perm.end(), rng);

  // New patch n takes the content (and positional row) of old patch perm[n].
  auto moved = img.clone();
  for (Index n = 0; n < 196; ++n) {
    const Index src = perm[static_cast<std::size_t>(n)];
    for (Index ch = 0; ch < 3; ++ch)
      for (Index y = 0; y < 16; ++y)
        for (Index x = 0; x < 16; ++x) {
          moved.mutable_data()[(ch * 224 + (n / 14) * 16 + y) * 224 + (n % 14) * 16 + x] =
              img.data()[(ch * 224 + (src / 14) * 16 + y) * 224 + (src % 14) * 16 + x];
        }
  }
  auto q = p.clone();
  for (Index n = 0; n < 196; ++n) {
    q.pos_embedding.mutable_data().segment((n + 1) * 128, 128) =
        p.pos_embedding.data().segment((perm[static_cast<std::size_t>(n)] + 1) * 128, 128);
  }
  auto a = forward(p, img, Mode::Eval);
  auto b = forward(q, moved, Mode::Eval);
  CHECK((a.data() - b.data()).abs().maxCoeff() <= 1e-4f);
}

TEST_CASE("adapt_head copies the backbone bit-exactly") {
  ModelConfig c = small_config();
  c.num_classes = 122;
  auto src = init_params<float>(c, 21);
  auto dst = adapt_head(src, 84, 5);
  CHECK(dst.config.num_classes == 84);
  CHECK(dst.head_weight.shape() == Shape{84, 32});
  const auto a = src.named(), b = dst.named();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name.rfind("head.", 0) == 0) continue;
    CHECK(bit_equal(a[i].tensor, b[i].tensor));
    CHECK(a[i].tensor.node() != b[i].tensor.node());
  }
}

TEST_CASE("adapt_head with the same class count only changes the head") {
  auto src = init_params<float>(small_config(), 21);
  auto dst = adapt_head(src, 5, 999);
  const auto a = src.named(), b = dst.named();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool head = a[i].name == "head.weight";
    CHECK(bit_equal(a[i].tensor, b[i].tensor) != head);
  }
}

TEST_CASE("adapt_head parameter arithmetic and errors") {
  auto p = init_params<float>(ModelConfig{}, 0);
  // 653,706 - 1,290 + (128*84 + 84)
  CHECK(adapt_head(p, 84, 1).count() == 653706 - 1290 + (128 * 84 + 84));
  CHECK(adapt_head(p, 84, 1).count() == 663252);
  CHECK_THROWS_AS(adapt_head(p, 0, 1), ConfigError);
}

TEST_CASE("from_named rejects mismatched tables") {
  auto p = init_params<float>(small_config(), 1);
  auto named = p.named();
  named.pop_back();
  CHECK_THROWS_AS(ViTParams<float>::from_named(p.config, named), ShapeError);
  named = p.named();
  named[0].tensor = Tensor<float>::zeros({1});
  CHECK_THROWS_AS(ViTParams<float>::from_named(p.config, named), ShapeError);
}

TEST_CASE("full-size model gradients match finite differences on sampled coordinates") {
  ModelConfig c;
  c.dropout_p = 0.0;
  auto params = init_params<double>(c, 31);
  std::mt19937_64 rng(32);
  auto img = bornovit::testing::randn({1, 3, 224, 224}, rng, false);
  const std::vector<int> label{3};

  std::vector<Tensor<double>> inputs;
  std::vector<std::string> names;
  for (const auto& [name, t] : params.named()) {
    inputs.push_back(t);
    names.push_back(name);
  }
  // Sample 50 (tensor, coordinate) pairs spread across all tensors.
  std::vector<std::pair<std::size_t, Index>> picks;
  std::uniform_int_distribution<std::size_t> which(0, inputs.size() - 1);
  for (int i = 0; i < 50; ++i) {
    const auto t = which(rng);
    std::uniform_int_distribution<Index> coord(0, inputs[t].numel() - 1);
    picks.emplace_back(t, coord(rng));
  }
  auto loss_fn = [&]() { return cross_entropy(forward(params, img, Mode::Eval), label); };
  params.zero_grad();
  backward(loss_fn());

  NoGradGuard no_grad;
  int failures = 0;
  for (const auto& [t, coord] : picks) {
    auto& tensor = inputs[t];
    const double analytic = tensor.has_grad() ? tensor.grad()[coord] : 0.0;
    const double saved = tensor.data()[coord];
    const double h = 1e-5;
    tensor.mutable_data()[coord] = saved + h;
    const double up = loss_fn().item();
    tensor.mutable_data()[coord] = saved - h;
    const double down = loss_fn().item();
    tensor.mutable_data()[coord] = saved;
    const double numeric = (up - down) / (2 * h);
    const bool ok = bornovit::testing::relative_error(analytic, numeric) <= 1e-2 ||
                    std::abs(analytic - numeric) <= 1e-8;
    if (!ok) {
      ++failures;
      MESSAGE(names[t] << "[" << coord << "] analytic " << analytic << " numeric " << numeric);
    }
  }
  CHECK(failures == 0);
}
