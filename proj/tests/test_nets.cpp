#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dmrl/checkpoint.hpp"
#include "dmrl/nets.hpp"
#include "test_util.hpp"

using namespace dmrl;
using namespace dmrl::testutil;

namespace {

ExpertBank<float> make_bank(std::vector<Tensor<float>> kernels, Tensor<float> routing,
                            int stride, int pad) {
  ExpertBank<float> b;
  b.kernels = std::move(kernels);
  b.routing = std::move(routing);
  const Index cout = b.kernels[0].dim(0);
  b.bias = Tensor<float>({cout});
  b.stride = stride;
  b.pad = pad;
  return b;
}

Tensor<float> rand_kernel(Shape shape, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  Tensor<float> t(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(scale * rng.normal());
  return t;
}

}  // namespace

TEST_CASE("cond_conv with one expert equals plain convolution") {
  Rng rng(3);
  Tensor<float> x = random_image<float>(2, 3, 9, 9, rng);
  Tensor<float> w = rand_kernel({5, 3, 3, 3}, 11);

  auto bank = make_bank({w}, Tensor<float>({4, 1}), 1, 1);  // n=1, any routing
  Tape<float> t(false);
  Var xin = t.constant(x);
  Var mixed = cond_conv(t, bank, xin, 2);
  Var plain = conv2d(t, xin, t.constant(w), t.param(bank.bias), 1, 1);
  const auto& a = t.val(mixed);
  const auto& b = t.val(plain);
  float max_diff = 0;
  for (Index i = 0; i < a.numel(); ++i) max_diff = std::max(max_diff, std::abs(a[i] - b[i]));
  CHECK(max_diff <= 1e-6f);
}

TEST_CASE("cond_conv one-hot routing selects a single expert") {
  Rng rng(4);
  Tensor<float> x = random_image<float>(1, 2, 8, 8, rng);
  Tensor<float> w0 = rand_kernel({3, 2, 3, 3}, 21);
  Tensor<float> w1 = rand_kernel({3, 2, 3, 3}, 22);
  Tensor<float> routing({1, 2});
  routing.at2(0, 0) = -40.0f;  // softmax ~ one-hot on expert 1
  routing.at2(0, 1) = 40.0f;

  auto bank = make_bank({w0, w1}, routing, 1, 1);
  Tape<float> t(false);
  Var xin = t.constant(x);
  Var mixed = cond_conv(t, bank, xin, 0);
  Var expert1 = conv2d(t, xin, t.constant(w1), t.param(bank.bias), 1, 1);
  const auto& a = t.val(mixed);
  const auto& b = t.val(expert1);
  float max_diff = 0;
  for (Index i = 0; i < a.numel(); ++i) max_diff = std::max(max_diff, std::abs(a[i] - b[i]));
  CHECK(max_diff <= 1e-4f);
}

TEST_CASE("cond_conv hand example: mixed 1x1 kernel on a scalar") {
  // kernels {2}, {4}, uniform routing -> mixed kernel 3; input 3 -> 9.
  Tensor<float> w0({1, 1, 1, 1}, 2.0f), w1({1, 1, 1, 1}, 4.0f);
  auto bank = make_bank({w0, w1}, Tensor<float>({1, 2}), 1, 0);  // zero scores = uniform beta
  Tensor<float> x({1, 1, 1, 1}, 3.0f);
  Tape<float> t(false);
  Var y = cond_conv(t, bank, t.constant(x), 0);
  CHECK(t.val(y)[0] == doctest::Approx(9.0f).epsilon(1e-6));
}

TEST_CASE("weight mixing equals output mixing (linearity oracle)") {
  Rng rng(5);
  Tensor<float> x = random_image<float>(2, 3, 10, 10, rng);
  std::vector<Tensor<float>> kernels;
  for (int k = 0; k < 4; ++k) kernels.push_back(rand_kernel({4, 3, 3, 3}, 30 + k));
  Tensor<float> routing({2, 4});
  Rng rrng(9);
  for (Index i = 0; i < routing.numel(); ++i) routing[i] = static_cast<float>(rrng.normal());

  for (int modality = 0; modality < 2; ++modality) {
    auto bank = make_bank(kernels, routing, 1, 1);
    Tape<float> t(false);
    Var xin = t.constant(x);
    Var weight_mixed = cond_conv(t, bank, xin, modality);

    // Independent oracle: mix the outputs of per-expert convolutions. The
    // mixture coefficients sum to 1, so the shared bias passes through.
    // Values are copied out of the tape before further ops are pushed.
    Tensor<float> bv = t.val(softmax_vec(t, select_row(t, t.constant(routing), modality)));
    Tensor<float> acc(t.val(weight_mixed).shape());
    for (int k = 0; k < 4; ++k) {
      Tensor<float> ykv = t.val(conv2d(t, xin, t.constant(kernels[static_cast<std::size_t>(k)]),
                                       t.param(bank.bias), 1, 1));
      for (Index i = 0; i < acc.numel(); ++i) acc[i] += bv[k] * ykv[i];
    }
    float max_diff = 0;
    Tensor<float> wm = t.val(weight_mixed);
    for (Index i = 0; i < acc.numel(); ++i)
      max_diff = std::max(max_diff, std::abs(acc[i] - wm[i]));
    CHECK(max_diff <= 1e-4f);
  }
}

TEST_CASE("cond_conv rejects out-of-range modality") {
  auto bank = make_bank({rand_kernel({2, 1, 3, 3}, 1)}, rand_kernel({2, 2}, 2), 1, 1);
  Tape<float> t(false);
  Var x = t.constant(Tensor<float>({1, 1, 4, 4}));
  CHECK_THROWS_AS(cond_conv(t, bank, x, 5), ArgumentError);
}

TEST_CASE("encode_anatomy contract: shape, softmax, modality effect") {
  auto cfg = tiny_model_config();
  auto model = make_model<float>(cfg, 77);
  Rng rng(6);
  Tensor<float> x = random_image<float>(2, 1, 16, 16, rng);

  Tensor<float> s = encode_anatomy_eval(*model, x, 0);
  REQUIRE(s.shape() == Shape{2, 4, 16, 16});
  for (Index n = 0; n < 2; ++n)
    for (Index y = 0; y < 16; ++y)
      for (Index xx = 0; xx < 16; ++xx) {
        float sum = 0;
        for (Index c = 0; c < 4; ++c) {
          const float v = s.at4(n, c, y, xx);
          CHECK(v >= 0.0f);
          CHECK(v <= 1.0f);
          sum += v;
        }
        CHECK(std::abs(sum - 1.0f) <= 1e-5f);
      }

  // Determinism in eval mode.
  Tensor<float> s2 = encode_anatomy_eval(*model, x, 0);
  for (Index i = 0; i < s.numel(); ++i) CHECK(s[i] == s2[i]);

  // With zero-initialized routing all modalities share one mixture: outputs
  // agree. Perturbing a routing row separates them.
  Tensor<float> s_mod1 = encode_anatomy_eval(*model, x, 1);
  float diff_before = 0;
  for (Index i = 0; i < s.numel(); ++i) diff_before = std::max(diff_before, std::abs(s[i] - s_mod1[i]));
  CHECK(diff_before == 0.0f);

  for (auto& blk : model->ea[0].down) blk.conv.routing.at2(1, 0) = 3.0f;
  Tensor<float> s_mod1b = encode_anatomy_eval(*model, x, 1);
  float diff_after = 0;
  for (Index i = 0; i < s.numel(); ++i) diff_after = std::max(diff_after, std::abs(s[i] - s_mod1b[i]));
  CHECK(diff_after > 1e-4f);
}

TEST_CASE("encode_anatomy rejects indivisible spatial sizes before compute") {
  auto cfg = tiny_model_config();
  auto model = make_model<float>(cfg, 1);
  Tape<float> t(false);
  Var bad = t.constant(Tensor<float>({1, 1, 18, 18}));
  CHECK_THROWS_AS(encode_anatomy(t, *model, bad, 0, false), ShapeError);
}

TEST_CASE("encode_modality contract") {
  auto cfg = tiny_model_config();
  auto model = make_model<float>(cfg, 78);
  Rng rng(7);
  Tensor<float> x = random_image<float>(3, 1, 16, 16, rng);
  Tensor<float> z = encode_modality_eval(*model, x, 0);
  REQUIRE(z.shape() == Shape{3, 16});
  CHECK(z.all_finite());

  // Constant-zero input still produces a finite code.
  Tensor<float> zeros({1, 1, 16, 16});
  Tensor<float> z0 = encode_modality_eval(*model, zeros, 1);
  CHECK(z0.all_finite());

  // Repeat eval is bit-identical.
  Tensor<float> z2 = encode_modality_eval(*model, x, 0);
  for (Index i = 0; i < z.numel(); ++i) CHECK(z[i] == z2[i]);

  // Too-small spatial size -> shape error (3 stride-2 stages need >= 8).
  Tape<float> t(false);
  Var bad = t.constant(Tensor<float>({1, 1, 4, 4}));
  CHECK_THROWS_AS(encode_modality(t, *model, bad, 0, false), ShapeError);
}

TEST_CASE("decode contract and translate composition") {
  auto cfg = tiny_model_config();
  auto model = make_model<float>(cfg, 79);
  Rng rng(8);
  Tensor<float> x = random_image<float>(2, 1, 16, 16, rng);
  Tensor<float> s = encode_anatomy_eval(*model, x, 0);
  Tensor<float> z = encode_modality_eval(*model, x, 0);
  Tensor<float> out = decode_eval(*model, s, z);
  REQUIRE(out.shape() == Shape{2, 1, 16, 16});
  CHECK(out.all_finite());

  // translate(x, i, x, i) is exactly the self-reconstruction composition.
  Tensor<float> via_translate = translate(*model, x, 0, x, 0);
  for (Index i = 0; i < out.numel(); ++i) CHECK(via_translate[i] == out[i]);

  // Wrong spatial size is rejected.
  Tape<float> t(false);
  Var bad_s = t.constant(Tensor<float>({1, 4, 8, 8}));
  Var ok_z = t.constant(Tensor<float>({1, 16}));
  CHECK_THROWS_AS(decode(t, *model, bad_s, ok_z, false), ShapeError);
}

TEST_CASE("conv mode keeps per-modality encoders independent") {
  auto cfg = tiny_model_config(EncMode::kConv);
  auto model = make_model<float>(cfg, 80);
  CHECK(model->ea.size() == 2);
  CHECK(model->em.size() == 2);
  Rng rng(9);
  Tensor<float> x = random_image<float>(1, 1, 16, 16, rng);
  Tensor<float> s0 = encode_anatomy_eval(*model, x, 0);
  Tensor<float> s1 = encode_anatomy_eval(*model, x, 1);
  float diff = 0;
  for (Index i = 0; i < s0.numel(); ++i) diff = std::max(diff, std::abs(s0[i] - s1[i]));
  CHECK(diff > 1e-4f);  // independently initialized parameter sets
}

TEST_CASE("condconv parameter count independent of m except routing") {
  auto cfg2 = tiny_model_config(EncMode::kCondConv, 2);
  auto cfg4 = tiny_model_config(EncMode::kCondConv, 4);
  auto m2 = make_model<float>(cfg2, 1);
  auto m4 = make_model<float>(cfg4, 1);
  CHECK(m2->param_count_excluding_routing() == m4->param_count_excluding_routing());
  CHECK(m4->param_count() > m2->param_count());
}

TEST_CASE("checkpoint round trip reproduces eval forward bit-exactly") {
  TempDir dir("ckpt");
  auto cfg = tiny_model_config();
  auto model = make_model<float>(cfg, 81);
  Rng rng(10);
  Tensor<float> x = random_image<float>(2, 1, 16, 16, rng);

  // Run one training-mode pass so running stats are nontrivial.
  {
    Tape<float> t(true);
    encode_anatomy(t, *model, t.leaf(x, false), 0, true);
  }
  Tensor<float> s_before = encode_anatomy_eval(*model, x, 0);
  Tensor<float> z_before = encode_modality_eval(*model, x, 1);

  const std::string path = dir.sub("model.dmrc");
  save_model_checkpoint(path, *model, json{{"epoch", 3}, {"config_hash", "abc"}});
  ModelCheckpoint loaded = load_model_checkpoint(path);
  CHECK(loaded.header["epoch"] == 3);
  CHECK(loaded.header["m"] == 2);

  Tensor<float> s_after = encode_anatomy_eval(*loaded.model, x, 0);
  Tensor<float> z_after = encode_modality_eval(*loaded.model, x, 1);
  for (Index i = 0; i < s_before.numel(); ++i) CHECK(s_before[i] == s_after[i]);
  for (Index i = 0; i < z_before.numel(); ++i) CHECK(z_before[i] == z_after[i]);
}

TEST_CASE("corrupt checkpoint names the missing tensor") {
  TempDir dir("ckptbad");
  auto cfg = micro_model_config();
  auto model = make_model<float>(cfg, 82);
  const std::string path = dir.sub("model.dmrc");
  // Save with one parameter tensor dropped from the table.
  json header{{"format", "dmrl-model"}, {"model_config", model_config_to_json(cfg)}};
  header["mode"] = enc_mode_name(cfg.mode);
  header["m"] = cfg.modalities;
  header["n"] = cfg.experts;
  header["height"] = cfg.height;
  header["width"] = cfg.width;
  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  for (std::size_t i = 1; i < model->params.size(); ++i)
    tensors.push_back({"param." + model->params[i].name, model->params[i].tensor});
  for (const auto& b : model->buffers) tensors.push_back({"buffer." + b.name, b.tensor});
  save_archive(path, header, tensors);

  try {
    load_model_checkpoint(path);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(model->params[0].name) != std::string::npos);
  }
}
