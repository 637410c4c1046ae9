#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dmrl/downstream.hpp"
#include "dmrl/fusion.hpp"
#include "dmrl/trainer.hpp"
#include "test_util.hpp"

using namespace dmrl;
using namespace dmrl::testutil;

namespace {

// One shared fixture: tiny dataset + a briefly trained encoder.
struct Fixture {
  TempDir dir{"downstream"};
  std::string manifest;
  std::string encoder_ckpt;
  Dataset ds;

  Fixture() {
    GenConfig gen = tiny_gen_config(10);
    gen.split_fractions = {0.6, 0.0, 0.4};
    build_dataset(gen, dir.sub("data"));
    manifest = dir.sub("data/manifest.json");
    ds = load_dataset(manifest);

    TrainConfig cfg;
    cfg.dataset = manifest;
    cfg.run_dir = dir.sub("enc");
    cfg.epochs = 2;
    cfg.batch_subjects = 6;
    cfg.eval_every = 2;
    cfg.seed = 11;
    cfg.model = tiny_model_config();
    cfg.model.height = 32;
    cfg.model.width = 32;
    encoder_ckpt = train(cfg, train_config_to_json(cfg)).last_checkpoint;
  }

  TaskConfig task_config(const std::string& mode, const std::string& run_tag) {
    TaskConfig tc;
    tc.dataset = manifest;
    tc.input_mode = mode;
    tc.encoder_ckpt = mode == "fused" ? encoder_ckpt : "";
    tc.run_dir = dir.sub(run_tag);
    tc.epochs = 3;
    tc.batch_subjects = 3;
    tc.base_width = 8;
    tc.seed = 4;
    return tc;
  }
};

}  // namespace

TEST_CASE("average_image: arithmetic and disk cache") {
  TempDir dir("avg");
  GenConfig gen = tiny_gen_config(6);
  build_dataset(gen, dir.sub("data"));
  Dataset ds = load_dataset(dir.sub("data/manifest.json"));

  Tensor<float> avg = average_image(ds, 0);
  const auto train_idx = ds.split_indices("train");
  double manual0 = 0;
  for (int i : train_idx) manual0 += ds.samples[static_cast<std::size_t>(i)].images[0][0];
  CHECK(avg[0] == doctest::Approx(manual0 / train_idx.size()).epsilon(1e-6));

  // Second call loads the cache bit-exactly.
  Tensor<float> cached = average_image(ds, 0);
  for (Index i = 0; i < avg.numel(); ++i) CHECK(avg[i] == cached[i]);
  CHECK(std::filesystem::exists(dir.sub("data/avg_mod0.dmrt")));

  CHECK_THROWS_AS(average_image(ds, 9), ArgumentError);
}

TEST_CASE("task net shapes and determinism") {
  TaskNetConfig cfg{12, 5, 8, 32, 32};
  auto net = make_task_net(cfg, 3);
  Rng rng(5);
  Tensor<float> x = random_image<float>(2, 12, 32, 32, rng);
  Tape<float> t(false);
  Var y = task_forward(t, *net, t.constant(x), false);
  CHECK(t.val(y).shape() == Shape{2, 5, 32, 32});

  Tape<float> t2(false);
  Var y2 = task_forward(t2, *net, t2.constant(x), false);
  for (Index i = 0; i < t.val(y).numel(); ++i) CHECK(t.val(y)[i] == t2.val(y2)[i]);
}

TEST_CASE_FIXTURE(Fixture, "fused segmentation: 12 channels, frozen encoder, loss decreases") {
  TaskConfig tc = task_config("fused", "seg_fused");
  const std::string enc_before = read_text_file(encoder_ckpt);
  json merged = task_config_to_json(tc);
  TaskTrainResult result = train_downstream(tc, merged);

  // Frozen contract: the encoder checkpoint bytes did not change.
  CHECK(read_text_file(encoder_ckpt) == enc_before);

  TaskCheckpoint ckpt = load_task_checkpoint(result.checkpoint);
  CHECK(ckpt.net->cfg.in_channels == 12);  // 3 stats x 4 anatomy channels
  CHECK(ckpt.net->cfg.out_channels == 5);
  CHECK(result.epoch_mean_loss.back() < result.epoch_mean_loss.front());

  // eval_missing with nothing dropped equals itself and produces sane DICE.
  MissingEvalResult full = eval_missing(result.checkpoint, {}, "", manifest, "test");
  CHECK(full.dice_lesion >= 0.0);
  CHECK(full.dice_lesion <= 1.0);
  CHECK(full.dice_per_class.size() == 4);

  // Dropping one modality still runs; dropping everything fails.
  MissingEvalResult drop0 = eval_missing(result.checkpoint, {0}, "", manifest, "test");
  CHECK(drop0.subjects == full.subjects);
  CHECK_THROWS_AS(eval_missing(result.checkpoint, {0, 1}, "", manifest, "test"), ArgumentError);
}

TEST_CASE_FIXTURE(Fixture, "raw-stack baseline with zero and average fill") {
  TaskConfig tc = task_config("raw-stack", "seg_raw");
  json merged = task_config_to_json(tc);
  TaskTrainResult result = train_downstream(tc, merged);
  TaskCheckpoint ckpt = load_task_checkpoint(result.checkpoint);
  CHECK(ckpt.net->cfg.in_channels == 2);  // m raw channels

  MissingEvalResult full = eval_missing(result.checkpoint, {}, "zero", manifest, "test");
  MissingEvalResult zero = eval_missing(result.checkpoint, {0}, "zero", manifest, "test");
  MissingEvalResult avg = eval_missing(result.checkpoint, {0}, "average", manifest, "test");
  CHECK(zero.fill == "zero");
  CHECK(avg.fill == "average");
  for (const auto& r : {full, zero, avg}) {
    CHECK(r.dice_lesion >= 0.0);
    CHECK(r.dice_lesion <= 1.0);
    CHECK(r.dice_foreground_mean >= 0.0);
    CHECK(r.dice_foreground_mean <= 1.0);
  }
  // Distinct fill policies actually change the input.
  CHECK(zero.dice_foreground_mean != avg.dice_foreground_mean);
}

TEST_CASE_FIXTURE(Fixture, "fused mode rejects a missing_fill policy") {
  TaskConfig tc = task_config("fused", "seg_badfill");
  tc.missing_fill = "zero";
  CHECK_THROWS_AS(task_config_from_json(task_config_to_json(tc)), ConfigError);
}

TEST_CASE_FIXTURE(Fixture, "synthesis task: target modality excluded, PSNR reported") {
  TaskConfig tc = task_config("fused", "synth_fused");
  tc.task = "synthesis";
  json merged = task_config_to_json(tc);
  TaskTrainResult result = train_downstream(tc, merged);
  TaskCheckpoint ckpt = load_task_checkpoint(result.checkpoint);
  CHECK(ckpt.net->cfg.out_channels == 1);
  CHECK(ckpt.header["target_modality"].get<int>() == 1);
  CHECK(ckpt.header["input_modalities"].size() == 1);  // modality 0 only

  MissingEvalResult r = eval_missing(result.checkpoint, {}, "", manifest, "test");
  CHECK(r.task == "synthesis");
  CHECK(std::isfinite(r.psnr_value));
  CHECK(r.ssim_value <= 1.0);

  // Raw-stack synthesis gets m-1 input channels.
  TaskConfig rc = task_config("raw-stack", "synth_raw");
  rc.task = "synthesis";
  TaskTrainResult rr = train_downstream(rc, task_config_to_json(rc));
  TaskCheckpoint rckpt = load_task_checkpoint(rr.checkpoint);
  CHECK(rckpt.net->cfg.in_channels == 1);
}

TEST_CASE_FIXTURE(Fixture, "fused prediction invariant to modality listing order") {
  // fuse() is permutation invariant, so eval through the net must be too.
  TaskConfig tc = task_config("fused", "seg_perm");
  TaskTrainResult result = train_downstream(tc, task_config_to_json(tc));
  TaskCheckpoint ckpt = load_task_checkpoint(result.checkpoint);
  ModelCheckpoint enc = load_model_checkpoint(encoder_ckpt);

  const auto& sample = ds.samples[0];
  std::vector<Tensor<float>> maps;
  for (int mi = 0; mi < 2; ++mi) {
    Tensor<float> x = sample.images[static_cast<std::size_t>(mi)].reshaped({1, 1, 32, 32});
    Tensor<float> s = encode_anatomy_eval(*enc.model, x, mi);
    maps.push_back(s.reshaped({4, 32, 32}));
  }
  Tensor<float> fwd = fuse<float>({maps[0], maps[1]});
  Tensor<float> rev = fuse<float>({maps[1], maps[0]});
  Tape<float> t(false);
  Tensor<float> ya = t.val(task_forward(t, *ckpt.net, t.constant(fwd.reshaped({1, 12, 32, 32})), false));
  Tape<float> t2(false);
  Tensor<float> yb = t2.val(task_forward(t2, *ckpt.net, t2.constant(rev.reshaped({1, 12, 32, 32})), false));
  for (Index i = 0; i < ya.numel(); ++i) CHECK(ya[i] == yb[i]);
}
