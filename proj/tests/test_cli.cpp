#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>

#include "dmrl/config.hpp"
#include "test_util.hpp"

using namespace dmrl;
using namespace dmrl::testutil;

namespace {

std::string dmrl_bin() {
  const char* p = std::getenv("DMRL_BIN");
  REQUIRE(p != nullptr);
  return p;
}

struct RunResult {
  int exit_code;
  std::string output;
};

RunResult run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + dmrl_bin() + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof(buf), pipe)) out.append(buf, n);
  int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

}  // namespace

TEST_CASE("config loading: defaults, unknown keys, canonical hash") {
  // Empty document -> full defaults with the reference hyperparameters.
  TrainConfig cfg = train_config_from_json(json::object());
  CHECK(cfg.loss.lambda_c == 2.0);
  CHECK(cfg.loss.lambda_l == 0.1);
  CHECK(cfg.loss.lambda_s == 10.0);
  CHECK(cfg.loss.lambda_z == 2.0);
  CHECK(cfg.loss.alpha_s == 0.1);
  CHECK(cfg.loss.alpha_z == 0.1);
  CHECK(cfg.lr == 2e-4);
  CHECK(cfg.weight_decay == 1e-5);
  CHECK(cfg.epochs == 50);
  CHECK(cfg.batch_subjects == 8);
  CHECK(cfg.model.mode == EncMode::kCondConv);
  CHECK(cfg.model.experts == 4);
  CHECK(cfg.model.z_dim == 16);
  CHECK(cfg.model.s_channels == 4);
  CHECK(cfg.model.ea_widths == std::vector<int>{32, 64, 128, 256});
  CHECK(cfg.model.em_widths == std::vector<int>{16, 32, 64, 128, 128});

  // Misspelled keys are rejected, all of them named.
  json bad = {{"epochz", 3}, {"loss", {{"lambda_q", 1.0}}}};
  try {
    train_config_from_json(bad);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epochz") != std::string::npos);
    CHECK(msg.find("loss.lambda_q") != std::string::npos);
  }

  // Key order does not change the hash.
  json a = json::parse(R"({"epochs": 5, "seed": 9})");
  json b = json::parse(R"({"seed": 9, "epochs": 5})");
  CHECK(config_hash(train_config_to_json(train_config_from_json(a))) ==
        config_hash(train_config_to_json(train_config_from_json(b))));
  CHECK(config_hash(a) == config_hash(b));

  // Different content, different hash.
  json c = json::parse(R"({"epochs": 6, "seed": 9})");
  CHECK(config_hash(train_config_to_json(train_config_from_json(a))) !=
        config_hash(train_config_to_json(train_config_from_json(c))));
}

TEST_CASE("variant validation and gen config guards") {
  CHECK_THROWS_AS(train_config_from_json(json{{"variant", "adv"}}), ConfigError);
  CHECK_THROWS_AS(gen_config_from_json(json{{"noise_sigma", 0.9}}), ConfigError);
  CHECK_THROWS_AS(task_config_from_json(json{{"task", "detection"}}), ConfigError);
}

TEST_CASE("cli: gen-data writes a manifest; unknown flags exit 1") {
  TempDir dir("cli");
  GenConfig gen;
  gen.num_subjects = 6;
  gen.height = 32;
  gen.width = 32;
  gen.split_fractions = {0.5, 0.25, 0.25};
  write_text_file(dir.sub("gen.json"), gen_config_to_json(gen).dump());

  auto ok = run_cli("gen-data --config " + dir.sub("gen.json") + " --out " + dir.sub("data"));
  CHECK(ok.exit_code == 0);
  CHECK(std::filesystem::exists(dir.sub("data/manifest.json")));

  auto bad_flag = run_cli("gen-data --config " + dir.sub("gen.json") + " --wat 3");
  CHECK(bad_flag.exit_code == 1);
  CHECK(bad_flag.output.find("Usage") != std::string::npos);

  auto unknown = run_cli("frobnicate");
  CHECK(unknown.exit_code == 1);

  auto help = run_cli("--help");
  CHECK(help.exit_code == 0);
  for (const char* sub : {"gen-data", "train", "eval-recon", "eval-disent", "export-emb",
                          "train-task", "eval-task", "plot"})
    CHECK(help.output.find(sub) != std::string::npos);

  auto sub_help = run_cli("train --help");
  CHECK(sub_help.exit_code == 0);
  CHECK(sub_help.output.find("--config") != std::string::npos);
}

TEST_CASE("cli: train with missing dataset exits 1 naming the field") {
  TempDir dir("clitrain");
  write_text_file(dir.sub("train.json"), "{}");
  auto r = run_cli("train --config " + dir.sub("train.json"));
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("dataset") != std::string::npos);

  write_text_file(dir.sub("bad.json"), R"({"epochz": 1})");
  auto r2 = run_cli("train --config " + dir.sub("bad.json"));
  CHECK(r2.exit_code == 1);
  CHECK(r2.output.find("epochz") != std::string::npos);
}

TEST_CASE("cli: end-to-end smoke (gen-data, train, eval, export, plot)") {
  TempDir dir("clie2e");
  GenConfig gen;
  gen.num_subjects = 10;
  gen.height = 32;
  gen.width = 32;
  gen.split_fractions = {0.4, 0.2, 0.4};
  gen.seed = 2;
  write_text_file(dir.sub("gen.json"), gen_config_to_json(gen).dump());
  REQUIRE(run_cli("gen-data --config " + dir.sub("gen.json") + " --out " + dir.sub("data")).exit_code == 0);

  TrainConfig tc;
  tc.dataset = dir.sub("data/manifest.json");
  tc.run_dir = dir.sub("run");
  tc.epochs = 2;
  tc.batch_subjects = 4;
  tc.eval_every = 2;
  tc.model = tiny_model_config();
  tc.model.height = 32;
  tc.model.width = 32;
  write_text_file(dir.sub("train.json"), train_config_to_json(tc).dump());
  auto train_run = run_cli("train --config " + dir.sub("train.json"));
  CHECK(train_run.exit_code == 0);
  const std::string ckpt = dir.sub("run/ckpt/last.dmrc");
  REQUIRE(std::filesystem::exists(ckpt));

  auto recon = run_cli("eval-recon --ckpt " + ckpt + " --split test --out " + dir.sub("recon.json"));
  CHECK(recon.exit_code == 0);
  json recon_rep = json::parse(read_text_file(dir.sub("recon.json")));
  CHECK(recon_rep["kind"] == "recon");
  CHECK(recon_rep["per_modality"].size() == 2);
  CHECK(recon_rep.contains("config_hash"));

  auto disent = run_cli("eval-disent --ckpt " + ckpt + " --split test --pairs 100 --out " +
                        dir.sub("disent.json"));
  CHECK(disent.exit_code == 0);
  json disent_rep = json::parse(read_text_file(dir.sub("disent.json")));
  CHECK(disent_rep["kind"] == "disent");

  CHECK(run_cli("export-emb --ckpt " + ckpt + " --split test --out " + dir.sub("emb")).exit_code == 0);
  CHECK(std::filesystem::exists(dir.sub("emb/z.dmrt")));
  CHECK(std::filesystem::exists(dir.sub("emb/labels.csv")));

  auto plot = run_cli("plot --report " + dir.sub("disent.json") + " --log " +
                      dir.sub("run/log.jsonl") + " --out " + dir.sub("plots"));
  CHECK(plot.exit_code == 0);
  CHECK(std::filesystem::exists(dir.sub("plots/gap_bars.bmp")));
  CHECK(std::filesystem::exists(dir.sub("plots/loss_curves.bmp")));
  CHECK(std::filesystem::exists(dir.sub("plots/meta.json")));

  // Plot refuses a mismatched report/config pair without --force.
  TrainConfig other = tc;
  other.seed = 777;
  write_text_file(dir.sub("other.json"), train_config_to_json(other).dump());
  auto refuse = run_cli("plot --report " + dir.sub("disent.json") + " --config " +
                        dir.sub("other.json") + " --out " + dir.sub("plots2"));
  CHECK(refuse.exit_code == 1);
  auto forced = run_cli("plot --report " + dir.sub("disent.json") + " --config " +
                        dir.sub("other.json") + " --out " + dir.sub("plots2") + " --force");
  CHECK(forced.exit_code == 0);

  // eval-recon on a missing checkpoint is a runtime failure (exit 2).
  auto missing = run_cli("eval-recon --ckpt " + dir.sub("nope.dmrc"));
  CHECK(missing.exit_code == 2);
}

TEST_CASE("deterministic mode: two CLI runs produce identical logs and reports") {
  TempDir dir("clidet");
  GenConfig gen;
  gen.num_subjects = 8;
  gen.height = 32;
  gen.width = 32;
  gen.split_fractions = {0.5, 0.0, 0.5};
  write_text_file(dir.sub("gen.json"), gen_config_to_json(gen).dump());
  REQUIRE(run_cli("gen-data --config " + dir.sub("gen.json") + " --out " + dir.sub("data")).exit_code == 0);

  TrainConfig tc;
  tc.dataset = dir.sub("data/manifest.json");
  tc.epochs = 2;
  tc.batch_subjects = 4;
  tc.eval_every = 2;
  tc.model = tiny_model_config();
  tc.model.height = 32;
  tc.model.width = 32;

  for (const char* run : {"runA", "runB"}) {
    tc.run_dir = dir.sub(run);
    write_text_file(dir.sub("train.json"), train_config_to_json(tc).dump());
    auto r = run_cli("train --config " + dir.sub("train.json"), "DMRL_DETERMINISTIC=1");
    REQUIRE(r.exit_code == 0);
    REQUIRE(run_cli("eval-recon --ckpt " + dir.sub(std::string(run) + "/ckpt/last.dmrc") +
                    " --split test --out " + dir.sub(std::string(run) + "_recon.json"),
                    "DMRL_DETERMINISTIC=1")
                .exit_code == 0);
  }
  CHECK(read_text_file(dir.sub("runA/log.jsonl")) == read_text_file(dir.sub("runB/log.jsonl")));
  CHECK(read_text_file(dir.sub("runA_recon.json")) == read_text_file(dir.sub("runB_recon.json")));
}
