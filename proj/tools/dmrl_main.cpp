#include <csignal>
#include <iostream>

#include <CLI11.hpp>

#include "dmrl/config.hpp"
#include "dmrl/downstream.hpp"
#include "dmrl/evalmetrics.hpp"
#include "dmrl/plot.hpp"
#include "dmrl/synthdata.hpp"
#include "dmrl/trainer.hpp"

using namespace dmrl;

namespace {

void handle_sigint(int) { request_training_stop(); }

void emit_report(const json& report, const std::string& out_path) {
  std::cout << report.dump(2) << "\n";
  if (!out_path.empty()) write_text_file(out_path, report.dump(2) + "\n");
}

// Dataset path for eval subcommands: explicit flag wins, otherwise the path
// recorded in the checkpoint's training config.
std::string resolve_dataset(const json& ckpt_header, const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (ckpt_header.contains("train_config") && ckpt_header["train_config"].contains("dataset"))
    return ckpt_header["train_config"]["dataset"].get<std::string>();
  throw ConfigError("no dataset path: pass --dataset or use a checkpoint that records one");
}

int run(int argc, char** argv) {
  CLI::App app{"disentangled multi-modal representation toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic multi-modal dataset");
  std::string gen_config_path, gen_out;
  gen->add_option("--config", gen_config_path, "generation config JSON")->required();
  gen->add_option("--out", gen_out, "output directory")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "train the disentanglement model");
  std::string train_config_path, resume_path, train_run_dir;
  bool train_force = false;
  train_cmd->add_option("--config", train_config_path, "train config JSON")->required();
  train_cmd->add_option("--resume", resume_path, "checkpoint to resume from");
  train_cmd->add_option("--run-dir", train_run_dir, "run directory override");
  train_cmd->add_flag("--force", train_force, "resume despite a config hash mismatch");

  // eval-recon
  auto* recon_cmd = app.add_subcommand("eval-recon", "self/cross reconstruction PSNR and SSIM");
  std::string recon_ckpt, recon_split = "test", recon_dataset, recon_out;
  recon_cmd->add_option("--ckpt", recon_ckpt, "model checkpoint")->required();
  recon_cmd->add_option("--split", recon_split, "dataset split (train|val|test|all)");
  recon_cmd->add_option("--dataset", recon_dataset, "manifest path override");
  recon_cmd->add_option("--out", recon_out, "write the report JSON here");

  // eval-disent
  auto* dis_cmd = app.add_subcommand("eval-disent", "disentanglement gaps, silhouettes, probes");
  std::string dis_ckpt, dis_split = "test", dis_dataset, dis_out;
  int dis_pairs = 500;
  dis_cmd->add_option("--ckpt", dis_ckpt, "model checkpoint")->required();
  dis_cmd->add_option("--split", dis_split, "dataset split");
  dis_cmd->add_option("--pairs", dis_pairs, "sampled (p,q,i,j) tuples");
  dis_cmd->add_option("--dataset", dis_dataset, "manifest path override");
  dis_cmd->add_option("--out", dis_out, "write the report JSON here");

  // export-emb
  auto* emb_cmd = app.add_subcommand("export-emb", "export z / f(s) matrices, fused reps, labels");
  std::string emb_ckpt, emb_split = "all", emb_dataset, emb_out;
  emb_cmd->add_option("--ckpt", emb_ckpt, "model checkpoint")->required();
  emb_cmd->add_option("--out", emb_out, "output directory")->required();
  emb_cmd->add_option("--split", emb_split, "dataset split");
  emb_cmd->add_option("--dataset", emb_dataset, "manifest path override");

  // train-task
  auto* task_cmd = app.add_subcommand("train-task", "train a downstream task model");
  std::string task_spec_path, task_encoder, task_run_dir;
  task_cmd->add_option("--spec", task_spec_path, "task spec JSON")->required();
  task_cmd->add_option("--encoder", task_encoder, "encoder checkpoint (fused mode)");
  task_cmd->add_option("--run-dir", task_run_dir, "run directory override");

  // eval-task
  auto* et_cmd = app.add_subcommand("eval-task", "evaluate a task model with missing modalities");
  std::string et_ckpt, et_fill, et_dataset, et_encoder, et_split = "test", et_out;
  std::vector<int> et_drop;
  et_cmd->add_option("--ckpt", et_ckpt, "task checkpoint")->required();
  et_cmd->add_option("--drop", et_drop, "modalities to drop");
  et_cmd->add_option("--fill", et_fill, "zero|avg (raw-stack mode)");
  et_cmd->add_option("--dataset", et_dataset, "manifest path override");
  et_cmd->add_option("--encoder", et_encoder, "encoder checkpoint override");
  et_cmd->add_option("--split", et_split, "dataset split");
  et_cmd->add_option("--out", et_out, "write the report JSON here");

  // plot
  auto* plot_cmd = app.add_subcommand("plot", "render loss curves and report bars");
  std::string plot_report, plot_log, plot_config, plot_out;
  bool plot_force = false;
  plot_cmd->add_option("--report", plot_report, "eval report JSON");
  plot_cmd->add_option("--log", plot_log, "training log.jsonl");
  plot_cmd->add_option("--config", plot_config, "config the report must match");
  plot_cmd->add_option("--out", plot_out, "output directory")->required();
  plot_cmd->add_flag("--force", plot_force, "plot despite a config hash mismatch");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exit 0
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << "\n";
    return 1;
  }

  if (gen->parsed()) {
    GenConfig cfg = gen_config_from_json(parse_json_file(gen_config_path));
    DatasetManifest manifest = build_dataset(cfg, gen_out);
    std::cout << "wrote " << manifest.num_subjects << " subjects x " << manifest.m
              << " modalities to " << gen_out << "/manifest.json\n";
    return 0;
  }

  if (train_cmd->parsed()) {
    json user = parse_json_file(train_config_path);
    TrainConfig cfg = train_config_from_json(user);
    if (!train_run_dir.empty()) cfg.run_dir = train_run_dir;
    json merged = train_config_to_json(cfg);
    std::signal(SIGINT, handle_sigint);
    TrainResult result = resume_path.empty()
                             ? train(cfg, merged)
                             : resume_training(resume_path, cfg, merged, train_force);
    std::cout << "run dir: " << result.run_dir << "\n"
              << "last checkpoint: " << result.last_checkpoint << "\n"
              << "best checkpoint: " << result.best_checkpoint << "\n";
    if (result.interrupted) {
      std::cerr << "interrupted; checkpoint saved\n";
      return 2;
    }
    return 0;
  }

  if (recon_cmd->parsed()) {
    ModelCheckpoint ckpt = load_model_checkpoint(recon_ckpt);
    Dataset ds = load_dataset(resolve_dataset(ckpt.header, recon_dataset));
    ReconReport report = cross_recon_eval(*ckpt.model, ds, recon_split);
    emit_report(recon_report_to_json(report, ckpt.header.value("config_hash", "")), recon_out);
    return 0;
  }

  if (dis_cmd->parsed()) {
    ModelCheckpoint ckpt = load_model_checkpoint(dis_ckpt);
    Dataset ds = load_dataset(resolve_dataset(ckpt.header, dis_dataset));
    DisentReport report = disentanglement_eval(*ckpt.model, ds, dis_split, dis_pairs);
    emit_report(disent_report_to_json(report, ckpt.header.value("config_hash", "")), dis_out);
    return 0;
  }

  if (emb_cmd->parsed()) {
    ModelCheckpoint ckpt = load_model_checkpoint(emb_ckpt);
    Dataset ds = load_dataset(resolve_dataset(ckpt.header, emb_dataset));
    export_embeddings(*ckpt.model, ds, emb_split, emb_out);
    std::cout << "embeddings written to " << emb_out << "\n";
    return 0;
  }

  if (task_cmd->parsed()) {
    json user = parse_json_file(task_spec_path);
    TaskConfig cfg = task_config_from_json(user);
    if (!task_encoder.empty()) cfg.encoder_ckpt = task_encoder;
    if (!task_run_dir.empty()) cfg.run_dir = task_run_dir;
    json merged = task_config_to_json(cfg);
    TaskTrainResult result = train_downstream(cfg, merged);
    std::cout << "run dir: " << result.run_dir << "\n"
              << "task checkpoint: " << result.checkpoint << "\n";
    return 0;
  }

  if (et_cmd->parsed()) {
    std::string fill = et_fill;
    if (fill == "avg") fill = "average";
    if (!fill.empty() && fill != "zero" && fill != "average")
      throw ConfigError("--fill must be zero or avg");
    MissingEvalResult res = eval_missing(et_ckpt, et_drop, fill, et_dataset, et_split, et_encoder);
    TaskCheckpoint ckpt = load_task_checkpoint(et_ckpt);
    emit_report(missing_eval_to_json(res, ckpt.header.value("config_hash", "")), et_out);
    return 0;
  }

  if (plot_cmd->parsed()) {
    namespace fsys = std::filesystem;
    fsys::create_directories(plot_out);
    json meta{{"plots", json::array()}};
    std::string report_hash;

    if (!plot_report.empty()) {
      json report = parse_json_file(plot_report);
      report_hash = report.value("config_hash", "");
      if (!plot_config.empty()) {
        json cfg = parse_json_file(plot_config);
        // Reports are stamped with the producing config's hash; refuse
        // mixing a report with a different config.
        const std::string want = run_config_hash(train_config_to_json(train_config_from_json(cfg)));
        if (!report_hash.empty() && report_hash != want && !plot_force)
          throw ConfigError("report config hash " + report_hash + " does not match " + want +
                            " (pass --force to plot anyway)");
      }
      if (report.value("kind", "") == "disent") {
        std::vector<PlotSeries> bars{
            {"s_gap", {report["s_gap"]["gap"].get<double>()}, Rgb{66, 135, 245}},
            {"z_gap", {report["z_gap"]["gap"].get<double>()}, Rgb{245, 130, 48}}};
        plot_bars(plot_out + "/gap_bars.bmp", bars);
        meta["plots"].push_back(json{{"file", "gap_bars.bmp"},
                                     {"series", {"s_gap", "z_gap"}},
                                     {"values",
                                      {report["s_gap"]["gap"].get<double>(),
                                       report["z_gap"]["gap"].get<double>()}}});
        std::vector<PlotSeries> sil{
            {"silhouette_z_modality", {report["silhouette_z_modality"].get<double>()}, Rgb{60, 180, 75}},
            {"silhouette_fs_subject", {report["silhouette_fs_subject"].get<double>()}, Rgb{145, 30, 180}}};
        plot_bars(plot_out + "/silhouette_bars.bmp", sil);
        meta["plots"].push_back(json{{"file", "silhouette_bars.bmp"},
                                     {"series", {"silhouette_z_modality", "silhouette_fs_subject"}}});
      } else if (report.value("kind", "") == "recon") {
        std::vector<double> self_p, cross_p;
        for (const auto& e : report["per_modality"]) {
          self_p.push_back(e["self_psnr"].get<double>());
          cross_p.push_back(e["cross_psnr"].get<double>());
        }
        std::vector<PlotSeries> bars{{"self_psnr", self_p, Rgb{66, 135, 245}},
                                     {"cross_psnr", cross_p, Rgb{245, 130, 48}}};
        plot_bars(plot_out + "/recon_bars.bmp", bars);
        meta["plots"].push_back(json{{"file", "recon_bars.bmp"},
                                     {"series", {"self_psnr", "cross_psnr"}}});
      }
    }

    if (!plot_log.empty()) {
      std::ifstream in(plot_log);
      if (!in) throw DataError("cannot open log: " + plot_log);
      const char* keys[] = {"L_self", "L_cross", "L_latent", "L_sim_s", "L_sim_z", "total"};
      const Rgb colors[] = {{66, 135, 245}, {245, 130, 48}, {60, 180, 75},
                            {145, 30, 180}, {230, 25, 75},  {0, 0, 0}};
      std::vector<PlotSeries> series;
      for (int i = 0; i < 6; ++i) series.push_back({keys[i], {}, colors[i]});
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded() || !rec.contains("total") || rec.contains("event")) continue;
        for (int i = 0; i < 6; ++i)
          series[static_cast<std::size_t>(i)].values.push_back(rec[keys[i]].get<double>());
      }
      if (!series[5].values.empty()) {
        plot_lines(plot_out + "/loss_curves.bmp", series);
        json names = json::array();
        for (const auto& s : series) names.push_back(s.name);
        meta["plots"].push_back(json{{"file", "loss_curves.bmp"}, {"series", names}});
      }
    }
    if (!report_hash.empty()) meta["config_hash"] = report_hash;
    write_text_file(plot_out + "/meta.json", meta.dump(2) + "\n");
    std::cout << "plots written to " << plot_out << "\n";
    return 0;
  }

  std::cerr << app.help() << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const ArgumentError& e) {
    std::cerr << "argument error: " << e.what() << "\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
