#pragma once

#include "dmrl/checkpoint.hpp"
#include "dmrl/evalmetrics.hpp"
#include "dmrl/synthdata.hpp"

namespace dmrl {

// Small reference U-Net for the downstream tasks: three stride-2 stages from
// base_width, a bottleneck, skip connections, and a linear 1x1 head
// (K-class logits for segmentation, one channel for synthesis).
struct TaskNetConfig {
  int in_channels = 12;
  int out_channels = 5;
  int base_width = 16;
  int height = 64;
  int width = 64;
};

struct TaskNet {
  TaskNetConfig cfg;
  EncBlock<float> stem;
  std::vector<EncBlock<float>> down;
  EncBlock<float> bottleneck;
  std::vector<EncBlock<float>> up;
  ExpertBank<float> head;
  std::vector<NamedTensor<float>> params;
  std::vector<NamedTensor<float>> buffers;

  TaskNet() = default;
  TaskNet(const TaskNet&) = delete;
  TaskNet& operator=(const TaskNet&) = delete;
};

std::unique_ptr<TaskNet> make_task_net(const TaskNetConfig& cfg, std::uint64_t seed);
Var task_forward(Tape<float>& t, TaskNet& net, Var x, bool training);

void save_task_checkpoint(const std::string& path, const TaskNet& net, json extra_header);
struct TaskCheckpoint {
  std::unique_ptr<TaskNet> net;
  json header;
};
TaskCheckpoint load_task_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Downstream training / evaluation
// ---------------------------------------------------------------------------

struct TaskTrainResult {
  std::string run_dir;
  std::string checkpoint;
  std::vector<double> epoch_mean_loss;
};

// Trains the task model per the task config. In fused mode the encoder
// checkpoint is loaded frozen and its anatomical representations are
// precomputed once; random modality dropout (dropout_p per modality)
// exposes the model to subsets during training. Raw-stack mode trains on
// the raw image channels directly.
TaskTrainResult train_downstream(const TaskConfig& cfg, const json& merged_config);

struct MissingEvalResult {
  std::vector<int> dropped;
  std::string fill;
  // Segmentation metrics
  double dice_lesion = 0;
  double dice_foreground_mean = 0;
  std::vector<double> dice_per_class;  // classes 1..K-1
  // Synthesis metrics
  double psnr_value = 0;
  double ssim_value = 0;
  int subjects = 0;
  std::string task;
};

// Evaluates with the given modalities dropped: fused mode fuses the
// remaining reps; raw-stack fills dropped channels with zeros or with the
// training-cohort average image.
MissingEvalResult eval_missing(const std::string& task_ckpt_path, const std::vector<int>& drop,
                               const std::string& fill_override, const std::string& dataset_path,
                               const std::string& split, const std::string& encoder_override = "");

// Pixelwise mean over the training split of one modality; cached next to the
// manifest as avg_mod<i>.dmrt.
Tensor<float> average_image(const Dataset& ds, int modality_id);

json missing_eval_to_json(const MissingEvalResult& r, const std::string& config_hash);

}  // namespace dmrl
