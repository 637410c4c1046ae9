#pragma once

#include "dmrl/checkpoint.hpp"
#include "dmrl/config.hpp"
#include "dmrl/synthdata.hpp"

namespace dmrl {

// Uniform derangement over B >= 2 subjects (rejection-sampled shuffle).
std::vector<Index> sample_pairs(int batch_size, Rng& rng);

// Adam with classic L2 weight decay folded into the gradient, matching the
// reference training recipe. Operates on any named-parameter list.
class Adam {
 public:
  Adam(const std::vector<NamedTensor<float>>& params, double lr, double weight_decay);

  void step(const std::vector<Tensor<float>>& grads);
  std::int64_t steps() const { return steps_; }

  // Checkpoint plumbing: moment tensors named opt.m.<param>, opt.v.<param>.
  std::vector<std::pair<std::string, const Tensor<float>*>> state_tensors() const;
  void restore(const std::map<std::string, Tensor<float>>& extra, std::int64_t steps);

 private:
  std::vector<NamedTensor<float>> params_;
  double lr_, weight_decay_;
  std::vector<Tensor<float>> m_, v_;
  std::int64_t steps_ = 0;
};

struct TrainResult {
  std::string run_dir;
  std::string last_checkpoint;
  std::string best_checkpoint;
  int epochs_run = 0;
  int steps_per_epoch = 0;
  std::vector<double> epoch_mean_total;  // running loss history
  double best_val = 0.0;
  bool interrupted = false;
};

// Runs disentanglement training per the train config; merged_config is the
// fully defaulted config document whose hash stamps every artifact.
TrainResult train(const TrainConfig& cfg, const json& merged_config);

// Continues from a checkpoint; refuses on config-hash mismatch unless force.
TrainResult resume_training(const std::string& ckpt_path, const TrainConfig& cfg,
                            const json& merged_config, bool force);

// Toggled by the CLI's SIGINT handler; the loop checkpoints and stops.
void request_training_stop();
void clear_training_stop();

}  // namespace dmrl
