#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "metadec/data.hpp"
#include "metadec/model.hpp"

namespace metadec {

/// 1 - (2 Σ m·g + eps) / (Σ m + Σ g + eps).
double dice_loss(const Tensor<double>& m, const Tensor<double>& gt, double eps = 1.0);
/// Mean pixel BCE on probabilities clipped to [1e-7, 1 - 1e-7].
double bce_loss(const Tensor<double>& m, const Tensor<double>& gt);
double total_loss(const Tensor<double>& m, const Tensor<double>& gt, double lambda);

/// Cosine annealing from lr_init at step 0 to 0 at total_steps.
double lr_at_step(int step, int total_steps, double lr_init);

struct AugmentOptions {
  int crop_height = 0;
  int crop_width = 0;
  std::optional<bool> force_hflip;  // test hooks; unset means p = 0.5
  std::optional<bool> force_vflip;
};

/// Same random crop and flips applied to image and mask.
std::pair<Tensor<double>, BinaryMask> augment(const Tensor<double>& image, const BinaryMask& mask,
                                              std::mt19937_64& rng, const AugmentOptions& opt);

/// Adam (beta1 0.9, beta2 0.999, eps 1e-8) over every parameter of a store.
template <typename T>
class Adam {
 public:
  explicit Adam(const ParameterStore<T>& store);
  void step(double lr);
  std::int64_t steps() const { return t_; }

  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  std::vector<Var<T>> params_;
  std::vector<Tensor<T>> m_, v_;
  std::int64_t t_ = 0;
};

struct TrainState {
  int step = 0;
  int epoch = 0;
  int total_steps = 0;
  double lr = 0;
  double last_loss = 0;
  double best_iou = -1;
  std::string best_checkpoint;
  std::uint64_t seed = 0;
};

struct TrainOptions {
  std::string out_dir;       // checkpoints and train_log.csv; empty = no files
  int max_steps = -1;        // overrides epochs * steps_per_epoch when >= 0
  bool resume = false;
  int workers = 1;
  bool evaluate = true;      // validation metrics at every eval_interval epochs
  std::ostream* progress = nullptr;
  std::function<void(const TrainState&)> on_step;
};

/// Shuffled mini-batch training with per-epoch validation, best-IoU checkpoint
/// (best.ckpt), last checkpoint (last.ckpt) and a CSV log. Throws on a
/// non-finite loss, naming the step.
TrainState train(Model<float>& model, const std::vector<Sample>& train_set,
                 const std::vector<Sample>& val_set, const TrainOptions& opt);

/// One optimization step on a batch; returns the loss.
double train_step(Model<float>& model, Adam<float>& adam, const std::vector<const Sample*>& batch,
                  double lr);

void save_checkpoint(const std::string& path, const Model<float>& model, const Adam<float>* adam,
                     const TrainState& state);
/// Restores weights (and the optimizer when given). The stored config hash must
/// match the model's config.
TrainState load_checkpoint(const std::string& path, Model<float>& model, Adam<float>* adam);
/// Config stored in a checkpoint, to build a matching model.
ModelConfig checkpoint_config(const std::string& path);

}  // namespace metadec
