#pragma once

// Joint image/video training of the FIT denoiser.
//
// Every sample in a batch gets its own sigma, noise, label dropout and
// self-conditioning decision. Image samples arrive as T identical frames with
// an infinite frame rate and go through exactly the same loss as videos.

#include <cstdint>
#include <iosfwd>
#include <random>
#include <vector>

#include "snapdiff/dataset.hpp"
#include "snapdiff/diffusion.hpp"
#include "snapdiff/fit.hpp"
#include "snapdiff/optim.hpp"

namespace snapdiff {

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch_videos = 8;
  std::size_t batch_images = 8;
  double lr = 5e-3;
  std::size_t warmup = 100;
  double ema_halflife = 50;
  double label_dropout = 0.1;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;

  void validate() const;
};

struct StepMetrics {
  std::uint64_t step = 0;  // 1-based index of the completed step
  double lr = 0;
  double sigma_mean = 0;
  double loss = 0;
  double grad_norm = 0;
  double wall_ms = 0;
};

struct TrainState {
  FitParams<float> params;
  OptimizerState<float> opt;
  EmaState<float> ema;
  std::mt19937_64 rng;
  std::uint64_t step = 0;
};

TrainState init_train_state(const FitConfig& fit, const TrainConfig& train);

// Per-sample objective for one (T, H, W, C) sample: loss_f with a batch of one.
template <class T>
Tensor<T> denoising_loss(const Tensor<T>& f_out, const Tensor<T>& x, const Tensor<T>& eps, double sigma,
                         const DiffusionConfig& dcfg);

struct BatchResult {
  double loss = 0;  // mean over samples
  double sigma_mean = 0;
};

// Forward and backward over a batch; gradients of the batch-mean loss
// accumulate into params. Throws std::runtime_error naming sigma and the
// sample index on a non-finite loss.
BatchResult accumulate_gradients(FitParams<float>& params, const VideoBatch& batch, const DiffusionConfig& dcfg,
                                 const FitConfig& fit, double label_dropout, std::mt19937_64& rng);

// One optimization step at learning rate cosine_lr(state.step + 1, ...).
StepMetrics train_step(TrainState& state, const VideoBatch& batch, const DiffusionConfig& dcfg,
                       const FitConfig& fit, const TrainConfig& train);

class Trainer {
 public:
  Trainer(FitConfig fit, DiffusionConfig diffusion, TrainConfig train, DatasetConfig data);

  StepMetrics step();
  bool done() const { return state_.step >= train_.steps; }

  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  const FitConfig& fit() const { return fit_; }
  const DiffusionConfig& diffusion() const { return diffusion_; }
  const TrainConfig& train() const { return train_; }
  const SpriteDataset& dataset() const { return dataset_; }

 private:
  FitConfig fit_;
  DiffusionConfig diffusion_;
  TrainConfig train_;
  SpriteDataset dataset_;
  TrainState state_;
};

// Columns: step,lr,sigma_mean,loss,grad_norm,wall_ms
void write_metrics_header(std::ostream& os);
void write_metrics_row(std::ostream& os, const StepMetrics& m);

// 1 - mean(last `window` losses) / mean(first `head` losses).
double smoothed_loss_reduction(const std::vector<double>& losses, std::size_t head, std::size_t window);

}  // namespace snapdiff
