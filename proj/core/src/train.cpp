#include "snapdiff/train.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace snapdiff {

void TrainConfig::validate() const {
  if (steps == 0) throw std::invalid_argument("train: steps must be positive");
  if (batch_videos + batch_images == 0) throw std::invalid_argument("train: empty batch");
  if (!(lr >= 0)) throw std::invalid_argument("train: lr must be >= 0");
  if (warmup > steps) throw std::invalid_argument("train: warmup longer than the run");
  if (!(label_dropout >= 0 && label_dropout <= 1)) throw std::invalid_argument("train: label_dropout outside [0, 1]");
}

TrainState init_train_state(const FitConfig& fit, const TrainConfig& train) {
  train.validate();
  TrainState s;
  s.params = init_fit_params<float>(fit, train.seed);
  s.opt = make_optimizer(s.params, train.optimizer);
  s.ema = make_ema(s.params, train.ema_halflife);
  s.rng.seed(train.seed ^ 0x9e3779b97f4a7c15ULL);
  return s;
}

template <class T>
Tensor<T> denoising_loss(const Tensor<T>& f_out, const Tensor<T>& x, const Tensor<T>& eps, double sigma,
                         const DiffusionConfig& dcfg) {
  Shape batched{1};
  batched.insert(batched.end(), x.shape().begin(), x.shape().end());
  return loss_f(reshape(f_out, batched), reshape(x, batched), reshape(eps, batched), sigma, dcfg);
}

BatchResult accumulate_gradients(FitParams<float>& params, const VideoBatch& batch, const DiffusionConfig& dcfg,
                                 const FitConfig& fit, double label_dropout, std::mt19937_64& rng) {
  const std::size_t n = batch.size();
  if (n == 0) throw std::invalid_argument("accumulate_gradients: empty batch");
  BatchResult r;
  ForwardOptions train_mode{true, &rng};
  for (std::size_t b = 0; b < n; ++b) {
    const double sigma = sample_sigma(rng, dcfg);
    const auto x = batch.sample(b);
    const auto eps = standard_normal<float>(x.shape(), rng);
    const bool drop_label = std::bernoulli_distribution(label_dropout)(rng);
    const bool self_cond = std::bernoulli_distribution(fit.self_cond_prob)(rng);

    FitConditioning cond;
    cond.sigma = sigma;
    cond.framerate = batch.framerate[b];
    cond.orig_height = batch.orig_height[b];
    cond.orig_width = batch.orig_width[b];
    cond.cond_id = drop_label ? 0 : batch.cond_id[b];

    double value = 0;
    try {
      const auto c = scalings(sigma, dcfg);
      const auto x_in = scale(forward_process(x, sigma, eps, dcfg), static_cast<float>(c.c_in));
      std::optional<Tensor32> prev;
      if (self_cond) {
        NoGradGuard no_grad;
        prev = fit_forward(x_in, cond, std::optional<Tensor32>{}, params, fit, train_mode).latents;
      }
      const auto out = fit_forward(x_in, cond, prev, params, fit, train_mode);
      const auto loss = denoising_loss(out.f_out, x, eps, sigma, dcfg);
      value = loss.item();
      scale(loss, 1.0f / static_cast<float>(n)).backward();
    } catch (const TensorError& e) {
      std::ostringstream msg;
      msg << "non-finite training loss at sigma=" << sigma << ", batch index " << b << ": " << e.what();
      throw std::runtime_error(msg.str());
    }
    if (!std::isfinite(value)) {
      std::ostringstream msg;
      msg << "non-finite training loss at sigma=" << sigma << ", batch index " << b;
      throw std::runtime_error(msg.str());
    }
    r.loss += value / static_cast<double>(n);
    r.sigma_mean += sigma / static_cast<double>(n);
  }
  return r;
}

StepMetrics train_step(TrainState& state, const VideoBatch& batch, const DiffusionConfig& dcfg,
                       const FitConfig& fit, const TrainConfig& train) {
  const auto start = std::chrono::steady_clock::now();
  state.params.zero_grad();
  const auto res = accumulate_gradients(state.params, batch, dcfg, fit, train.label_dropout, state.rng);

  std::vector<std::vector<float>> grads;
  grads.reserve(state.params.size());
  for (const auto& p : state.params.tensors()) grads.push_back(p.grad_copy());
  state.params.zero_grad();

  const double lr = cosine_lr(state.step + 1, train.warmup, train.steps, train.lr);
  const auto stats = optimizer_update(state.opt, state.params, std::move(grads), lr);
  ema_update(state.ema, state.params);
  ++state.step;

  StepMetrics m;
  m.step = state.step;
  m.lr = lr;
  m.sigma_mean = res.sigma_mean;
  m.loss = res.loss;
  m.grad_norm = stats.grad_norm;
  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return m;
}

Trainer::Trainer(FitConfig fit, DiffusionConfig diffusion, TrainConfig train, DatasetConfig data)
    : fit_(fit), diffusion_(diffusion), train_(train), dataset_(std::move(data)) {
  fit_.validate();
  diffusion_.validate();
  train_.validate();
  const auto& d = dataset_.config();
  if (d.frames != fit_.frames || d.height != fit_.height || d.width != fit_.width || fit_.channels != 1) {
    throw std::invalid_argument("dataset geometry does not match the network input");
  }
  if (d.n_classes > fit_.n_classes) throw std::invalid_argument("dataset has more classes than the network");
  state_ = init_train_state(fit_, train_);
}

StepMetrics Trainer::step() {
  if (done()) throw std::logic_error("Trainer::step: run already finished");
  const auto batch = dataset_.batch(state_.step, train_.batch_videos, train_.batch_images);
  return train_step(state_, batch, diffusion_, fit_, train_);
}

void write_metrics_header(std::ostream& os) { os << "step,lr,sigma_mean,loss,grad_norm,wall_ms\n"; }

void write_metrics_row(std::ostream& os, const StepMetrics& m) {
  const auto old = os.precision(17);
  os << m.step << ',' << m.lr << ',' << m.sigma_mean << ',' << m.loss << ',' << m.grad_norm << ',';
  os.precision(6);
  os << m.wall_ms << '\n';
  os.precision(old);
}

double smoothed_loss_reduction(const std::vector<double>& losses, std::size_t head, std::size_t window) {
  if (head == 0 || window == 0 || losses.size() < head || losses.size() < window) {
    throw std::invalid_argument("smoothed_loss_reduction: not enough losses");
  }
  const double first = std::accumulate(losses.begin(), losses.begin() + head, 0.0) / head;
  const double last = std::accumulate(losses.end() - window, losses.end(), 0.0) / window;
  return 1.0 - last / first;
}

template Tensor<float> denoising_loss(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, double,
                                      const DiffusionConfig&);
template Tensor<double> denoising_loss(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, double,
                                       const DiffusionConfig&);

}  // namespace snapdiff
