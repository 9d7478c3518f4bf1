#include "snapdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace snapdiff {

std::string to_string(Variant v) { return v == Variant::edm ? "edm" : "snap_video"; }

Variant parse_variant(const std::string& text) {
  if (text == "edm") return Variant::edm;
  if (text == "snap_video") return Variant::snap_video;
  throw std::invalid_argument("unknown diffusion variant '" + text + "'");
}

void DiffusionConfig::validate() const {
  if (!(sigma_data > 0) || !(sigma_in > 0) || !(sigma_min > 0) || !(sigma_max > 0)) {
    throw std::invalid_argument("diffusion sigmas must be strictly positive");
  }
  if (!(sigma_min < sigma_max)) throw std::invalid_argument("sigma_min must be below sigma_max");
  if (!(train_noise.std >= 0)) throw std::invalid_argument("train noise std must be >= 0");
}

double input_scale_for(std::size_t frames, double upsample) {
  return upsample * std::sqrt(static_cast<double>(frames));
}

Scalings scalings(double sigma, const DiffusionConfig& cfg) {
  if (!(sigma > 0)) throw std::invalid_argument("scalings: sigma must be positive");
  const double sd = cfg.sigma_data;
  const double sd2 = sd * sd;
  const double s2 = sigma * sigma;
  Scalings c;
  c.c_nrm = 1.0 / (sd * std::sqrt(s2 + sd2));
  c.lambda = 1.0 / sd2 + 1.0 / s2;
  if (cfg.variant == Variant::edm) {
    c.c_in = 1.0 / std::sqrt(sd2 + s2);
    c.c_out = sigma * sd / std::sqrt(s2 + sd2);
    c.c_skip = sd2 / (s2 + sd2);
    c.w = 1.0;
  } else {
    const double si = cfg.sigma_in;
    c.c_in = 1.0 / std::sqrt(sd2 / (si * si) + s2);
    c.c_out = -si * sigma * sd * std::sqrt(s2 + sd2) / (sd2 + si * s2);
    c.c_skip = si * sd2 / (si * s2 + sd2);
    const double num = s2 + sd2;
    const double den = s2 + sd2 / si;
    c.w = (num * num) / (den * den);
  }
  return c;
}

namespace {

void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw TensorError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <class T>
Tensor<T> batch_mean_sq(const Tensor<T>& diff) {
  if (diff.rank() == 0) throw TensorError("loss: input needs a batch axis");
  return scale(sum(mul(diff, diff)), T(1) / T(diff.shape()[0]));
}

}  // namespace

template <class T>
Tensor<T> forward_process(const Tensor<T>& x, double sigma, const Tensor<T>& eps,
                          const DiffusionConfig& cfg) {
  require_same_shape("forward_process", x.shape(), eps.shape());
  if (sigma < 0) throw std::invalid_argument("forward_process: sigma must be >= 0");
  return add(scale(x, T(1.0 / cfg.sigma_in)), scale(eps, T(sigma)));
}

template <class T>
Tensor<T> train_target(const Tensor<T>& x, const Tensor<T>& eps, double sigma,
                       const DiffusionConfig& cfg) {
  require_same_shape("train_target", x.shape(), eps.shape());
  const double sd2 = cfg.sigma_data * cfg.sigma_data;
  if (cfg.variant == Variant::snap_video) {
    return sub(scale(eps, T(sd2)), scale(x, T(sigma)));
  }
  // Original EDM target (negated velocity) plus the term induced by sigma_in.
  double x_coef = sigma;
  if (cfg.sigma_in != 1.0) {
    if (!(sigma > 0)) throw std::invalid_argument("train_target: EDM with sigma_in != 1 needs sigma > 0");
    x_coef += sd2 * (cfg.sigma_in - 1.0) / (cfg.sigma_in * sigma);
  }
  return sub(scale(x, T(x_coef)), scale(eps, T(sd2)));
}

template <class T>
Tensor<T> ideal_network_output(const Tensor<T>& x, const Tensor<T>& eps, double sigma,
                               const DiffusionConfig& cfg) {
  return scale(train_target(x, eps, sigma, cfg), T(scalings(sigma, cfg).c_nrm));
}

template <class T>
Tensor<T> denoise(const Tensor<T>& f_out, const Tensor<T>& x_sigma, double sigma,
                  const DiffusionConfig& cfg) {
  require_same_shape("denoise", f_out.shape(), x_sigma.shape());
  const auto c = scalings(sigma, cfg);
  return add(scale(f_out, T(c.c_out)), scale(x_sigma, T(c.c_skip)));
}

template <class T>
Tensor<T> loss_d(const Tensor<T>& d, const Tensor<T>& x, double sigma, const DiffusionConfig& cfg) {
  require_same_shape("loss_d", d.shape(), x.shape());
  return scale(batch_mean_sq(sub(d, x)), T(scalings(sigma, cfg).lambda));
}

template <class T>
Tensor<T> loss_f(const Tensor<T>& f_out, const Tensor<T>& x, const Tensor<T>& eps, double sigma,
                 const DiffusionConfig& cfg) {
  require_same_shape("loss_f", f_out.shape(), x.shape());
  const auto c = scalings(sigma, cfg);
  const auto target = ideal_network_output(x, eps, sigma, cfg);
  return scale(batch_mean_sq(sub(f_out, target)), T(c.w));
}

template <class T>
Tensor<T> x_from_v(const Tensor<T>& x_sigma, const Tensor<T>& v, double sigma,
                   const DiffusionConfig& cfg) {
  require_same_shape("x_from_v", x_sigma.shape(), v.shape());
  const double sd2 = cfg.sigma_data * cfg.sigma_data;
  const double denom = 1.0 / cfg.sigma_in + sigma * sigma / sd2;
  return scale(sub(x_sigma, scale(v, T(sigma / sd2))), T(1.0 / denom));
}

template <class T>
Tensor<T> v_from_x(const Tensor<T>& x_sigma, const Tensor<T>& x, double sigma,
                   const DiffusionConfig& cfg) {
  require_same_shape("v_from_x", x_sigma.shape(), x.shape());
  if (sigma == 0.0) throw std::invalid_argument("v_from_x: sigma must be nonzero");
  const double sd2 = cfg.sigma_data * cfg.sigma_data;
  const double x_coef = sd2 / cfg.sigma_in + sigma * sigma;
  return scale(sub(scale(x_sigma, T(sd2)), scale(x, T(x_coef))), T(1.0 / sigma));
}

double sample_sigma(std::mt19937_64& rng, const DiffusionConfig& cfg) {
  std::normal_distribution<double> normal(cfg.train_noise.mean, cfg.train_noise.std);
  const double draw = cfg.train_noise.std > 0 ? normal(rng) : cfg.train_noise.mean;
  return std::clamp(std::exp(draw), cfg.sigma_min, cfg.sigma_max);
}

template <class T>
Tensor<T> standard_normal(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<T> v(shape_size(shape));
  for (auto& x : v) x = static_cast<T>(normal(rng));
  return Tensor<T>::from_vector(std::move(shape), std::move(v));
}

#define SNAPDIFF_INSTANTIATE(T)                                                                    \
  template Tensor<T> forward_process(const Tensor<T>&, double, const Tensor<T>&,                   \
                                     const DiffusionConfig&);                                      \
  template Tensor<T> train_target(const Tensor<T>&, const Tensor<T>&, double,                      \
                                  const DiffusionConfig&);                                         \
  template Tensor<T> ideal_network_output(const Tensor<T>&, const Tensor<T>&, double,              \
                                          const DiffusionConfig&);                                 \
  template Tensor<T> denoise(const Tensor<T>&, const Tensor<T>&, double, const DiffusionConfig&);  \
  template Tensor<T> loss_d(const Tensor<T>&, const Tensor<T>&, double, const DiffusionConfig&);   \
  template Tensor<T> loss_f(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double,          \
                            const DiffusionConfig&);                                               \
  template Tensor<T> x_from_v(const Tensor<T>&, const Tensor<T>&, double, const DiffusionConfig&); \
  template Tensor<T> v_from_x(const Tensor<T>&, const Tensor<T>&, double, const DiffusionConfig&); \
  template Tensor<T> standard_normal(Shape, std::mt19937_64&);

SNAPDIFF_INSTANTIATE(float)
SNAPDIFF_INSTANTIATE(double)
#undef SNAPDIFF_INSTANTIATE

}  // namespace snapdiff
