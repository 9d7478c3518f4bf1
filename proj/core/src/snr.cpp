#include "snapdiff/snr.hpp"

#include <cmath>
#include <numbers>
#include <ostream>
#include <random>
#include <stdexcept>
#include <thread>

namespace snapdiff {

Tensor64 block_average(const Tensor64& video, std::size_t frames, std::size_t upsample) {
  if (video.rank() != 3) throw std::invalid_argument("block_average: expected (T, s*H, s*W)");
  if (upsample == 0 || frames == 0) throw std::invalid_argument("block_average: zero factor");
  const auto& s = video.shape();
  if (s[0] != frames) throw std::invalid_argument("block_average: first dimension must equal T");
  if (s[1] % upsample || s[2] % upsample) {
    throw std::invalid_argument("block_average: spatial dims not divisible by s");
  }
  const std::size_t h = s[1] / upsample;
  const std::size_t w = s[2] / upsample;
  std::vector<double> out(h * w, 0.0);
  const auto& v = video.values();
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t r = 0; r < s[1]; ++r)
      for (std::size_t c = 0; c < s[2]; ++c) out[(r / upsample) * w + c / upsample] += v[(t * s[1] + r) * s[2] + c];
  const double inv = 1.0 / static_cast<double>(frames * upsample * upsample);
  for (auto& x : out) x *= inv;
  return Tensor64::from_vector({1, h, w}, std::move(out));
}

double empirical_snr(const Tensor64& clean, const Tensor64& noisy) {
  if (clean.shape() != noisy.shape()) throw std::invalid_argument("empirical_snr: shape mismatch");
  double signal = 0, noise = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const double d = noisy[i] - clean[i];
    signal += clean[i] * clean[i];
    noise += d * d;
  }
  if (noise == 0.0) throw std::domain_error("empirical_snr: zero noise power");
  return signal / noise;
}

namespace {

struct Sums {
  double full_signal = 0, full_noise = 0;
  double avg_signal = 0, avg_noise = 0;
  double ref_signal = 0, ref_noise = 0;
};

// Low-frequency separable cosine with mean-square sigma_data^2.
std::vector<double> redundant_frame(std::size_t h, std::size_t w, double sigma_data,
                                    std::mt19937_64& rng) {
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_int_distribution<int> freq(1, 2);
  const double fy = freq(rng), fx = freq(rng);
  const double py = phase(rng), px = phase(rng);
  std::vector<double> f(h * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      f[r * w + c] = 2.0 * sigma_data * std::cos(2.0 * std::numbers::pi * fy * r / h + py) *
                     std::cos(2.0 * std::numbers::pi * fx * c / w + px);
  return f;
}

Sums run_trial(const SnrExperiment& e, std::size_t trial) {
  std::seed_seq seq{e.seed, static_cast<std::uint64_t>(trial)};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);

  const std::size_t T = e.frames, s = e.upsample, H = e.height, W = e.width;
  const double sigma_in = e.scale_input ? s * std::sqrt(static_cast<double>(T)) : 1.0;
  const auto base = redundant_frame(H, W, e.sigma_data, rng);

  const std::size_t fh = s * H, fw = s * W;
  std::vector<double> clean(T * fh * fw), noisy(T * fh * fw);
  Sums out;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t r = 0; r < fh; ++r)
      for (std::size_t c = 0; c < fw; ++c) {
        const std::size_t i = (t * fh + r) * fw + c;
        clean[i] = base[(r / s) * W + c / s] / sigma_in;
        const double n = e.sigma * normal(rng);
        noisy[i] = clean[i] + n;
        out.full_signal += clean[i] * clean[i];
        out.full_noise += n * n;
      }

  const auto avg_clean = block_average(Tensor64::from_vector({T, fh, fw}, std::move(clean)), T, s);
  const auto avg_noisy = block_average(Tensor64::from_vector({T, fh, fw}, std::move(noisy)), T, s);
  for (std::size_t i = 0; i < avg_clean.size(); ++i) {
    const double d = avg_noisy[i] - avg_clean[i];
    out.avg_signal += avg_clean[i] * avg_clean[i];
    out.avg_noise += d * d;
  }
  for (std::size_t i = 0; i < H * W; ++i) {
    const double n = e.sigma * normal(rng);
    out.ref_signal += base[i] * base[i];
    out.ref_noise += n * n;
  }
  return out;
}

}  // namespace

SnrReport snr_scaling_experiment(const SnrExperiment& e) {
  if (e.trials < 1) throw std::invalid_argument("snr experiment: trials must be >= 1");
  if (e.frames == 0 || e.upsample == 0 || e.height == 0 || e.width == 0) {
    throw std::invalid_argument("snr experiment: zero-sized geometry");
  }
  if (!(e.sigma > 0)) throw std::invalid_argument("snr experiment: sigma must be positive");

  std::vector<Sums> per_trial(e.trials);
  const std::size_t workers = std::min(num_threads(), e.trials);
  if (workers <= 1) {
    for (std::size_t i = 0; i < e.trials; ++i) per_trial[i] = run_trial(e, i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < e.trials; i += workers) per_trial[i] = run_trial(e, i);
      });
    }
    for (auto& t : pool) t.join();
  }
  Sums total;
  for (const auto& p : per_trial) {
    total.full_signal += p.full_signal;
    total.full_noise += p.full_noise;
    total.avg_signal += p.avg_signal;
    total.avg_noise += p.avg_noise;
    total.ref_signal += p.ref_signal;
    total.ref_noise += p.ref_noise;
  }

  SnrReport r;
  r.frames = e.frames;
  r.upsample = e.upsample;
  r.sigma = e.sigma;
  r.scaled = e.scale_input;
  r.snr_full = total.full_signal / total.full_noise;
  r.snr_avg = total.avg_signal / total.avg_noise;
  r.snr_reference = total.ref_signal / total.ref_noise;
  r.ratio = r.snr_avg / r.snr_full;
  r.predicted_ratio = static_cast<double>(e.frames * e.upsample * e.upsample);
  r.averaged_noise_var = total.avg_noise / static_cast<double>(e.trials * e.height * e.width);
  return r;
}

std::vector<SnrReport> snr_grid(const std::vector<std::size_t>& frames,
                                const std::vector<std::size_t>& upsample, double sigma,
                                bool scale_input, std::size_t trials, std::uint64_t seed) {
  std::vector<SnrReport> rows;
  for (auto t : frames) {
    for (auto s : upsample) {
      SnrExperiment e;
      e.frames = t;
      e.upsample = s;
      e.sigma = sigma;
      e.scale_input = scale_input;
      e.trials = trials;
      e.seed = seed;
      rows.push_back(snr_scaling_experiment(e));
    }
  }
  return rows;
}

void write_snr_csv(std::ostream& os, const std::vector<SnrReport>& rows) {
  os << "T,s,sigma,scaled,snr_full,snr_avg,ratio,predicted_ratio\n";
  const auto old = os.precision(10);
  for (const auto& r : rows) {
    os << r.frames << ',' << r.upsample << ',' << r.sigma << ',' << (r.scaled ? 1 : 0) << ','
       << r.snr_full << ',' << r.snr_avg << ',' << r.ratio << ',' << r.predicted_ratio << '\n';
  }
  os.precision(old);
}

}  // namespace snapdiff
