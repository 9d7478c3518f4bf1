#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "snapdiff/checkpoint.hpp"
#include "snapdiff/config.hpp"
#include "snapdiff/media.hpp"
#include "snapdiff/sampler.hpp"
#include "snapdiff/snr.hpp"
#include "snapdiff/train.hpp"
#include "snapdiff/verify.hpp"

namespace fs = std::filesystem;
using namespace snapdiff;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t worker_count() {
  if (const char* env = std::getenv("SNAPDIFF_THREADS")) {
    try {
      const long n = std::stol(env);
      if (n > 0) return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("SNAPDIFF_THREADS must be a positive integer, got '") + env + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

struct VerifyArgs {
  bool inject_bug = false;
  std::string csv;
  std::uint64_t seed = 1234;
  std::size_t trials = 400;
};

int cmd_verify(const VerifyArgs& a) {
  VerifyOptions opts;
  opts.inject_bug = a.inject_bug;
  opts.seed = a.seed;
  opts.snr_trials = a.trials;
  const auto results = run_verify(opts);
  print_check_table(std::cout, results);
  if (!a.csv.empty()) {
    std::ofstream out(a.csv);
    if (!out) throw std::runtime_error("cannot write '" + a.csv + "'");
    write_check_csv(out, results);
  }
  const bool ok = std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.passed; });
  return ok ? kOk : kFailure;
}

struct TrainArgs {
  std::string config;
  std::string resume;
  std::string out = "run";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg;
  std::optional<CheckpointData> resumed;
  if (!a.resume.empty()) {
    resumed = load_checkpoint(a.resume);
    cfg = resumed->config;
  } else if (!a.config.empty()) {
    cfg = load_config(a.config);
  } else {
    cfg = RunConfig::toy();
  }
  if (a.seed) {
    if (resumed) throw UsageError("--seed cannot be combined with --resume");
    cfg.train.seed = *a.seed;
    cfg.data.seed = *a.seed;
  }
  cfg.finalize();

  Trainer trainer(cfg.fit, cfg.diffusion, cfg.train, cfg.data);
  if (resumed) trainer.state() = std::move(resumed->state);

  fs::create_directories(a.out);
  const fs::path metrics_path = fs::path(a.out) / "metrics.csv";
  const bool append = resumed && fs::exists(metrics_path);
  std::ofstream metrics(metrics_path, append ? std::ios::app : std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write '" + metrics_path.string() + "'");
  if (!append) write_metrics_header(metrics);
  {
    std::ofstream echo(fs::path(a.out) / "config.txt");
    echo << serialize_config(cfg);
  }

  const std::size_t budget = a.steps.value_or(cfg.train.steps);
  auto save = [&](const std::string& name) {
    save_checkpoint((fs::path(a.out) / name).string(), cfg, trainer.state());
  };
  for (std::size_t i = 0; i < budget && !trainer.done(); ++i) {
    const auto m = trainer.step();
    write_metrics_row(metrics, m);
    metrics.flush();
    if (!a.quiet && (m.step % 50 == 0 || m.step == 1)) {
      std::cout << "step " << m.step << "/" << cfg.train.steps << "  loss " << std::setprecision(5) << m.loss
                << "  lr " << m.lr << "  " << std::setprecision(3) << m.wall_ms << " ms\n";
    }
    if (cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0) {
      std::ostringstream name;
      name << "ckpt_" << std::setw(6) << std::setfill('0') << m.step << ".svck";
      save(name.str());
    }
  }
  save("last.svck");
  std::cout << "trained to step " << trainer.state().step << "; checkpoint " << (fs::path(a.out) / "last.svck").string()
            << '\n';
  return kOk;
}

struct SampleArgs {
  std::string checkpoint;
  std::size_t cls = 1;
  std::optional<std::size_t> steps;
  std::optional<double> guidance;
  std::string guidance_mode;
  bool threshold = false;
  std::optional<double> threshold_percentile;
  std::vector<std::size_t> hierarchical;
  std::size_t frames = 0;
  std::size_t count = 1;
  std::optional<std::uint64_t> seed;
  std::string out = "sample";
  bool raw_weights = false;
};

int cmd_sample(const SampleArgs& a) {
  const auto ck = load_checkpoint(a.checkpoint);
  const auto& cfg = ck.config;
  if (a.cls > cfg.fit.n_classes) {
    throw UsageError("class id " + std::to_string(a.cls) + " out of range 0.." + std::to_string(cfg.fit.n_classes));
  }
  SamplerConfig sc = cfg.sampler;
  if (a.steps) sc.steps = *a.steps;
  if (a.guidance) sc.guidance = *a.guidance;
  if (!a.guidance_mode.empty()) sc.guidance_mode = parse_guidance_mode(a.guidance_mode);
  if (a.threshold) sc.dynamic_threshold = true;
  if (a.threshold_percentile) sc.threshold_percentile = *a.threshold_percentile;
  if (a.seed) sc.seed = *a.seed;
  try {
    sc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (a.count == 0) throw UsageError("--count must be at least 1");

  const auto params = a.raw_weights ? ck.state.params : ema_params(ck.state.ema, ck.state.params);
  const Shape frame_shape{cfg.fit.height, cfg.fit.width, cfg.fit.channels};

  HierarchyConfig h;
  if (!a.hierarchical.empty()) {
    h.levels = a.hierarchical;
    h.window = cfg.fit.frames;
    h.base_framerate = cfg.data.base_framerate / static_cast<double>(h.levels.back());
    h.total_frames = a.frames ? a.frames : cfg.fit.frames * h.levels.back();
  }

  std::vector<Tensor32> videos(a.count);
  std::vector<std::string> errors(a.count);
  auto run = [&](std::size_t i) {
    try {
      SamplerConfig local = sc;
      local.seed = sc.seed + i;
      FitDenoiser<float> model(params, cfg.fit, cfg.diffusion, a.cls);
      if (a.hierarchical.empty()) {
        videos[i] = sample<float>(model, {cfg.fit.frames, cfg.fit.height, cfg.fit.width, cfg.fit.channels}, local,
                                  cfg.diffusion, nullptr, cfg.data.base_framerate);
      } else {
        videos[i] = hierarchical_generate<float>(model, h, frame_shape, local, cfg.diffusion);
      }
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  };
  const std::size_t workers = std::min(worker_count(), a.count);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < a.count; i += workers) run(i);
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (!e.empty()) throw std::invalid_argument(e);
  }

  if (const auto dir = fs::path(a.out).parent_path(); !dir.empty()) fs::create_directories(dir);
  for (std::size_t i = 0; i < a.count; ++i) {
    const std::string prefix = a.count == 1 ? a.out : a.out + "_" + std::to_string(i);
    write_video(prefix + ".video", videos[i]);
    write_frames_ppm(prefix, videos[i]);
    std::cout << prefix << ".video: " << videos[i].dim(0) << " frames, classified as "
              << classify_video(videos[i], cfg.fit.n_classes) << '\n';
  }
  return kOk;
}

struct SnrArgs {
  std::vector<std::size_t> frames{1, 2, 4, 16};
  std::vector<std::size_t> upsample{1, 2, 4};
  double sigma = 1.0;
  std::size_t trials = 400;
  bool scaled = false;
  std::uint64_t seed = 0;
  std::string csv;
};

int cmd_snr(const SnrArgs& a) {
  if (a.trials == 0) throw UsageError("--trials must be at least 1");
  const auto rows = snr_grid(a.frames, a.upsample, a.sigma, a.scaled, a.trials, a.seed);
  if (a.csv.empty()) {
    write_snr_csv(std::cout, rows);
  } else {
    std::ofstream out(a.csv);
    if (!out) throw std::runtime_error("cannot write '" + a.csv + "'");
    write_snr_csv(out, rows);
    std::cout << "wrote " << rows.size() << " rows to " << a.csv << '\n';
  }
  return kOk;
}

struct BenchArgs {
  std::string config;
  std::size_t doublings = 2;
  std::size_t repeat = 3;
  double limit = 2.2;
};

int cmd_bench(const BenchArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig::toy() : load_config(a.config);
  cfg.finalize();
  std::cout << "height,width,patch_tokens,latents,macs,wall_ms,growth\n";
  std::uint64_t prev = 0;
  bool ok = true;
  for (std::size_t k = 0; k <= a.doublings; ++k) {
    FitConfig f = cfg.fit;
    f.width = cfg.fit.width << k;
    f.group.w = cfg.fit.group.w << k;
    f.validate();
    const auto params = init_fit_params<float>(f, 7);
    std::mt19937_64 rng(11);
    const auto x = standard_normal<float>({f.frames, f.height, f.width, f.channels}, rng);
    FitConditioning cond;
    cond.sigma = 1.0;
    cond.orig_height = f.height;
    cond.orig_width = f.width;
    cond.cond_id = 1;
    NoGradGuard no_grad;
    double best_ms = 0;
    std::uint64_t macs = 0;
    for (std::size_t r = 0; r < std::max<std::size_t>(a.repeat, 1); ++r) {
      reset_mac_count();
      const auto t0 = std::chrono::steady_clock::now();
      (void)fit_forward(x, cond, std::optional<Tensor32>{}, params, f);
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      macs = mac_count();
      best_ms = r == 0 ? ms : std::min(best_ms, ms);
    }
    const double growth = prev ? static_cast<double>(macs) / static_cast<double>(prev) : 0.0;
    if (prev && growth >= a.limit) ok = false;
    std::cout << f.height << ',' << f.width << ',' << f.patch_tokens() << ',' << f.latent_count << ',' << macs << ','
              << std::fixed << std::setprecision(3) << best_ms << ',' << std::setprecision(4) << growth
              << std::defaultfloat << '\n';
    prev = macs;
  }
  if (!ok) std::cerr << "MAC growth per doubling reached " << a.limit << '\n';
  return ok ? kOk : kFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Input-scaled video diffusion with a FIT denoiser"};
  app.require_subcommand(1);

  VerifyArgs va;
  auto* verify = app.add_subcommand("verify", "Run the identity, SNR and gradient self-checks");
  verify->add_flag("--inject-bug", va.inject_bug, "Break the input scaling in the loss check (must fail)");
  verify->add_option("--csv", va.csv, "Also write results as CSV");
  verify->add_option("--seed", va.seed, "Seed for the randomized checks");
  verify->add_option("--trials", va.trials, "Monte-Carlo trials per SNR cell")->check(CLI::PositiveNumber);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train the toy model");
  train->add_option("--config", ta.config, "key = value run configuration")->check(CLI::ExistingFile);
  train->add_option("--resume", ta.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  train->add_option("--out", ta.out, "Output directory for metrics.csv and checkpoints");
  train->add_option("--seed", ta.seed, "Override train.seed and data.seed");
  train->add_option("--steps", ta.steps, "Run at most this many steps in this invocation");
  train->add_flag("--quiet", ta.quiet, "No progress lines");

  SampleArgs sa;
  auto* samp = app.add_subcommand("sample", "Generate videos from a checkpoint");
  samp->add_option("--checkpoint", sa.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  samp->add_option("--class", sa.cls, "Class id, 0 for unconditional");
  samp->add_option("--steps", sa.steps, "Sampler steps");
  samp->add_option("--guidance", sa.guidance, "Classifier-free guidance weight");
  samp->add_option("--guidance-mode", sa.guidance_mode, "constant or oscillating");
  samp->add_flag("--threshold", sa.threshold, "Enable dynamic thresholding");
  samp->add_option("--threshold-percentile", sa.threshold_percentile, "Percentile for dynamic thresholding");
  samp->add_option("--hierarchical", sa.hierarchical, "Frame-rate multipliers, e.g. 1,2")->delimiter(',');
  samp->add_option("--frames", sa.frames, "Total frames at the top rate (hierarchical only)");
  samp->add_option("--count", sa.count, "Number of trajectories; seeds are seed, seed+1, ...");
  samp->add_option("--seed", sa.seed, "Sampler seed");
  samp->add_option("--out", sa.out, "Output prefix for .video and .ppm files");
  samp->add_flag("--raw-weights", sa.raw_weights, "Use the trained weights instead of the EMA");

  SnrArgs na;
  auto* snr = app.add_subcommand("snr", "Measure SNR after frame and block averaging");
  snr->add_option("--frames", na.frames, "Frame counts T")->delimiter(',');
  snr->add_option("--upsample", na.upsample, "Spatial upsampling factors s")->delimiter(',');
  snr->add_option("--sigma", na.sigma, "Noise level")->check(CLI::PositiveNumber);
  snr->add_option("--trials", na.trials, "Monte-Carlo trials per cell");
  snr->add_flag("--scaled", na.scaled, "Set sigma_in = s sqrt(T)");
  snr->add_option("--seed", na.seed, "Seed");
  snr->add_option("--csv", na.csv, "Write CSV here instead of stdout");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Forward MACs and wall time as patch tokens double");
  bench->add_option("--config", ba.config, "Base configuration")->check(CLI::ExistingFile);
  bench->add_option("--doublings", ba.doublings, "Number of width doublings");
  bench->add_option("--repeat", ba.repeat, "Timed repetitions per row (best is reported)");
  bench->add_option("--limit", ba.limit, "Fail if MACs grow by this factor or more per doubling");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*verify) return cmd_verify(va);
    if (*train) return cmd_train(ta);
    if (*samp) return cmd_sample(sa);
    if (*snr) return cmd_snr(na);
    if (*bench) return cmd_bench(ba);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}
