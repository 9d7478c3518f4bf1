#pragma once

// FIT-style denoiser network.
//
// The input video (T, H, W, C) is cut into single-frame 1 x Hp x Wp patches,
// embedded, and split into groups that span every frame. A small set of
// latent tokens carries the computation. Each block:
//   1. latents read the conditioning tokens (sigma, frame rate, resolution, class),
//   2. each group's latents read that group's patch tokens, then a feed-forward,
//   3. global_layers rounds of self-attention + feed-forward over all latents,
//   4. each group's patch tokens read back from the group's latents, then a
//      feed-forward (in place of local patch self-attention).
// Sub-layers are pre-norm residual. Final latents are returned so a later
// call can self-condition on them.

#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "snapdiff/tensor.hpp"

namespace snapdiff {

inline constexpr double kInfiniteFramerate = std::numeric_limits<double>::infinity();

struct PatchSize {
  std::size_t t = 1, h = 4, w = 4;
};

// In patch-grid units; t must cover all frames.
struct GroupSize {
  std::size_t t = 8, h = 2, w = 2;
};

struct FitConfig {
  std::size_t frames = 8;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  std::size_t lowres_channels = 0;  // cascade conditioning channels appended to the input
  PatchSize patch;
  GroupSize group;
  std::size_t patch_channels = 64;
  std::size_t latent_count = 32;
  std::size_t latent_channels = 64;
  std::size_t blocks = 2;
  std::size_t global_layers = 2;
  std::size_t patch_head_channels = 16;
  std::size_t latent_head_channels = 16;
  std::size_t cond_channels = 64;
  std::size_t embed_channels = 32;  // sinusoidal features feeding the conditioning MLPs
  std::size_t ff_mult = 4;
  std::size_t n_classes = 4;
  double self_cond_prob = 0.9;
  double dropout = 0.1;

  // Throws std::invalid_argument when a divisibility or coverage invariant fails.
  void validate() const;

  std::size_t grid_t() const { return frames / patch.t; }
  std::size_t grid_h() const { return height / patch.h; }
  std::size_t grid_w() const { return width / patch.w; }
  std::size_t patch_tokens() const { return grid_t() * grid_h() * grid_w(); }
  std::size_t group_count() const;
  std::size_t tokens_per_group() const { return group.t * group.h * group.w; }
  std::size_t latents_per_group() const { return latent_count / group_count(); }
  std::size_t patch_dim_in() const { return patch.t * patch.h * patch.w * (channels + lowres_channels); }
  std::size_t patch_dim_out() const { return patch.t * patch.h * patch.w * channels; }
  std::size_t cond_token_count() const { return lowres_channels > 0 ? 5 : 4; }

  static FitConfig toy();
  // Shape-only geometries of the published models.
  static FitConfig paper_500m();
  static FitConfig paper_3_9b();
  static FitConfig paper_3_9b_upsampler();
};

// Patch-token count for a (T, H, W) input; throws on indivisible geometry.
std::size_t patch_token_count(std::size_t frames, std::size_t height, std::size_t width,
                              const PatchSize& patch);

// Named learnable tensors, in registration order.
template <class T>
class FitParams {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> value);
  const Tensor<T>& at(const std::string& name) const;
  Tensor<T>& at(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return tensors_.size(); }
  std::size_t scalar_count() const;
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor<T>>& tensors() { return tensors_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }

  void zero_grad();
  void set_requires_grad(bool flag);
  FitParams clone() const;
  template <class U>
  FitParams<U> cast() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class T>
FitParams<T> init_fit_params(const FitConfig& cfg, std::uint64_t seed);

// Closed-form parameter count; must agree with init_fit_params.
std::size_t fit_param_count(const FitConfig& cfg);

struct FitConditioning {
  double sigma = 1.0;
  double framerate = kInfiniteFramerate;
  double orig_height = 16;
  double orig_width = 16;
  std::size_t cond_id = 0;  // 0 is the null class
  std::optional<double> aug_sigma;
};

struct ForwardOptions {
  bool train = false;              // enables dropout
  std::mt19937_64* rng = nullptr;  // required when train && dropout > 0
};

template <class T>
struct FitOutput {
  Tensor<T> f_out;    // (T, H, W, C)
  Tensor<T> latents;  // (latent_count, latent_channels)
};

// Multiply-accumulates of one fit_forward call; matches the matmul counter.
std::uint64_t fit_forward_macs(const FitConfig& cfg, bool finite_framerate, bool self_conditioned);

// --- building blocks, exposed for tests -------------------------------------

// (T, H, W, C) -> (N, Hp*Wp*C), tokens in (t, row, col) order.
template <class T>
Tensor<T> extract_patches(const Tensor<T>& x, const FitConfig& cfg);
// Inverse of extract_patches for `channels` output channels.
template <class T>
Tensor<T> assemble_patches(const Tensor<T>& tokens, const FitConfig& cfg, std::size_t channels);

// Embedded patch tokens plus positional embeddings: (N, patch_channels).
template <class T>
Tensor<T> patchify(const Tensor<T>& x, const FitParams<T>& params, const FitConfig& cfg);
// Output head: (N, patch_channels) -> (T, H, W, C).
template <class T>
Tensor<T> unpatchify(const Tensor<T>& tokens, const FitParams<T>& params, const FitConfig& cfg);

// (N, C) -> (G, tokens_per_group, C) and back.
template <class T>
Tensor<T> group_tokens(const Tensor<T>& tokens, const FitConfig& cfg);
template <class T>
Tensor<T> ungroup_tokens(const Tensor<T>& grouped, const FitConfig& cfg);

// (1, K, cond_channels)
template <class T>
Tensor<T> build_cond_tokens(const FitConditioning& cond, const FitParams<T>& params,
                            const FitConfig& cfg);

// Groupwise read: latents (G, Lg, Cl) attend to patches (G, P, Cp). Returns
// the latents after the read residual, before its feed-forward.
template <class T>
Tensor<T> group_read(const Tensor<T>& patches, const Tensor<T>& latents,
                     const FitParams<T>& params, const FitConfig& cfg, std::size_t block);

template <class T>
struct BlockState {
  Tensor<T> patches;  // (G, P, Cp)
  Tensor<T> latents;  // (G, Lg, Cl)
};

template <class T>
BlockState<T> fit_block(const BlockState<T>& in, const Tensor<T>& cond, const FitParams<T>& params,
                        const FitConfig& cfg, std::size_t block, const ForwardOptions& opts = {});

// F_theta on an input already multiplied by c_in. prev_latents, when given,
// is treated as a constant.
template <class T>
FitOutput<T> fit_forward(const Tensor<T>& x_in, const FitConditioning& cond,
                         const std::optional<Tensor<T>>& prev_latents, const FitParams<T>& params,
                         const FitConfig& cfg, const ForwardOptions& opts = {});

// Nearest-neighbour spatial upsampling of (T, h, w, C) to (T, H, W, C).
template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t height, std::size_t width);

template <class T>
struct CascadeInput {
  Tensor<T> input;  // (T, H, W, C + C_lowres)
  double aug_sigma = 0;
};

// Appends a noise-augmented, upsampled low-resolution video as extra input
// channels. Pass aug_sigma on as FitConditioning::aug_sigma.
template <class T>
CascadeInput<T> cascade_condition(const Tensor<T>& x_in, const Tensor<T>& low_res, double aug_sigma,
                                  std::mt19937_64& rng);

}  // namespace snapdiff
