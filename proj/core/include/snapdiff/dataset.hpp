#pragma once

// Procedural moving-sprite videos and still images.
//
// Each class has a fixed 6x6 sprite and a fixed velocity; sprites are drawn
// at +1 on a -1 background and bounce off the frame borders. Videos are
// rendered at the base frame rate and then subsampled by a factor drawn from
// rate_choices, so the same motion shows up at several frame rates. Images
// are single rendered frames; images_as_videos repeats them over T frames and
// marks them with an infinite frame rate.

#include <cstdint>
#include <vector>

#include "snapdiff/fit.hpp"
#include "snapdiff/tensor.hpp"

namespace snapdiff {

inline constexpr std::size_t kSpriteSize = 6;

struct DatasetConfig {
  std::uint64_t seed = 0;
  std::size_t n_videos = 4096;
  std::size_t n_images = 4096;
  std::size_t frames = 8;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t n_classes = 4;
  double base_framerate = 16.0;
  std::vector<std::size_t> rate_choices{1, 2, 4};

  void validate() const;
};

// pixels: (B, T, C, H, W), C = 1. cond_id in 1..n_classes (0 is the null class).
struct VideoBatch {
  Tensor32 pixels;
  std::vector<double> framerate;  // kInfiniteFramerate for images
  std::vector<double> orig_height;
  std::vector<double> orig_width;
  std::vector<std::size_t> cond_id;

  std::size_t size() const { return cond_id.size(); }
  // One sample as (T, H, W, C), the layout the denoiser consumes.
  Tensor32 sample(std::size_t index) const;
};

// 6x6 mask of class k (1-based), 1 on the sprite.
const std::vector<float>& sprite_template(std::size_t cls);

// Pixel velocity per full-rate frame of class k (1-based).
std::pair<int, int> sprite_velocity(std::size_t cls);

// A frame (H, W) with the sprite of class k at (row, col).
std::vector<float> render_frame(std::size_t cls, std::size_t row, std::size_t col, std::size_t height,
                                std::size_t width);

class SpriteDataset {
 public:
  explicit SpriteDataset(DatasetConfig cfg);

  const DatasetConfig& config() const { return cfg_; }
  std::size_t size() const { return cfg_.n_videos + cfg_.n_images; }

  // Stream element i: videos first, then images. Images come back as
  // single-frame batches (1, 1, C, H, W) with the infinite frame rate.
  VideoBatch item(std::size_t index) const;
  VideoBatch video(std::size_t index) const;
  VideoBatch image(std::size_t index) const;

  // Training batch for a step: `videos` videos followed by `images`
  // images-as-videos, indices wrapping around the respective pools.
  VideoBatch batch(std::uint64_t step, std::size_t videos, std::size_t images) const;

 private:
  DatasetConfig cfg_;
};

// Replicates every single-frame sample T times and marks it as an image.
VideoBatch images_as_videos(const VideoBatch& images, std::size_t frames);

// Concatenates two batches along the batch axis; frame counts must match.
VideoBatch concat_batches(const VideoBatch& a, const VideoBatch& b);

// Nearest-template classification of a (T, H, W) or (T, H, W, 1) video:
// per class, the best sprite placement per frame by squared error on a -1
// background, summed over frames. Returns the 1-based class.
std::size_t classify_video(const Tensor32& video, std::size_t n_classes);

}  // namespace snapdiff
