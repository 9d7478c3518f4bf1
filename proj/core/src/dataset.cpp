#include "snapdiff/dataset.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <random>
#include <stdexcept>
#include <utility>

namespace snapdiff {

void DatasetConfig::validate() const {
  if (frames == 0) throw std::invalid_argument("dataset: frames must be positive");
  if (height < kSpriteSize || width < kSpriteSize) throw std::invalid_argument("dataset: frame smaller than the sprite");
  if (n_classes < 1 || n_classes > 4) throw std::invalid_argument("dataset: n_classes must be in 1..4");
  if (n_videos + n_images == 0) throw std::invalid_argument("dataset: empty stream");
  if (rate_choices.empty()) throw std::invalid_argument("dataset: need at least one frame-rate factor");
  for (auto r : rate_choices) {
    if (r == 0) throw std::invalid_argument("dataset: frame-rate factors must be positive");
  }
  if (!(base_framerate > 0)) throw std::invalid_argument("dataset: base frame rate must be positive");
}

Tensor32 VideoBatch::sample(std::size_t index) const {
  if (index >= size()) throw std::out_of_range("VideoBatch::sample: index out of range");
  const auto& s = pixels.shape();
  const std::size_t per = s[1] * s[2] * s[3] * s[4];
  std::vector<float> v(pixels.values().begin() + index * per, pixels.values().begin() + (index + 1) * per);
  auto tchw = Tensor32::from_vector({s[1], s[2], s[3], s[4]}, std::move(v));
  return permute(tchw, {0, 2, 3, 1});
}

const std::vector<float>& sprite_template(std::size_t cls) {
  static const std::array<std::vector<float>, 4> templates = [] {
    constexpr std::size_t n = kSpriteSize;
    std::array<std::vector<float>, 4> t;
    for (auto& m : t) m.assign(n * n, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        t[0][i * n + j] = 1.0f;
        if (i == 0 || j == 0 || i == n - 1 || j == n - 1) t[1][i * n + j] = 1.0f;
        if (i == 2 || i == 3 || j == 2 || j == 3) t[2][i * n + j] = 1.0f;
        if (i == j || i + j == n - 1) t[3][i * n + j] = 1.0f;
      }
    }
    return t;
  }();
  if (cls < 1 || cls > templates.size()) throw std::out_of_range("sprite_template: class out of range");
  return templates[cls - 1];
}

std::pair<int, int> sprite_velocity(std::size_t cls) {
  static const std::array<std::pair<int, int>, 4> v{{{0, 1}, {1, 0}, {1, 1}, {1, -1}}};
  if (cls < 1 || cls > v.size()) throw std::out_of_range("sprite_velocity: class out of range");
  return v[cls - 1];
}

std::vector<float> render_frame(std::size_t cls, std::size_t row, std::size_t col, std::size_t height,
                                std::size_t width) {
  if (row + kSpriteSize > height || col + kSpriteSize > width) {
    throw std::out_of_range("render_frame: sprite outside the frame");
  }
  const auto& t = sprite_template(cls);
  std::vector<float> f(height * width, -1.0f);
  for (std::size_t i = 0; i < kSpriteSize; ++i)
    for (std::size_t j = 0; j < kSpriteSize; ++j)
      if (t[i * kSpriteSize + j] > 0) f[(row + i) * width + col + j] = 1.0f;
  return f;
}

namespace {

// Position after `steps` unit moves with reflection on [0, range].
std::size_t bounce(std::size_t start, int velocity, std::size_t steps, std::size_t range) {
  if (range == 0) return 0;
  const long long period = 2 * static_cast<long long>(range);
  long long q = (static_cast<long long>(start) + velocity * static_cast<long long>(steps)) % period;
  if (q < 0) q += period;
  return static_cast<std::size_t>(q <= static_cast<long long>(range) ? q : period - q);
}

struct Draw {
  std::size_t cls, row, col, rate;
};

Draw draw(const DatasetConfig& cfg, std::uint64_t kind, std::size_t index) {
  std::seed_seq seq{cfg.seed, kind, static_cast<std::uint64_t>(index)};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> cls(1, cfg.n_classes);
  std::uniform_int_distribution<std::size_t> row(0, cfg.height - kSpriteSize);
  std::uniform_int_distribution<std::size_t> col(0, cfg.width - kSpriteSize);
  std::uniform_int_distribution<std::size_t> rate(0, cfg.rate_choices.size() - 1);
  Draw d;
  d.cls = cls(rng);
  d.row = row(rng);
  d.col = col(rng);
  d.rate = cfg.rate_choices[rate(rng)];
  return d;
}

}  // namespace

SpriteDataset::SpriteDataset(DatasetConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

VideoBatch SpriteDataset::video(std::size_t index) const {
  if (cfg_.n_videos == 0) throw std::out_of_range("dataset has no videos");
  const auto d = draw(cfg_, 1, index);
  const auto [vr, vc] = sprite_velocity(d.cls);
  const std::size_t hw = cfg_.height * cfg_.width;
  std::vector<float> px;
  px.reserve(cfg_.frames * hw);
  for (std::size_t t = 0; t < cfg_.frames; ++t) {
    const std::size_t full = t * d.rate;
    const auto r = bounce(d.row, vr, full, cfg_.height - kSpriteSize);
    const auto c = bounce(d.col, vc, full, cfg_.width - kSpriteSize);
    const auto f = render_frame(d.cls, r, c, cfg_.height, cfg_.width);
    px.insert(px.end(), f.begin(), f.end());
  }
  VideoBatch b;
  b.pixels = Tensor32::from_vector({1, cfg_.frames, 1, cfg_.height, cfg_.width}, std::move(px));
  b.framerate = {cfg_.base_framerate / static_cast<double>(d.rate)};
  b.orig_height = {static_cast<double>(cfg_.height)};
  b.orig_width = {static_cast<double>(cfg_.width)};
  b.cond_id = {d.cls};
  return b;
}

VideoBatch SpriteDataset::image(std::size_t index) const {
  if (cfg_.n_images == 0) throw std::out_of_range("dataset has no images");
  const auto d = draw(cfg_, 2, index);
  VideoBatch b;
  b.pixels = Tensor32::from_vector({1, 1, 1, cfg_.height, cfg_.width},
                                   render_frame(d.cls, d.row, d.col, cfg_.height, cfg_.width));
  b.framerate = {kInfiniteFramerate};
  b.orig_height = {static_cast<double>(cfg_.height)};
  b.orig_width = {static_cast<double>(cfg_.width)};
  b.cond_id = {d.cls};
  return b;
}

VideoBatch SpriteDataset::item(std::size_t index) const {
  if (index >= size()) throw std::out_of_range("dataset index out of range");
  return index < cfg_.n_videos ? video(index) : image(index - cfg_.n_videos);
}

VideoBatch SpriteDataset::batch(std::uint64_t step, std::size_t videos, std::size_t images) const {
  if (videos + images == 0) throw std::invalid_argument("empty batch");
  if (videos > 0 && cfg_.n_videos == 0) throw std::invalid_argument("batch asks for videos from an image-only stream");
  if (images > 0 && cfg_.n_images == 0) throw std::invalid_argument("batch asks for images from a video-only stream");
  VideoBatch out;
  bool first = true;
  auto append = [&](const VideoBatch& b) {
    out = first ? b : concat_batches(out, b);
    first = false;
  };
  for (std::size_t j = 0; j < videos; ++j) append(video((step * videos + j) % cfg_.n_videos));
  for (std::size_t j = 0; j < images; ++j) {
    append(images_as_videos(image((step * images + j) % cfg_.n_images), cfg_.frames));
  }
  return out;
}

VideoBatch images_as_videos(const VideoBatch& images, std::size_t frames) {
  const auto& s = images.pixels.shape();
  if (s.size() != 5 || s[1] != 1) throw std::invalid_argument("images_as_videos: expected (B, 1, C, H, W)");
  if (frames == 0) throw std::invalid_argument("images_as_videos: frames must be positive");
  const std::size_t per = s[2] * s[3] * s[4];
  std::vector<float> px;
  px.reserve(s[0] * frames * per);
  for (std::size_t b = 0; b < s[0]; ++b)
    for (std::size_t t = 0; t < frames; ++t)
      px.insert(px.end(), images.pixels.values().begin() + b * per, images.pixels.values().begin() + (b + 1) * per);
  VideoBatch out = images;
  out.pixels = Tensor32::from_vector({s[0], frames, s[2], s[3], s[4]}, std::move(px));
  std::fill(out.framerate.begin(), out.framerate.end(), kInfiniteFramerate);
  return out;
}

VideoBatch concat_batches(const VideoBatch& a, const VideoBatch& b) {
  const auto& sa = a.pixels.shape();
  const auto& sb = b.pixels.shape();
  if (sa.size() != 5 || sb.size() != 5 || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1)) {
    throw std::invalid_argument("concat_batches: per-sample shapes differ");
  }
  VideoBatch out;
  out.pixels = concat<float>({a.pixels, b.pixels}, 0);
  auto join = [](auto x, const auto& y) {
    x.insert(x.end(), y.begin(), y.end());
    return x;
  };
  out.framerate = join(a.framerate, b.framerate);
  out.orig_height = join(a.orig_height, b.orig_height);
  out.orig_width = join(a.orig_width, b.orig_width);
  out.cond_id = join(a.cond_id, b.cond_id);
  return out;
}

std::size_t classify_video(const Tensor32& video, std::size_t n_classes) {
  const auto& s = video.shape();
  if (!(s.size() == 3 || (s.size() == 4 && s[3] == 1))) {
    throw std::invalid_argument("classify_video: expected (T, H, W) or (T, H, W, 1)");
  }
  if (n_classes < 1 || n_classes > 4) throw std::invalid_argument("classify_video: n_classes must be in 1..4");
  const std::size_t frames = s[0], h = s[1], w = s[2];
  if (h < kSpriteSize || w < kSpriteSize) throw std::invalid_argument("classify_video: frame smaller than sprite");
  const auto& v = video.values();

  std::size_t best = 1;
  double best_err = std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k <= n_classes; ++k) {
    const auto& t = sprite_template(k);
    double err = 0;
    for (std::size_t f = 0; f < frames; ++f) {
      const float* frame = v.data() + f * h * w;
      // err(pos) = sum (x + 1)^2 - 4 * sum_{sprite pixels} x
      double base = 0;
      for (std::size_t i = 0; i < h * w; ++i) base += (frame[i] + 1.0) * (frame[i] + 1.0);
      double best_hit = -std::numeric_limits<double>::infinity();
      for (std::size_t r = 0; r + kSpriteSize <= h; ++r)
        for (std::size_t c = 0; c + kSpriteSize <= w; ++c) {
          double hit = 0;
          for (std::size_t i = 0; i < kSpriteSize; ++i)
            for (std::size_t j = 0; j < kSpriteSize; ++j)
              if (t[i * kSpriteSize + j] > 0) hit += frame[(r + i) * w + c + j];
          best_hit = std::max(best_hit, hit);
        }
      err += base - 4.0 * best_hit;
    }
    if (err < best_err) {
      best_err = err;
      best = k;
    }
  }
  return best;
}

}  // namespace snapdiff
