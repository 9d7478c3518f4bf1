#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "snapdiff/checkpoint.hpp"
#include "snapdiff/config.hpp"
#include "snapdiff/media.hpp"

using namespace snapdiff;

namespace {

RunConfig small_run() {
  auto c = RunConfig::toy();
  c.fit.frames = 4;
  c.fit.height = 8;
  c.fit.width = 8;
  c.fit.group = {4, 1, 1};
  c.fit.latent_count = 8;
  c.fit.patch_channels = 16;
  c.fit.latent_channels = 16;
  c.fit.cond_channels = 16;
  c.fit.embed_channels = 8;
  c.fit.blocks = 1;
  c.fit.global_layers = 1;
  c.fit.patch_head_channels = 8;
  c.fit.latent_head_channels = 8;
  c.train.steps = 8;
  c.train.batch_videos = 2;
  c.train.batch_images = 1;
  c.train.warmup = 2;
  c.data.n_videos = 8;
  c.data.n_images = 8;
  c.finalize();
  return c;
}

std::uint32_t u32_at(const std::vector<std::uint8_t>& b, std::size_t off) {
  std::uint32_t v;
  std::memcpy(&v, b.data() + off, 4);
  return v;
}

}  // namespace

TEST_CASE("config text round trips") {
  auto c = RunConfig::toy();
  c.diffusion.sigma_in = 0.1 + 0.2;
  c.sampler.guidance_mode = GuidanceMode::oscillating;
  c.data.rate_choices = {1, 3};
  const auto text = serialize_config(c);
  const auto back = parse_config(text);
  CHECK(serialize_config(back) == text);
  CHECK(back.diffusion.sigma_in == c.diffusion.sigma_in);
  CHECK(back.data.rate_choices == std::vector<std::size_t>{1, 3});
  for (const auto& k : config_keys()) CHECK(text.find(k.name + " = ") != std::string::npos);
}

TEST_CASE("config parsing accepts comments and whitespace") {
  const auto c = parse_config("# header\n  train.steps=12   # trailing\ntrain.warmup = 2\n\nsampler.guidance = 2.5\n");
  CHECK(c.train.steps == 12);
  CHECK(c.sampler.guidance == 2.5);
  CHECK(c.fit.height == RunConfig::toy().fit.height);
}

TEST_CASE("config errors carry line numbers") {
  auto message = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message("train.steps = 1\ntrain.nope = 2\n").find("line 2") != std::string::npos);
  CHECK(message("train.steps = 1\ntrain.steps = 2\n").find("line 2") != std::string::npos);
  CHECK(message("train.steps = many\n").find("line 1") != std::string::npos);
  CHECK(message("just words\n").find("line 1") != std::string::npos);
  CHECK(message("diffusion.variant = ddpm\n") != "");
  CHECK_THROWS_AS(load_config("/nonexistent/run.cfg"), ConfigError);
}

TEST_CASE("finalize validates and copies geometry") {
  auto c = RunConfig::toy();
  c.fit.latent_count = 30;  // four groups
  CHECK_THROWS_AS(c.finalize(), ConfigError);
  c = RunConfig::toy();
  c.fit.height = 32;
  c.fit.width = 32;
  c.fit.group = {8, 4, 4};
  c.finalize();
  CHECK(c.data.height == 32);
  CHECK(c.data.n_classes == c.fit.n_classes);
}

TEST_CASE("checkpoint layout and byte-stable round trip") {
  const auto cfg = small_run();
  Trainer t(cfg.fit, cfg.diffusion, cfg.train, cfg.data);
  t.step();
  const auto bytes = encode_checkpoint(cfg, t.state());
  CHECK(std::memcmp(bytes.data(), "SVCK", 4) == 0);
  CHECK(u32_at(bytes, 4) == kCheckpointVersion);
  const auto again = encode_checkpoint(decode_checkpoint(bytes).config, decode_checkpoint(bytes).state);
  CHECK(again == bytes);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto cfg = small_run();
  const auto state = init_train_state(cfg.fit, cfg.train);
  auto bytes = encode_checkpoint(cfg, state);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  CHECK_THROWS_AS(decode_checkpoint(flipped), CheckpointError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 9);
  CHECK_THROWS_AS(decode_checkpoint(truncated), CheckpointError);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(magic), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent.svck"), CheckpointError);
}

TEST_CASE("resuming from a checkpoint continues bitwise") {
  const auto cfg = small_run();
  Trainer straight(cfg.fit, cfg.diffusion, cfg.train, cfg.data);
  std::vector<double> expected;
  for (int i = 0; i < 4; ++i) expected.push_back(straight.step().loss);

  Trainer first(cfg.fit, cfg.diffusion, cfg.train, cfg.data);
  std::vector<double> got;
  for (int i = 0; i < 2; ++i) got.push_back(first.step().loss);
  const auto path = (std::filesystem::temp_directory_path() / "snapdiff_resume_test.svck").string();
  save_checkpoint(path, cfg, first.state());
  auto loaded = load_checkpoint(path);
  std::filesystem::remove(path);
  Trainer second(loaded.config.fit, loaded.config.diffusion, loaded.config.train, loaded.config.data);
  second.state() = std::move(loaded.state);
  for (int i = 0; i < 2; ++i) got.push_back(second.step().loss);
  CHECK(got == expected);
  CHECK(second.state().params.tensors()[0].values() == straight.state().params.tensors()[0].values());
}

TEST_CASE("video files store (t, c, row, col) order") {
  std::vector<float> v(2 * 2 * 3 * 2);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i);
  const auto video = Tensor32::from_vector({2, 2, 3, 2}, v);
  const auto bytes = encode_video(video);
  REQUIRE(bytes.size() == 16 + 4 * v.size());
  CHECK(u32_at(bytes, 0) == 2);
  CHECK(u32_at(bytes, 8) == 3);
  float second;
  std::memcpy(&second, bytes.data() + 20, 4);
  CHECK(second == 2.0f);  // frame 0, channel 0, row 0, col 1
  CHECK(decode_video(bytes).values() == v);
  auto bad = bytes;
  bad.pop_back();
  CHECK_THROWS(decode_video(bad));
}

TEST_CASE("ppm frames map [-1, 1] to bytes") {
  const auto frame = Tensor32::from_vector({1, 3, 1}, {-1.0f, 0.0f, 2.0f});
  const auto ppm = encode_ppm(frame);
  const std::string header = "P6\n3 1\n255\n";
  REQUIRE(ppm.size() == header.size() + 9);
  CHECK(ppm.substr(0, header.size()) == header);
  CHECK(static_cast<unsigned char>(ppm[header.size()]) == 0);
  CHECK(static_cast<unsigned char>(ppm[header.size() + 3]) == 128);
  CHECK(static_cast<unsigned char>(ppm[header.size() + 8]) == 255);
}
