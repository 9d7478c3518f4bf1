#pragma once

// Flat key=value run configuration.
//
//   # comment
//   diffusion.sigma_in = 2.8284271247461903
//   train.steps = 1000
//
// Whitespace around keys and values is ignored, '#' starts a comment, unknown
// or repeated keys are errors. serialize() writes every key in a fixed order
// with shortest round-trip number formatting, so parse(serialize(c)) == c.

#include <iosfwd>
#include <string>
#include <vector>

#include "snapdiff/dataset.hpp"
#include "snapdiff/diffusion.hpp"
#include "snapdiff/fit.hpp"
#include "snapdiff/sampler.hpp"
#include "snapdiff/train.hpp"

namespace snapdiff {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  DiffusionConfig diffusion;
  FitConfig fit;
  TrainConfig train;
  DatasetConfig data;  // geometry and class count follow `fit`
  SamplerConfig sampler;
  std::size_t checkpoint_every = 0;  // 0: only at the end of a run

  // Desk-scale defaults: T = 8, 16x16x1, sigma_in = sqrt(8).
  static RunConfig toy();

  // Copies fit geometry into data and validates every section.
  void finalize();
};

struct ConfigKey {
  std::string name;
  std::string doc;
};

// Every accepted key with a one-line description, in serialization order.
const std::vector<ConfigKey>& config_keys();

// Applies key=value lines on top of `base`; throws ConfigError with the line
// number on malformed lines, unknown keys, repeated keys or bad values.
RunConfig parse_config(const std::string& text, RunConfig base = RunConfig::toy());
RunConfig load_config(const std::string& path, RunConfig base = RunConfig::toy());

std::string serialize_config(const RunConfig& cfg);

// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace snapdiff
