#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvd/data.hpp"
#include "dvd/models.hpp"
#include "dvd/training.hpp"

namespace dvd {

/// Unknown section or key, malformed value, or a value out of range.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataSection {
  std::size_t size = 1600;
  std::uint64_t seed = 1;
  double contrast = 0.4;
  double noise_sigma = 0.02;
  double background = 0.5;

  RenderStyle style() const { return {background, noise_sigma, contrast}; }
};

struct ClipSection {
  std::size_t first_stage_samples = 40000;
  double adversarial_sample_ratio = 2.0;  // adversarial schedule length relative to clean
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::size_t batch_size = 32;
  double lambda = 0.5;
  PatchTransfer patch_transfer = PatchTransfer::Resample;
  bool mix_clean = false;
  bool attack_contrastive_only = false;
  bool vision_only = false;
};

struct CaptionerSection {
  std::size_t epochs = 8;
  double lr = 1e-3;
  double vision_lr_ratio = 1.0 / 20.0;
  std::size_t attack_steps = 5;
  double eps = 8.0 / 255.0;
  std::size_t batch_size = 32;
  double weight_decay = 1e-4;
};

struct EvalSection {
  std::uint64_t seed = 0;
  std::size_t zero_shot_samples = 160;
  std::size_t zero_shot_steps = 20;
  std::vector<double> zero_shot_eps{0.0, 4.0 / 255.0};
  std::size_t caption_samples = 64;
  std::size_t caption_steps = 20;
  std::vector<double> caption_eps{0.0, 4.0 / 255.0, 8.0 / 255.0};
  std::size_t targeted_steps = 60;
  std::size_t targeted_samples = 10;
  std::vector<double> targeted_eps{4.0 / 255.0, 16.0 / 255.0};
  std::vector<std::string> targets;  // empty selects the default six
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataSection data;
  ModelConfig model;
  ClipSection clip;
  CaptionerSection captioner;
  EvalSection eval;
};

/// Parses sectioned key = value text. Every key is optional; unknown
/// sections and keys are rejected.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Every key with its effective value, in a fixed order; parses back to an
/// equal configuration.
std::string resolved_config(const RunConfig& c);

/// "a/b" or a decimal.
double parse_fraction(const std::string& text);

}  // namespace dvd
