#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "metadec/evaluation.hpp"

namespace metadec {

struct Sample {
  Tensor<double> image;  // [H, W] in [0, 1]
  BinaryMask mask;       // [H, W] in {0, 1}
  std::string scenario = "unknown";
  std::string id;
};

enum class Scenario { sky, maritime, ground };

std::string to_string(Scenario s);
Scenario parse_scenario(const std::string& s);

struct SceneSpec {
  Scenario scenario = Scenario::sky;
  int height = 64;
  int width = 64;
  int n_targets = 2;
  double sigma_min = 1.2, sigma_max = 2.2;        // target spread, px
  double contrast_min = 0.3, contrast_max = 0.5;  // peak amplitude over background
  double clutter = 1.0;   // sky: blob count scale; maritime: streak amplitude; ground: grain amplitude
  double noise_std = 0.01;
  double min_separation = 8.0;  // between target centers, px

  void validate() const;
};

/// Per-scenario defaults at the given size.
SceneSpec default_scene_spec(Scenario scenario, int height, int width);

struct Target {
  double cy = 0, cx = 0, sigma = 0, contrast = 0;
};

struct SynthScene {
  Sample sample;
  std::vector<Target> targets;
};

/// Background + Gaussian targets + noise, quantized to 8 bits. The mask marks
/// pixels where some target's own contribution is at least half its peak.
SynthScene synth_scene(const SceneSpec& spec, std::mt19937_64& rng);

/// Noiseless contribution of one target at pixel (y, x).
double target_contribution(const Target& t, int y, int x);

/// Reads root/images/<id>.png, root/masks/<id>.png for every id in
/// root/splits/<split>.txt, labels from root/scenarios.csv when present.
std::vector<Sample> load_dataset(const std::string& root, const std::string& split);

struct SynthDatasetSpec {
  std::vector<Scenario> scenarios{Scenario::sky, Scenario::maritime, Scenario::ground};
  int per_scenario_train = 20;
  int per_scenario_test = 20;
  int height = 64;
  int width = 64;
  int min_targets = 1;
  int max_targets = 3;
  std::uint64_t seed = 0;
};

/// Parses `key = value` lines (scenarios = sky,maritime; train = 20; test = 20;
/// height; width; min_targets; max_targets).
SynthDatasetSpec parse_synth_spec(const std::string& text);

/// Generates the dataset in memory, each sample from its own derived seed.
/// Train samples come first; ids are <scenario>_<index>.
std::vector<Sample> synth_dataset(const SynthDatasetSpec& spec, std::vector<std::string>* train_ids,
                                  std::vector<std::string>* test_ids, int workers = 1);

/// Writes images/, masks/, splits/{train,test}.txt and scenarios.csv.
void write_dataset(const std::string& root, const std::vector<Sample>& samples,
                   const std::vector<std::string>& train_ids,
                   const std::vector<std::string>& test_ids);

Tensor<std::uint8_t> to_u8(const Tensor<double>& unit_image);

}  // namespace metadec
