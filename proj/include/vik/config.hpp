#pragma once

#include "vik/backbone.hpp"

#include <array>
#include <string>

namespace vik {

struct TrainParams {
  int epochs = 30;
  int batch = 50;
  double lr_peak = 1e-3;
  double lr_floor = 1e-5;
  double warmup_frac = 0.05;
  double weight_decay = 0.05;
  double clip_norm = 5.0;
  bool augment_flip = false;
  int synth_classes = 10;
  int synth_per_class = 500;
  int synth_val_per_class = 100;
  double synth_sigma = 0.1;
};

struct TrainSetup {
  BackboneConfig model;
  TrainParams train;
};

// key=value lines, '#' comments; unknown keys are rejected; keys not present
// keep the tiny_setup() defaults
TrainSetup parse_config(const std::string& text);
TrainSetup load_config_file(const std::string& path);

// built-in desk-scale default, used when no config file is given
TrainSetup tiny_setup();

// reference design: 4 stages, depths 2/2/8/2, channels 64/128/320/512
BackboneConfig vik_small_config();

// regenerated in a fixed key order; the digest and checkpoints embed this form
std::string canonical_text(const TrainSetup& setup);

std::array<unsigned char, 32> config_digest(const std::string& canonical);

}  // namespace vik
