#pragma once

#include <string>

#include "elf/model.hpp"
#include "elf/synth.hpp"
#include "elf/train.hpp"

namespace elf {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Plain-text key=value run description mirroring the architecture, loss and
/// training knobs. Parsing is total: unknown keys, duplicates and malformed
/// values are errors, and serialize(parse(text)) is canonical and stable.
struct RunConfig {
  ElfConfig model;
  int epochs = 500;
  int batch_size = 12;
  int patch_size = 256;
  std::uint64_t seed = 0;
  double lr = 2e-4;
  double lr_decay = 0.8;
  int lr_decay_interval = 65;
  int checkpoint_interval = 10;
  int max_steps = 0;
  std::string data_dir;
  std::string eval_dir;
  std::string checkpoint_dir;
  std::string log_file;

  static RunConfig parse(const std::string& text);
  static RunConfig parse_file(const std::string& path);
  std::string serialize() const;
  void validate() const;

  TrainConfig train_config() const {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.patch_size = patch_size;
    t.seed = seed;
    t.base_lr = lr;
    t.lr_decay = lr_decay;
    t.lr_decay_interval = lr_decay_interval;
    t.checkpoint_interval = checkpoint_interval;
    t.max_steps = max_steps;
    t.checkpoint_dir = checkpoint_dir;
    return t;
  }
};

/// key=value description of a DegradationSpec (same syntax as RunConfig).
DegradationSpec parse_degradation_spec(const std::string& text);
DegradationSpec parse_degradation_spec_file(const std::string& path);

}  // namespace elf
