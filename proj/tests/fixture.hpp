#pragma once

#include <filesystem>
#include <string>
#include <unistd.h>

#include "dpt/pipeline.hpp"
#include "dpt/synthetic.hpp"

namespace fixture {

namespace fs = std::filesystem;

inline fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("dpt-tests-" + std::to_string(::getpid())) / name;
  fs::create_directories(dir);
  return dir;
}

// Synthetic data, shipped resources and an untrained backbone.
struct World {
  fs::path dir;
  dpt::RunConfig config;
  dpt::Resources res;
  dpt::ModelParams backbone;

  World() : dir(scratch("synthetic")) {
    dpt::generate_synthetic(dir);
    config = dpt::load_run_config();
    res = dpt::load_resources(dir, config);
    config.model.vocab_size = res.vocab.size();
    backbone = dpt::init_model(config.model, 3);
  }
};

inline const World& world() {
  static const World w;
  return w;
}

}  // namespace fixture
