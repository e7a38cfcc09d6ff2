#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "laga/data.hpp"
#include "laga/losses.hpp"
#include "laga/model.hpp"
#include "laga/train.hpp"

namespace laga {

// Top-level JSON config; every section and field is optional and falls back
// to the defaults baked into the structs. camera_filter: "auto" | "on" |
// "off".
struct AppConfig {
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  AugConfig aug;
  SynthSpec synth;
  std::string camera_filter = "auto";
};

AppConfig parse_config(const std::string& json_text);
AppConfig load_config(const std::filesystem::path& path);
AppConfig load_config_or_default(
    const std::optional<std::filesystem::path>& path);

}  // namespace laga
