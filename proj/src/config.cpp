#include "laga/config.hpp"

#include <fstream>

#include "json.hpp"

namespace laga {

namespace {

using nlohmann::json;

template <typename T>
void read_field(const json& section, const char* key, T& out,
                const std::string& where) {
  if (!section.contains(key)) return;
  try {
    out = section.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config field " + where + "." + key + ": " + e.what());
  }
}

void read_model(const json& j, ModelConfig& cfg) {
  read_field(j, "input_h", cfg.input_h, "model");
  read_field(j, "input_w", cfg.input_w, "model");
  read_field(j, "trunk_channels", cfg.trunk_channels, "model");
  read_field(j, "branch_channels", cfg.branch_channels, "model");
  read_field(j, "reduction", cfg.reduction, "model");
  read_field(j, "n_stripes", cfg.n_stripes, "model");
  read_field(j, "leaky_slope", cfg.leaky_slope, "model");
  read_field(j, "dropout", cfg.dropout_p, "model");
  read_field(j, "attention", cfg.attention, "model");
  read_field(j, "share_branch_init", cfg.share_branch_init, "model");
  if (j.contains("branches")) {
    if (!j.at("branches").is_array()) {
      throw ConfigError("config field model.branches must be an array");
    }
    cfg.branch_spatial = cfg.branch_channel = cfg.branch_global =
        cfg.branch_local = false;
    for (const json& b : j.at("branches")) {
      const std::string name = b.get<std::string>();
      if (name == "spatial") {
        cfg.branch_spatial = true;
      } else if (name == "channel") {
        cfg.branch_channel = true;
      } else if (name == "global") {
        cfg.branch_global = true;
      } else if (name == "local") {
        cfg.branch_local = true;
      } else {
        throw ConfigError("config model.branches: unknown branch '" + name +
                          "'");
      }
    }
  }
}

void read_loss(const json& j, LossConfig& cfg) {
  read_field(j, "beta", cfg.beta, "loss");
  read_field(j, "margin", cfg.margin, "loss");
  read_field(j, "epsilon", cfg.epsilon, "loss");
  read_field(j, "P", cfg.p, "loss");
  read_field(j, "K", cfg.k, "loss");
  if (j.contains("reduction")) {
    const std::string r = j.at("reduction").get<std::string>();
    if (r == "sum") {
      cfg.reduction = TripletReduction::kSum;
    } else if (r == "mean") {
      cfg.reduction = TripletReduction::kMean;
    } else {
      throw ConfigError("config loss.reduction must be 'sum' or 'mean'");
    }
  }
}

void read_train(const json& j, TrainConfig& cfg) {
  read_field(j, "epochs", cfg.epochs, "train");
  read_field(j, "base_lr", cfg.base_lr, "train");
  read_field(j, "warmup_start_lr", cfg.warmup_start_lr, "train");
  read_field(j, "warmup_epochs", cfg.warmup_epochs, "train");
  read_field(j, "weight_decay", cfg.weight_decay, "train");
  read_field(j, "backbone_lr_divisor", cfg.backbone_lr_divisor, "train");
  read_field(j, "beta1", cfg.beta1, "train");
  read_field(j, "beta2", cfg.beta2, "train");
  read_field(j, "seed", cfg.seed, "train");
  read_field(j, "freeze_gamma", cfg.freeze_gamma, "train");
  if (j.contains("decay")) {
    if (!j.at("decay").is_object()) {
      throw ConfigError("config train.decay must map epochs to rates");
    }
    cfg.decay.clear();
    for (const auto& [key, value] : j.at("decay").items()) {
      try {
        cfg.decay[std::stoi(key)] = value.get<double>();
      } catch (const std::exception&) {
        throw ConfigError("config train.decay: bad entry '" + key + "'");
      }
    }
  }
}

void read_aug(const json& j, AugConfig& cfg) {
  read_field(j, "resize_factor", cfg.resize_factor, "aug");
  read_field(j, "hflip_p", cfg.hflip_p, "aug");
  read_field(j, "jitter", cfg.jitter, "aug");
  if (j.contains("erase")) {
    const json& e = j.at("erase");
    read_field(e, "p", cfg.erase_p, "aug.erase");
    if (e.contains("area")) {
      const auto area = e.at("area").get<std::vector<double>>();
      if (area.size() != 2) {
        throw ConfigError("config aug.erase.area must be [lo, hi]");
      }
      cfg.erase_area_lo = area[0];
      cfg.erase_area_hi = area[1];
    }
    if (e.contains("aspect")) {
      const auto aspect = e.at("aspect").get<std::vector<double>>();
      if (aspect.size() != 2) {
        throw ConfigError("config aug.erase.aspect must be [lo, hi]");
      }
      cfg.erase_aspect_lo = aspect[0];
      cfg.erase_aspect_hi = aspect[1];
    }
  }
  read_field(j, "mean", cfg.mean, "aug");
  read_field(j, "std", cfg.stddev, "aug");
}

void read_synth(const json& j, SynthSpec& cfg) {
  read_field(j, "n_identities", cfg.n_identities, "synth");
  read_field(j, "images_per_identity", cfg.images_per_identity, "synth");
  read_field(j, "height", cfg.height, "synth");
  read_field(j, "width", cfg.width, "synth");
  read_field(j, "n_cameras", cfg.n_cameras, "synth");
  read_field(j, "seed", cfg.seed, "synth");
  read_field(j, "brightness", cfg.brightness, "synth");
  read_field(j, "translation", cfg.translation, "synth");
  read_field(j, "noise", cfg.noise, "synth");
}

}  // namespace

AppConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  AppConfig cfg;
  if (j.contains("model")) read_model(j.at("model"), cfg.model);
  if (j.contains("loss")) read_loss(j.at("loss"), cfg.loss);
  if (j.contains("train")) read_train(j.at("train"), cfg.train);
  if (j.contains("aug")) read_aug(j.at("aug"), cfg.aug);
  if (j.contains("synth")) read_synth(j.at("synth"), cfg.synth);
  if (j.contains("eval")) {
    read_field(j.at("eval"), "camera_filter", cfg.camera_filter, "eval");
    if (cfg.camera_filter != "auto" && cfg.camera_filter != "on" &&
        cfg.camera_filter != "off") {
      throw ConfigError("config eval.camera_filter must be auto, on or off");
    }
  }
  return cfg;
}

AppConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config: " + path.string());
  std::string text((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  return parse_config(text);
}

AppConfig load_config_or_default(
    const std::optional<std::filesystem::path>& path) {
  return path ? load_config(*path) : AppConfig{};
}

}  // namespace laga
