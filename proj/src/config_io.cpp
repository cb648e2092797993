#include "cdr/config_io.hpp"

#include <set>
#include <string>

#include "cdr/error.hpp"

namespace cdr {

namespace {

void require_object(const nlohmann::json& j, std::string_view what, std::initializer_list<std::string_view> keys) {
  if (!j.is_object()) throw DataError(std::string(what) + " must be a JSON object");
  const std::set<std::string_view> allowed(keys);
  for (const auto& [k, v] : j.items()) {
    if (!allowed.contains(k)) throw DataError("unknown key '" + k + "' in " + std::string(what));
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace

nlohmann::ordered_json to_json(const ScorerConfig& c) {
  nlohmann::ordered_json j;
  j["patch_size"] = c.patch_size;
  j["channels_in"] = c.channels_in;
  j["conv_blocks"] = nlohmann::ordered_json::array();
  for (const auto& b : c.conv_blocks) {
    j["conv_blocks"].push_back({{"out_channels", b.out_channels}, {"kernel", b.kernel}, {"stride", b.stride}});
  }
  j["hidden"] = c.hidden;
  j["activation"] = "relu";
  return j;
}

ScorerConfig scorer_config_from_json(const nlohmann::json& j) {
  require_object(j, "scorer config", {"patch_size", "channels_in", "conv_blocks", "hidden", "activation"});
  ScorerConfig c;
  read(j, "patch_size", c.patch_size);
  read(j, "channels_in", c.channels_in);
  read(j, "hidden", c.hidden);
  if (j.contains("activation") && j.at("activation") != "relu") throw DataError("only relu activation is supported");
  if (j.contains("conv_blocks")) {
    c.conv_blocks.clear();
    for (const auto& b : j.at("conv_blocks")) {
      ConvBlock block;
      if (b.is_number_integer()) {
        block.out_channels = b.get<int>();
      } else {
        require_object(b, "conv block", {"out_channels", "kernel", "stride"});
        read(b, "out_channels", block.out_channels);
        read(b, "kernel", block.kernel);
        read(b, "stride", block.stride);
      }
      c.conv_blocks.push_back(block);
    }
  }
  c.validate();
  return c;
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["batch_size"] = c.batch_size;
  j["base_lr"] = c.base_lr;
  j["min_lr"] = c.min_lr;
  j["warmup_epochs"] = c.warmup_epochs;
  j["warmup_start_lr"] = c.warmup_start_lr;
  j["weight_decay"] = c.weight_decay;
  j["epochs"] = c.epochs;
  j["patches_per_image"] = c.patches_per_image;
  j["seed"] = c.seed;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  require_object(j, "train config",
                 {"batch_size", "base_lr", "min_lr", "warmup_epochs", "warmup_start_lr", "weight_decay", "epochs",
                  "patches_per_image", "seed"});
  TrainConfig c;
  read(j, "batch_size", c.batch_size);
  read(j, "base_lr", c.base_lr);
  read(j, "min_lr", c.min_lr);
  read(j, "warmup_epochs", c.warmup_epochs);
  read(j, "warmup_start_lr", c.warmup_start_lr);
  read(j, "weight_decay", c.weight_decay);
  read(j, "epochs", c.epochs);
  read(j, "patches_per_image", c.patches_per_image);
  read(j, "seed", c.seed);
  c.validate();
  return c;
}

nlohmann::ordered_json to_json(const BiasedDatasetConfig& c) {
  nlohmann::ordered_json j;
  j["name"] = c.name;
  j["n_images"] = c.n_images;
  j["kinds"] = nlohmann::ordered_json::array();
  for (auto k : c.allowed_kinds) j["kinds"].push_back(std::string(to_string(k)));
  j["label_remap"] = std::string(to_string(c.label_remap));
  j["seed"] = c.seed;
  j["image_size"] = c.image_size;
  return j;
}

BiasedDatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  require_object(j, "dataset config", {"name", "n_images", "kinds", "label_remap", "seed", "image_size"});
  BiasedDatasetConfig c;
  read(j, "name", c.name);
  read(j, "n_images", c.n_images);
  read(j, "seed", c.seed);
  read(j, "image_size", c.image_size);
  if (j.contains("label_remap")) c.label_remap = parse_label_remap(j.at("label_remap").get<std::string>());
  if (j.contains("kinds")) {
    for (const auto& k : j.at("kinds")) c.allowed_kinds.push_back(parse_degradation_kind(k.get<std::string>()));
  }
  c.validate();
  return c;
}

nlohmann::json load_json(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("config not found: " + path.string());
  auto j = nlohmann::json::parse(read_text(path), nullptr, false);
  if (j.is_discarded()) throw DataError("malformed JSON in " + path.string());
  return j;
}

}  // namespace cdr
