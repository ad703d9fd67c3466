#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "msn/data.hpp"
#include "msn/network.hpp"
#include "msn/trainer.hpp"

// Run configuration files (JSON). Schema, every key optional:
//
//   {
//     "network": {"family": "resnet", "depth": 1, "width": 1.0, "widen": 10,
//                 "blocks": 4, "attach": [4] | "attach_config": 1..7,
//                 "classes": N, "height": H, "width_px": W, "channels": C,
//                 "batch_norm": {"eps": 1e-5, "momentum": 0.9}},
//     "train":   {"batch_size": 128, "momentum": 0.9, "lr": 0.01,
//                 "lr_decay": 0.9, "lr_period": 20000, "iterations": 0,
//                 "seed": 0, "batching": "shuffled" | "class_aware",
//                 "eval_interval": 100, "flip": true,
//                 "loss": {"within_weight": 1.0, "distance": "euclidean" | "per_component"},
//                 "xi": {"initial": 0.5, "decay": 0.9, "window": 100,
//                        "plateau_tol": 1e-3, "floor": 1e-4}},
//     "data":    {"source": "cifar10" | "synthetic", "dir": "...",
//                 "classes": [0, 1], "train_per_class": 0, "test_per_class": 0,
//                 "gcn": true, "zca": true, "zca_eps": 1e-2,
//                 "synthetic": {"classes": 4, "per_class": 500, "test_per_class": 100,
//                               "height": 8, "width": 8, "channels": 3, "separation": 1.0,
//                               "seed": <train.seed>},
//                 "fetch": {"url": "...", "digest": "sha256:<hex>" | "md5:<hex>"}},
//     "output":  {"dir": "runs"}
//   }
//
// Unknown keys are rejected. The network's classes and input shape default
// to those of the prepared data; if given they must agree with it.

namespace msn::run {

/// Invalid configuration; `key()` is the dotted path of the offending entry.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& why)
      : std::invalid_argument(key + ": " + why), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

enum class Source { cifar10, synthetic };

struct DataConfig {
  Source source = Source::cifar10;
  /// Dataset root; empty means $MSN_DATA_DIR, else "data".
  std::string dir;
  /// CIFAR classes to keep (relabelled in list order); empty keeps all ten.
  std::vector<int> classes;
  /// 0 keeps every image of a kept class.
  std::size_t train_per_class = 0;
  std::size_t test_per_class = 0;
  bool gcn = true;
  bool zca = true;
  double zca_eps = 1e-2;
  data::SyntheticOptions synthetic;
  std::size_t synthetic_test_per_class = 100;
  /// Template seed; the training seed when absent.
  std::optional<std::uint64_t> synthetic_seed;
  data::FetchOptions fetch;

  std::filesystem::path root() const;
};

struct RunConfig {
  NetworkSpec network;
  /// Classes and input shape given explicitly in the file (checked against the data).
  std::optional<std::size_t> classes, height, width_px, channels;
  train::TrainConfig train;
  DataConfig data;
  std::string output_dir = "runs";
};

/// Parses and validates. Throws ConfigError naming the first bad key.
RunConfig parse_config(const nlohmann::json& document);
/// Throws ConfigError (key "config") when the file is missing or not JSON.
RunConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& config);

struct PreparedData {
  data::LabeledDataset train;
  data::LabeledDataset test;
};

/// Loads the configured source and applies GCN then ZCA (fitted on the
/// training split). CIFAR data must already be present under data.root().
PreparedData prepare_data(const DataConfig& config, std::uint64_t seed);

/// Copies classes and input shape from the data into the network spec,
/// or checks them when they were given explicitly. Throws ConfigError.
void bind_network(RunConfig& config, const data::LabeledDataset& train);

}  // namespace msn::run
