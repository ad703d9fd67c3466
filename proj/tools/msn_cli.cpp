// msn: dataset fetching, training, evaluation and self-checks.
//
// Exit codes:
//   0  success
//   1  usage error or invalid configuration
//   2  digest mismatch, malformed archive or malformed checkpoint
//   3  network failure
//   4  non-finite loss during training
//   5  a verification check failed

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "msn/checkpoint.hpp"
#include "msn/data.hpp"
#include "msn/run.hpp"
#include "msn/trainer.hpp"
#include "msn/verify.hpp"

namespace fs = std::filesystem;
using namespace msn;

namespace {

enum Exit : int { ok = 0, usage = 1, integrity = 2, network = 3, non_finite = 4, verify_failed = 5 };

fs::path default_data_dir() {
  if (const char* env = std::getenv("MSN_DATA_DIR"); env != nullptr && *env != '\0') return env;
  return "data";
}

struct FetchArgs {
  std::string dataset;
  std::string out;
  std::string url;
  std::string digest;
  std::size_t records_per_file = data::kCifarRecordsPerFile;
};

int cmd_fetch_data(const FetchArgs& args) {
  data::FetchOptions options;
  if (!args.url.empty()) options.url = args.url;
  if (!args.digest.empty()) options.digest = args.digest;
  options.records_per_file = args.records_per_file;
  const fs::path dest = args.out.empty() ? default_data_dir() : fs::path(args.out);
  try {
    const auto result = data::fetch_dataset(args.dataset, dest, options);
    if (result.already_verified) {
      std::cout << "already verified: " << (dest / data::kCifarDirName).string() << "\n";
    } else {
      std::cout << (result.downloaded ? "downloaded and verified: " : "verified: ")
                << (dest / data::kCifarDirName).string() << "\n";
    }
    return ok;
  } catch (const data::FetchError& e) {
    std::cerr << "fetch-data: " << e.what() << "\n";
    switch (e.kind()) {
      case data::FetchError::Kind::usage:
        return usage;
      case data::FetchError::Kind::network:
        return network;
      case data::FetchError::Kind::digest_mismatch:
      case data::FetchError::Kind::format:
        return integrity;
    }
    return integrity;
  }
}

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> iterations;
  std::string out;
  std::string loss;
  std::string data_dir;
};

fs::path fresh_run_dir(const fs::path& parent, std::uint64_t seed) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", std::localtime(&now));
  const std::string base = std::string("run-") + stamp + "-seed" + std::to_string(seed);
  fs::path dir = parent / base;
  for (int k = 1; fs::exists(dir); ++k) dir = parent / (base + "-" + std::to_string(k));
  return dir;
}

int cmd_train(const TrainArgs& args) {
  run::RunConfig config;
  try {
    config = run::load_config(args.config);
    if (args.seed) config.train.seed = *args.seed;
    if (args.iterations) config.train.iterations = *args.iterations;
    if (!args.data_dir.empty()) config.data.dir = args.data_dir;
    if (args.loss == "ce") config.train.loss.within_weight = 0.0;
    if (args.loss == "msl" && config.train.loss.within_weight == 0.0) config.train.loss.within_weight = 1.0;
  } catch (const run::ConfigError& e) {
    std::cerr << "train: invalid config: " << e.what() << "\n";
    return usage;
  }

  run::PreparedData prepared;
  try {
    prepared = run::prepare_data(config.data, config.train.seed);
    run::bind_network(config, prepared.train);
  } catch (const run::ConfigError& e) {
    std::cerr << "train: invalid config: " << e.what() << "\n";
    return usage;
  } catch (const std::exception& e) {
    std::cerr << "train: cannot prepare data: " << e.what() << "\n"
              << "  (CIFAR-10 is read from " << config.data.root().string() << "; run `msn fetch-data` first)\n";
    return usage;
  }

  const fs::path out = args.out.empty() ? fresh_run_dir(config.output_dir, config.train.seed) : fs::path(args.out);
  fs::create_directories(out);
  {
    std::ofstream resolved(out / "config.resolved.json");
    resolved << run::to_json(config).dump(2) << "\n";
  }

  try {
    train::Trainer trainer(config.train, config.network, prepared.train, &prepared.test);
    trainer.stream_csv(out / "metrics.csv");
    trainer.run();
    trainer.save(out / "final.ckpt");
    const auto& log = trainer.log();
    if (!log.records.empty()) {
      const auto& last = log.records.back();
      std::printf("iterations=%llu loss_total=%.6f train_error=%.6f", static_cast<unsigned long long>(last.iteration),
                  last.loss_total, last.train_error);
      if (last.test_error) std::printf(" test_error=%.6f", *last.test_error);
      std::printf("\n");
    }
    std::cout << "output: " << out.string() << "\n";
    return ok;
  } catch (const train::NonFiniteLoss& e) {
    std::cerr << "train: " << e.what() << "\n";
    return non_finite;
  } catch (const NumericError& e) {
    std::cerr << "train: " << e.what() << "\n";
    return non_finite;
  } catch (const std::invalid_argument& e) {
    std::cerr << "train: invalid config: " << e.what() << "\n";
    return usage;
  }
}

struct EvalArgs {
  std::string checkpoint;
  std::string dataset;
  std::string config;
  std::string data_dir;
  std::string head = "deepest";
};

int cmd_eval(const EvalArgs& args) {
  const fs::path config_path =
      args.config.empty() ? fs::path(args.checkpoint).parent_path() / "config.resolved.json" : fs::path(args.config);
  run::RunConfig config;
  run::PreparedData prepared;
  try {
    config = run::load_config(config_path);
    if (!args.dataset.empty()) {
      if (args.dataset == "cifar10") {
        config.data.source = run::Source::cifar10;
      } else if (args.dataset == "synthetic") {
        config.data.source = run::Source::synthetic;
      } else {
        throw run::ConfigError("--dataset", "expected cifar10 or synthetic, got '" + args.dataset + "'");
      }
    }
    if (!args.data_dir.empty()) config.data.dir = args.data_dir;
    prepared = run::prepare_data(config.data, config.train.seed);
    run::bind_network(config, prepared.train);
  } catch (const run::ConfigError& e) {
    std::cerr << "eval: invalid config: " << e.what() << "\n";
    return usage;
  } catch (const std::exception& e) {
    std::cerr << "eval: cannot prepare data: " << e.what() << "\n";
    return usage;
  }

  try {
    auto snapshot = train::load_checkpoint(args.checkpoint, config.network, config.train.xi);
    const NetworkState<float> state{config.network, std::move(snapshot.params)};
    const auto head = args.head == "averaged" ? PredictHead::averaged : PredictHead::deepest;
    std::printf("test_error=%.6f\n", train::evaluate(state, prepared.test, 256, head));
    return ok;
  } catch (const ckpt::CheckpointError& e) {
    std::cerr << "eval: malformed checkpoint: " << e.what() << "\n";
    return integrity;
  }
}

int cmd_verify(const std::string& suite, std::uint64_t seed) {
  std::vector<verify::CheckResult> results;
  const auto add = [&](std::vector<verify::CheckResult> more) {
    for (auto& r : more) {
      std::cout << verify::format(r) << std::endl;
      results.push_back(std::move(r));
    }
  };
  if (suite == "gradcheck" || suite == "all") add(verify::gradcheck_suite(seed));
  if (suite == "oracle" || suite == "all") add(verify::oracle_suite(seed));
  if (suite == "invariants" || suite == "all") add(verify::invariants_suite(seed));
  std::size_t passed = 0;
  for (const auto& r : results) passed += r.pass;
  std::cout << "summary passed=" << passed << " failed=" << results.size() - passed << "\n";
  return passed == results.size() ? ok : verify_failed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture separability network training kit"};
  app.require_subcommand(1);

  FetchArgs fetch;
  auto* fetch_cmd = app.add_subcommand("fetch-data", "Download and verify a dataset");
  fetch_cmd->add_option("--dataset", fetch.dataset, "Dataset name (cifar10)")->required();
  fetch_cmd->add_option("--out", fetch.out, "Destination directory (default: $MSN_DATA_DIR or ./data)");
  fetch_cmd->add_option("--url", fetch.url, "Archive URL override");
  fetch_cmd->add_option("--digest", fetch.digest, "Expected archive digest, sha256:<hex> or md5:<hex>");
  fetch_cmd->add_option("--records-per-file", fetch.records_per_file, "Expected records per batch file")
      ->group("");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a network from a JSON config");
  train_cmd->add_option("--config", train_args.config, "Run configuration (JSON)")->required();
  train_cmd->add_option("--seed", train_args.seed, "Overrides train.seed");
  train_cmd->add_option("--iterations", train_args.iterations, "Overrides train.iterations");
  train_cmd->add_option("--out", train_args.out, "Output directory (default: new timestamped run directory)");
  train_cmd->add_option("--loss", train_args.loss, "msl, or ce for within-class weight 0")
      ->check(CLI::IsMember({"msl", "ce"}));
  train_cmd->add_option("--data-dir", train_args.data_dir, "Overrides data.dir");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Report the test error of a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--dataset", eval_args.dataset, "cifar10 or synthetic (default: from the config)");
  eval_cmd->add_option("--config", eval_args.config, "Run config (default: config.resolved.json beside the checkpoint)");
  eval_cmd->add_option("--data-dir", eval_args.data_dir, "Overrides data.dir");
  eval_cmd->add_option("--head", eval_args.head, "deepest or averaged")->check(CLI::IsMember({"deepest", "averaged"}));

  std::string suite;
  std::uint64_t verify_seed = 1;
  auto* verify_cmd = app.add_subcommand("verify", "Run gradient, oracle and invariant checks");
  verify_cmd->add_option("--suite", suite, "gradcheck, oracle, invariants or all")
      ->required()
      ->check(CLI::IsMember({"gradcheck", "oracle", "invariants", "all"}));
  verify_cmd->add_option("--seed", verify_seed, "Seed for the random cases");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return usage;
  }

  try {
    if (fetch_cmd->parsed()) return cmd_fetch_data(fetch);
    if (train_cmd->parsed()) return cmd_train(train_args);
    if (eval_cmd->parsed()) return cmd_eval(eval_args);
    if (verify_cmd->parsed()) return cmd_verify(suite, verify_seed);
  } catch (const std::exception& e) {
    std::cerr << "msn: " << e.what() << "\n";
    return usage;
  }
  return usage;
}
