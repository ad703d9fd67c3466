#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "msn/checkpoint.hpp"
#include "msn/data.hpp"
#include "msn/msl.hpp"
#include "msn/network.hpp"

namespace msn::train {

struct TrainConfig {
  std::size_t batch_size = 128;
  double momentum = 0.9;
  double lr = 0.01;
  /// Multiplier applied every lr_period iterations (0.1 for divide-by-ten schedules).
  double lr_decay = 0.9;
  std::uint64_t lr_period = 20000;
  std::uint64_t iterations = 0;
  msl::XiOptions xi;
  msl::MslOptions loss;
  std::uint64_t seed = 0;
  data::BatchMode batching = data::BatchMode::shuffled;
  std::uint64_t eval_interval = 100;
  bool flip = true;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// initial * decay^floor(iteration / period).
double lr_schedule(const TrainConfig& config, std::uint64_t iteration);

template <typename T>
struct OptimizerState {
  /// One velocity per trainable parameter, same names and shapes.
  ParamStore<T> velocity;

  static OptimizerState zeros_like(const ParamStore<T>& params);
};

/// v <- momentum * v - lr * g;  w <- w + v, for every trainable entry.
/// `grads` is aligned with params.entries(). Throws NumericError on a
/// non-finite gradient before touching any parameter.
template <typename T>
void sgd_momentum_step(ParamStore<T>& params, const std::vector<BasicTensor<T>>& grads, OptimizerState<T>& state,
                       double lr, double momentum);

struct IterationRecord {
  std::uint64_t iteration = 0;  // completed steps, starting at 1
  double lr = 0.0;
  /// xi in effect for each head slot (block 1-4) during this step.
  std::array<std::optional<double>, 4> xi;
  double loss_total = 0.0;
  double loss_between = 0.0;
  double loss_within = 0.0;
  double train_error = 0.0;
  std::optional<double> test_error;
  /// Mean in-class logit distance of the deepest head (NaN if no class had a pair).
  double in_class_distance = 0.0;
};

inline constexpr const char* kCsvHeader =
    "iteration,lr,xi_head1,xi_head2,xi_head3,xi_head4,loss_total,loss_between,loss_within,train_error,test_error";

std::string csv_row(const IterationRecord& record);

struct TrainLog {
  std::vector<IterationRecord> records;

  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

/// Aborts training; carries the iteration at which the loss went non-finite.
class NonFiniteLoss : public std::runtime_error {
 public:
  explicit NonFiniteLoss(std::uint64_t iteration)
      : std::runtime_error("non-finite loss at iteration " + std::to_string(iteration)), iteration_(iteration) {}
  std::uint64_t iteration() const { return iteration_; }

 private:
  std::uint64_t iteration_;
};

/// Fraction of images whose predicted class differs from the label.
double evaluate(const NetworkState<float>& state, const data::LabeledDataset& dataset, std::size_t batch_size = 256,
                PredictHead head = PredictHead::deepest);

/// Everything needed to continue a run exactly where it stopped.
struct TrainingSnapshot {
  ParamStore<float> params;
  OptimizerState<float> optimizer;
  std::vector<msl::XiState> xi;
  std::uint64_t iteration = 0;
  std::uint64_t seed = 0;
};

/// Serializes params under their own names, velocities as "opt.<name>",
/// xi states as "xi.head<block>" (f64) and loop progress as "trainer.*".
void save_checkpoint(const std::filesystem::path& path, const NetworkState<float>& state,
                     const OptimizerState<float>& optimizer, const std::vector<msl::XiState>& xi,
                     std::uint64_t iteration, std::uint64_t seed);

/// Restores a snapshot for a network built from `spec`. Throws
/// ckpt::CheckpointError when a tensor is missing or has the wrong shape.
TrainingSnapshot load_checkpoint(const std::filesystem::path& path, const NetworkSpec& spec,
                                 const msl::XiOptions& xi_options);

/// Single-owner training loop over one network.
///
/// Each iteration: draw batch -> flip -> forward all heads -> averaged MSL ->
/// backward -> SGD momentum step -> per-head xi update -> log. All randomness
/// is derived from (seed, iteration), so runs are reproducible and resumable.
class Trainer {
 public:
  Trainer(TrainConfig config, const NetworkSpec& spec, const data::LabeledDataset& train,
          const data::LabeledDataset* test = nullptr);

  /// Runs one iteration and returns its record.
  const IterationRecord& step();
  /// Steps until config.iterations have completed.
  void run();
  void run(std::uint64_t steps);

  /// Appends every record to `path` (header first) and flushes at evaluation points.
  void stream_csv(const std::filesystem::path& path);

  void save(const std::filesystem::path& path) const;
  /// Replaces network, optimizer, xi and iteration with a checkpoint's.
  void restore(const std::filesystem::path& path);

  const TrainConfig& config() const { return config_; }
  const NetworkState<float>& state() const { return state_; }
  const OptimizerState<float>& optimizer() const { return optimizer_; }
  const std::vector<msl::XiState>& xi() const { return xi_; }
  const TrainLog& log() const { return log_; }
  std::uint64_t iteration() const { return iteration_; }

 private:
  TrainConfig config_;
  const data::LabeledDataset& train_;
  const data::LabeledDataset* test_;
  NetworkState<float> state_;
  OptimizerState<float> optimizer_;
  std::vector<msl::XiState> xi_;
  data::BatchSampler sampler_;
  TrainLog log_;
  std::uint64_t iteration_ = 0;
  std::unique_ptr<std::ofstream> csv_;
};

struct TrainResult {
  NetworkState<float> state;
  TrainLog log;
  OptimizerState<float> optimizer;
  std::vector<msl::XiState> xi;
};

/// Builds a network from `spec` (seeded by config.seed) and trains it.
TrainResult train(const TrainConfig& config, const NetworkSpec& spec, const data::LabeledDataset& train_set,
                  const data::LabeledDataset* test_set = nullptr);

}  // namespace msn::train
