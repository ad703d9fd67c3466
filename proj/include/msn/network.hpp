#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "msn/autograd.hpp"
#include "msn/msl.hpp"
#include "msn/ops.hpp"
#include "msn/tensor.hpp"

namespace msn {

enum class Family { vgg, resnet, wide_resnet };

std::string to_string(Family family);
Family family_from_string(const std::string& name);

/// Blocks carrying a separability head for the seven named attachment
/// configurations (1 = last block only ... 7 = every block). Throws
/// std::invalid_argument outside 1-7.
std::vector<int> attachment_config(int config);

/// Architecture of a trunk of up to four convolutional blocks separated by
/// 2x2 max pooling, with classifier heads (GAP + FC) on selected blocks.
///
/// vgg:         blocks of 3/4/4/4 conv+ReLU layers, 64/128/256/512 channels.
/// resnet:      one plain conv (16 ch), then `depth` pre-activation residual
///              blocks per stage at 16/32/64 channels.
/// wide_resnet: resnet with stage 2-4 channels multiplied by `widen`.
///
/// Every channel count is further scaled by `width` (rounded to nearest).
struct NetworkSpec {
  Family family = Family::resnet;
  std::size_t depth = 1;
  double width = 1.0;
  std::size_t widen = 10;
  /// Trunk length; 4 is the full network, fewer truncates it.
  std::size_t blocks = 4;
  std::vector<int> attach = {4};
  std::size_t classes = 10;
  std::size_t height = 32;
  std::size_t width_px = 32;
  std::size_t channels = 3;
  ops::BatchNormOptions batch_norm;

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  /// Output channels of each block, after scaling.
  std::vector<std::size_t> block_channels() const;
  /// Number of conv layers in a VGG block (1-based block index).
  static std::size_t vgg_convs(std::size_t block) { return block == 1 ? 3 : 4; }
};

/// Named tensors of a network: trainable weights plus batch-norm running
/// statistics. Insertion order is stable and names are unique.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    BasicTensor<T> value;
    bool trainable = true;

    bool operator==(const Entry& other) const = default;
  };

  /// Throws std::invalid_argument on a duplicate name.
  void add(std::string name, BasicTensor<T> value, bool trainable = true);
  std::optional<std::size_t> find(const std::string& name) const;
  BasicTensor<T>& at(const std::string& name);
  const BasicTensor<T>& at(const std::string& name) const;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  /// Total element count over trainable entries.
  std::size_t trainable_count() const;

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.trainable);
    return out;
  }

  bool operator==(const ParamStore& other) const = default;

 private:
  std::vector<Entry> entries_;
};

/// Describes one separability head: GAP + FC on a block's output.
struct MsmHead {
  int block = 4;
  std::size_t features = 0;  // d, channels of the attached block
  std::size_t classes = 0;
  std::string weight_name() const { return "head" + std::to_string(block) + ".fc.weight"; }
  std::string bias_name() const { return "head" + std::to_string(block) + ".fc.bias"; }
};

template <typename T>
struct NetworkState {
  NetworkSpec spec;
  ParamStore<T> params;

  /// Heads ordered by block index.
  std::vector<MsmHead> heads() const;

  template <typename U>
  NetworkState<U> cast() const {
    return NetworkState<U>{spec, params.template cast<U>()};
  }
};

/// Builds and initializes a network. Conv and FC weights are drawn from
/// N(0, 2 / fan_in); biases and batch-norm shifts start at 0, scales at 1.
template <typename T>
NetworkState<T> build_network(const NetworkSpec& spec, std::uint64_t seed);

/// One forward pass: the tape holding the graph, one logit node per head
/// (ordered by block index) and the tape leaf of every ParamStore entry.
template <typename T>
struct ForwardPass {
  Tape<T> tape;
  std::vector<Var> head_logits;
  std::vector<int> head_blocks;
  std::vector<std::optional<Var>> param_vars;

  const BasicTensor<T>& logits(std::size_t head) const { return tape.value(head_logits.at(head)); }
};

/// Runs the trunk once and evaluates every head on it. Train mode uses batch
/// statistics and updates the running statistics stored in `state`.
template <typename T>
ForwardPass<T> forward_heads(NetworkState<T>& state, const BasicTensor<T>& images, ops::Mode mode);

/// Inference-mode forward pass; never modifies `state`.
template <typename T>
ForwardPass<T> forward_heads(const NetworkState<T>& state, const BasicTensor<T>& images);

/// Backpropagates per-head logit gradients and returns d loss / d param for
/// every ParamStore entry (zeros for non-trainable ones).
template <typename T>
std::vector<BasicTensor<T>> backward_heads(ForwardPass<T>& pass, const NetworkState<T>& state,
                                           const std::vector<Tensor64>& logit_gradients);

struct MsnLossResult {
  /// Mean over heads of between, within, and total.
  msl::LossBreakdown aggregate;
  std::vector<msl::LossBreakdown> per_head;
  /// d aggregate / d logits for each head; already scaled by 1 / heads.
  std::vector<Tensor64> logit_gradients;
};

/// Average of per-head mixture separability losses. Heads must share labels.
/// Throws std::invalid_argument on an empty list or a label mismatch.
MsnLossResult msn_loss(const std::vector<msl::LogitBatch>& heads, const std::vector<msl::XiState>& xi,
                       const msl::MslOptions& options = {});

/// Feeds each head's within-class loss to its own XiState.
void update_xi(std::vector<msl::XiState>& xi, const MsnLossResult& loss);

/// Row-wise argmax; ties go to the lowest class index.
std::vector<int> argmax_rows(const Tensor64& scores);

enum class PredictHead { deepest, averaged };

/// Class predictions from the deepest head (or the mean of all head logits).
template <typename T>
std::vector<int> predict(const NetworkState<T>& state, const BasicTensor<T>& images,
                         PredictHead head = PredictHead::deepest);

}  // namespace msn
