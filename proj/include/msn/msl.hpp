#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <vector>

#include "msn/tensor.hpp"

// Mixture separability loss: softmax cross-entropy between classes plus a
// squared hinge on the mean pairwise logit distance within each class.
//
// All computations run in double precision on an (N, c) logit matrix. The
// functions are pure; XiState is the only mutable piece and belongs to one
// training loop.

namespace msn::msl {

/// Post-FC logits q (N x c) and their labels.
class LogitBatch {
 public:
  /// Throws std::invalid_argument unless N >= 1, c >= 2, labels.size() == N and
  /// every label is in [0, c).
  LogitBatch(Tensor64 logits, std::vector<int> labels);

  const Tensor64& logits() const { return logits_; }
  const std::vector<int>& labels() const { return labels_; }
  std::size_t size() const { return labels_.size(); }
  std::size_t classes() const { return logits_.shape()[1]; }
  double q(std::size_t sample, std::size_t k) const { return logits_.at(sample, k); }

 private:
  Tensor64 logits_;
  std::vector<int> labels_;
};

/// Pairs of same-class samples: lambda = mu (mu - 1) / 2, and 0 for mu < 2.
std::uint64_t pair_count(std::uint64_t mu);

/// Batch indices grouped by label.
struct ClassPartition {
  std::vector<std::vector<std::size_t>> members;

  static ClassPartition of(const std::vector<int>& labels, std::size_t classes);
  std::size_t mu(std::size_t j) const { return members.at(j).size(); }
  std::uint64_t lambda(std::size_t j) const { return pair_count(mu(j)); }
};

/// How a same-class pair's logit distance is measured.
enum class DistanceMode {
  euclidean,      ///< ||q(i) - q(i*)||_2 over the c logits
  per_component,  ///< sum_k |q_k(i) - q_k(i*)|
};

struct MslOptions {
  DistanceMode distance = DistanceMode::euclidean;
  /// Scales the within-class term in the total. 0 reduces the loss to plain
  /// cross-entropy; anything other than 1 is an ablation.
  double within_weight = 1.0;
  /// Pairs closer than this contribute no gradient.
  double zero_distance_guard = 1e-12;
};

/// Row-wise softmax with max subtraction. Throws NumericError on non-finite logits.
Tensor64 softmax_probs(const LogitBatch& q);

struct LossAndGradient {
  double value = 0.0;
  Tensor64 gradient;  // d value / d logits, same shape as the logits
};

/// Batch-mean cross-entropy. Gradient is (p - onehot(y)) / N.
LossAndGradient between_class_loss(const LogitBatch& q);

/// Mean pairwise distance among the class-j samples. Throws
/// std::invalid_argument when the class has fewer than two samples.
double in_class_distance(const LogitBatch& q, const ClassPartition& partition, std::size_t j,
                         DistanceMode mode = DistanceMode::euclidean);

struct WithinClassResult {
  double value = 0.0;
  Tensor64 gradient;
  /// d_j for every class with at least two samples.
  std::map<int, double> per_class_distance;
};

/// sum_j max(0, d_j - xi)^2 over classes with mu_j >= 2, not normalized by N.
WithinClassResult within_class_loss(const LogitBatch& q, double xi, const MslOptions& options = {});

struct LossBreakdown {
  double between = 0.0;
  double within = 0.0;
  /// between + within_weight * within.
  double total = 0.0;
  std::map<int, double> per_class_distance;
};

struct MslResult {
  LossBreakdown loss;
  Tensor64 gradient;
};

MslResult msl_total(const LogitBatch& q, double xi, const MslOptions& options = {});

struct XiOptions {
  double initial = 0.5;
  double decay = 0.9;
  /// Plateau test compares the means of two consecutive windows of this length.
  std::size_t window = 100;
  double plateau_tol = 1e-3;
  double floor = 1e-4;

  bool operator==(const XiOptions& other) const = default;
};

/// Adaptive margin for the within-class hinge.
///
/// xi starts at `initial` and is multiplied by `decay` each time the
/// within-class loss plateaus, never dropping below `floor`.
class XiState {
 public:
  XiState() : XiState(XiOptions{}) {}
  explicit XiState(const XiOptions& options);

  double xi() const { return xi_; }
  /// Number of plateaus detected so far.
  std::uint64_t decays() const { return decays_; }
  const XiOptions& options() const { return options_; }
  const std::deque<double>& history() const { return history_; }

  /// Records one within-class loss value. Returns true when it triggered a decay.
  bool observe(double within_loss);

  /// Flat encoding for checkpoints: xi, decays, then the history values.
  std::vector<double> serialize() const;
  static XiState deserialize(const XiOptions& options, const std::vector<double>& values);

  bool operator==(const XiState& other) const = default;

 private:
  XiOptions options_;
  double xi_;
  std::uint64_t decays_ = 0;
  std::deque<double> history_;
};

/// Functional form of XiState::observe.
XiState xi_update(XiState state, double current_within_loss);

}  // namespace msn::msl
