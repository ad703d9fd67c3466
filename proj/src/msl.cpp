#include "msn/msl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace msn::msl {

LogitBatch::LogitBatch(Tensor64 logits, std::vector<int> labels) : logits_(std::move(logits)), labels_(std::move(labels)) {
  if (logits_.shape().rank() != 2) {
    throw std::invalid_argument("LogitBatch: logits must be (N, c), got " + logits_.shape().str());
  }
  if (logits_.shape()[1] < 2) throw std::invalid_argument("LogitBatch: need at least two classes");
  if (labels_.size() != logits_.shape()[0]) {
    throw std::invalid_argument("LogitBatch: " + std::to_string(labels_.size()) + " labels for " +
                                std::to_string(logits_.shape()[0]) + " logit rows");
  }
  const int c = static_cast<int>(logits_.shape()[1]);
  for (int y : labels_) {
    if (y < 0 || y >= c) {
      throw std::invalid_argument("LogitBatch: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
  }
}

std::uint64_t pair_count(std::uint64_t mu) { return mu < 2 ? 0 : mu * (mu - 1) / 2; }

ClassPartition ClassPartition::of(const std::vector<int>& labels, std::size_t classes) {
  ClassPartition p;
  p.members.resize(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) p.members.at(static_cast<std::size_t>(labels[i])).push_back(i);
  return p;
}

Tensor64 softmax_probs(const LogitBatch& q) {
  require_finite(q.logits(), "logits");
  const std::size_t n = q.size(), c = q.classes();
  Tensor64 p(Shape{n, c});
  for (std::size_t i = 0; i < n; ++i) {
    double m = q.q(i, 0);
    for (std::size_t k = 1; k < c; ++k) m = std::max(m, q.q(i, k));
    double sum = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      p.at(i, k) = std::exp(q.q(i, k) - m);
      sum += p.at(i, k);
    }
    for (std::size_t k = 0; k < c; ++k) p.at(i, k) /= sum;
  }
  return p;
}

LossAndGradient between_class_loss(const LogitBatch& q) {
  const std::size_t n = q.size(), c = q.classes();
  LossAndGradient out{0.0, softmax_probs(q)};
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(q.labels()[i]);
    std::size_t top = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (q.q(i, k) > q.q(i, top)) top = k;
    }
    // -log p_y = (m - q_y) + log(1 + sum_{k != top} exp(q_k - m)); log1p keeps
    // confident rows accurate.
    const double m = q.q(i, top);
    double rest = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      if (k != top) rest += std::exp(q.q(i, k) - m);
    }
    out.value += (m - q.q(i, y)) + std::log1p(rest);
    for (std::size_t k = 0; k < c; ++k) {
      out.gradient.at(i, k) = (out.gradient.at(i, k) - (k == y ? 1.0 : 0.0)) * inv_n;
    }
  }
  out.value *= inv_n;
  return out;
}

namespace {

double pair_distance(const LogitBatch& q, std::size_t a, std::size_t b, DistanceMode mode) {
  double acc = 0.0;
  for (std::size_t k = 0; k < q.classes(); ++k) {
    const double d = q.q(a, k) - q.q(b, k);
    acc += mode == DistanceMode::euclidean ? d * d : std::abs(d);
  }
  return mode == DistanceMode::euclidean ? std::sqrt(acc) : acc;
}

}  // namespace

double in_class_distance(const LogitBatch& q, const ClassPartition& partition, std::size_t j, DistanceMode mode) {
  const auto& members = partition.members.at(j);
  if (members.size() < 2) {
    throw std::invalid_argument("in_class_distance: class " + std::to_string(j) + " has " +
                                std::to_string(members.size()) + " samples, need at least 2");
  }
  double sum = 0.0;
  for (std::size_t a = 0; a < members.size(); ++a) {
    for (std::size_t b = a + 1; b < members.size(); ++b) sum += pair_distance(q, members[a], members[b], mode);
  }
  return sum / static_cast<double>(partition.lambda(j));
}

WithinClassResult within_class_loss(const LogitBatch& q, double xi, const MslOptions& options) {
  if (!(xi > 0.0)) throw std::invalid_argument("within_class_loss: xi must be positive");
  require_finite(q.logits(), "logits");
  const std::size_t c = q.classes();
  const auto partition = ClassPartition::of(q.labels(), c);
  WithinClassResult out{0.0, Tensor64(q.logits().shape()), {}};
  std::vector<double> diff(c);

  for (std::size_t j = 0; j < c; ++j) {
    const auto& members = partition.members[j];
    if (members.size() < 2) continue;
    const double d = in_class_distance(q, partition, j, options.distance);
    out.per_class_distance[static_cast<int>(j)] = d;
    const double excess = d - xi;
    if (excess <= 0.0) continue;
    out.value += excess * excess;

    const double coef = 2.0 * excess / static_cast<double>(partition.lambda(j));
    for (std::size_t a = 0; a < members.size(); ++a) {
      for (std::size_t b = a + 1; b < members.size(); ++b) {
        const std::size_t ia = members[a], ib = members[b];
        for (std::size_t k = 0; k < c; ++k) diff[k] = q.q(ia, k) - q.q(ib, k);
        if (options.distance == DistanceMode::euclidean) {
          double norm = 0.0;
          for (double v : diff) norm += v * v;
          norm = std::sqrt(norm);
          if (norm < options.zero_distance_guard) continue;
          for (std::size_t k = 0; k < c; ++k) {
            const double g = coef * diff[k] / norm;
            out.gradient.at(ia, k) += g;
            out.gradient.at(ib, k) -= g;
          }
        } else {
          for (std::size_t k = 0; k < c; ++k) {
            if (std::abs(diff[k]) < options.zero_distance_guard) continue;
            const double g = diff[k] > 0.0 ? coef : -coef;
            out.gradient.at(ia, k) += g;
            out.gradient.at(ib, k) -= g;
          }
        }
      }
    }
  }
  return out;
}

MslResult msl_total(const LogitBatch& q, double xi, const MslOptions& options) {
  auto between = between_class_loss(q);
  auto within = within_class_loss(q, xi, options);
  MslResult out;
  out.loss.between = between.value;
  out.loss.within = within.value;
  out.loss.total = between.value + options.within_weight * within.value;
  out.loss.per_class_distance = std::move(within.per_class_distance);
  out.gradient = std::move(between.gradient);
  if (options.within_weight != 0.0) {
    for (std::size_t i = 0; i < out.gradient.size(); ++i) {
      out.gradient[i] += options.within_weight * within.gradient[i];
    }
  }
  return out;
}

XiState::XiState(const XiOptions& options) : options_(options), xi_(options.initial) {
  if (!(options.initial > 0.0) || !(options.decay > 0.0 && options.decay < 1.0) || options.window == 0 ||
      !(options.floor > 0.0)) {
    throw std::invalid_argument("XiState: need initial > 0, decay in (0, 1), window >= 1, floor > 0");
  }
  xi_ = std::max(options_.floor, options_.initial);
}

bool XiState::observe(double within_loss) {
  const std::size_t w = options_.window;
  history_.push_back(within_loss);
  if (history_.size() > 2 * w) history_.pop_front();
  if (history_.size() < 2 * w) return false;

  const double previous = std::accumulate(history_.begin(), history_.begin() + static_cast<long>(w), 0.0) /
                          static_cast<double>(w);
  const double latest =
      std::accumulate(history_.begin() + static_cast<long>(w), history_.end(), 0.0) / static_cast<double>(w);
  const double change = std::abs(latest - previous) / std::max(previous, 1e-12);
  if (change >= options_.plateau_tol) return false;

  ++decays_;
  xi_ = std::max(options_.floor, options_.initial * std::pow(options_.decay, static_cast<double>(decays_)));
  history_.clear();
  return true;
}

std::vector<double> XiState::serialize() const {
  std::vector<double> out{xi_, static_cast<double>(decays_)};
  out.insert(out.end(), history_.begin(), history_.end());
  return out;
}

XiState XiState::deserialize(const XiOptions& options, const std::vector<double>& values) {
  if (values.size() < 2 || values.size() - 2 > 2 * options.window) {
    throw std::invalid_argument("XiState: malformed serialized state");
  }
  XiState s(options);
  s.xi_ = values[0];
  s.decays_ = static_cast<std::uint64_t>(values[1]);
  s.history_.assign(values.begin() + 2, values.end());
  return s;
}

XiState xi_update(XiState state, double current_within_loss) {
  state.observe(current_within_loss);
  return state;
}

}  // namespace msn::msl
