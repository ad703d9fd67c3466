#include "msn/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>

#include "msn/autograd.hpp"
#include "msn/checkpoint.hpp"
#include "msn/data.hpp"
#include "msn/grad_check.hpp"
#include "msn/msl.hpp"
#include "msn/network.hpp"
#include "msn/random.hpp"
#include "msn/trainer.hpp"

namespace msn::verify {
namespace {

constexpr double kGradTolerance = 1e-4;

Tensor64 random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Tensor64 t(shape);
  for (auto& v : t.values()) v = normal(rng);
  return t;
}

/// Values whose magnitudes are at least `gap`, so ReLU kinks are never crossed.
Tensor64 away_from_zero(const Shape& shape, std::mt19937_64& rng, double gap) {
  std::uniform_real_distribution<double> mag(gap, 1.0 + gap);
  std::bernoulli_distribution sign(0.5);
  Tensor64 t(shape);
  for (auto& v : t.values()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

/// Distinct values spaced by `gap`, so max-pool winners never change under a small step.
Tensor64 distinct_values(const Shape& shape, std::mt19937_64& rng, double gap) {
  Tensor64 t(shape);
  std::vector<std::size_t> order(t.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = gap * static_cast<double>(order[i]) - 0.5 * gap * t.size();
  return t;
}

using Builder = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

/// Checks d/d input of sum(op(inputs) * R) for every input tensor.
CheckResult op_check(const std::string& name, std::vector<Tensor64> inputs, const Builder& build,
                     std::mt19937_64& rng) {
  Tensor64 weights;
  const auto run = [&](const std::vector<Tensor64>& xs, std::vector<Tensor64>* grads) {
    Tape<double> tape;
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(tape.leaf(x, true));
    const Var out = build(tape, vars);
    if (weights.size() == 0) weights = random_tensor(tape.value(out).shape(), rng);
    double loss = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) loss += tape.value(out)[i] * weights[i];
    if (grads != nullptr) {
      tape.backward({{out, weights}});
      for (const Var v : vars) grads->push_back(tape.grad(v));
    }
    return loss;
  };

  std::vector<Tensor64> analytic;
  run(inputs, &analytic);
  CheckResult result{"gradcheck." + name, 0.0, kGradTolerance, true};
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto f = [&](std::span<const double> x) {
      std::vector<Tensor64> xs = inputs;
      std::copy(x.begin(), x.end(), xs[k].data());
      return run(xs, nullptr);
    };
    const auto r = grad_check(f, analytic[k].values(), inputs[k].values());
    result.worst_error = std::max(result.worst_error, r.max_relative_error);
  }
  result.pass = result.worst_error <= result.tolerance;
  return result;
}

std::vector<int> random_labels(std::size_t n, std::size_t classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, static_cast<int>(classes) - 1);
  std::vector<int> labels(n);
  for (int& y : labels) y = pick(rng);
  return labels;
}

/// Straightforward sum over every unordered same-class pair.
double brute_force_within(const msl::LogitBatch& q, double xi) {
  double total = 0.0;
  for (std::size_t j = 0; j < q.classes(); ++j) {
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < q.size(); ++a) {
      for (std::size_t b = a + 1; b < q.size(); ++b) {
        if (q.labels()[a] != static_cast<int>(j) || q.labels()[b] != static_cast<int>(j)) continue;
        double sq = 0.0;
        for (std::size_t k = 0; k < q.classes(); ++k) sq += (q.q(a, k) - q.q(b, k)) * (q.q(a, k) - q.q(b, k));
        sum += std::sqrt(sq);
        ++pairs;
      }
    }
    if (pairs == 0) continue;
    const double excess = std::max(0.0, sum / static_cast<double>(pairs) - xi);
    total += excess * excess;
  }
  return total;
}

double relative(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

CheckResult finish(CheckResult r) {
  r.pass = r.worst_error <= r.tolerance;
  return r;
}

CheckResult check_msl_gradient(std::uint64_t seed) {
  auto rng = derive_rng(seed, 11, Stream::synthetic);
  CheckResult r{"gradcheck.msl_total", 0.0, kGradTolerance, true};
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = 12;
    const std::size_t c = 4;
    const auto labels = random_labels(n, c, rng);
    const Tensor64 logits = random_tensor(Shape{n, c}, rng, 2.0);
    const double xi = 0.5;
    const auto result = msl::msl_total(msl::LogitBatch(logits, labels), xi);
    const auto f = [&](std::span<const double> x) {
      return msl::msl_total(msl::LogitBatch(Tensor64(logits.shape(), {x.begin(), x.end()}), labels), xi).loss.total;
    };
    r.worst_error = std::max(r.worst_error, grad_check(f, result.gradient.values(), logits.values()).max_relative_error);
  }
  return finish(r);
}

}  // namespace

std::string format(const CheckResult& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s worst_error=%.3e tolerance=%.1e %s", r.name.c_str(), r.worst_error, r.tolerance,
                r.pass ? "PASS" : "FAIL");
  return buf;
}

CheckResult check_network_gradient(std::uint64_t seed) {
  NetworkSpec spec;
  spec.family = Family::resnet;
  spec.depth = 1;
  spec.width = 0.25;
  spec.attach = attachment_config(7);
  spec.classes = 3;
  spec.height = 8;
  spec.width_px = 8;
  spec.channels = 3;
  const NetworkState<double> base = build_network<double>(spec, seed);
  auto rng = derive_rng(seed, 12, Stream::synthetic);
  const Tensor64 images = random_tensor(Shape{4, 8, 8, 3}, rng);
  const std::vector<int> labels = {0, 0, 1, 1};
  const std::vector<msl::XiState> xi(base.heads().size());

  std::vector<std::size_t> trainable;
  std::vector<double> x;
  for (std::size_t i = 0; i < base.params.size(); ++i) {
    const auto& e = base.params.entries()[i];
    if (!e.trainable) continue;
    trainable.push_back(i);
    x.insert(x.end(), e.value.values().begin(), e.value.values().end());
  }

  const auto loss_of = [&](NetworkState<double>& state, std::vector<Tensor64>* grads) {
    auto pass = forward_heads(state, images, ops::Mode::train);
    std::vector<msl::LogitBatch> heads;
    for (std::size_t h = 0; h < pass.head_logits.size(); ++h) heads.emplace_back(pass.logits(h), labels);
    const auto loss = msn_loss(heads, xi);
    if (grads != nullptr) *grads = backward_heads(pass, state, loss.logit_gradients);
    return loss.aggregate.total;
  };

  NetworkState<double> state = base;
  std::vector<Tensor64> grads;
  loss_of(state, &grads);
  std::vector<double> analytic;
  for (std::size_t i : trainable) analytic.insert(analytic.end(), grads[i].values().begin(), grads[i].values().end());

  const auto f = [&](std::span<const double> v) {
    NetworkState<double> s = base;
    std::size_t offset = 0;
    for (std::size_t i : trainable) {
      auto& t = s.params.entries()[i].value;
      std::copy_n(v.begin() + static_cast<long>(offset), t.size(), t.data());
      offset += t.size();
    }
    return loss_of(s, nullptr);
  };
  // Biases feeding batch norm have an exact zero gradient; the finite
  // difference there is pure rounding noise (~1e-9 on a loss of order 10).
  GradCheckOptions options;
  options.magnitude_floor = 1e-4;
  options.refine_factors = {0.1, 0.01};
  const auto r = grad_check(f, analytic, x, options);
  return finish({"gradcheck.network_config7", r.max_relative_error, kGradTolerance, true});
}

CheckResult check_degeneracy(std::uint64_t seed, int batches) {
  auto rng = derive_rng(seed, 21, Stream::synthetic);
  CheckResult r{"oracle.degeneracy_bit_exact", 0.0, 0.0, true};
  for (int b = 0; b < batches; ++b) {
    const std::size_t c = 2 + static_cast<std::size_t>(rng() % 9);
    const std::size_t n = 1 + static_cast<std::size_t>(rng() % c);
    std::vector<int> labels(c);
    std::iota(labels.begin(), labels.end(), 0);
    std::shuffle(labels.begin(), labels.end(), rng);
    labels.resize(n);
    const msl::LogitBatch q(random_tensor(Shape{n, c}, rng, 3.0), labels);
    const auto total = msl::msl_total(q, 0.5);
    const auto between = msl::between_class_loss(q);
    double diff = std::abs(total.loss.total - between.value);
    for (std::size_t i = 0; i < between.gradient.size(); ++i) {
      diff = std::max(diff, std::abs(total.gradient[i] - between.gradient[i]));
    }
    if (total.loss.total != between.value || total.gradient != between.gradient) r.pass = false;
    r.worst_error = std::max(r.worst_error, diff);
  }
  r.pass = r.pass && r.worst_error == 0.0;
  return r;
}

CheckResult check_within_oracle(std::uint64_t seed, int batches) {
  auto rng = derive_rng(seed, 22, Stream::synthetic);
  CheckResult r{"oracle.within_class_brute_force", 0.0, 1e-10, true};
  std::uniform_real_distribution<double> xi_pick(0.0, 3.0);
  for (int b = 0; b < batches; ++b) {
    const std::size_t c = 2 + static_cast<std::size_t>(rng() % 9);
    const std::size_t n = 1 + static_cast<std::size_t>(rng() % 64);
    const msl::LogitBatch q(random_tensor(Shape{n, c}, rng, 2.0), random_labels(n, c, rng));
    const double xi = xi_pick(rng);
    const double fast = msl::within_class_loss(q, xi).value;
    const double slow = brute_force_within(q, xi);
    r.worst_error = std::max(r.worst_error, fast == slow ? 0.0 : relative(fast, slow));
  }
  return finish(r);
}

CheckResult check_xi_sequence() {
  msl::XiState state;
  const auto& o = state.options();
  std::vector<double> seen{state.xi()};
  // A constant feed is a plateau after every 2 * window observations.
  for (int i = 0; i < 400 * 100; ++i) {
    if (state.observe(1.0)) seen.push_back(state.xi());
  }
  CheckResult r{"invariants.xi_sequence", 0.0, 1e-15, true};
  std::vector<double> expected{0.5};
  for (int k = 1; expected.back() > o.floor; ++k) {
    expected.push_back(std::max(o.floor, o.initial * std::pow(o.decay, k)));
  }
  // Once at the floor, further decays repeat the floor value.
  if (seen.size() < expected.size()) {
    r.worst_error = 1.0;
  } else {
    for (std::size_t k = 0; k < seen.size(); ++k) {
      const double want = k < expected.size() ? expected[k] : o.floor;
      r.worst_error = std::max(r.worst_error, relative(seen[k], want));
    }
  }
  return finish(r);
}

CheckResult check_head_averaging(std::uint64_t seed, int trials_per_count) {
  auto rng = derive_rng(seed, 23, Stream::synthetic);
  CheckResult r{"oracle.head_averaging", 0.0, 1e-12, true};
  for (std::size_t heads = 1; heads <= 4; ++heads) {
    for (int t = 0; t < trials_per_count; ++t) {
      const std::size_t n = 16;
      const std::size_t c = 5;
      const auto labels = random_labels(n, c, rng);
      std::vector<msl::LogitBatch> batches;
      std::vector<msl::XiState> xi;
      double mean = 0.0;
      for (std::size_t h = 0; h < heads; ++h) {
        batches.emplace_back(random_tensor(Shape{n, c}, rng, 2.0), labels);
        msl::XiOptions o;
        o.initial = 0.2 + 0.3 * static_cast<double>(h);
        xi.emplace_back(o);
        mean += msl::msl_total(batches.back(), xi.back().xi()).loss.total;
      }
      mean /= static_cast<double>(heads);
      const double got = msn_loss(batches, xi).aggregate.total;
      r.worst_error = std::max(r.worst_error, std::abs(got - mean) / std::max(1.0, std::abs(mean)));
    }
  }
  return finish(r);
}

std::vector<CheckResult> gradcheck_suite(std::uint64_t seed) {
  auto rng = derive_rng(seed, 10, Stream::synthetic);
  std::vector<CheckResult> out;
  out.push_back(op_check("conv2d_3x3_pad1",
                         {random_tensor(Shape{2, 5, 5, 3}, rng), random_tensor(Shape{3, 3, 3, 4}, rng),
                          random_tensor(Shape{4}, rng)},
                         [](Tape<double>& t, const std::vector<Var>& v) { return ag::conv2d(t, v[0], v[1], v[2], 1, 1); },
                         rng));
  out.push_back(op_check("conv2d_stride2",
                         {random_tensor(Shape{2, 6, 6, 2}, rng), random_tensor(Shape{3, 3, 2, 3}, rng),
                          random_tensor(Shape{3}, rng)},
                         [](Tape<double>& t, const std::vector<Var>& v) { return ag::conv2d(t, v[0], v[1], v[2], 2, 0); },
                         rng));
  out.push_back(op_check("relu", {away_from_zero(Shape{3, 4, 4, 2}, rng, 0.1)},
                         [](Tape<double>& t, const std::vector<Var>& v) { return ag::relu(t, v[0]); }, rng));
  out.push_back(op_check("max_pool2", {distinct_values(Shape{2, 4, 6, 3}, rng, 0.1)},
                         [](Tape<double>& t, const std::vector<Var>& v) { return ag::max_pool2(t, v[0]); }, rng));
  out.push_back(op_check("global_average_pool", {random_tensor(Shape{3, 4, 5, 2}, rng)},
                         [](Tape<double>& t, const std::vector<Var>& v) { return ag::global_average_pool(t, v[0]); },
                         rng));
  out.push_back(op_check("linear",
                         {random_tensor(Shape{5, 7}, rng), random_tensor(Shape{7, 3}, rng), random_tensor(Shape{3}, rng)},
                         [](Tape<double>& t, const std::vector<Var>& v) { return ag::linear(t, v[0], v[1], v[2]); },
                         rng));
  out.push_back(op_check("batch_norm",
                         {random_tensor(Shape{4, 3, 3, 3}, rng), random_tensor(Shape{3}, rng),
                          random_tensor(Shape{3}, rng)},
                         [](Tape<double>& t, const std::vector<Var>& v) {
                           Tensor64 mean(Shape{3});
                           Tensor64 var(Shape{3}, 1.0);
                           return ag::batch_norm(t, v[0], v[1], v[2], mean, var, ops::Mode::train);
                         },
                         rng));
  out.push_back(op_check("residual_add", {random_tensor(Shape{2, 3, 3, 2}, rng), random_tensor(Shape{2, 3, 3, 2}, rng)},
                         [](Tape<double>& t, const std::vector<Var>& v) { return ag::add(t, v[0], v[1]); }, rng));
  out.push_back(check_msl_gradient(seed));
  out.push_back(check_network_gradient(seed));
  return out;
}

std::vector<CheckResult> oracle_suite(std::uint64_t seed) {
  return {check_within_oracle(seed), check_degeneracy(seed), check_head_averaging(seed)};
}

std::vector<CheckResult> invariants_suite(std::uint64_t seed) {
  std::vector<CheckResult> out;
  out.push_back(check_xi_sequence());
  auto rng = derive_rng(seed, 30, Stream::synthetic);

  {
    train::TrainConfig config;
    CheckResult r{"invariants.lr_schedule", 0.0, 1e-15, true};
    const double expected[][2] = {{0, 0.01}, {19999, 0.01}, {20000, 0.009}, {40000, 0.0081}};
    for (const auto& [it, lr] : expected) {
      r.worst_error = std::max(r.worst_error, relative(train::lr_schedule(config, static_cast<std::uint64_t>(it)), lr));
    }
    for (std::uint64_t it = 1; it < 100000; it += 997) {
      if (train::lr_schedule(config, it) > train::lr_schedule(config, it - 1)) r.worst_error = 1.0;
    }
    out.push_back(finish(r));
  }

  {
    CheckResult r{"invariants.momentum_recurrence", 0.0, 1e-12, true};
    ParamStore<double> params;
    params.add("w", random_tensor(Shape{6}, rng));
    const Tensor64 w0 = params.at("w");
    auto state = train::OptimizerState<double>::zeros_like(params);
    const Tensor64 g1 = random_tensor(Shape{6}, rng);
    const Tensor64 g2 = random_tensor(Shape{6}, rng);
    const double lr = 0.01;
    train::sgd_momentum_step(params, {g1}, state, lr, 0.9);
    train::sgd_momentum_step(params, {g2}, state, lr, 0.9);
    for (std::size_t i = 0; i < 6; ++i) {
      const double want = w0[i] - lr * g1[i] - lr * (0.9 * g1[i] + g2[i]);
      r.worst_error = std::max(r.worst_error, std::abs(params.at("w")[i] - want));
    }
    out.push_back(finish(r));
  }

  {
    CheckResult r{"invariants.msl_permutation", 0.0, 1e-12, true};
    for (int t = 0; t < 20; ++t) {
      const std::size_t n = 20;
      const std::size_t c = 4;
      const auto labels = random_labels(n, c, rng);
      const Tensor64 logits = random_tensor(Shape{n, c}, rng, 2.0);
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      Tensor64 permuted(logits.shape());
      std::vector<int> permuted_labels(n);
      for (std::size_t i = 0; i < n; ++i) {
        permuted_labels[i] = labels[perm[i]];
        for (std::size_t k = 0; k < c; ++k) permuted.at(i, k) = logits.at(perm[i], k);
      }
      const double a = msl::msl_total(msl::LogitBatch(logits, labels), 0.5).loss.total;
      const double b = msl::msl_total(msl::LogitBatch(permuted, permuted_labels), 0.5).loss.total;
      r.worst_error = std::max(r.worst_error, relative(a, b));
    }
    out.push_back(finish(r));
  }

  {
    CheckResult r{"invariants.msl_shift", 0.0, 1e-10, true};
    std::normal_distribution<double> shift(0.0, 5.0);
    for (int t = 0; t < 20; ++t) {
      const std::size_t n = 20;
      const std::size_t c = 4;
      const auto labels = random_labels(n, c, rng);
      const Tensor64 logits = random_tensor(Shape{n, c}, rng, 2.0);
      Tensor64 shifted = logits;
      const double s = shift(rng);
      for (auto& v : shifted.values()) v += s;
      const double a = msl::msl_total(msl::LogitBatch(logits, labels), 0.5).loss.total;
      const double b = msl::msl_total(msl::LogitBatch(shifted, labels), 0.5).loss.total;
      r.worst_error = std::max(r.worst_error, relative(a, b));
    }
    out.push_back(finish(r));
  }

  {
    CheckResult r{"invariants.flip_involution", 0.0, 0.0, true};
    Tensor images = random_tensor(Shape{3, 4, 5, 3}, rng).cast<float>();
    const Tensor original = images;
    for (std::size_t i = 0; i < 3; ++i) {
      data::flip_horizontal(images, i);
      data::flip_horizontal(images, i);
    }
    r.pass = images == original;
    r.worst_error = r.pass ? 0.0 : 1.0;
    out.push_back(r);
  }

  {
    CheckResult r{"invariants.checkpoint_roundtrip", 0.0, 0.0, true};
    ckpt::Checkpoint c;
    c.tensors.push_back({"a", random_tensor(Shape{2, 3}, rng).cast<float>()});
    c.tensors.push_back({"b", random_tensor(Shape{4}, rng)});
    const auto bytes = ckpt::encode(c);
    r.pass = ckpt::decode(bytes) == c && ckpt::encode(ckpt::decode(bytes)) == bytes;
    r.worst_error = r.pass ? 0.0 : 1.0;
    out.push_back(r);
  }
  return out;
}

}  // namespace msn::verify
