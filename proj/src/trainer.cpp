#include "msn/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "msn/random.hpp"

namespace msn::train {

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("train." + field + ": " + why);
  };
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum", "must be in [0, 1)");
  if (!(lr > 0.0)) fail("lr", "must be positive");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) fail("lr_decay", "must be in (0, 1]");
  if (lr_period < 1) fail("lr_period", "must be >= 1");
  if (eval_interval < 1) fail("eval_interval", "must be >= 1");
  if (batching == data::BatchMode::class_aware && batch_size < 2) fail("batch_size", "class-aware batching needs >= 2");
  if (!(loss.within_weight >= 0.0)) fail("within_weight", "must be non-negative");
  msl::XiState check(xi);
  (void)check;
}

double lr_schedule(const TrainConfig& config, std::uint64_t iteration) {
  const auto drops = static_cast<double>(iteration / config.lr_period);
  return config.lr * std::pow(config.lr_decay, drops);
}

template <typename T>
OptimizerState<T> OptimizerState<T>::zeros_like(const ParamStore<T>& params) {
  OptimizerState<T> s;
  for (const auto& e : params.entries()) {
    if (e.trainable) s.velocity.add(e.name, BasicTensor<T>(e.value.shape()));
  }
  return s;
}

template <typename T>
void sgd_momentum_step(ParamStore<T>& params, const std::vector<BasicTensor<T>>& grads, OptimizerState<T>& state,
                       double lr, double momentum) {
  auto& entries = params.entries();
  if (grads.size() != entries.size()) {
    throw std::invalid_argument("sgd_momentum_step: " + std::to_string(grads.size()) + " gradients for " +
                                std::to_string(entries.size()) + " parameters");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!entries[i].trainable) continue;
    require_same_shape(entries[i].value.shape(), grads[i].shape(), "gradient of " + entries[i].name);
    require_finite(grads[i], "gradient of " + entries[i].name);
  }
  const T mu = static_cast<T>(momentum);
  const T rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (!entries[i].trainable) continue;
    auto& v = state.velocity.at(entries[i].name);
    auto& w = entries[i].value;
    require_same_shape(v.shape(), w.shape(), "velocity of " + entries[i].name);
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = mu * v[k] - rate * grads[i][k];
      w[k] += v[k];
    }
  }
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void sgd_momentum_step(ParamStore<float>&, const std::vector<Tensor>&, OptimizerState<float>&, double, double);
template void sgd_momentum_step(ParamStore<double>&, const std::vector<Tensor64>&, OptimizerState<double>&, double,
                                double);

namespace {

void append_number(std::string& out, double v, const char* format) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  out += buf;
}

}  // namespace

std::string csv_row(const IterationRecord& r) {
  std::string out = std::to_string(r.iteration);
  out += ',';
  append_number(out, r.lr, "%.9g");
  for (const auto& xi : r.xi) {
    out += ',';
    if (xi) append_number(out, *xi, "%.9g");
  }
  for (double v : {r.loss_total, r.loss_between, r.loss_within}) {
    out += ',';
    append_number(out, v, "%.9g");
  }
  out += ',';
  append_number(out, r.train_error, "%.6f");
  out += ',';
  if (r.test_error) append_number(out, *r.test_error, "%.6f");
  return out;
}

std::string TrainLog::to_csv() const {
  std::string out = kCsvHeader;
  out += '\n';
  for (const auto& r : records) {
    out += csv_row(r);
    out += '\n';
  }
  return out;
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_csv();
}

double evaluate(const NetworkState<float>& state, const data::LabeledDataset& dataset, std::size_t batch_size,
                PredictHead head) {
  if (dataset.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  std::size_t wrong = 0;
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < dataset.size(); begin += batch_size) {
    const std::size_t end = std::min(begin + batch_size, dataset.size());
    idx.resize(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    const auto batch = dataset.gather(idx);
    const auto predicted = predict(state, batch.images, head);
    for (std::size_t i = 0; i < predicted.size(); ++i) wrong += predicted[i] != batch.labels[i];
  }
  return static_cast<double>(wrong) / static_cast<double>(dataset.size());
}

void save_checkpoint(const std::filesystem::path& path, const NetworkState<float>& state,
                     const OptimizerState<float>& optimizer, const std::vector<msl::XiState>& xi,
                     std::uint64_t iteration, std::uint64_t seed) {
  ckpt::Checkpoint c;
  for (const auto& e : state.params.entries()) c.tensors.push_back({e.name, e.value});
  for (const auto& e : optimizer.velocity.entries()) c.tensors.push_back({"opt." + e.name, e.value});
  const auto heads = state.heads();
  if (heads.size() != xi.size()) throw std::invalid_argument("save_checkpoint: xi count does not match heads");
  for (std::size_t h = 0; h < heads.size(); ++h) {
    auto values = xi[h].serialize();
    const std::size_t n = values.size();
    c.tensors.push_back({"xi.head" + std::to_string(heads[h].block), Tensor64(Shape{n}, std::move(values))});
  }
  c.tensors.push_back({"trainer.iteration", Tensor64(Shape{1}, {static_cast<double>(iteration)})});
  c.tensors.push_back({"trainer.seed", Tensor64(Shape{2}, {static_cast<double>(seed & 0xffffffffu),
                                                            static_cast<double>(seed >> 32)})});
  ckpt::write_file(path, c);
}

TrainingSnapshot load_checkpoint(const std::filesystem::path& path, const NetworkSpec& spec,
                                 const msl::XiOptions& xi_options) {
  using ckpt::CheckpointError;
  const ckpt::Checkpoint c = ckpt::read_file(path);
  // The freshly built network supplies the expected names and shapes.
  NetworkState<float> reference = build_network<float>(spec, 0);
  TrainingSnapshot snap;
  for (const auto& e : reference.params.entries()) {
    const Tensor& t = c.f32(e.name);
    if (t.shape() != e.value.shape()) {
      throw CheckpointError(CheckpointError::Kind::malformed, "tensor '" + e.name + "' has shape " +
                                                                  t.shape().str() + ", network expects " +
                                                                  e.value.shape().str());
    }
    snap.params.add(e.name, t, e.trainable);
    if (e.trainable) {
      const ckpt::NamedTensor* v = c.find("opt." + e.name);
      snap.optimizer.velocity.add(e.name, v ? c.f32("opt." + e.name) : Tensor(e.value.shape()));
      require_same_shape(snap.optimizer.velocity.at(e.name).shape(), e.value.shape(), "velocity of " + e.name);
    }
  }
  for (const auto& head : reference.heads()) {
    const std::string name = "xi.head" + std::to_string(head.block);
    if (c.find(name)) {
      const auto& t = c.f64(name);
      snap.xi.push_back(msl::XiState::deserialize(xi_options, {t.values().begin(), t.values().end()}));
    } else {
      snap.xi.emplace_back(xi_options);
    }
  }
  if (c.find("trainer.iteration")) snap.iteration = static_cast<std::uint64_t>(c.f64("trainer.iteration")[0]);
  if (c.find("trainer.seed")) {
    const auto& s = c.f64("trainer.seed");
    snap.seed = static_cast<std::uint64_t>(s[0]) | (static_cast<std::uint64_t>(s[1]) << 32);
  }
  return snap;
}

Trainer::Trainer(TrainConfig config, const NetworkSpec& spec, const data::LabeledDataset& train,
                 const data::LabeledDataset* test)
    : config_(std::move(config)),
      train_(train),
      test_(test),
      state_(build_network<float>(spec, config_.seed)),
      optimizer_(OptimizerState<float>::zeros_like(state_.params)),
      sampler_(train.labels, train.classes, config_.batch_size, config_.batching, config_.seed) {
  config_.validate();
  train_.validate();
  if (train_.size() == 0) throw std::invalid_argument("trainer: empty training set");
  if (train_.classes != spec.classes) {
    throw std::invalid_argument("trainer: dataset has " + std::to_string(train_.classes) + " classes, network " +
                                std::to_string(spec.classes));
  }
  xi_.assign(state_.heads().size(), msl::XiState(config_.xi));
}

const IterationRecord& Trainer::step() {
  const std::uint64_t it = iteration_;
  const auto indices = sampler_.batch(it);
  auto batch = train_.gather(indices);
  if (config_.flip) {
    auto rng = derive_rng(config_.seed, it, Stream::flip);
    data::random_flip(batch.images, rng);
  }

  auto pass = forward_heads(state_, batch.images, ops::Mode::train);
  std::vector<msl::LogitBatch> heads;
  for (std::size_t h = 0; h < pass.head_logits.size(); ++h) {
    heads.emplace_back(pass.logits(h).cast<double>(), batch.labels);
  }
  const auto loss = msn_loss(heads, xi_, config_.loss);
  if (!std::isfinite(loss.aggregate.total)) throw NonFiniteLoss(it + 1);

  const auto grads = backward_heads(pass, state_, loss.logit_gradients);
  const double lr = lr_schedule(config_, it);
  sgd_momentum_step(state_.params, grads, optimizer_, lr, config_.momentum);

  IterationRecord rec;
  rec.iteration = it + 1;
  rec.lr = lr;
  for (std::size_t h = 0; h < pass.head_blocks.size(); ++h) {
    rec.xi[static_cast<std::size_t>(pass.head_blocks[h] - 1)] = xi_[h].xi();
  }
  update_xi(xi_, loss);

  rec.loss_total = loss.aggregate.total;
  rec.loss_between = loss.aggregate.between;
  rec.loss_within = loss.aggregate.within;
  const auto predicted = argmax_rows(heads.back().logits());
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) wrong += predicted[i] != batch.labels[i];
  rec.train_error = static_cast<double>(wrong) / static_cast<double>(predicted.size());
  const auto& distances = loss.per_head.back().per_class_distance;
  double dsum = 0.0;
  for (const auto& [cls, d] : distances) dsum += d;
  rec.in_class_distance =
      distances.empty() ? std::numeric_limits<double>::quiet_NaN() : dsum / static_cast<double>(distances.size());

  iteration_ = it + 1;
  const bool eval_point = iteration_ % config_.eval_interval == 0;
  if (eval_point && test_ != nullptr) rec.test_error = evaluate(state_, *test_);

  log_.records.push_back(rec);
  if (csv_) {
    *csv_ << csv_row(rec) << '\n';
    if (eval_point) csv_->flush();
  }
  return log_.records.back();
}

void Trainer::run(std::uint64_t steps) {
  for (std::uint64_t s = 0; s < steps; ++s) step();
  if (csv_) csv_->flush();
}

void Trainer::run() {
  if (iteration_ < config_.iterations) run(config_.iterations - iteration_);
}

void Trainer::stream_csv(const std::filesystem::path& path) {
  csv_ = std::make_unique<std::ofstream>(path, std::ios::trunc);
  if (!*csv_) throw std::runtime_error("cannot write " + path.string());
  *csv_ << kCsvHeader << '\n';
  for (const auto& r : log_.records) *csv_ << csv_row(r) << '\n';
  csv_->flush();
}

void Trainer::save(const std::filesystem::path& path) const {
  save_checkpoint(path, state_, optimizer_, xi_, iteration_, config_.seed);
}

void Trainer::restore(const std::filesystem::path& path) {
  auto snap = load_checkpoint(path, state_.spec, config_.xi);
  state_.params = std::move(snap.params);
  optimizer_ = std::move(snap.optimizer);
  xi_ = std::move(snap.xi);
  iteration_ = snap.iteration;
  config_.seed = snap.seed;
  sampler_ = data::BatchSampler(train_.labels, train_.classes, config_.batch_size, config_.batching, config_.seed);
}

TrainResult train(const TrainConfig& config, const NetworkSpec& spec, const data::LabeledDataset& train_set,
                  const data::LabeledDataset* test_set) {
  Trainer trainer(config, spec, train_set, test_set);
  trainer.run();
  return TrainResult{trainer.state(), trainer.log(), trainer.optimizer(), trainer.xi()};
}

}  // namespace msn::train
