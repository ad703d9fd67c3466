#include "msn/network.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <stdexcept>

namespace msn {

std::string to_string(Family family) {
  switch (family) {
    case Family::vgg:
      return "vgg";
    case Family::resnet:
      return "resnet";
    case Family::wide_resnet:
      return "wide_resnet";
  }
  return "unknown";
}

Family family_from_string(const std::string& name) {
  if (name == "vgg") return Family::vgg;
  if (name == "resnet") return Family::resnet;
  if (name == "wide_resnet") return Family::wide_resnet;
  throw std::invalid_argument("unknown network family '" + name + "' (expected vgg, resnet, wide_resnet)");
}

std::vector<int> attachment_config(int config) {
  switch (config) {
    case 1:
      return {4};
    case 2:
      return {3, 4};
    case 3:
      return {2, 4};
    case 4:
      return {1, 4};
    case 5:
      return {2, 3, 4};
    case 6:
      return {1, 3, 4};
    case 7:
      return {1, 2, 3, 4};
    default:
      throw std::invalid_argument("attachment config must be 1-7, got " + std::to_string(config));
  }
}

void NetworkSpec::validate() const {
  if (blocks < 1 || blocks > 4) throw std::invalid_argument("network: blocks must be 1-4");
  if (family != Family::vgg && depth < 1) throw std::invalid_argument("network: depth K must be >= 1");
  if (!(width > 0.0)) throw std::invalid_argument("network: width multiplier must be positive");
  if (family == Family::wide_resnet && widen < 1) throw std::invalid_argument("network: widen must be >= 1");
  if (classes < 2) throw std::invalid_argument("network: need at least 2 classes");
  if (height < 1 || width_px < 1 || channels < 1) throw std::invalid_argument("network: empty input shape");
  const std::size_t reduction = std::size_t{1} << (blocks - 1);
  if (height % reduction != 0 || width_px % reduction != 0) {
    throw std::invalid_argument("network: input " + std::to_string(height) + "x" + std::to_string(width_px) +
                                " not divisible by the pooling factor " + std::to_string(reduction));
  }
  if (attach.empty()) throw std::invalid_argument("network: attachment mask must be non-empty");
  std::vector<int> sorted = attach;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw std::invalid_argument("network: duplicate block in attachment mask");
  }
  for (int b : attach) {
    if (b < 1 || b > static_cast<int>(blocks)) {
      throw std::invalid_argument("network: attachment block " + std::to_string(b) + " outside 1-" +
                                  std::to_string(blocks));
    }
  }
  block_channels();
}

std::vector<std::size_t> NetworkSpec::block_channels() const {
  std::vector<double> base;
  switch (family) {
    case Family::vgg:
      base = {64, 128, 256, 512};
      break;
    case Family::resnet:
      base = {16, 16, 32, 64};
      break;
    case Family::wide_resnet: {
      const double k = static_cast<double>(widen);
      base = {16, 16 * k, 32 * k, 64 * k};
      break;
    }
  }
  std::vector<std::size_t> out;
  for (std::size_t b = 0; b < blocks; ++b) {
    const double scaled = std::round(base[b] * width);
    if (scaled < 1.0) {
      throw std::invalid_argument("network: width multiplier " + std::to_string(width) + " gives block " +
                                  std::to_string(b + 1) + " fewer than one channel");
    }
    out.push_back(static_cast<std::size_t>(scaled));
  }
  return out;
}

template <typename T>
void ParamStore<T>::add(std::string name, BasicTensor<T> value, bool trainable) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  entries_.push_back(Entry{std::move(name), std::move(value), trainable});
}

template <typename T>
std::optional<std::size_t> ParamStore<T>::find(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  return std::nullopt;
}

template <typename T>
BasicTensor<T>& ParamStore<T>::at(const std::string& name) {
  auto i = find(name);
  if (!i) throw std::out_of_range("no parameter named '" + name + "'");
  return entries_[*i].value;
}

template <typename T>
const BasicTensor<T>& ParamStore<T>::at(const std::string& name) const {
  auto i = find(name);
  if (!i) throw std::out_of_range("no parameter named '" + name + "'");
  return entries_[*i].value;
}

template <typename T>
std::size_t ParamStore<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.trainable) n += e.value.size();
  }
  return n;
}

template <typename T>
std::vector<MsmHead> NetworkState<T>::heads() const {
  std::vector<int> blocks = spec.attach;
  std::sort(blocks.begin(), blocks.end());
  const auto channels = spec.block_channels();
  std::vector<MsmHead> out;
  for (int b : blocks) out.push_back(MsmHead{b, channels[static_cast<std::size_t>(b - 1)], spec.classes});
  return out;
}

namespace {

std::string conv_prefix(std::size_t block, std::size_t conv) {
  return "block" + std::to_string(block) + ".conv" + std::to_string(conv);
}

std::string res_prefix(std::size_t block, std::size_t unit) {
  return "block" + std::to_string(block) + ".res" + std::to_string(unit);
}

template <typename T>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  BasicTensor<T> he_normal(Shape shape, std::size_t fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    BasicTensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(dist(rng_));
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

template <typename T>
void add_conv(ParamStore<T>& p, Initializer<T>& init, const std::string& prefix, std::size_t k, std::size_t in,
              std::size_t out) {
  p.add(prefix + ".kernel", init.he_normal(Shape{k, k, in, out}, k * k * in));
  p.add(prefix + ".bias", BasicTensor<T>(Shape{out}));
}

template <typename T>
void add_batch_norm(ParamStore<T>& p, const std::string& prefix, std::size_t channels) {
  p.add(prefix + ".gamma", BasicTensor<T>(Shape{channels}, T(1)));
  p.add(prefix + ".beta", BasicTensor<T>(Shape{channels}));
  p.add(prefix + ".running_mean", BasicTensor<T>(Shape{channels}), false);
  p.add(prefix + ".running_var", BasicTensor<T>(Shape{channels}, T(1)), false);
}

bool attached(const NetworkSpec& spec, std::size_t block) {
  return std::find(spec.attach.begin(), spec.attach.end(), static_cast<int>(block)) != spec.attach.end();
}

// Walks the architecture once; builders and the forward pass share it so
// parameter names cannot drift apart.
template <typename T>
class ForwardBuilder {
 public:
  ForwardBuilder(const NetworkState<T>& state, ParamStore<T>* stats, ops::Mode mode)
      : state_(state), stats_(stats), mode_(mode) {
    pass_.param_vars.resize(state.params.size());
    const auto& entries = state.params.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].trainable) pass_.param_vars[i] = pass_.tape.leaf(entries[i].value, true, entries[i].name);
    }
  }

  ForwardPass<T> run(const BasicTensor<T>& images) {
    const NetworkSpec& spec = state_.spec;
    const Shape expected{images.shape().rank() == 4 ? images.shape()[0] : 1, spec.height, spec.width_px,
                         spec.channels};
    if (images.shape() != expected) {
      throw ShapeError("forward_heads: images " + images.shape().str() + " do not match network input " +
                       expected.str());
    }
    const auto channels = spec.block_channels();
    Var x = pass_.tape.leaf(images, false, "images");
    std::size_t in_channels = spec.channels;
    for (std::size_t b = 1; b <= spec.blocks; ++b) {
      if (b > 1) x = ag::max_pool2(pass_.tape, x);
      const std::size_t out = channels[b - 1];
      if (spec.family == Family::vgg) {
        for (std::size_t j = 1; j <= NetworkSpec::vgg_convs(b); ++j) {
          x = ag::relu(pass_.tape, conv(x, conv_prefix(b, j), 1));
        }
      } else if (b == 1) {
        x = conv(x, conv_prefix(b, 1), 1);
      } else {
        for (std::size_t r = 1; r <= spec.depth; ++r) {
          x = residual_unit(x, res_prefix(b, r), r == 1 && in_channels != out);
        }
      }
      in_channels = out;
      if (attached(spec, b)) {
        const std::string head = "head" + std::to_string(b) + ".fc";
        Var pooled = ag::global_average_pool(pass_.tape, x);
        pass_.head_logits.push_back(ag::linear(pass_.tape, pooled, param(head + ".weight"), param(head + ".bias")));
        pass_.head_blocks.push_back(static_cast<int>(b));
      }
    }
    return std::move(pass_);
  }

 private:
  Var param(const std::string& name) {
    auto i = state_.params.find(name);
    if (!i || !pass_.param_vars[*i]) throw std::out_of_range("forward: missing trainable parameter '" + name + "'");
    return *pass_.param_vars[*i];
  }

  Var conv(Var x, const std::string& prefix, std::size_t pad) {
    return ag::conv2d(pass_.tape, x, param(prefix + ".kernel"), param(prefix + ".bias"), 1, pad);
  }

  Var bn_relu(Var x, const std::string& prefix) {
    BasicTensor<T>* mean;
    BasicTensor<T>* var;
    if (stats_ != nullptr) {
      mean = &stats_->at(prefix + ".running_mean");
      var = &stats_->at(prefix + ".running_var");
    } else {
      scratch_.push_back(std::make_unique<BasicTensor<T>>(state_.params.at(prefix + ".running_mean")));
      mean = scratch_.back().get();
      scratch_.push_back(std::make_unique<BasicTensor<T>>(state_.params.at(prefix + ".running_var")));
      var = scratch_.back().get();
    }
    Var y = ag::batch_norm(pass_.tape, x, param(prefix + ".gamma"), param(prefix + ".beta"), *mean, *var, mode_,
                           state_.spec.batch_norm);
    return ag::relu(pass_.tape, y);
  }

  // Pre-activation unit: x + conv(relu(bn(conv(relu(bn(x)))))). A 1x1
  // projection aligns the skip path when the channel count changes.
  Var residual_unit(Var x, const std::string& prefix, bool project) {
    Var h = conv(bn_relu(x, prefix + ".bn1"), prefix + ".conv1", 1);
    h = conv(bn_relu(h, prefix + ".bn2"), prefix + ".conv2", 1);
    Var skip = project ? conv(x, prefix + ".proj", 0) : x;
    return ag::add(pass_.tape, skip, h);
  }

  const NetworkState<T>& state_;
  ParamStore<T>* stats_;
  ops::Mode mode_;
  ForwardPass<T> pass_;
  std::vector<std::unique_ptr<BasicTensor<T>>> scratch_;
};

}  // namespace

template <typename T>
NetworkState<T> build_network(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  NetworkState<T> state{spec, {}};
  ParamStore<T>& p = state.params;
  Initializer<T> init(seed);
  const auto channels = spec.block_channels();

  std::size_t in = spec.channels;
  for (std::size_t b = 1; b <= spec.blocks; ++b) {
    const std::size_t out = channels[b - 1];
    if (spec.family == Family::vgg) {
      for (std::size_t j = 1; j <= NetworkSpec::vgg_convs(b); ++j) {
        add_conv(p, init, conv_prefix(b, j), 3, j == 1 ? in : out, out);
      }
    } else if (b == 1) {
      add_conv(p, init, conv_prefix(b, 1), 3, in, out);
    } else {
      for (std::size_t r = 1; r <= spec.depth; ++r) {
        const std::string prefix = res_prefix(b, r);
        const std::size_t unit_in = r == 1 ? in : out;
        add_batch_norm(p, prefix + ".bn1", unit_in);
        add_conv(p, init, prefix + ".conv1", 3, unit_in, out);
        add_batch_norm(p, prefix + ".bn2", out);
        add_conv(p, init, prefix + ".conv2", 3, out, out);
        if (unit_in != out) add_conv(p, init, prefix + ".proj", 1, unit_in, out);
      }
    }
    in = out;
  }
  for (const MsmHead& head : state.heads()) {
    p.add(head.weight_name(), init.he_normal(Shape{head.features, head.classes}, head.features));
    p.add(head.bias_name(), BasicTensor<T>(Shape{head.classes}));
  }
  return state;
}

template <typename T>
ForwardPass<T> forward_heads(NetworkState<T>& state, const BasicTensor<T>& images, ops::Mode mode) {
  ParamStore<T>* stats = mode == ops::Mode::train ? &state.params : nullptr;
  return ForwardBuilder<T>(state, stats, mode).run(images);
}

template <typename T>
ForwardPass<T> forward_heads(const NetworkState<T>& state, const BasicTensor<T>& images) {
  return ForwardBuilder<T>(state, nullptr, ops::Mode::infer).run(images);
}

template <typename T>
std::vector<BasicTensor<T>> backward_heads(ForwardPass<T>& pass, const NetworkState<T>& state,
                                           const std::vector<Tensor64>& logit_gradients) {
  if (logit_gradients.size() != pass.head_logits.size()) {
    throw std::invalid_argument("backward_heads: " + std::to_string(logit_gradients.size()) +
                                " gradients for " + std::to_string(pass.head_logits.size()) + " heads");
  }
  std::vector<std::pair<Var, BasicTensor<T>>> seeds;
  for (std::size_t h = 0; h < logit_gradients.size(); ++h) {
    seeds.emplace_back(pass.head_logits[h], logit_gradients[h].template cast<T>());
  }
  pass.tape.backward(seeds);

  std::vector<BasicTensor<T>> grads;
  const auto& entries = state.params.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& v = pass.param_vars[i];
    if (v && !pass.tape.grad(*v).empty()) {
      grads.push_back(pass.tape.grad(*v));
    } else {
      grads.emplace_back(entries[i].value.shape());
    }
  }
  return grads;
}

MsnLossResult msn_loss(const std::vector<msl::LogitBatch>& heads, const std::vector<msl::XiState>& xi,
                       const msl::MslOptions& options) {
  if (heads.empty()) throw std::invalid_argument("msn_loss: no heads");
  if (xi.size() != heads.size()) {
    throw std::invalid_argument("msn_loss: " + std::to_string(xi.size()) + " xi states for " +
                                std::to_string(heads.size()) + " heads");
  }
  const double scale = 1.0 / static_cast<double>(heads.size());
  MsnLossResult out;
  for (std::size_t h = 0; h < heads.size(); ++h) {
    if (heads[h].labels() != heads.front().labels()) {
      throw std::invalid_argument("msn_loss: head " + std::to_string(h) + " has different labels");
    }
    auto r = msl::msl_total(heads[h], xi[h].xi(), options);
    for (auto& g : r.gradient.values()) g *= scale;
    out.per_head.push_back(r.loss);
    out.logit_gradients.push_back(std::move(r.gradient));
  }
  for (const auto& b : out.per_head) {
    out.aggregate.between += b.between;
    out.aggregate.within += b.within;
    out.aggregate.total += b.total;
  }
  out.aggregate.between *= scale;
  out.aggregate.within *= scale;
  out.aggregate.total *= scale;
  out.aggregate.per_class_distance = out.per_head.back().per_class_distance;
  return out;
}

void update_xi(std::vector<msl::XiState>& xi, const MsnLossResult& loss) {
  if (xi.size() != loss.per_head.size()) throw std::invalid_argument("update_xi: head count mismatch");
  for (std::size_t h = 0; h < xi.size(); ++h) xi[h].observe(loss.per_head[h].within);
}

std::vector<int> argmax_rows(const Tensor64& scores) {
  const std::size_t n = scores.shape()[0], c = scores.shape()[1];
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (scores.at(i, k) > scores.at(i, best)) best = k;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

template <typename T>
std::vector<int> predict(const NetworkState<T>& state, const BasicTensor<T>& images, PredictHead head) {
  const auto pass = forward_heads(state, images);
  if (head == PredictHead::deepest) return argmax_rows(pass.logits(pass.head_logits.size() - 1).template cast<double>());
  Tensor64 mean(pass.logits(0).shape());
  for (std::size_t h = 0; h < pass.head_logits.size(); ++h) {
    const auto& l = pass.logits(h);
    for (std::size_t i = 0; i < l.size(); ++i) mean[i] += static_cast<double>(l[i]);
  }
  return argmax_rows(mean);
}

#define MSN_INSTANTIATE_NETWORK(T)                                                                            \
  template class ParamStore<T>;                                                                               \
  template struct NetworkState<T>;                                                                            \
  template NetworkState<T> build_network<T>(const NetworkSpec&, std::uint64_t);                               \
  template ForwardPass<T> forward_heads(NetworkState<T>&, const BasicTensor<T>&, ops::Mode);                  \
  template ForwardPass<T> forward_heads(const NetworkState<T>&, const BasicTensor<T>&);                       \
  template std::vector<BasicTensor<T>> backward_heads(ForwardPass<T>&, const NetworkState<T>&,                \
                                                      const std::vector<Tensor64>&);                          \
  template std::vector<int> predict(const NetworkState<T>&, const BasicTensor<T>&, PredictHead);

MSN_INSTANTIATE_NETWORK(float)
MSN_INSTANTIATE_NETWORK(double)

#undef MSN_INSTANTIATE_NETWORK

}  // namespace msn
