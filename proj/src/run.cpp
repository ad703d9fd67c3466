#include "msn/run.hpp"

#include <cstdlib>
#include <fstream>
#include <limits>
#include <set>

namespace msn::run {
namespace {

using nlohmann::json;

/// Strict view of one JSON object: every key must be read or it is reported.
class Section {
 public:
  Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(path_.empty() ? "config" : path_, "expected an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return node_.contains(key);
  }

  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  std::optional<Section> section(const std::string& k) {
    if (!has(k)) return std::nullopt;
    return Section(node_.at(k), key(k));
  }

  void number(const std::string& k, double& out) {
    if (!has(k)) return;
    const json& v = node_.at(k);
    if (!v.is_number()) throw ConfigError(key(k), "expected a number");
    out = v.get<double>();
  }

  template <typename U>
  void count(const std::string& k, U& out) {
    if (!has(k)) return;
    const json& v = node_.at(k);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      throw ConfigError(key(k), "expected a non-negative integer");
    }
    out = static_cast<U>(v.get<std::uint64_t>());
  }

  template <typename U>
  void count(const std::string& k, std::optional<U>& out) {
    if (!has(k)) return;
    U value{};
    count(k, value);
    out = value;
  }

  void boolean(const std::string& k, bool& out) {
    if (!has(k)) return;
    const json& v = node_.at(k);
    if (!v.is_boolean()) throw ConfigError(key(k), "expected true or false");
    out = v.get<bool>();
  }

  void string(const std::string& k, std::string& out) {
    if (!has(k)) return;
    const json& v = node_.at(k);
    if (!v.is_string()) throw ConfigError(key(k), "expected a string");
    out = v.get<std::string>();
  }

  void int_list(const std::string& k, std::vector<int>& out) {
    if (!has(k)) return;
    const json& v = node_.at(k);
    if (!v.is_array()) throw ConfigError(key(k), "expected an array of integers");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_number_integer()) throw ConfigError(key(k), "expected an array of integers");
      out.push_back(e.get<int>());
    }
  }

  /// Throws on the first key that was never asked for.
  void finish() const {
    for (const auto& [k, v] : node_.items()) {
      if (!seen_.contains(k)) throw ConfigError(key(k), "unknown key");
    }
  }

 private:
  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename Fn>
void rethrow_as(const std::string& key, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key, e.what());
  }
}

void parse_network(Section& s, RunConfig& c) {
  NetworkSpec& n = c.network;
  if (s.has("family")) {
    std::string name;
    s.string("family", name);
    rethrow_as(s.key("family"), [&] { n.family = family_from_string(name); });
  }
  s.count("depth", n.depth);
  s.number("width", n.width);
  s.count("widen", n.widen);
  s.count("blocks", n.blocks);
  const bool has_attach = s.has("attach");
  const bool has_config = s.has("attach_config");
  if (has_attach && has_config) throw ConfigError(s.key("attach_config"), "give either attach or attach_config");
  if (has_attach) s.int_list("attach", n.attach);
  if (has_config) {
    int config = 0;
    s.count("attach_config", config);
    rethrow_as(s.key("attach_config"), [&] { n.attach = attachment_config(config); });
  }
  s.count("classes", c.classes);
  s.count("height", c.height);
  s.count("width_px", c.width_px);
  s.count("channels", c.channels);
  if (auto bn = s.section("batch_norm")) {
    bn->number("eps", n.batch_norm.eps);
    bn->number("momentum", n.batch_norm.momentum);
    bn->finish();
    if (!(n.batch_norm.eps > 0.0)) throw ConfigError(bn->key("eps"), "must be positive");
    if (!(n.batch_norm.momentum >= 0.0 && n.batch_norm.momentum < 1.0)) {
      throw ConfigError(bn->key("momentum"), "must be in [0, 1)");
    }
  }
  s.finish();
}

void parse_train(Section& s, train::TrainConfig& t) {
  s.count("batch_size", t.batch_size);
  s.number("momentum", t.momentum);
  s.number("lr", t.lr);
  s.number("lr_decay", t.lr_decay);
  s.count("lr_period", t.lr_period);
  s.count("iterations", t.iterations);
  s.count("seed", t.seed);
  if (s.has("batching")) {
    std::string mode;
    s.string("batching", mode);
    if (mode == "shuffled") {
      t.batching = data::BatchMode::shuffled;
    } else if (mode == "class_aware") {
      t.batching = data::BatchMode::class_aware;
    } else {
      throw ConfigError(s.key("batching"), "expected shuffled or class_aware, got '" + mode + "'");
    }
  }
  s.count("eval_interval", t.eval_interval);
  s.boolean("flip", t.flip);
  if (auto loss = s.section("loss")) {
    loss->number("within_weight", t.loss.within_weight);
    if (loss->has("distance")) {
      std::string mode;
      loss->string("distance", mode);
      if (mode == "euclidean") {
        t.loss.distance = msl::DistanceMode::euclidean;
      } else if (mode == "per_component") {
        t.loss.distance = msl::DistanceMode::per_component;
      } else {
        throw ConfigError(loss->key("distance"), "expected euclidean or per_component, got '" + mode + "'");
      }
    }
    loss->finish();
    if (!(t.loss.within_weight >= 0.0)) throw ConfigError(loss->key("within_weight"), "must be non-negative");
  }
  if (auto xi = s.section("xi")) {
    xi->number("initial", t.xi.initial);
    xi->number("decay", t.xi.decay);
    xi->count("window", t.xi.window);
    xi->number("plateau_tol", t.xi.plateau_tol);
    xi->number("floor", t.xi.floor);
    xi->finish();
    rethrow_as(s.key("xi"), [&] { msl::XiState check(t.xi); });
  }
  s.finish();
  const auto field = [&](const std::string& message) {
    // TrainConfig::validate reports "train.<field>: why".
    const auto colon = message.find(':');
    return colon == std::string::npos ? std::string("train") : message.substr(0, colon);
  };
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    const std::string k = field(msg);
    throw ConfigError(k, msg.size() > k.size() + 2 ? msg.substr(k.size() + 2) : msg);
  }
}

void parse_data(Section& s, DataConfig& d) {
  if (s.has("source")) {
    std::string source;
    s.string("source", source);
    if (source == "cifar10") {
      d.source = Source::cifar10;
    } else if (source == "synthetic") {
      d.source = Source::synthetic;
    } else {
      throw ConfigError(s.key("source"), "expected cifar10 or synthetic, got '" + source + "'");
    }
  }
  s.string("dir", d.dir);
  s.int_list("classes", d.classes);
  s.count("train_per_class", d.train_per_class);
  s.count("test_per_class", d.test_per_class);
  s.boolean("gcn", d.gcn);
  s.boolean("zca", d.zca);
  s.number("zca_eps", d.zca_eps);
  if (auto syn = s.section("synthetic")) {
    syn->count("classes", d.synthetic.classes);
    syn->count("per_class", d.synthetic.per_class);
    syn->count("test_per_class", d.synthetic_test_per_class);
    syn->count("height", d.synthetic.height);
    syn->count("width", d.synthetic.width);
    syn->count("channels", d.synthetic.channels);
    syn->number("separation", d.synthetic.separation);
    syn->count("seed", d.synthetic_seed);
    syn->finish();
    if (d.synthetic.classes < 2) throw ConfigError(syn->key("classes"), "need at least 2");
    if (d.synthetic.per_class < 1) throw ConfigError(syn->key("per_class"), "must be >= 1");
    if (!(d.synthetic.separation > 0.0)) throw ConfigError(syn->key("separation"), "must be positive");
    if (d.synthetic.height == 0 || d.synthetic.width == 0 || d.synthetic.channels == 0) {
      throw ConfigError(syn->key("height"), "image extents must be >= 1");
    }
  }
  if (auto fetch = s.section("fetch")) {
    fetch->string("url", d.fetch.url);
    fetch->string("digest", d.fetch.digest);
    fetch->finish();
    if (d.fetch.digest.rfind("sha256:", 0) != 0 && d.fetch.digest.rfind("md5:", 0) != 0) {
      throw ConfigError(fetch->key("digest"), "expected sha256:<hex> or md5:<hex>");
    }
  }
  s.finish();

  std::set<int> unique;
  for (int k : d.classes) {
    if (k < 0 || k > 9) throw ConfigError(s.key("classes"), "CIFAR-10 class " + std::to_string(k) + " out of range");
    if (!unique.insert(k).second) throw ConfigError(s.key("classes"), "duplicate class " + std::to_string(k));
  }
  if (d.classes.size() == 1) throw ConfigError(s.key("classes"), "need at least 2 classes");
  if (!(d.zca_eps >= 0.0)) throw ConfigError(s.key("zca_eps"), "must be non-negative");
}

}  // namespace

std::filesystem::path DataConfig::root() const {
  if (!dir.empty()) return dir;
  if (const char* env = std::getenv("MSN_DATA_DIR"); env != nullptr && *env != '\0') return env;
  return "data";
}

RunConfig parse_config(const json& document) {
  RunConfig c;
  Section top(document, "");
  if (auto s = top.section("network")) parse_network(*s, c);
  if (auto s = top.section("train")) {
    parse_train(*s, c.train);
  } else {
    rethrow_as("train", [&] { c.train.validate(); });
  }
  if (auto s = top.section("data")) parse_data(*s, c.data);
  if (auto s = top.section("output")) {
    s->string("dir", c.output_dir);
    s->finish();
  }
  top.finish();
  // Validate the architecture with whatever shape is known so far.
  NetworkSpec probe = c.network;
  if (c.classes) probe.classes = *c.classes;
  if (c.height) probe.height = *c.height;
  if (c.width_px) probe.width_px = *c.width_px;
  if (c.channels) probe.channels = *c.channels;
  if (!c.height && !c.width_px && c.data.source == Source::synthetic) {
    probe.height = c.data.synthetic.height;
    probe.width_px = c.data.synthetic.width;
  }
  rethrow_as("network", [&] { probe.validate(); });
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read " + path.string());
  json document;
  try {
    document = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(document);
}

json to_json(const RunConfig& c) {
  const NetworkSpec& n = c.network;
  json network = {{"family", to_string(n.family)},
                  {"depth", n.depth},
                  {"width", n.width},
                  {"widen", n.widen},
                  {"blocks", n.blocks},
                  {"attach", n.attach},
                  {"batch_norm", {{"eps", n.batch_norm.eps}, {"momentum", n.batch_norm.momentum}}}};
  if (c.classes) network["classes"] = *c.classes;
  if (c.height) network["height"] = *c.height;
  if (c.width_px) network["width_px"] = *c.width_px;
  if (c.channels) network["channels"] = *c.channels;

  const train::TrainConfig& t = c.train;
  json train = {
      {"batch_size", t.batch_size},
      {"momentum", t.momentum},
      {"lr", t.lr},
      {"lr_decay", t.lr_decay},
      {"lr_period", t.lr_period},
      {"iterations", t.iterations},
      {"seed", t.seed},
      {"batching", t.batching == data::BatchMode::class_aware ? "class_aware" : "shuffled"},
      {"eval_interval", t.eval_interval},
      {"flip", t.flip},
      {"loss",
       {{"within_weight", t.loss.within_weight},
        {"distance", t.loss.distance == msl::DistanceMode::euclidean ? "euclidean" : "per_component"}}},
      {"xi",
       {{"initial", t.xi.initial},
        {"decay", t.xi.decay},
        {"window", t.xi.window},
        {"plateau_tol", t.xi.plateau_tol},
        {"floor", t.xi.floor}}}};

  const DataConfig& d = c.data;
  json synthetic = {{"classes", d.synthetic.classes},
                    {"per_class", d.synthetic.per_class},
                    {"test_per_class", d.synthetic_test_per_class},
                    {"height", d.synthetic.height},
                    {"width", d.synthetic.width},
                    {"channels", d.synthetic.channels},
                    {"separation", d.synthetic.separation}};
  if (d.synthetic_seed) synthetic["seed"] = *d.synthetic_seed;
  json data = {{"source", d.source == Source::cifar10 ? "cifar10" : "synthetic"},
               {"dir", d.dir},
               {"classes", d.classes},
               {"train_per_class", d.train_per_class},
               {"test_per_class", d.test_per_class},
               {"gcn", d.gcn},
               {"zca", d.zca},
               {"zca_eps", d.zca_eps},
               {"synthetic", synthetic},
               {"fetch", {{"url", d.fetch.url}, {"digest", d.fetch.digest}}}};

  return {{"network", network}, {"train", train}, {"data", data}, {"output", {{"dir", c.output_dir}}}};
}

PreparedData prepare_data(const DataConfig& config, std::uint64_t seed) {
  PreparedData out;
  if (config.source == Source::synthetic) {
    const std::uint64_t data_seed = config.synthetic_seed.value_or(seed);
    out.train = data::synthetic_blobs(config.synthetic, data_seed, data::Split::train);
    data::SyntheticOptions test_options = config.synthetic;
    test_options.per_class = config.synthetic_test_per_class;
    out.test = data::synthetic_blobs(test_options, data_seed, data::Split::test);
  } else {
    auto splits = data::load_cifar10(data::CifarFiles::in(config.root()));
    out.train = std::move(splits.train);
    out.test = std::move(splits.test);
    if (!config.classes.empty() || config.train_per_class > 0 || config.test_per_class > 0) {
      std::vector<int> keep = config.classes;
      if (keep.empty()) {
        for (int k = 0; k < 10; ++k) keep.push_back(k);
      }
      const auto cap = [](std::size_t n) { return n == 0 ? std::numeric_limits<std::size_t>::max() : n; };
      out.train = out.train.select_classes(keep, cap(config.train_per_class));
      out.test = out.test.select_classes(keep, cap(config.test_per_class));
    }
  }
  if (config.gcn) {
    out.train.images = data::global_contrast_normalize(out.train.images);
    out.test.images = data::global_contrast_normalize(out.test.images);
  }
  if (config.zca) {
    const auto zca = data::zca_fit(out.train.images, config.zca_eps);
    out.train.images = data::zca_apply(zca, out.train.images);
    out.test.images = data::zca_apply(zca, out.test.images);
  }
  return out;
}

void bind_network(RunConfig& config, const data::LabeledDataset& train) {
  const auto check = [](const std::optional<std::size_t>& given, std::size_t actual, const std::string& key) {
    if (given && *given != actual) {
      throw ConfigError("network." + key,
                        std::to_string(*given) + " does not match the data (" + std::to_string(actual) + ")");
    }
  };
  check(config.classes, train.classes, "classes");
  check(config.height, train.height(), "height");
  check(config.width_px, train.width(), "width_px");
  check(config.channels, train.channels(), "channels");
  config.network.classes = train.classes;
  config.network.height = train.height();
  config.network.width_px = train.width();
  config.network.channels = train.channels();
  rethrow_as("network", [&] { config.network.validate(); });
}

}  // namespace msn::run
