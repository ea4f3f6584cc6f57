#pragma once

// Experiment plumbing behind the command-line tool: config parsing,
// dataset preparation, network construction, metrics CSV, checkpoints,
// gradient verification and the four commands.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bln/data.hpp"
#include "bln/error.hpp"
#include "bln/nn.hpp"
#include "bln/norm.hpp"
#include "bln/search.hpp"
#include "bln/tensor.hpp"

namespace bln {

using Json = nlohmann::json;

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitVerification = 3 };

inline constexpr const char* kMetricsHeader =
    "run_id,normalizer,batch_size,seed,epoch,step,split,loss,accuracy";
inline constexpr const char* kGridHeader = "rank,e_b,std_b,e_f,std_f,loss,accuracy";

// ---------------------------------------------------------------------------
// Configuration

enum class Task { cnn_synthetic, rnn_synthetic, cnn_cifar10 };

inline std::string to_string(Task t) {
  switch (t) {
    case Task::cnn_synthetic: return "cnn-synthetic";
    case Task::rnn_synthetic: return "rnn-synthetic";
    case Task::cnn_cifar10: return "cnn-cifar10";
  }
  return "?";
}

struct ExperimentConfig {
  Task task = Task::cnn_synthetic;
  Normalizer normalizer = Normalizer::bln;
  std::vector<Normalizer> normalizers;  // compare only
  std::size_t batch_size = 25;
  std::vector<std::size_t> batch_sizes;  // compare only; defaults to {batch_size}
  std::size_t epochs = 3;
  std::uint64_t seed = 0;
  double epsilon = kDefaultEpsilon;
  Momentum momentum;
  double train_fraction = 0.2;
  double learning_rate = 1e-3;
  InferenceFlags flags;
  std::string train_path;
  std::string test_path;
  std::size_t samples_per_class = 200;
  std::size_t classes = 2;
  double separation = 10.0;
  std::size_t seq_length = 4;
  std::size_t vocab = 4;

  std::string source_text;  // the config file as given
  std::optional<std::uint64_t> seed_override;
};

namespace detail {

template <typename T>
T json_get(const Json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const Json::exception&) {
    throw UsageError("config key '" + key + "' has the wrong type");
  }
}

inline std::size_t json_count(const Json& j, const std::string& key, std::size_t min) {
  if (!j.is_number_integer()) throw UsageError("config key '" + key + "' must be an integer");
  const auto v = j.get<std::int64_t>();
  if (v < static_cast<std::int64_t>(min))
    throw UsageError("config key '" + key + "' must be at least " + std::to_string(min));
  return static_cast<std::size_t>(v);
}

inline Task parse_task(const std::string& s) {
  if (s == "cnn-synthetic") return Task::cnn_synthetic;
  if (s == "rnn-synthetic") return Task::rnn_synthetic;
  if (s == "cnn-cifar10") return Task::cnn_cifar10;
  throw UsageError("unknown task '" + s + "'");
}

inline InferenceFlags parse_flags(const Json& j) {
  if (!j.is_object()) throw UsageError("config key 'flags' must be an object");
  InferenceFlags f;
  for (const auto& [key, value] : j.items()) {
    const std::string name = "flags." + key;
    if (!value.is_boolean()) throw UsageError("config key '" + name + "' must be a boolean");
    const bool b = value.get<bool>();
    if (key == "e_b") f.e_b = b;
    else if (key == "std_b") f.std_b = b;
    else if (key == "e_f") f.e_f = b;
    else if (key == "std_f") f.std_f = b;
    else throw UsageError("unknown config key '" + name + "'");
  }
  return f;
}

inline Json flags_json(InferenceFlags f) {
  return Json{{"e_b", f.e_b}, {"std_b", f.std_b}, {"e_f", f.e_f}, {"std_f", f.std_f}};
}

}  // namespace detail

/// Parse a flat JSON config. Unknown keys are rejected by name.
inline ExperimentConfig parse_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw UsageError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw UsageError("config must be a JSON object");

  ExperimentConfig c;
  c.source_text = text;
  for (const auto& [key, v] : j.items()) {
    if (key == "task") {
      c.task = detail::parse_task(detail::json_get<std::string>(v, key));
    } else if (key == "normalizer") {
      c.normalizer = parse_normalizer(detail::json_get<std::string>(v, key));
    } else if (key == "normalizers") {
      for (const auto& s : detail::json_get<std::vector<std::string>>(v, key))
        c.normalizers.push_back(parse_normalizer(s));
    } else if (key == "batch_size") {
      c.batch_size = detail::json_count(v, key, 1);
    } else if (key == "batch_sizes") {
      if (!v.is_array()) throw UsageError("config key 'batch_sizes' must be an array");
      for (const auto& b : v) c.batch_sizes.push_back(detail::json_count(b, key, 1));
    } else if (key == "epochs") {
      c.epochs = detail::json_count(v, key, 1);
    } else if (key == "seed") {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
        throw UsageError("config key 'seed' must be a non-negative integer");
      c.seed = v.get<std::uint64_t>();
    } else if (key == "epsilon") {
      c.epsilon = detail::json_get<double>(v, key);
      if (!(c.epsilon > 0.0)) throw UsageError("config key 'epsilon' must be positive");
    } else if (key == "momentum") {
      if (v.is_string() && v.get<std::string>() == "cumulative")
        c.momentum = Momentum::cumulative_average();
      else if (v.is_number())
        c.momentum = Momentum::exponential(v.get<double>());
      else
        throw UsageError("config key 'momentum' must be a number or \"cumulative\"");
    } else if (key == "train_fraction") {
      c.train_fraction = detail::json_get<double>(v, key);
      if (!(c.train_fraction > 0.0 && c.train_fraction <= 1.0))
        throw UsageError("config key 'train_fraction' must lie in (0, 1]");
    } else if (key == "learning_rate") {
      c.learning_rate = detail::json_get<double>(v, key);
      if (!(c.learning_rate > 0.0)) throw UsageError("config key 'learning_rate' must be positive");
    } else if (key == "flags") {
      c.flags = detail::parse_flags(v);
    } else if (key == "train_path") {
      c.train_path = detail::json_get<std::string>(v, key);
    } else if (key == "test_path") {
      c.test_path = detail::json_get<std::string>(v, key);
    } else if (key == "samples_per_class") {
      c.samples_per_class = detail::json_count(v, key, 1);
    } else if (key == "classes") {
      c.classes = detail::json_count(v, key, 2);
    } else if (key == "separation") {
      c.separation = detail::json_get<double>(v, key);
      if (c.separation < 0.0) throw UsageError("config key 'separation' must be non-negative");
    } else if (key == "seq_length") {
      c.seq_length = detail::json_count(v, key, 1);
    } else if (key == "vocab") {
      c.vocab = detail::json_count(v, key, 2);
    } else {
      throw UsageError("unknown config key '" + key + "'");
    }
  }
  if (c.task == Task::cnn_cifar10 && (c.train_path.empty() || c.test_path.empty()))
    throw UsageError("task cnn-cifar10 needs 'train_path' and 'test_path'");
  return c;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// BLN_SEED, when set, replaces the config seed.
inline void apply_env_overrides(ExperimentConfig& c) {
  if (const char* s = std::getenv("BLN_SEED"); s && *s) {
    char* end = nullptr;
    const auto v = std::strtoull(s, &end, 10);
    if (*end != '\0') throw UsageError("BLN_SEED must be a non-negative integer");
    c.seed = v;
    c.seed_override = v;
  }
}

inline ExperimentConfig load_config(const std::string& path) {
  ExperimentConfig c = parse_config(read_text_file(path));
  apply_env_overrides(c);
  return c;
}

// ---------------------------------------------------------------------------
// Data and networks

struct Splits {
  Dataset train;
  Dataset validation;
  Dataset test;
};

namespace detail {

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose) {
  return Rng(seed).fork(purpose).next_u64();
}

inline constexpr std::size_t kBlobSide = 8;

}  // namespace detail

/// Test split (20% of the synthetic pool, or the CIFAR test file), a 10%
/// validation hold-out from the training pool, then train_fraction of
/// what remains. All splits are class-stratified and seed-determined.
inline Splits prepare_data(const ExperimentConfig& c) {
  Dataset pool, test;
  switch (c.task) {
    case Task::cnn_synthetic: {
      pool = gen_blobs(c.samples_per_class, c.classes, detail::kBlobSide * detail::kBlobSide,
                       c.separation, c.seed);
      pool.inputs = reshape(pool.inputs, {pool.size(), 1, detail::kBlobSide, detail::kBlobSide});
      break;
    }
    case Task::rnn_synthetic:
      pool = gen_parity_sequences(c.samples_per_class * 2, c.seq_length, c.vocab, c.seed);
      break;
    case Task::cnn_cifar10:
      pool = load_cifar10_binary(c.train_path);
      test = load_cifar10_binary(c.test_path);
      break;
  }
  if (c.task != Task::cnn_cifar10) {
    auto [held, rest] = stratified_split(pool, 0.2, detail::derive_seed(c.seed, 1));
    if (rest.empty()) throw DataError("dataset too small to split");
    test = take(pool, held);
    pool = take(pool, rest);
  }
  auto [val_idx, train_idx] = stratified_split(pool, 0.1, detail::derive_seed(c.seed, 2));
  if (train_idx.empty()) throw DataError("dataset too small to hold out validation data");
  Splits s{take(pool, train_idx), take(pool, val_idx), std::move(test)};
  s.train = subset(s.train, c.train_fraction, detail::derive_seed(c.seed, 3));
  return s;
}

/// CNN: conv(8, 3x3) -> relu -> norm -> avgpool -> flatten -> dense(32) ->
/// relu -> norm -> dense(C). RNN: rnn-cell(32) -> norm -> dense(C).
inline Network build_network(Task task, Normalizer normalizer, const Shape& input_shape,
                             std::size_t classes, double epsilon, Momentum momentum,
                             std::uint64_t seed) {
  Rng rng = Rng(seed).fork(10);
  Network net;
  auto norm = [&](std::size_t features) {
    if (normalizer != Normalizer::none)
      net.emplace<Norm>(norm_kind(normalizer), features, epsilon, momentum);
  };
  constexpr double kHeadScale = 0.1;
  if (task == Task::rnn_synthetic) {
    if (input_shape.size() != 3) throw ShapeError("rnn task expects [N, T, V] inputs");
    constexpr std::size_t kHidden = 32;
    net.emplace<RnnCell>(input_shape[2], kHidden, rng);
    norm(kHidden);
    net.emplace<Dense>(kHidden, classes, rng, kHeadScale);
    return net;
  }
  if (input_shape.size() != 4) throw ShapeError("cnn task expects [N, C, H, W] inputs");
  constexpr std::size_t kFilters = 8, kKernel = 3, kHidden = 32;
  const std::size_t oh = input_shape[2] - kKernel + 1, ow = input_shape[3] - kKernel + 1;
  net.emplace<Conv2d>(input_shape[1], kFilters, kKernel, rng);
  net.emplace<Activation>(ActivationKind::relu);
  norm(kFilters * oh * ow);
  net.emplace<AvgPool2x2>();
  net.emplace<Flatten>();
  net.emplace<Dense>(kFilters * (oh / 2) * (ow / 2), kHidden, rng);
  net.emplace<Activation>(ActivationKind::relu);
  norm(kHidden);
  net.emplace<Dense>(kHidden, classes, rng, kHeadScale);
  return net;
}

// ---------------------------------------------------------------------------
// Training runs and metrics

struct MetricsRecord {
  std::string run_id;
  std::string normalizer;
  std::size_t batch_size = 0;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
};

inline std::string run_id(Normalizer n, std::size_t batch_size, std::uint64_t seed) {
  return to_string(n) + "-bs" + std::to_string(batch_size) + "-seed" + std::to_string(seed);
}

struct TrainedRun {
  std::vector<MetricsRecord> records;
  Network network;
  Shape input_shape;
  std::size_t classes = 0;
  Normalizer normalizer = Normalizer::none;
  std::size_t batch_size = 0;
};

/// Train one network; each epoch logs a train row (training-mode averages)
/// and a test row (inference mode with the config flags).
inline TrainedRun run_training(const ExperimentConfig& c, const Splits& data,
                               Normalizer normalizer, std::size_t batch_size) {
  Shape input_shape = data.train.inputs.shape();
  input_shape[0] = 1;
  TrainedRun run{{},
                 build_network(c.task, normalizer, input_shape, data.train.classes, c.epsilon,
                               c.momentum, c.seed),
                 input_shape,
                 data.train.classes,
                 normalizer,
                 batch_size};
  AdamState adam{{c.learning_rate, 0.9, 0.999, 1e-8}, {}, {}, 0};
  const std::string id = run_id(normalizer, batch_size, c.seed);
  std::size_t steps = 0;
  for (std::size_t epoch = 1; epoch <= c.epochs; ++epoch) {
    const EpochMetrics em = network_train_epoch(run.network, data.train, batch_size, adam,
                                                Rng(c.seed).fork(100 + epoch));
    steps += em.steps;
    run.records.push_back({id, to_string(normalizer), batch_size, c.seed, epoch, steps, "train",
                           em.loss, em.accuracy});
    const EvalMetrics ev = network_evaluate(run.network, data.test, c.flags, batch_size);
    run.records.push_back({id, to_string(normalizer), batch_size, c.seed, epoch, steps, "test",
                           ev.loss, ev.accuracy});
  }
  return run;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_bool(bool b) { return b ? "True" : "False"; }

inline std::string config_comment(const ExperimentConfig& c) {
  std::string out;
  std::istringstream in(c.source_text);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out += "# " + line + "\n";
  }
  if (c.seed_override) out += "# BLN_SEED=" + std::to_string(*c.seed_override) + "\n";
  return out;
}

inline std::string format_metrics_row(const MetricsRecord& r) {
  return r.run_id + "," + r.normalizer + "," + std::to_string(r.batch_size) + "," +
         std::to_string(r.seed) + "," + std::to_string(r.epoch) + "," + std::to_string(r.step) +
         "," + r.split + "," + format_double(r.loss) + "," + format_double(r.accuracy) + "\n";
}

inline std::string metrics_csv(const ExperimentConfig& c,
                               const std::vector<MetricsRecord>& records) {
  std::string out = config_comment(c);
  out += kMetricsHeader;
  out += "\n";
  for (const auto& r : records) out += format_metrics_row(r);
  return out;
}

inline std::string grid_csv(const std::vector<ConfigResult>& ranked) {
  std::string out = kGridHeader;
  out += "\n";
  for (const auto& r : ranked)
    out += std::to_string(r.rank) + "," + format_bool(r.flags.e_b) + "," +
           format_bool(r.flags.std_b) + "," + format_bool(r.flags.e_f) + "," +
           format_bool(r.flags.std_f) + "," + format_double(r.loss) + "," +
           format_double(r.accuracy) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "BLN1", u64 little-endian manifest length, JSON manifest,
// then little-endian float64 buffers in manifest order.

inline constexpr char kCheckpointMagic[4] = {'B', 'L', 'N', '1'};
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ExperimentConfig config;
  Network network;
  Shape input_shape;
  std::size_t classes = 0;
  Normalizer normalizer = Normalizer::none;
  std::size_t batch_size = 0;
  InferenceFlags flags;
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t& pos) {
  if (pos + 8 > in.size()) throw DataError("truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 8;
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  Json layers = Json::array();
  std::vector<const Tensor*> payload;
  std::vector<std::vector<NamedBuffer>> states;
  for (std::size_t i = 0; i < ck.network.size(); ++i)
    states.push_back(ck.network.layer(i).state());
  for (std::size_t i = 0; i < ck.network.size(); ++i) {
    Json buffers = Json::array();
    for (const auto& b : states[i]) {
      buffers.push_back({{"name", b.name}, {"shape", b.value.shape()}});
      payload.push_back(&b.value);
    }
    layers.push_back({{"kind", to_string(ck.network.layer(i).kind())},
                      {"type", ck.network.layer(i).describe()},
                      {"buffers", buffers}});
  }
  const Json manifest{{"version", kCheckpointVersion},
                      {"config", ck.config.source_text},
                      {"task", to_string(ck.config.task)},
                      {"normalizer", to_string(ck.normalizer)},
                      {"batch_size", ck.batch_size},
                      {"seed", ck.config.seed},
                      {"input_shape", ck.input_shape},
                      {"classes", ck.classes},
                      {"flags", detail::flags_json(ck.flags)},
                      {"layers", layers}};
  const std::string text = manifest.dump();
  std::string out(kCheckpointMagic, 4);
  detail::put_u64(out, text.size());
  out += text;
  for (const Tensor* t : payload)
    for (double v : t->data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, kCheckpointMagic, 4) != 0)
    throw DataError("not a BLN1 checkpoint");
  std::size_t pos = 4;
  const std::uint64_t len = detail::get_u64(bytes, pos);
  if (pos + len > bytes.size()) throw DataError("truncated checkpoint manifest");
  Json m;
  try {
    m = Json::parse(bytes.substr(pos, len));
  } catch (const Json::exception& e) {
    throw DataError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  pos += len;
  try {
    if (m.at("version").get<int>() != kCheckpointVersion)
      throw DataError("unsupported checkpoint version");
    Checkpoint ck;
    ck.config = parse_config(m.at("config").get<std::string>());
    ck.config.seed = m.at("seed").get<std::uint64_t>();
    ck.normalizer = parse_normalizer(m.at("normalizer").get<std::string>());
    ck.batch_size = m.at("batch_size").get<std::size_t>();
    ck.input_shape = m.at("input_shape").get<Shape>();
    ck.classes = m.at("classes").get<std::size_t>();
    ck.flags = detail::parse_flags(m.at("flags"));
    ck.network = build_network(ck.config.task, ck.normalizer, ck.input_shape, ck.classes,
                               ck.config.epsilon, ck.config.momentum, ck.config.seed);
    const Json& layers = m.at("layers");
    if (layers.size() != ck.network.size()) throw DataError("checkpoint layer count mismatch");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      Layer& layer = ck.network.layer(i);
      if (layers[i].at("type").get<std::string>() != layer.describe())
        throw DataError("checkpoint layer " + std::to_string(i) + " type mismatch");
      std::vector<NamedBuffer> buffers;
      for (const auto& b : layers[i].at("buffers")) {
        Tensor t(b.at("shape").get<Shape>());
        for (auto& v : t.data()) v = std::bit_cast<double>(detail::get_u64(bytes, pos));
        buffers.push_back({b.at("name").get<std::string>(), std::move(t)});
      }
      layer.load_state(buffers);
    }
    if (pos != bytes.size()) throw DataError("trailing bytes after checkpoint payload");
    return ck;
  } catch (const Json::exception& e) {
    throw DataError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path);
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck, bool force) {
  if (!force && std::filesystem::exists(path))
    throw UsageError("checkpoint " + path + " already exists (pass --force to overwrite)");
  write_file(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  return deserialize_checkpoint(
      {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()});
}

// ---------------------------------------------------------------------------
// Gradient verification

struct GradGroup {
  std::string name;
  double max_rel_error = 0.0;
};

struct GradReport {
  std::vector<GradGroup> groups;

  double worst() const {
    double w = 0.0;
    for (const auto& g : groups) w = std::max(w, g.max_rel_error);
    return w;
  }
  bool passed(double tolerance = 1e-4) const { return worst() < tolerance; }
};

inline constexpr double kFiniteDifferenceStep = 1e-5;

/// |a - n| / max(|a|, |n|, floor). The floor keeps exact-zero gradients
/// (which the finite difference reproduces only up to rounding) from
/// reporting spurious relative error.
inline double relative_error(double analytic, double numeric, double floor = 1e-7) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {

template <typename LossFn>
double group_error(Tensor& param, const Tensor& analytic, LossFn&& loss) {
  double worst = 0.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double saved = param[i];
    param[i] = saved + kFiniteDifferenceStep;
    const double up = loss();
    param[i] = saved - kFiniteDifferenceStep;
    const double down = loss();
    param[i] = saved;
    const double numeric = (up - down) / (2.0 * kFiniteDifferenceStep);
    worst = std::max(worst, relative_error(analytic[i], numeric));
  }
  return worst;
}

}  // namespace detail

/// Check one normalizer's training-mode backward against central finite
/// differences of L = sum(dy * y) with random x, gamma, beta, dy.
/// `corrupt` perturbs the analytic dx to exercise the detector.
inline GradReport gradcheck_norm(NormKind kind, std::size_t m, std::size_t d,
                                 std::uint64_t seed, bool corrupt = false) {
  Rng rng(seed);
  Tensor x = randn({m, d}, rng);
  NormParams p = NormParams::identity(d);
  p.gamma = add(ones({d}), scale(randn({d}, rng), 0.5));
  p.beta = randn({d}, rng);
  const Tensor dy = randn({m, d}, rng);
  const RunningStats running = RunningStats::initial(d);

  auto forward = [&] {
    switch (kind) {
      case NormKind::batch: return bn_forward_train(x, p, running);
      case NormKind::layer: return ln_forward(x, p);
      case NormKind::batch_layer: return bln_forward_train(x, p, running);
    }
    throw Error("unknown normalizer");
  };
  auto loss = [&] { return sum(mul(forward().y, dy)); };

  NormGrads g = norm_backward(forward().cache, dy);
  if (corrupt) g.dx[0] += 1e-2 * (1.0 + std::abs(g.dx[0]));
  GradReport r;
  r.groups.push_back({"dx", detail::group_error(x, g.dx, loss)});
  r.groups.push_back({"dgamma", detail::group_error(p.gamma, g.dgamma, loss)});
  r.groups.push_back({"dbeta", detail::group_error(p.beta, g.dbeta, loss)});
  return r;
}

/// Whole-network check: dense(5 -> d) -> tanh -> norm -> dense(d -> 3)
/// with cross-entropy over a batch of m, every parameter perturbed.
inline GradReport gradcheck_network(Normalizer normalizer, std::size_t m, std::size_t d,
                                    std::uint64_t seed, bool corrupt = false) {
  constexpr std::size_t kInputs = 5, kClasses = 3;
  Rng rng(seed);
  Network net;
  net.emplace<Dense>(kInputs, d, rng);
  net.emplace<Activation>(ActivationKind::tanh);
  if (normalizer != Normalizer::none) net.emplace<Norm>(norm_kind(normalizer), d);
  net.emplace<Dense>(d, kClasses, rng);
  // Non-trivial gamma/beta so their gradients are exercised off identity.
  for (auto& p : net.params())
    if (p.name.ends_with("gamma") || p.name.ends_with("beta"))
      *p.value = add(*p.value, scale(randn(p.value->shape(), rng), 0.3));

  const Tensor x = randn({m, kInputs}, rng);
  std::vector<std::size_t> labels(m);
  for (auto& l : labels) l = static_cast<std::size_t>(rng.below(kClasses));

  auto loss = [&] { return cross_entropy(net.forward(x), labels).loss; };
  net.backward(cross_entropy(net.forward(x), labels).dlogits);
  auto params = net.params();
  std::vector<Tensor> analytic;
  for (const auto& p : params) analytic.push_back(*p.grad);
  if (corrupt) analytic.front()[0] += 1e-2 * (1.0 + std::abs(analytic.front()[0]));

  GradReport r;
  for (std::size_t i = 0; i < params.size(); ++i)
    r.groups.push_back({params[i].name, detail::group_error(*params[i].value, analytic[i], loss)});
  return r;
}

// ---------------------------------------------------------------------------
// Commands

struct CommandOptions {
  std::string config_path;
  std::string out_path;
  std::string checkpoint_path;
  bool force = false;
  bool search_on_test = false;
  std::size_t threads = 1;
};

struct GradcheckOptions {
  std::string layer = "bln";  // bn, ln, bln, net-none, net-bn, net-ln, net-bln
  std::size_t m = 25;
  std::size_t d = 8;
  std::uint64_t seed = 0;
  bool corrupt = false;
};

namespace detail {

inline void emit(const CommandOptions& o, const std::string& text, std::ostream& out) {
  if (o.out_path.empty()) out << text;
  else write_file(o.out_path, text);
}

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace detail

inline int cmd_train(const CommandOptions& o, std::ostream& out = std::cout,
                     std::ostream& err = std::cerr) {
  return detail::guarded(err, [&] {
    if (o.config_path.empty()) throw UsageError("train needs --config");
    const ExperimentConfig c = load_config(o.config_path);
    if (!o.checkpoint_path.empty() && !o.force && std::filesystem::exists(o.checkpoint_path))
      throw UsageError("checkpoint " + o.checkpoint_path +
                       " already exists (pass --force to overwrite)");
    const Splits data = prepare_data(c);
    TrainedRun run = run_training(c, data, c.normalizer, c.batch_size);
    detail::emit(o, metrics_csv(c, run.records), out);
    if (!o.checkpoint_path.empty())
      save_checkpoint(o.checkpoint_path,
                      {c, std::move(run.network), run.input_shape, run.classes, run.normalizer,
                       run.batch_size, c.flags},
                      o.force);
    return kExitOk;
  });
}

/// Train every (normalizer, batch size) pair with the same seed and
/// hyperparameters; rows are emitted in config order.
inline int cmd_compare(const CommandOptions& o, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
  return detail::guarded(err, [&] {
    if (o.config_path.empty()) throw UsageError("compare needs --config");
    const ExperimentConfig c = load_config(o.config_path);
    if (c.normalizers.size() < 2)
      throw UsageError("compare needs at least two entries in 'normalizers'");
    const std::vector<std::size_t> sizes =
        c.batch_sizes.empty() ? std::vector<std::size_t>{c.batch_size} : c.batch_sizes;
    const Splits data = prepare_data(c);

    std::vector<std::pair<Normalizer, std::size_t>> jobs;
    for (auto n : c.normalizers)
      for (auto b : sizes) jobs.emplace_back(n, b);
    std::vector<std::vector<MetricsRecord>> results(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    auto work = [&](std::size_t i) {
      try {
        results[i] = run_training(c, data, jobs[i].first, jobs[i].second).records;
      } catch (...) {
        errors[i] = std::current_exception();
      }
    };
    const std::size_t threads = std::clamp<std::size_t>(o.threads, 1, jobs.size());
    {
      std::vector<std::jthread> pool;
      for (std::size_t t = 0; t < threads; ++t)
        pool.emplace_back([&, t] {
          for (std::size_t i = t; i < jobs.size(); i += threads) work(i);
        });
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);

    std::vector<MetricsRecord> all;
    for (auto& r : results) all.insert(all.end(), r.begin(), r.end());
    detail::emit(o, metrics_csv(c, all), out);
    return kExitOk;
  });
}

/// Rank the 16 inference configurations of a trained BLN checkpoint on
/// the validation hold-out (or the test split with search_on_test).
inline int cmd_gridsearch(const CommandOptions& o, std::ostream& out = std::cout,
                          std::ostream& err = std::cerr) {
  return detail::guarded(err, [&] {
    if (o.checkpoint_path.empty()) throw UsageError("gridsearch needs --checkpoint");
    const Checkpoint ck = load_checkpoint(o.checkpoint_path);
    if (!ck.network.has_bln()) throw DataError("no BLN layers to configure");
    ExperimentConfig c = ck.config;
    if (!o.config_path.empty()) c = load_config(o.config_path);
    const Splits data = prepare_data(c);
    const Dataset& target = o.search_on_test ? data.test : data.validation;
    const auto ranked = evaluate_all(ck.network, target, ck.batch_size, o.threads);
    detail::emit(o, grid_csv(ranked), out);
    return kExitOk;
  });
}

inline GradReport run_gradcheck(const GradcheckOptions& g) {
  const std::string& l = g.layer;
  if (l == "bn") return gradcheck_norm(NormKind::batch, g.m, g.d, g.seed, g.corrupt);
  if (l == "ln") return gradcheck_norm(NormKind::layer, g.m, g.d, g.seed, g.corrupt);
  if (l == "bln") return gradcheck_norm(NormKind::batch_layer, g.m, g.d, g.seed, g.corrupt);
  if (l.starts_with("net-"))
    return gradcheck_network(parse_normalizer(l.substr(4)), g.m, g.d, g.seed, g.corrupt);
  throw UsageError("unknown gradcheck layer '" + l + "'");
}

inline int cmd_gradcheck(const GradcheckOptions& g, std::ostream& out = std::cout,
                         std::ostream& err = std::cerr) {
  return detail::guarded(err, [&] {
    if (g.m == 0 || g.d == 0) throw UsageError("gradcheck needs m >= 1 and d >= 1");
    const GradReport r = run_gradcheck(g);
    out << "gradcheck " << g.layer << " m=" << g.m << " d=" << g.d << " seed=" << g.seed << "\n";
    for (const auto& grp : r.groups)
      out << "  " << grp.name << " max_rel_error=" << format_double(grp.max_rel_error) << "\n";
    const bool ok = r.passed();
    out << (ok ? "PASS" : "FAIL") << "\n";
    return ok ? kExitOk : kExitVerification;
  });
}

}  // namespace bln
