#include "fedrank/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedrank/errors.hpp"
#include "fedrank/rng.hpp"
#include "flat_file.hpp"

namespace fedrank {

namespace {

// Logits for one example. `hidden` receives tanh activations for mlp1.
void forward(const ModelParams& p, std::span<const double> x,
             std::span<double> hidden, std::span<double> logits) {
  const double* w = p.weights.data();
  if (p.kind == ModelKind::kSoftmaxRegression) {
    const std::size_t d = p.shape[0], classes = p.shape[1];
    const double* b = w + classes * d;
    for (std::size_t c = 0; c < classes; ++c) {
      double z = b[c];
      const double* wc = w + c * d;
      for (std::size_t k = 0; k < d; ++k) z += wc[k] * x[k];
      logits[c] = z;
    }
    return;
  }
  const std::size_t d = p.shape[0], h = p.shape[1], classes = p.shape[2];
  const double* w1 = w;
  const double* b1 = w1 + h * d;
  const double* w2 = b1 + h;
  const double* b2 = w2 + classes * h;
  for (std::size_t j = 0; j < h; ++j) {
    double a = b1[j];
    const double* wj = w1 + j * d;
    for (std::size_t k = 0; k < d; ++k) a += wj[k] * x[k];
    hidden[j] = std::tanh(a);
  }
  for (std::size_t c = 0; c < classes; ++c) {
    double z = b2[c];
    const double* wc = w2 + c * h;
    for (std::size_t j = 0; j < h; ++j) z += wc[j] * hidden[j];
    logits[c] = z;
  }
}

// In-place softmax; returns log-sum-exp of the input logits.
double softmax_inplace(std::span<double> z) {
  const double peak = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (auto& v : z) {
    v = std::exp(v - peak);
    total += v;
  }
  for (auto& v : z) v /= total;
  return peak + std::log(total);
}

std::size_t hidden_width(const ModelParams& p) {
  return p.kind == ModelKind::kMlp1 ? p.shape[1] : 0;
}

}  // namespace

std::string to_string(ModelKind kind) {
  return kind == ModelKind::kSoftmaxRegression ? "softmax_regression" : "mlp1";
}

ModelKind model_kind_from_string(const std::string& name) {
  if (name == "softmax_regression") return ModelKind::kSoftmaxRegression;
  if (name == "mlp1") return ModelKind::kMlp1;
  throw InvalidSpec("unknown model kind \"" + name + "\"");
}

std::size_t parameter_count(ModelKind kind, std::span<const std::size_t> shape) {
  if (kind == ModelKind::kSoftmaxRegression) {
    if (shape.size() != 2) throw InvalidSpec("softmax_regression shape is {d, C}");
    return shape[1] * shape[0] + shape[1];
  }
  if (shape.size() != 3) throw InvalidSpec("mlp1 shape is {d, h, C}");
  return shape[1] * shape[0] + shape[1] + shape[2] * shape[1] + shape[2];
}

void ModelParams::validate() const {
  if (weights.size() != parameter_count(kind, shape)) {
    throw InvalidSpec("parameter vector length does not match shape");
  }
  for (double w : weights) {
    if (!std::isfinite(w)) throw InvalidSpec("non-finite model parameter");
  }
}

ModelParams init_params(ModelKind kind, std::size_t dims, std::size_t classes,
                        std::size_t hidden, std::uint64_t seed) {
  if (dims == 0 || classes < 2) throw InvalidSpec("model needs d >= 1 and C >= 2");
  ModelParams p;
  p.kind = kind;
  if (kind == ModelKind::kSoftmaxRegression) {
    p.shape = {dims, classes};
  } else {
    if (hidden == 0) throw InvalidSpec("mlp1 needs a positive hidden width");
    p.shape = {dims, hidden, classes};
  }
  p.weights.assign(parameter_count(kind, p.shape), 0.0);
  if (kind == ModelKind::kMlp1) {
    Rng rng(seed);
    const double limit = std::sqrt(6.0 / static_cast<double>(dims + hidden));
    for (std::size_t i = 0; i < hidden * dims; ++i) {
      p.weights[i] = limit * (2.0 * rng.uniform() - 1.0);
    }
  }
  return p;
}

std::vector<double> predict_proba(const ModelParams& params,
                                  std::span<const double> x) {
  std::vector<double> hidden(hidden_width(params));
  std::vector<double> z(params.num_classes());
  forward(params, x, hidden, z);
  softmax_inplace(z);
  return z;
}

double batch_loss(const ModelParams& params, const Dataset& data,
                  std::span<const std::size_t> rows, std::span<double> grad) {
  const std::size_t classes = params.num_classes();
  const std::size_t h = hidden_width(params);
  std::vector<double> hidden(h), z(classes), dh(h);
  const bool want_grad = !grad.empty();
  if (want_grad) std::fill(grad.begin(), grad.end(), 0.0);
  const double scale = 1.0 / static_cast<double>(rows.size());

  double total = 0.0;
  for (auto row : rows) {
    const auto x = data.row(row);
    const auto y = static_cast<std::size_t>(data.labels[row]);
    forward(params, x, hidden, z);
    const double zy = z[y];
    const double lse = softmax_inplace(z);
    total += lse - zy;
    if (!want_grad) continue;

    z[y] -= 1.0;  // dL/dlogits = p - onehot(y)
    if (params.kind == ModelKind::kSoftmaxRegression) {
      const std::size_t d = params.shape[0];
      double* gw = grad.data();
      double* gb = gw + classes * d;
      for (std::size_t c = 0; c < classes; ++c) {
        const double dz = z[c] * scale;
        double* gwc = gw + c * d;
        for (std::size_t k = 0; k < d; ++k) gwc[k] += dz * x[k];
        gb[c] += dz;
      }
    } else {
      const std::size_t d = params.shape[0];
      const double* w2 = params.weights.data() + h * d + h;
      double* gw1 = grad.data();
      double* gb1 = gw1 + h * d;
      double* gw2 = gb1 + h;
      double* gb2 = gw2 + classes * h;
      std::fill(dh.begin(), dh.end(), 0.0);
      for (std::size_t c = 0; c < classes; ++c) {
        const double dz = z[c] * scale;
        double* gwc = gw2 + c * h;
        const double* wc = w2 + c * h;
        for (std::size_t j = 0; j < h; ++j) {
          gwc[j] += dz * hidden[j];
          dh[j] += dz * wc[j];
        }
        gb2[c] += dz;
      }
      for (std::size_t j = 0; j < h; ++j) {
        const double da = dh[j] * (1.0 - hidden[j] * hidden[j]);
        double* gwj = gw1 + j * d;
        for (std::size_t k = 0; k < d; ++k) gwj[k] += da * x[k];
        gb1[j] += da;
      }
    }
  }
  return total * scale;
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw InvalidSpec("learning_rate must be finite and non-negative");
  }
  if (batch_size == 0) throw InvalidSpec("batch_size must be positive");
  if (local_epochs == 0) throw InvalidSpec("local_epochs must be >= 1");
}

std::uint64_t client_seed(std::uint64_t run_seed, std::size_t client_id,
                          std::size_t round) {
  return derive_seed(derive_seed(derive_seed(run_seed, "client"), client_id), round);
}

double EpochResult::mean_loss() const {
  if (batch_losses.empty()) return 0.0;
  return std::accumulate(batch_losses.begin(), batch_losses.end(), 0.0) /
         static_cast<double>(batch_losses.size());
}

EpochResult train_epoch(ModelParams& params, const Dataset& data,
                        std::span<const std::size_t> rows,
                        const TrainConfig& cfg, std::size_t epoch) {
  if (rows.empty()) throw InvalidSpec("cannot train on an empty shard");
  std::vector<std::size_t> order(rows.begin(), rows.end());
  Rng rng(derive_seed(cfg.seed, epoch));
  rng.shuffle(order);

  EpochResult result;
  std::vector<double> grad(params.weights.size());
  for (std::size_t start = 0, b = 0; start < order.size();
       start += cfg.batch_size, ++b) {
    const std::size_t len = std::min(cfg.batch_size, order.size() - start);
    const std::span<const std::size_t> batch(order.data() + start, len);
    const double loss = batch_loss(params, data, batch, grad);
    if (!std::isfinite(loss)) {
      throw NumericError("non-finite training loss in epoch " +
                             std::to_string(epoch) + ", batch " + std::to_string(b),
                         b);
    }
    result.batch_losses.push_back(loss);
    for (std::size_t i = 0; i < grad.size(); ++i) {
      params.weights[i] -= cfg.learning_rate * grad[i];
    }
  }
  return result;
}

ProbeResult probe_epoch(const ModelParams& params, const Dataset& data,
                        const ClientShard& shard, const TrainConfig& cfg) {
  ProbeResult out{params, 0.0, {}};
  auto epoch = train_epoch(out.params, data, shard.example_indices, cfg, 0);
  out.probing_loss = epoch.mean_loss();
  out.batch_losses = std::move(epoch.batch_losses);
  return out;
}

LocalTrainingResult finish_local_training(const ModelParams& params_after_probe,
                                          const Dataset& data,
                                          const ClientShard& shard,
                                          const TrainConfig& cfg) {
  LocalTrainingResult out{params_after_probe, 0, 0};
  for (std::size_t e = 1; e < cfg.local_epochs; ++e) {
    const auto epoch = train_epoch(out.params, data, shard.example_indices, cfg, e);
    ++out.epochs_run;
    out.batches_run += epoch.batch_losses.size();
  }
  return out;
}

ModelParams fedavg_aggregate(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw AggregationError("no updates to aggregate");
  std::vector<const ClientUpdate*> ordered;
  ordered.reserve(updates.size());
  for (const auto& u : updates) ordered.push_back(&u);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto* a, const auto* b) { return a->client_id < b->client_id; });

  const ModelParams& ref = *ordered.front()->params;
  double total = 0.0;
  for (const auto* u : ordered) {
    if (!u->params->same_shape(ref) ||
        u->params->weights.size() != ref.weights.size()) {
      throw AggregationError("update from client " + std::to_string(u->client_id) +
                             " has a mismatched shape");
    }
    if (u->data_size == 0) {
      throw AggregationError("update from client " + std::to_string(u->client_id) +
                             " has zero data size");
    }
    total += static_cast<double>(u->data_size);
  }
  // Anchored on the lowest-id update: identical inputs come back bit-exact.
  ModelParams out = ref;
  for (const auto* u : ordered) {
    const double frac = static_cast<double>(u->data_size) / total;
    const auto& w = u->params->weights;
    for (std::size_t i = 0; i < w.size(); ++i) out.weights[i] += frac * (w[i] - ref.weights[i]);
  }
  return out;
}

Evaluation evaluate(const ModelParams& params, const Dataset& data) {
  if (params.input_dims() != data.dims ||
      params.num_classes() != static_cast<std::size_t>(data.num_classes)) {
    throw InvalidSpec("model shape does not match dataset");
  }
  std::vector<double> hidden(hidden_width(params)), z(params.num_classes());
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    forward(params, data.row(i), hidden, z);
    const auto y = static_cast<std::size_t>(data.labels[i]);
    const auto best = static_cast<std::size_t>(
        std::max_element(z.begin(), z.end()) - z.begin());
    if (best == y) ++correct;
    const double zy = z[y];
    loss += softmax_inplace(z) - zy;
  }
  const double n = static_cast<double>(data.size());
  return {static_cast<double>(correct) / n, loss / n};
}

double weight_divergence(const ModelParams& global,
                         std::span<const ModelParams> locals) {
  double worst = 0.0;
  for (std::size_t i = 0; i < locals.size(); ++i) {
    const auto& local = locals[i];
    if (!local.same_shape(global) || local.weights.size() != global.weights.size()) {
      throw InvalidSpec("local model " + std::to_string(i) +
                        " shape differs from the global model");
    }
    double sq = 0.0;
    for (std::size_t k = 0; k < local.weights.size(); ++k) {
      const double diff = global.weights[k] - local.weights[k];
      sq += diff * diff;
    }
    worst = std::max(worst, std::sqrt(sq));
  }
  return worst;
}

void save_model(const std::filesystem::path& path, const ModelParams& params) {
  nlohmann::json header = {{"content", "model"},
                           {"kind", to_string(params.kind)},
                           {"shape", params.shape}};
  detail::write_flat_file(path, std::move(header), {{"weights", params.weights}});
}

ModelParams load_model(const std::filesystem::path& path) {
  const auto file = detail::read_flat_file(path);
  if (file.header.value("content", "") != "model") {
    throw ParseError(path.string() + ": not a model checkpoint");
  }
  ModelParams p;
  p.kind = model_kind_from_string(file.header.at("kind").get<std::string>());
  p.shape = file.header.at("shape").get<std::vector<std::size_t>>();
  const auto w = file.section("weights");
  p.weights.assign(w.begin(), w.end());
  p.validate();
  return p;
}

}  // namespace fedrank
