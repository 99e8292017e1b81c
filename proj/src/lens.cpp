#include "depthlens/lens.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <string>

#include "depthlens/error.hpp"
#include "depthlens/parallel.hpp"

namespace depthlens {

Vector apply_translator(const Translator& translator, std::span<const double> h) {
  const Matrix& a = translator.weight;
  if (a.cols() != h.size() || a.rows() != translator.bias.size()) {
    throw ShapeError("translator is " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " with bias " + std::to_string(translator.bias.size()) +
                     ", hidden state has length " + std::to_string(h.size()));
  }
  Vector out(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto row = a.row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) acc += row[c] * h[c];
    out[r] = acc + translator.bias[r];
  }
  return out;
}

Vector logit_lens(std::span<const double> h, const NormSpec& norm, const Matrix& unembedding) {
  return project(unembedding, apply_norm(h, norm));
}

Vector tuned_lens(std::span<const double> h, const Translator& translator, const NormSpec& norm,
                  const Matrix& unembedding) {
  return logit_lens(apply_translator(translator, h), norm, unembedding);
}

Vector logit_gradient(std::span<const double> p, std::span<const double> q,
                      std::span<const double> token_weights) {
  const std::size_t v = p.size();
  if (q.size() != v || (!token_weights.empty() && token_weights.size() != v)) {
    throw ShapeError("logit_gradient: mismatched vocabulary lengths");
  }
  Vector grad(v);
  if (token_weights.empty()) {
    for (std::size_t i = 0; i < v; ++i) grad[i] = q[i] - p[i];
    return grad;
  }
  double weighted_mass = 0.0;
  for (std::size_t i = 0; i < v; ++i) weighted_mass += token_weights[i] * p[i];
  for (std::size_t i = 0; i < v; ++i) grad[i] = q[i] * weighted_mass - token_weights[i] * p[i];
  return grad;
}

namespace {

// Adds one example's loss and parameter gradient into the accumulators and
// returns the loss.
double accumulate_example(std::span<const double> ref_log_probs, std::span<const double> h,
                          const Translator& translator, const NormSpec& norm,
                          const Matrix& unembedding, std::span<const double> token_weights,
                          Matrix& grad_weight, Vector& grad_bias) {
  const std::size_t v = unembedding.rows();
  const std::size_t d = h.size();
  const Vector u = apply_translator(translator, h);
  NormCache cache;
  const Vector y = apply_norm(u, norm, cache);
  const Vector z = project(unembedding, y);
  const Vector log_q = log_softmax(z);

  Vector p(v), q(v);
  double loss = 0.0;
  for (std::size_t i = 0; i < v; ++i) {
    p[i] = std::exp(ref_log_probs[i]);
    q[i] = std::exp(log_q[i]);
    if (p[i] > 0.0) {
      const double w = token_weights.empty() ? 1.0 : token_weights[i];
      loss += w * p[i] * (ref_log_probs[i] - log_q[i]);
    }
  }
  const Vector dz = logit_gradient(p, q, token_weights);
  const Vector dy = project_transpose(unembedding, dz);
  const Vector du = apply_norm_backward(dy, norm, cache);
  for (std::size_t r = 0; r < d; ++r) {
    auto row = grad_weight.row(r);
    for (std::size_t c = 0; c < d; ++c) row[c] += du[r] * h[c];
    grad_bias[r] += du[r];
  }
  return loss;
}

void check_weights(std::span<const double> token_weights, std::size_t vocab) {
  if (!token_weights.empty() && token_weights.size() != vocab) {
    throw ShapeError("token_weights has length " + std::to_string(token_weights.size()) +
                     ", vocabulary has " + std::to_string(vocab));
  }
}

}  // namespace

LensGradient lens_loss_and_grad(std::span<const double> final_logits, std::span<const double> h,
                                const Translator& translator, const NormSpec& norm,
                                const Matrix& unembedding, std::span<const double> token_weights) {
  if (final_logits.size() != unembedding.rows()) {
    throw ShapeError("final_logits has length " + std::to_string(final_logits.size()) +
                     ", vocabulary has " + std::to_string(unembedding.rows()));
  }
  check_weights(token_weights, unembedding.rows());
  const std::size_t d = h.size();
  LensGradient out{0.0, Matrix(d, d), Vector(d, 0.0)};
  const Vector ref = log_softmax(final_logits);
  out.loss = accumulate_example(ref, h, translator, norm, unembedding, token_weights,
                                out.grad_weight, out.grad_bias);
  return out;
}

std::string InitConfig::describe() const {
  if (kind == Kind::identity) return "identity";
  char buf[64];
  std::snprintf(buf, sizeof buf, "random(scale=%.17g)", scale);
  return buf;
}

void TrainConfig::validate(std::size_t vocab_size) const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be finite and > 0");
  }
  if (!token_weights.empty()) {
    if (token_weights.size() != vocab_size) {
      throw ConfigError("token_weights has length " + std::to_string(token_weights.size()) +
                        ", vocabulary has " + std::to_string(vocab_size));
    }
    for (double w : token_weights) {
      if (!std::isfinite(w) || w < 0.0) throw ConfigError("token_weights must be finite and >= 0");
    }
  }
  if (init.kind == InitConfig::Kind::random && (!std::isfinite(init.scale) || init.scale < 0.0)) {
    throw ConfigError("random init scale must be finite and >= 0");
  }
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 &&
        adam.epsilon > 0.0)) {
    throw ConfigError("adam parameters out of range");
  }
}

double mean_layer_kl(const ModelDump& dump, std::size_t layer, const Translator& translator) {
  double sum = 0.0;
  for (std::size_t n = 0; n < dump.num_examples(); ++n) {
    const Vector p = softmax(reference_logits(dump, n));
    const Vector q = softmax(tuned_lens(dump.hidden.at(n, layer), translator, dump.norm,
                                        dump.unembedding));
    sum += kl_divergence(p, q);
  }
  return sum / static_cast<double>(dump.num_examples());
}

namespace {

struct LayerJob {
  Translator translator;
  std::vector<TrainLogRow> log;
};

std::mt19937_64 layer_rng(std::uint64_t seed, std::size_t layer, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(layer), stream};
  return std::mt19937_64(seq);
}

// Shortest %g text that reads back as v.
std::string number_text(double v) {
  char buf[32];
  for (int precision = 1; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

LayerJob train_layer(const ModelDump& dump, const TrainConfig& config, std::size_t layer,
                     const std::optional<TokenMask>& skip) {
  const std::size_t n = dump.num_examples();
  const std::size_t d = dump.hidden_dim();
  const std::span<const double> weights = config.token_weights;

  LayerJob job{Translator::identity(d), {}};
  Translator& t = job.translator;
  if (config.init.kind == InitConfig::Kind::random) {
    std::mt19937_64 init_rng = layer_rng(config.seed, layer, 1);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& a : t.weight.values()) a += config.init.scale * normal(init_rng);
    for (double& b : t.bias) b = config.init.scale * normal(init_rng);
  }
  std::mt19937_64 order_rng = layer_rng(config.seed, layer, 0);
  std::mt19937_64 skip_rng = layer_rng(config.seed, layer, 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Matrix m_w(d, d), v_w(d, d);
  Vector m_b(d, 0.0), v_b(d, 0.0);
  std::size_t step = 0;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  auto context = [&](std::size_t epoch) {
    return "layer " + std::to_string(layer + 1) + ", epoch " + std::to_string(epoch);
  };

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double epoch_loss = 0.0;
    std::size_t epoch_count = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      Matrix g_w(d, d);
      Vector g_b(d, 0.0);
      double batch_loss = 0.0;
      std::size_t used = 0;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t ex = order[k];
        if (skip && dump.target_tokens[ex] == skip->token && unit(skip_rng) >= skip->factor) {
          continue;
        }
        try {
          const Vector ref = log_softmax(reference_logits(dump, ex));
          batch_loss += accumulate_example(ref, dump.hidden.at(ex, layer), t, dump.norm,
                                           dump.unembedding, weights, g_w, g_b);
        } catch (const NumericalError& e) {
          throw NumericalError(context(epoch) + ", example " + std::to_string(ex) + ": " + e.what());
        }
        ++used;
      }
      if (used == 0) continue;
      if (!std::isfinite(batch_loss)) {
        throw NumericalError(context(epoch) + ": non-finite loss " + number_text(batch_loss));
      }
      const double inv = 1.0 / static_cast<double>(used);
      for (double& g : g_w.values()) g *= inv;
      for (double& g : g_b) g *= inv;
      for (double g : g_w.values()) {
        if (!std::isfinite(g)) throw NumericalError(context(epoch) + ": non-finite gradient");
      }
      for (double g : g_b) {
        if (!std::isfinite(g)) throw NumericalError(context(epoch) + ": non-finite gradient");
      }
      epoch_loss += batch_loss;
      epoch_count += used;

      ++step;
      const double lr = config.learning_rate;
      if (config.optimizer == OptimizerKind::sgd) {
        auto a = t.weight.values();
        for (std::size_t i = 0; i < a.size(); ++i) a[i] -= lr * g_w.values()[i];
        for (std::size_t i = 0; i < d; ++i) t.bias[i] -= lr * g_b[i];
      } else {
        const AdamParams& ap = config.adam;
        const double c1 = 1.0 - std::pow(ap.beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(ap.beta2, static_cast<double>(step));
        auto update = [&](double& param, double& m, double& v, double g) {
          m = ap.beta1 * m + (1.0 - ap.beta1) * g;
          v = ap.beta2 * v + (1.0 - ap.beta2) * g * g;
          param -= lr * (m / c1) / (std::sqrt(v / c2) + ap.epsilon);
        };
        auto a = t.weight.values();
        auto ga = g_w.values();
        auto ma = m_w.values();
        auto va = v_w.values();
        for (std::size_t i = 0; i < a.size(); ++i) update(a[i], ma[i], va[i], ga[i]);
        for (std::size_t i = 0; i < d; ++i) update(t.bias[i], m_b[i], v_b[i], g_b[i]);
      }
      const bool finite = std::all_of(t.weight.values().begin(), t.weight.values().end(),
                                      [](double x) { return std::isfinite(x); }) &&
                          std::all_of(t.bias.begin(), t.bias.end(), [](double x) { return std::isfinite(x); });
      if (!finite) throw NumericalError(context(epoch) + ": translator diverged");
    }
    const double mean = epoch_count ? epoch_loss / static_cast<double>(epoch_count) : 0.0;
    job.log.push_back({layer + 1, epoch, mean});
  }
  return job;
}

TrainResult train_impl(const ModelDump& dump, const TrainConfig& config,
                       const std::optional<TokenMask>& skip, std::string mask_description) {
  config.validate(dump.vocab_size());
  const std::size_t layers = dump.num_layers();
  const std::size_t trained = config.train_final_layer ? layers : layers - 1;

  std::vector<LayerJob> jobs(layers);
  parallel_blocks(trained, 1, config.threads, [&](std::size_t begin, std::size_t end, std::size_t) {
    for (std::size_t l = begin; l < end; ++l) jobs[l] = train_layer(dump, config, l, skip);
  });
  if (!config.train_final_layer) jobs[layers - 1].translator = Translator::identity(dump.hidden_dim());

  TrainResult result;
  TrainingMetadata& meta = result.translators.metadata;
  meta.epochs = config.epochs;
  meta.batch_size = config.batch_size;
  meta.learning_rate = config.learning_rate;
  meta.optimizer = config.optimizer == OptimizerKind::adam
                       ? "adam(" + number_text(config.adam.beta1) + "," +
                             number_text(config.adam.beta2) + "," +
                             number_text(config.adam.epsilon) + ")"
                       : "sgd";
  meta.init = config.init.describe();
  meta.seed = config.seed;
  meta.loss_mask = std::move(mask_description);
  meta.final_mean_kl.resize(layers);
  parallel_blocks(layers, 1, config.threads, [&](std::size_t begin, std::size_t end, std::size_t) {
    for (std::size_t l = begin; l < end; ++l) {
      meta.final_mean_kl[l] = mean_layer_kl(dump, l, jobs[l].translator);
    }
  });
  for (std::size_t l = 0; l < layers; ++l) {
    meta.trained.push_back(l < trained);
    result.translators.layers.push_back(std::move(jobs[l].translator));
    result.log.insert(result.log.end(), jobs[l].log.begin(), jobs[l].log.end());
  }
  return result;
}

}  // namespace

TrainResult train_translators(const ModelDump& dump, const TrainConfig& config) {
  return train_impl(dump, config, std::nullopt, "none");
}

TrainResult train_masked_translators(const ModelDump& dump, const TrainConfig& config,
                                     const TokenMask& mask) {
  if (mask.token >= dump.vocab_size()) {
    throw ConfigError("mask token " + std::to_string(mask.token) + " >= vocab size " +
                      std::to_string(dump.vocab_size()));
  }
  if (!std::isfinite(mask.factor) || mask.factor < 0.0) {
    throw ConfigError("mask factor must be finite and >= 0");
  }
  if (mask.factor == 1.0) return train_translators(dump, config);

  const std::string detail =
      "token=" + std::to_string(mask.token) + ",factor=" + number_text(mask.factor);
  if (mask.mode == MaskMode::skip_examples) {
    if (mask.factor > 1.0) throw ConfigError("skip-mode mask factor must be <= 1");
    return train_impl(dump, config, mask, "skip:" + detail);
  }
  TrainConfig weighted = config;
  if (weighted.token_weights.empty()) weighted.token_weights.assign(dump.vocab_size(), 1.0);
  weighted.token_weights.at(mask.token) *= mask.factor;
  return train_impl(dump, weighted, std::nullopt, "weight:" + detail);
}

DecodedLogits::DecodedLogits(std::size_t examples, std::size_t layers, std::size_t vocab)
    : examples_(examples), layers_(layers), vocab_(vocab), data_(examples * layers * vocab, 0.0) {}

void check_lens(const ModelDump& dump, const LensKind& lens) {
  if (!lens.is_tuned()) return;
  const TranslatorSet& t = lens.translators();
  if (t.num_layers() != dump.num_layers() || t.dim() != dump.hidden_dim()) {
    throw ShapeError("translator set has " + std::to_string(t.num_layers()) +
                     " layers of dim " + std::to_string(t.dim()) + ", dump has " +
                     std::to_string(dump.num_layers()) + " layers of dim " +
                     std::to_string(dump.hidden_dim()));
  }
}

Vector decode(const ModelDump& dump, const LensKind& lens, std::size_t example, std::size_t layer) {
  const auto h = dump.hidden.at(example, layer);
  if (lens.is_tuned()) {
    return tuned_lens(h, lens.translators().layers[layer], dump.norm, dump.unembedding);
  }
  return logit_lens(h, dump.norm, dump.unembedding);
}

void for_each_decoded(
    const ModelDump& dump, const LensKind& lens, std::size_t threads,
    const std::function<void(std::size_t, std::size_t, std::span<const double>)>& visit) {
  check_lens(dump, lens);
  parallel_blocks(dump.num_examples(), 8, threads,
                  [&](std::size_t begin, std::size_t end, std::size_t) {
                    for (std::size_t n = begin; n < end; ++n) {
                      for (std::size_t l = 0; l < dump.num_layers(); ++l) {
                        const Vector logits = decode(dump, lens, n, l);
                        visit(n, l, logits);
                      }
                    }
                  });
}

DecodedLogits decode_all(const ModelDump& dump, const LensKind& lens, std::size_t threads) {
  DecodedLogits out(dump.num_examples(), dump.num_layers(), dump.vocab_size());
  for_each_decoded(dump, lens, threads,
                   [&](std::size_t n, std::size_t l, std::span<const double> logits) {
                     std::copy(logits.begin(), logits.end(), out.at(n, l).begin());
                   });
  return out;
}

}  // namespace depthlens
