#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "depthlens/dump_io.hpp"
#include "depthlens/numerics.hpp"

namespace depthlens {

// Which decoder maps a hidden state to logits. A tuned lens borrows the
// translator set; the caller keeps it alive.
class LensKind {
 public:
  static LensKind logit() { return LensKind(nullptr); }
  static LensKind tuned(const TranslatorSet& translators) { return LensKind(&translators); }

  bool is_tuned() const { return translators_ != nullptr; }
  const TranslatorSet& translators() const { return *translators_; }
  std::string name() const { return is_tuned() ? "tuned" : "logit"; }

 private:
  explicit LensKind(const TranslatorSet* t) : translators_(t) {}
  const TranslatorSet* translators_;
};

Vector logit_lens(std::span<const double> h, const NormSpec& norm, const Matrix& unembedding);
Vector tuned_lens(std::span<const double> h, const Translator& translator, const NormSpec& norm,
                  const Matrix& unembedding);
// A . h + b
Vector apply_translator(const Translator& translator, std::span<const double> h);

struct LensGradient {
  double loss = 0.0;
  Matrix grad_weight;
  Vector grad_bias;
};

// Weighted forward KL between softmax(final_logits) and the tuned-lens
// distribution of h, with the exact gradient with respect to (A, b). Empty
// token_weights means all ones.
LensGradient lens_loss_and_grad(std::span<const double> final_logits, std::span<const double> h,
                                const Translator& translator, const NormSpec& norm,
                                const Matrix& unembedding,
                                std::span<const double> token_weights = {});

// Gradient of the weighted loss at the softmax input: q * sum(w.p) - w.p.
Vector logit_gradient(std::span<const double> p, std::span<const double> q,
                      std::span<const double> token_weights);

enum class OptimizerKind { adam, sgd };

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct InitConfig {
  enum class Kind { identity, random } kind = Kind::identity;
  // random: A = I + scale * N(0,1), b = scale * N(0,1)
  double scale = 0.0;

  std::string describe() const;
};

enum class MaskMode {
  weight,         // down-weight the token's term inside the KL sum
  skip_examples,  // drop examples whose target is the token with probability 1 - factor
};

struct TokenMask {
  TokenId token = 0;
  double factor = 1.0;
  MaskMode mode = MaskMode::weight;
};

struct TrainConfig {
  std::size_t epochs = 250;  // full passes over the dump
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  AdamParams adam;
  std::uint64_t seed = 0;
  Vector token_weights;  // empty = all 1.0
  InitConfig init;
  bool train_final_layer = false;
  std::size_t threads = 1;

  void validate(std::size_t vocab_size) const;
};

struct TrainLogRow {
  std::size_t layer = 0;  // 1-based
  std::size_t epoch = 0;  // 1-based
  double mean_kl = 0.0;   // mean training objective over the epoch's examples
};

struct TrainResult {
  TranslatorSet translators;
  std::vector<TrainLogRow> log;
};

// Trains one affine translator per layer. Layers are independent jobs and
// the result is bitwise identical for any thread count.
TrainResult train_translators(const ModelDump& dump, const TrainConfig& config);

// Same as train_translators with the mask applied. A factor of exactly 1 is a
// no-op and yields the unmasked result bit for bit, metadata included.
TrainResult train_masked_translators(const ModelDump& dump, const TrainConfig& config,
                                     const TokenMask& mask);

// Mean unweighted KL of the lens at `layer` (0-based) over the whole dump.
double mean_layer_kl(const ModelDump& dump, std::size_t layer, const Translator& translator);

// Dense decode of every (example, layer): logits[n][l] of length |V|.
class DecodedLogits {
 public:
  DecodedLogits(std::size_t examples, std::size_t layers, std::size_t vocab);

  std::size_t examples() const { return examples_; }
  std::size_t layers() const { return layers_; }
  std::size_t vocab() const { return vocab_; }

  std::span<double> at(std::size_t n, std::size_t l) {
    return {data_.data() + (n * layers_ + l) * vocab_, vocab_};
  }
  std::span<const double> at(std::size_t n, std::size_t l) const {
    return {data_.data() + (n * layers_ + l) * vocab_, vocab_};
  }

 private:
  std::size_t examples_, layers_, vocab_;
  std::vector<double> data_;
};

void check_lens(const ModelDump& dump, const LensKind& lens);

Vector decode(const ModelDump& dump, const LensKind& lens, std::size_t example, std::size_t layer);

DecodedLogits decode_all(const ModelDump& dump, const LensKind& lens, std::size_t threads = 1);

// Streams decoded logits to `visit(example, layer, logits)`. Calls for
// different examples may run concurrently; calls for one example are
// sequential in layer order.
void for_each_decoded(const ModelDump& dump, const LensKind& lens, std::size_t threads,
                      const std::function<void(std::size_t, std::size_t, std::span<const double>)>& visit);

}  // namespace depthlens
