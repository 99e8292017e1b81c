#include "depthlens/synthetic.hpp"

#include <cmath>
#include <random>
#include <string>

#include "depthlens/lens.hpp"

namespace depthlens::synthetic {

namespace {

double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

struct Gaussian {
  explicit Gaussian(std::uint64_t seed) : rng(seed) {}
  double operator()(double scale = 1.0) { return f32(scale * normal(rng)); }
  std::mt19937_64 rng;
  std::normal_distribution<double> normal{0.0, 1.0};
};

ModelDump skeleton(const DumpShape& shape, Gaussian& g) {
  ModelDump dump;
  dump.model_name = "synthetic";
  Vector gamma(shape.dim), beta(shape.dim);
  for (double& x : gamma) x = f32(1.0 + g(0.1));
  for (double& x : beta) x = g(0.1);
  dump.norm = shape.norm == NormKind::layernorm ? NormSpec::layer_norm(1e-5, gamma, beta)
                                                : NormSpec::rms_norm(1e-5, gamma);
  std::vector<double> w(shape.vocab * shape.dim);
  for (double& x : w) x = g();
  dump.unembedding = Matrix(shape.vocab, shape.dim, std::move(w));
  return dump;
}

void attach_labels(ModelDump& dump) {
  static const char* kPos[] = {"DET", "NOUN", "VERB", "ADP"};
  dump.labels.resize(dump.num_examples());
  for (std::size_t n = 0; n < dump.num_examples(); ++n) {
    const std::size_t fact_len = 1 + n % 3;
    dump.labels[n] = {{"pos", kPos[n % 4]},
                      {"fact_len", std::to_string(fact_len)},
                      {"fact_pos", std::to_string(1 + (n / 3) % fact_len)},
                      {"options", "A|B|C|D"}};
  }
}

}  // namespace

void finish_dump(ModelDump& dump, bool with_final_logits) {
  const std::size_t n = dump.num_examples();
  const std::size_t last = dump.num_layers() - 1;
  std::vector<double> logits;
  logits.reserve(n * dump.vocab_size());
  dump.target_tokens.assign(n, 0);
  for (std::size_t ex = 0; ex < n; ++ex) {
    Vector z = logit_lens(dump.hidden.at(ex, last), dump.norm, dump.unembedding);
    if (with_final_logits) {
      for (double& v : z) v = f32(v);
    }
    dump.target_tokens[ex] = top1(z);
    logits.insert(logits.end(), z.begin(), z.end());
  }
  if (with_final_logits) {
    dump.final_logits = Matrix(n, dump.vocab_size(), std::move(logits));
  } else {
    dump.final_logits.reset();
  }
}

ModelDump random_dump(const DumpShape& shape) {
  Gaussian g(shape.seed);
  ModelDump dump = skeleton(shape, g);
  std::vector<double> h(shape.examples * shape.layers * shape.dim);
  for (double& x : h) x = g();
  dump.hidden = HiddenStates(shape.examples, shape.layers, shape.dim, std::move(h));
  attach_labels(dump);
  finish_dump(dump, shape.final_logits);
  return dump;
}

ModelDump affine_dump(const DumpShape& shape, double mix_scale) {
  Gaussian g(shape.seed);
  ModelDump dump = skeleton(shape, g);
  const std::size_t d = shape.dim;
  const std::size_t last = shape.layers - 1;
  const double spread = mix_scale / std::sqrt(static_cast<double>(d));

  std::vector<Matrix> mix;
  std::vector<Vector> shift;
  for (std::size_t l = 0; l < last; ++l) {
    Matrix m = Matrix::identity(d);
    for (double& x : m.values()) x += g(spread);
    Vector c(d);
    for (double& x : c) x = g(0.5);
    mix.push_back(std::move(m));
    shift.push_back(std::move(c));
  }

  dump.hidden = HiddenStates(shape.examples, shape.layers, d);
  for (std::size_t n = 0; n < shape.examples; ++n) {
    auto final_state = dump.hidden.at(n, last);
    for (double& x : final_state) x = g(2.0);
    for (std::size_t l = 0; l < last; ++l) {
      const Vector mixed = apply_translator({mix[l], shift[l]}, final_state);
      auto out = dump.hidden.at(n, l);
      for (std::size_t i = 0; i < d; ++i) out[i] = f32(mixed[i]);
    }
  }
  attach_labels(dump);
  finish_dump(dump, shape.final_logits);
  return dump;
}

}  // namespace depthlens::synthetic
