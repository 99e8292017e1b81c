#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <random>

#include "depthlens/analysis.hpp"
#include "depthlens/dump_io.hpp"
#include "depthlens/error.hpp"
#include "depthlens/hash.hpp"
#include "depthlens/lens.hpp"
#include "depthlens/pipeline.hpp"
#include "depthlens/report.hpp"
#include "depthlens/synthetic.hpp"

namespace py = pybind11;
using namespace depthlens;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U32 = py::array_t<std::uint32_t, py::array::c_style | py::array::forcecast>;

std::vector<double> flat(const F64& a) { return {a.data(), a.data() + a.size()}; }

Matrix to_matrix(const F64& a, const char* what) {
  if (a.ndim() != 2) throw ShapeError(std::string(what) + " must be 2-D");
  return Matrix(a.shape(0), a.shape(1), flat(a));
}

F64 from_matrix(const Matrix& m) {
  F64 out({m.rows(), m.cols()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

F64 from_vector(std::span<const double> v) {
  F64 out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

NormSpec make_norm(const std::string& kind, double eps, const F64& gamma, std::optional<F64> beta) {
  if (parse_norm_kind(kind) == NormKind::rmsnorm) {
    if (beta) throw DataError("rmsnorm takes no beta");
    return NormSpec::rms_norm(eps, flat(gamma));
  }
  return NormSpec::layer_norm(eps, flat(gamma), beta ? flat(*beta) : Vector(gamma.size(), 0.0));
}

ModelDump make_dump(const std::string& model_name, const std::string& norm_kind, double eps,
                    const F64& gamma, std::optional<F64> beta, const F64& unembedding, const F64& hidden,
                    std::optional<F64> final_logits, std::optional<U32> target_tokens,
                    std::vector<Labels> labels) {
  if (hidden.ndim() != 3) throw ShapeError("hidden must be [N, L, d]");
  ModelDump d;
  d.model_name = model_name;
  d.norm = make_norm(norm_kind, eps, gamma, std::move(beta));
  d.unembedding = to_matrix(unembedding, "unembedding");
  d.hidden = HiddenStates(hidden.shape(0), hidden.shape(1), hidden.shape(2), flat(hidden));
  if (final_logits) d.final_logits = to_matrix(*final_logits, "final_logits");
  if (target_tokens) {
    d.target_tokens.assign(target_tokens->data(), target_tokens->data() + target_tokens->size());
  } else {
    d.target_tokens.resize(d.num_examples());
    for (std::size_t n = 0; n < d.num_examples(); ++n) d.target_tokens[n] = top1(reference_logits(d, n));
  }
  d.labels = std::move(labels);
  return d;
}

TrainConfig make_config(std::size_t epochs, std::size_t batch_size, double lr, const std::string& optimizer,
                        std::uint64_t seed, std::optional<F64> token_weights, const std::string& init,
                        double init_scale, bool train_final_layer, std::size_t threads) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = batch_size;
  c.learning_rate = lr;
  if (optimizer == "sgd") {
    c.optimizer = OptimizerKind::sgd;
  } else if (optimizer != "adam") {
    throw ConfigError("optimizer must be adam or sgd");
  }
  c.seed = seed;
  if (token_weights) c.token_weights = flat(*token_weights);
  if (init == "random") {
    c.init.kind = InitConfig::Kind::random;
    c.init.scale = init_scale;
  } else if (init != "identity") {
    throw ConfigError("init must be identity or random");
  }
  c.train_final_layer = train_final_layer;
  c.threads = threads;
  return c;
}

py::list rows_of(const ReportTable& t) {
  py::list rows;
  for (const auto& row : t.rows) {
    py::list r;
    for (const auto& cell : row) {
      std::visit(
          [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, std::monostate>) {
              r.append(py::none());
            } else {
              r.append(v);
            }
          },
          cell);
    }
    rows.append(py::tuple(r));
  }
  return rows;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Layer-wise lens decoding and depth analysis";
  m.attr("__version__") = std::string(kToolVersion);

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<NumericalError>(m, "NumericalError", base.ptr());

  py::class_<ModelDump>(m, "ModelDump")
      .def_readwrite("model_name", &ModelDump::model_name)
      .def_property_readonly("num_examples", &ModelDump::num_examples)
      .def_property_readonly("num_layers", &ModelDump::num_layers)
      .def_property_readonly("hidden_dim", &ModelDump::hidden_dim)
      .def_property_readonly("vocab_size", &ModelDump::vocab_size)
      .def_property_readonly("norm_kind", [](const ModelDump& d) { return std::string(to_string(d.norm.kind())); })
      .def_property_readonly("epsilon", [](const ModelDump& d) { return d.norm.epsilon(); })
      .def_property_readonly("gamma", [](const ModelDump& d) { return from_vector(d.norm.gamma()); })
      .def_property_readonly("beta", [](const ModelDump& d) -> std::optional<F64> {
        if (!d.norm.has_beta()) return std::nullopt;
        return from_vector(d.norm.beta());
      })
      .def_property_readonly("unembedding", [](const ModelDump& d) { return from_matrix(d.unembedding); })
      .def_property_readonly("hidden", [](const ModelDump& d) {
        F64 out({d.num_examples(), d.num_layers(), d.hidden_dim()});
        std::copy(d.hidden.values().begin(), d.hidden.values().end(), out.mutable_data());
        return out;
      })
      .def_property_readonly("final_logits", [](const ModelDump& d) -> std::optional<F64> {
        if (!d.final_logits) return std::nullopt;
        return from_matrix(*d.final_logits);
      })
      .def_property_readonly("target_tokens", [](const ModelDump& d) {
        U32 out(static_cast<py::ssize_t>(d.target_tokens.size()));
        std::copy(d.target_tokens.begin(), d.target_tokens.end(), out.mutable_data());
        return out;
      })
      .def_readwrite("labels", &ModelDump::labels)
      .def("__eq__", [](const ModelDump& a, const ModelDump& b) { return a == b; });

  m.def("make_dump", &make_dump, py::arg("model_name"), py::arg("norm_kind"), py::arg("epsilon"),
        py::arg("gamma"), py::arg("beta") = py::none(), py::arg("unembedding"), py::arg("hidden"),
        py::arg("final_logits") = py::none(), py::arg("target_tokens") = py::none(),
        py::arg("labels") = std::vector<Labels>{},
        "Build a dump from arrays. Targets default to the top-1 of the reference logits.");
  m.def("read_dump", [](const std::filesystem::path& dir, bool validate, double tolerance) {
    return read_dump(dir, ReadOptions{validate, tolerance});
  }, py::arg("path"), py::arg("validate") = true, py::arg("tolerance") = kLayerIdentityTolerance);
  m.def("write_dump", &write_dump, py::arg("dump"), py::arg("path"));
  m.def("validate_dump", [](const ModelDump& d, double tolerance) {
    std::vector<py::dict> out;
    for (const auto& c : validate_dump(d, tolerance).checks) {
      py::dict e;
      e["name"] = c.name;
      e["severity"] = c.severity == CheckSeverity::error ? "error" : "warning";
      e["passed"] = c.passed;
      e["detail"] = c.detail;
      out.push_back(e);
    }
    return out;
  }, py::arg("dump"), py::arg("tolerance") = kLayerIdentityTolerance);
  m.def("dump_fingerprint", &dump_fingerprint, py::arg("path"));
  m.def("random_dump", [](std::size_t n, std::size_t layers, std::size_t dim, std::size_t vocab,
                          const std::string& norm, bool final_logits, std::uint64_t seed) {
    return synthetic::random_dump({n, layers, dim, vocab, parse_norm_kind(norm), final_logits, seed});
  }, py::arg("examples") = 4, py::arg("layers") = 3, py::arg("dim") = 4, py::arg("vocab") = 8,
        py::arg("norm") = "layernorm", py::arg("final_logits") = true, py::arg("seed") = 0);
  m.def("affine_dump", [](std::size_t n, std::size_t layers, std::size_t dim, std::size_t vocab,
                          std::uint64_t seed, double mix_scale) {
    return synthetic::affine_dump({n, layers, dim, vocab, NormKind::layernorm, true, seed}, mix_scale);
  }, py::arg("examples"), py::arg("layers"), py::arg("dim"), py::arg("vocab"), py::arg("seed") = 0,
        py::arg("mix_scale") = 0.25);

  py::class_<FrequencyTable>(m, "FrequencyTable")
      .def(py::init<>())
      .def(py::init<std::map<TokenId, std::uint64_t>>(), py::arg("counts"))
      .def("count", &FrequencyTable::count)
      .def_property_readonly("total", &FrequencyTable::total)
      .def_property_readonly("counts", &FrequencyTable::counts)
      .def("ranked", &FrequencyTable::ranked)
      .def("add", &FrequencyTable::add)
      .def("__eq__", [](const FrequencyTable& a, const FrequencyTable& b) { return a == b; });
  m.def("count_tokens", [](const U32& tokens, std::size_t vocab) {
    return count_tokens(std::span<const TokenId>(tokens.data(), tokens.size()), vocab);
  }, py::arg("tokens"), py::arg("vocab_size"));
  m.def("write_frequency_table", &write_frequency_table, py::arg("table"), py::arg("path"));
  m.def("read_frequency_table", &read_frequency_table, py::arg("path"));

  m.def("make_prefix", [](const std::string& line, std::uint64_t seed, std::size_t min_chars) {
    std::mt19937_64 rng(seed);
    return make_prefix(line, rng, min_chars);
  }, py::arg("line"), py::arg("seed"), py::arg("min_chars") = 15,
        "One draw from a generator seeded with `seed`.");

  py::class_<TranslatorSet>(m, "TranslatorSet")
      .def_property_readonly("num_layers", &TranslatorSet::num_layers)
      .def_property_readonly("dim", &TranslatorSet::dim)
      .def("weight", [](const TranslatorSet& s, std::size_t l) { return from_matrix(s.layers.at(l).weight); })
      .def("bias", [](const TranslatorSet& s, std::size_t l) { return from_vector(s.layers.at(l).bias); })
      .def_property_readonly("final_mean_kl", [](const TranslatorSet& s) { return s.metadata.final_mean_kl; })
      .def_property_readonly("trained", [](const TranslatorSet& s) { return s.metadata.trained; })
      .def_property_readonly("loss_mask", [](const TranslatorSet& s) { return s.metadata.loss_mask; })
      .def("__eq__", [](const TranslatorSet& a, const TranslatorSet& b) { return a == b; });
  m.def("identity_translators", [](std::size_t layers, std::size_t dim) {
    TranslatorSet s;
    s.layers.assign(layers, Translator::identity(dim));
    return s;
  }, py::arg("layers"), py::arg("dim"));
  m.def("write_translators", &write_translators, py::arg("translators"), py::arg("path"));
  m.def("read_translators", &read_translators, py::arg("path"));

  m.def("logit_lens", [](const ModelDump& d, std::size_t example, std::size_t layer) {
    return from_vector(decode(d, LensKind::logit(), example, layer));
  }, py::arg("dump"), py::arg("example"), py::arg("layer"));
  m.def("tuned_lens", [](const ModelDump& d, const TranslatorSet& t, std::size_t example, std::size_t layer) {
    return from_vector(decode(d, LensKind::tuned(t), example, layer));
  }, py::arg("dump"), py::arg("translators"), py::arg("example"), py::arg("layer"));
  m.def("lens_loss_and_grad", [](const F64& final_logits, const F64& h, const F64& weight, const F64& bias,
                                 const ModelDump& d, std::optional<F64> token_weights) {
    const Translator t{to_matrix(weight, "weight"), flat(bias)};
    const Vector w = token_weights ? flat(*token_weights) : Vector{};
    const LensGradient g = lens_loss_and_grad(flat(final_logits), flat(h), t, d.norm, d.unembedding, w);
    return py::make_tuple(g.loss, from_matrix(g.grad_weight), from_vector(g.grad_bias));
  }, py::arg("final_logits"), py::arg("h"), py::arg("weight"), py::arg("bias"), py::arg("dump"),
        py::arg("token_weights") = py::none(), "Loss and (dA, db) using the dump's norm and unembedding.");

  m.def("train_translators", [](const ModelDump& d, std::size_t epochs, std::size_t batch_size, double lr,
                                const std::string& optimizer, std::uint64_t seed, std::optional<F64> token_weights,
                                const std::string& init, double init_scale, bool train_final_layer,
                                std::size_t threads, std::optional<TokenId> mask_token, double mask_factor,
                                const std::string& mask_mode) {
    const TrainConfig c = make_config(epochs, batch_size, lr, optimizer, seed, std::move(token_weights), init,
                                      init_scale, train_final_layer, threads);
    TrainResult r;
    {
      py::gil_scoped_release release;
      if (mask_token) {
        r = train_masked_translators(
            d, c, {*mask_token, mask_factor, mask_mode == "skip" ? MaskMode::skip_examples : MaskMode::weight});
      } else {
        r = train_translators(d, c);
      }
    }
    std::vector<std::tuple<std::size_t, std::size_t, double>> log;
    for (const auto& row : r.log) log.emplace_back(row.layer, row.epoch, row.mean_kl);
    return py::make_tuple(r.translators, log);
  }, py::arg("dump"), py::arg("epochs") = 250, py::arg("batch_size") = 64, py::arg("lr") = 1e-3,
        py::arg("optimizer") = "adam", py::arg("seed") = 0, py::arg("token_weights") = py::none(),
        py::arg("init") = "identity", py::arg("init_scale") = 0.01, py::arg("train_final_layer") = false,
        py::arg("threads") = 1, py::arg("mask_token") = py::none(), py::arg("mask_factor") = 1.0,
        py::arg("mask_mode") = "weight", "Returns (translators, [(layer, epoch, mean_kl), ...]).");
  m.def("mean_layer_kl", [](const ModelDump& d, const TranslatorSet& t, std::size_t layer) {
    return mean_layer_kl(d, layer, t.layers.at(layer));
  }, py::arg("dump"), py::arg("translators"), py::arg("layer"));

  m.attr("report_kinds") = report_kinds();
  m.def("build_report", [](const std::string& kind, const ModelDump& d, const TranslatorSet* translators,
                           const FrequencyTable* freq, std::vector<std::size_t> buckets,
                           std::vector<std::size_t> thresholds, std::vector<std::string> category_keys,
                           std::vector<std::string> exclude, std::vector<TokenId> options,
                           std::vector<std::string> option_names, std::size_t max_tokens, std::size_t threads) {
    ReportContext ctx;
    ctx.dump = &d;
    if (translators) ctx.lens = LensKind::tuned(*translators);
    ctx.frequencies = freq;
    if (!buckets.empty()) ctx.buckets.boundaries = std::move(buckets);
    ctx.buckets.validate();
    if (!thresholds.empty()) ctx.thresholds = std::move(thresholds);
    validate_thresholds(ctx.thresholds);
    ctx.onset.category_keys = std::move(category_keys);
    ctx.onset.excluded_categories = std::move(exclude);
    if (kind == "meanrank") std::tie(ctx.options, ctx.option_names) = resolve_options(d, options, option_names);
    ctx.max_tokens = max_tokens;
    ctx.threads = threads;
    ReportTable t = build_report(kind, ctx);
    py::dict out;
    out["kind"] = t.kind;
    out["columns"] = t.columns;
    out["rows"] = rows_of(t);
    out["csv"] = to_csv(t);
    out["svg"] = render_svg(t);
    return out;
  }, py::arg("kind"), py::arg("dump"), py::arg("translators") = nullptr, py::arg("freq") = nullptr,
        py::arg("buckets") = std::vector<std::size_t>{}, py::arg("thresholds") = std::vector<std::size_t>{},
        py::arg("category_keys") = std::vector<std::string>{"pos"},
        py::arg("exclude") = std::vector<std::string>{"OTHER"}, py::arg("options") = std::vector<TokenId>{},
        py::arg("option_names") = std::vector<std::string>{}, py::arg("max_tokens") = 0, py::arg("threads") = 1);

  m.def("hash_file", &hash_file, py::arg("path"));
  m.def("hash_bytes", [](const py::bytes& b) { return hash_bytes(std::string(b)); }, py::arg("data"));
}
