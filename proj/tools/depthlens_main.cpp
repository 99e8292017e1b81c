// depthlens command-line driver: freq, prefixes, train, report, validate.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "depthlens/analysis.hpp"
#include "depthlens/dump_io.hpp"
#include "depthlens/error.hpp"
#include "depthlens/hash.hpp"
#include "depthlens/lens.hpp"
#include "depthlens/parallel.hpp"
#include "depthlens/pipeline.hpp"
#include "depthlens/report.hpp"

namespace fs = std::filesystem;
using namespace depthlens;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct Globals {
  std::uint64_t seed = 0;
  std::string out = ".";
  std::string lens = "logit";
  std::string translators;
  std::optional<std::size_t> threads;
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& s, const char* flag) {
  std::vector<T> out;
  for (const auto& item : split(s, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(item, &used);
      if (used != item.size() || item.front() == '-') throw std::invalid_argument(item);
      out.push_back(static_cast<T>(v));
    } catch (const std::exception&) {
      throw ConfigError(std::string(flag) + ": '" + item + "' is not a non-negative integer");
    }
  }
  return out;
}

fs::path prepare_out(const Globals& g) {
  const fs::path out(g.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory '" + out.string() + "': " + ec.message());
  return out;
}

std::string provenance_json(const std::vector<std::pair<std::string, std::string>>& prov,
                            nlohmann::ordered_json extra = nlohmann::ordered_json::object()) {
  nlohmann::ordered_json j;
  for (const auto& [k, v] : prov) j[k] = v;
  for (const auto& [k, v] : extra.items()) j[k] = v;
  return j.dump(2) + "\n";
}

std::vector<std::pair<std::string, std::string>> base_provenance(const Globals& g) {
  return {{"tool", std::string(kToolName) + " " + std::string(kToolVersion)},
          {"seed", std::to_string(g.seed)}};
}

// ---- freq

std::vector<TokenId> read_token_stream(const fs::path& path, const std::string& format) {
  const std::string bytes = read_file(path);
  std::vector<TokenId> tokens;
  if (format == "u32") {
    if (bytes.size() % 4 != 0) {
      throw DataError(path.string() + ": " + std::to_string(bytes.size()) +
                      " bytes is not a whole number of uint32 tokens");
    }
    tokens.resize(bytes.size() / 4);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + 4 * i);
      tokens[i] = static_cast<TokenId>(p[0]) | static_cast<TokenId>(p[1]) << 8 |
                  static_cast<TokenId>(p[2]) << 16 | static_cast<TokenId>(p[3]) << 24;
    }
    return tokens;
  }
  std::istringstream in(bytes);
  std::string word;
  std::size_t pos = 0;
  while (in >> word) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(word, &used);
      if (used != word.size() || word.front() == '-' || v > 0xffffffffULL) {
        throw std::invalid_argument(word);
      }
      tokens.push_back(static_cast<TokenId>(v));
    } catch (const std::exception&) {
      throw DataError(path.string() + ": token " + std::to_string(pos) + " '" + word +
                      "' is not a token id");
    }
    ++pos;
  }
  return tokens;
}

int cmd_freq(const Globals& g, const std::vector<std::string>& inputs, std::size_t vocab,
             const std::string& format) {
  FrequencyTable total;
  nlohmann::ordered_json hashes = nlohmann::ordered_json::array();
  for (const auto& input : inputs) {
    const auto tokens = read_token_stream(input, format);
    try {
      total.add(count_tokens(tokens, vocab));
    } catch (const DataError& e) {
      throw DataError(input + ": " + e.what());
    }
    hashes.push_back({{"file", fs::path(input).filename().string()}, {"hash", hash_file(input)}});
  }
  const fs::path out = prepare_out(g);
  write_frequency_table(total, out / "freq.bin");
  write_file_atomic(out / "freq.bin.provenance.json",
                    provenance_json(base_provenance(g), {{"vocab_size", vocab},
                                                         {"total", total.total()},
                                                         {"inputs", hashes}}));
  std::printf("%zu distinct tokens, %llu total\n", total.counts().size(),
              static_cast<unsigned long long>(total.total()));
  return kOk;
}

// ---- prefixes

int cmd_prefixes(const Globals& g, const std::string& input, std::size_t min_chars) {
  const std::string text = read_file(input);
  std::mt19937_64 rng(g.seed);
  std::string out_text;
  std::size_t lines = 0, accepted = 0;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    ++lines;
    if (auto p = make_prefix(line, rng, min_chars)) {
      out_text += *p;
      out_text += '\n';
      ++accepted;
    }
  }
  const fs::path out = prepare_out(g);
  write_file_atomic(out / "prefixes.txt", out_text);
  auto prov = base_provenance(g);
  prov.emplace_back("input_hash", hash_file(input));
  write_file_atomic(out / "prefixes.json",
                    provenance_json(prov, {{"min_chars", min_chars},
                                           {"lines", lines},
                                           {"accepted", accepted},
                                           {"rejected", lines - accepted}}));
  std::printf("%zu prefixes, %zu rejected\n", accepted, lines - accepted);
  return kOk;
}

// ---- train

struct TrainFlags {
  std::string dump;
  std::size_t epochs = 250;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  std::string optimizer = "adam";
  std::string init = "identity";
  double init_scale = 0.01;
  bool train_final_layer = false;
  std::optional<TokenId> mask_token;
  double mask_factor = 1.0;
  std::string mask_mode = "weight";
};

int cmd_train(const Globals& g, const TrainFlags& f) {
  const ModelDump dump = read_dump(f.dump);
  const std::string dump_hash = dump_fingerprint(f.dump);

  TrainConfig cfg;
  cfg.epochs = f.epochs;
  cfg.batch_size = f.batch_size;
  cfg.learning_rate = f.lr;
  cfg.optimizer = f.optimizer == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
  cfg.seed = g.seed;
  if (f.init == "random") {
    cfg.init.kind = InitConfig::Kind::random;
    cfg.init.scale = f.init_scale;
  }
  cfg.train_final_layer = f.train_final_layer;
  cfg.threads = resolve_threads(g.threads);

  TrainResult result;
  if (f.mask_token) {
    TokenMask mask{*f.mask_token, f.mask_factor,
                   f.mask_mode == "skip" ? MaskMode::skip_examples : MaskMode::weight};
    result = train_masked_translators(dump, cfg, mask);
  } else {
    if (f.mask_factor != 1.0) throw ConfigError("--mask-factor needs --mask-token");
    result = train_translators(dump, cfg);
  }

  auto prov = base_provenance(g);
  prov.emplace_back("dump", dump.model_name);
  prov.emplace_back("dump_hash", dump_hash);
  result.translators.metadata.provenance = prov;

  const fs::path out = prepare_out(g);
  write_translators(result.translators, out / "translators.bin");
  write_file_atomic(out / "train_log.csv", training_log_csv(result.log, prov));
  for (std::size_t l = 0; l < result.translators.num_layers(); ++l) {
    std::printf("layer %zu: mean KL %s%s\n", l + 1,
                format_float(result.translators.metadata.final_mean_kl[l]).c_str(),
                result.translators.metadata.trained[l] ? "" : " (identity)");
  }
  return kOk;
}

// ---- report

struct ReportFlags {
  std::string dump;
  std::string which = "all";
  std::string freq;
  std::string thresholds;
  std::string buckets;
  std::vector<std::string> category_keys{"pos"};
  std::vector<std::string> exclude{"OTHER"};
  std::string options;
  std::string option_names;
  std::size_t top_tokens = 0;
};

int cmd_report(const Globals& g, const ReportFlags& f) {
  const ModelDump dump = read_dump(f.dump);

  std::vector<std::string> kinds =
      f.which == "all" ? report_kinds() : split(f.which, ',');
  for (const auto& k : kinds) {
    if (std::find(report_kinds().begin(), report_kinds().end(), k) == report_kinds().end()) {
      throw ConfigError("--which: unknown report '" + k + "'");
    }
  }

  ProvenanceInputs pin;
  pin.seed = g.seed;
  pin.dump_hash = dump_fingerprint(f.dump);
  pin.model_name = dump.model_name;
  pin.lens = g.lens;

  std::optional<TranslatorSet> translators;
  ReportContext ctx;
  ctx.dump = &dump;
  ctx.threads = resolve_threads(g.threads);
  if (g.lens == "tuned") {
    if (g.translators.empty()) throw ConfigError("--lens tuned needs --translators PATH");
    translators = read_translators(g.translators);
    pin.translator_hash = hash_file(g.translators);
    ctx.lens = LensKind::tuned(*translators);
  } else if (!g.translators.empty()) {
    throw ConfigError("--translators given with --lens logit");
  }

  std::optional<FrequencyTable> freq;
  if (!f.freq.empty()) {
    freq = read_frequency_table(f.freq);
    pin.bucket_source = "freq:" + hash_file(f.freq);
    ctx.frequencies = &*freq;
  }
  if (!f.buckets.empty()) {
    ctx.buckets.boundaries = parse_list<std::size_t>(f.buckets, "--buckets");
    ctx.buckets.validate();
  }
  if (!f.thresholds.empty()) {
    ctx.thresholds = parse_list<std::size_t>(f.thresholds, "--thresholds");
    validate_thresholds(ctx.thresholds);
  }
  ctx.onset.category_keys = f.category_keys;
  ctx.onset.excluded_categories = f.exclude;
  ctx.max_tokens = f.top_tokens;

  const auto provenance = report_provenance(pin);
  const fs::path out = prepare_out(g);
  for (const auto& kind : kinds) {
    if (kind == "meanrank") {
      auto [ids, names] = resolve_options(dump, parse_list<TokenId>(f.options, "--options"),
                                          split(f.option_names, ','));
      ctx.options = std::move(ids);
      ctx.option_names = std::move(names);
    }
    ReportTable table = build_report(kind, ctx);
    table.provenance = provenance;
    write_file_atomic(out / (kind + ".csv"), to_csv(table));
    write_file_atomic(out / (kind + ".svg"), render_svg(table));
    std::printf("%s: %zu rows\n", kind.c_str(), table.rows.size());
  }
  return kOk;
}

// ---- validate

int cmd_validate(const std::string& dir, double tolerance) {
  ReadOptions opts;
  opts.validate = false;
  const ModelDump dump = read_dump(dir, opts);
  const DumpValidation v = validate_dump(dump, tolerance);
  for (const auto& c : v.checks) {
    const char* status = c.passed ? "ok" : (c.severity == CheckSeverity::error ? "FAIL" : "warn");
    std::printf("%-4s %s%s%s\n", status, c.name.c_str(), c.detail.empty() ? "" : ": ",
                c.detail.c_str());
  }
  if (!v.ok()) {
    for (const auto& c : v.checks) {
      if (!c.passed && c.severity == CheckSeverity::error) {
        std::fprintf(stderr, "depthlens: invariant %s violated: %s\n", c.name.c_str(),
                     c.detail.c_str());
      }
    }
    return kData;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-wise lens decoding and depth analysis of model dumps", "depthlens"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  Globals g;
  std::size_t threads = 0;
  app.add_option("--seed", g.seed, "RNG seed, recorded in every artifact")->capture_default_str();
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--lens", g.lens, "Decoder")
      ->check(CLI::IsMember({"logit", "tuned"}))
      ->capture_default_str();
  app.add_option("--translators", g.translators, "TranslatorSet file for --lens tuned");
  auto* threads_opt = app.add_option("--threads", threads, "Worker threads (env DEPTHLENS_THREADS)")
                          ->check(CLI::PositiveNumber);

  // freq
  auto* freq = app.add_subcommand("freq", "Count token ids from uint32 or text token streams");
  freq->fallthrough();
  std::vector<std::string> freq_inputs;
  std::size_t vocab = 0;
  std::string freq_format = "u32";
  freq->add_option("inputs", freq_inputs, "Token stream files")->check(CLI::ExistingFile);
  freq->add_option("--vocab-size", vocab, "Vocabulary size")->required();
  freq->add_option("--format", freq_format, "u32 (little-endian) or text (whitespace ids)")
      ->check(CLI::IsMember({"u32", "text"}))
      ->capture_default_str();

  // prefixes
  auto* prefixes = app.add_subcommand("prefixes", "Cut random word-boundary prefixes from lines");
  prefixes->fallthrough();
  std::string prefix_input;
  std::size_t min_chars = 15;
  prefixes->add_option("input", prefix_input, "Text file, one paragraph per line")
      ->required()
      ->check(CLI::ExistingFile);
  prefixes->add_option("--min-chars", min_chars)->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Fit per-layer translators for the tuned lens");
  train->fallthrough();
  TrainFlags tf;
  std::uint32_t mask_token = 0;
  train->add_option("dump", tf.dump, "Model dump directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--epochs", tf.epochs)->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--batch-size", tf.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--lr", tf.lr)->capture_default_str();
  train->add_option("--optimizer", tf.optimizer)
      ->check(CLI::IsMember({"adam", "sgd"}))
      ->capture_default_str();
  train->add_option("--init", tf.init)
      ->check(CLI::IsMember({"identity", "random"}))
      ->capture_default_str();
  train->add_option("--init-scale", tf.init_scale, "Noise scale for --init random")
      ->capture_default_str();
  train->add_flag("--train-final-layer", tf.train_final_layer,
                  "Also train the last layer instead of fixing it to identity");
  auto* mask_opt = train->add_option("--mask-token", mask_token, "Token whose loss term is scaled");
  train->add_option("--mask-factor", tf.mask_factor)->capture_default_str();
  train->add_option("--mask-mode", tf.mask_mode)
      ->check(CLI::IsMember({"weight", "skip"}))
      ->capture_default_str();

  // report
  auto* report = app.add_subcommand("report", "Emit CSV and SVG depth-analysis reports");
  report->fallthrough();
  ReportFlags rf;
  report->add_option("dump", rf.dump, "Model dump directory")->required()->check(CLI::ExistingDirectory);
  report->add_option("--which", rf.which, "all, or comma list of buckets,flips,onset,meanrank,probmass")
      ->capture_default_str();
  report->add_option("--freq", rf.freq, "Frequency table (buckets, flips, probmass)")
      ->check(CLI::ExistingFile);
  report->add_option("--buckets", rf.buckets, "Bucket rank boundaries, e.g. 10,100,1000");
  report->add_option("--thresholds", rf.thresholds, "Onset rank thresholds, e.g. 1,2,5,10");
  report->add_option("--category-key", rf.category_keys, "Label keys forming the onset category")
      ->capture_default_str();
  report->add_option("--exclude-category", rf.exclude, "Onset categories to drop")
      ->capture_default_str();
  report->add_option("--options", rf.options, "Option token ids for meanrank, e.g. 32,33,34,35");
  report->add_option("--option-names", rf.option_names, "Comma list naming the options");
  report->add_option("--top-tokens", rf.top_tokens, "probmass: most frequent K tokens (0 = all)")
      ->capture_default_str();

  // validate
  auto* validate = app.add_subcommand("validate", "Check a model dump's invariants");
  validate->fallthrough();
  std::string validate_dir;
  double tolerance = kLayerIdentityTolerance;
  validate->add_option("dump", validate_dir, "Model dump directory")->required();
  validate->add_option("--tolerance", tolerance, "Max abs diff for the last-layer identity check")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  if (*threads_opt) g.threads = threads;

  try {
    if (*freq) return cmd_freq(g, freq_inputs, vocab, freq_format);
    if (*prefixes) return cmd_prefixes(g, prefix_input, min_chars);
    if (*train) {
      if (*mask_opt) tf.mask_token = mask_token;
      return cmd_train(g, tf);
    }
    if (*report) return cmd_report(g, rf);
    if (*validate) return cmd_validate(validate_dir, tolerance);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "depthlens: %s\n", e.what());
    return kUsage;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "depthlens: numerical failure: %s\n", e.what());
    return kNumerical;
  } catch (const Error& e) {
    std::fprintf(stderr, "depthlens: %s\n", e.what());
    return kData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "depthlens: %s\n", e.what());
    return kData;
  }
  return kUsage;
}
