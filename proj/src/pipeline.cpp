#include "depthlens/pipeline.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "json.hpp"

#include "depthlens/error.hpp"
#include "depthlens/hash.hpp"

namespace depthlens {

namespace fs = std::filesystem;

std::string dump_fingerprint(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.json";
  const std::string text = read_file(manifest);
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(manifest.string() + ": invalid JSON: " + e.what());
  }
  std::set<std::string> files;
  auto collect = [&](const nlohmann::json& obj) {
    for (const auto& [key, value] : obj.items()) {
      if (key.size() > 5 && key.ends_with("_file") && value.is_string()) {
        files.insert(value.get<std::string>());
      }
    }
  };
  collect(m);
  if (m.contains("norm") && m["norm"].is_object()) collect(m["norm"]);

  Fnv1a h;
  h.update(text);
  for (const auto& f : files) {
    h.update(f);
    h.update(hash_file(dir / f));
  }
  return h.hex();
}

const std::vector<std::string>& report_kinds() {
  static const std::vector<std::string> kinds{"buckets", "flips", "onset", "meanrank", "probmass"};
  return kinds;
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(item);
  return out;
}

const FrequencyTable& require_frequencies(const ReportContext& c, std::string_view kind) {
  if (c.frequencies == nullptr) {
    throw ConfigError("report '" + std::string(kind) + "' needs a frequency table (--freq)");
  }
  return *c.frequencies;
}

}  // namespace

std::pair<std::vector<TokenId>, std::vector<std::string>> resolve_options(
    const ModelDump& dump, std::vector<TokenId> ids, std::vector<std::string> names) {
  auto label_list = [&](const std::string& key) -> std::optional<std::vector<std::string>> {
    if (dump.labels.empty()) return std::nullopt;
    std::optional<std::string> value;
    for (std::size_t n = 0; n < dump.labels.size(); ++n) {
      auto it = dump.labels[n].find(key);
      if (it == dump.labels[n].end()) return std::nullopt;
      if (value && *value != it->second) {
        throw DataError("label '" + key + "' differs between examples (" + *value + " vs " +
                        it->second + " at example " + std::to_string(n) +
                        "); a shared option list is required");
      }
      value = it->second;
    }
    return split(*value, '|');
  };

  if (ids.empty()) {
    const auto from_labels = label_list("option_ids");
    if (!from_labels) {
      throw DataError("meanrank report needs option token ids: pass --options or provide an "
                      "'option_ids' label on every example");
    }
    for (const auto& s : *from_labels) {
      try {
        std::size_t used = 0;
        const unsigned long v = std::stoul(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        ids.push_back(static_cast<TokenId>(v));
      } catch (const std::exception&) {
        throw DataError("label 'option_ids' has non-integer entry '" + s + "'");
      }
    }
  }
  for (TokenId t : ids) {
    if (t >= dump.vocab_size()) {
      throw DataError("option token " + std::to_string(t) + " >= vocab size " +
                      std::to_string(dump.vocab_size()));
    }
  }
  if (names.empty()) {
    if (auto from_labels = label_list("options"); from_labels && from_labels->size() == ids.size()) {
      names = std::move(*from_labels);
    }
  } else if (names.size() != ids.size()) {
    throw ConfigError("got " + std::to_string(names.size()) + " option names for " +
                      std::to_string(ids.size()) + " option ids");
  }
  return {std::move(ids), std::move(names)};
}

ReportTable build_report(std::string_view kind, const ReportContext& c) {
  if (c.dump == nullptr) throw ConfigError("build_report: no dump");
  const ModelDump& dump = *c.dump;

  if (kind == "buckets" || kind == "flips") {
    const BucketAssignment buckets =
        assign_buckets(require_frequencies(c, kind), c.buckets, dump.vocab_size());
    const DecodeSummary s = summarize(dump, c.lens, {}, c.threads);
    return kind == "buckets" ? bucket_composition(s.top1, buckets)
                             : decision_flip_rates(s.top1, dump.target_tokens, buckets);
  }
  if (kind == "onset") {
    if (dump.labels.empty()) {
      throw DataError("onset report needs category labels but the dump has no labels file");
    }
    DecodeRequest request;
    request.targets = dump.target_tokens;
    const DecodeSummary s = summarize(dump, c.lens, request, c.threads);
    const auto traces = rank_traces_from(s.target_rank, request.targets, dump.labels);
    return onset_report(traces, c.thresholds, c.onset);
  }
  if (kind == "meanrank") {
    if (c.options.empty()) throw ConfigError("meanrank report needs option token ids");
    DecodeRequest request;
    request.options = c.options;
    const DecodeSummary s = summarize(dump, c.lens, request, c.threads);
    return mean_rank_trace(c.options, s.option_rank, c.option_names);
  }
  if (kind == "probmass") {
    const auto order = frequency_order(require_frequencies(c, kind), dump.vocab_size());
    DecodeRequest request;
    request.probability_mass = true;
    std::vector<ProbMassSeries> series;
    if (c.lens.is_tuned()) {
      series.push_back({"tuned", summarize(dump, c.lens, request, c.threads).mean_probability});
    }
    series.push_back(
        {"logit", summarize(dump, LensKind::logit(), request, c.threads).mean_probability});
    return prob_mass_report(series, final_mean_probability(dump, c.threads), order,
                            dump.num_layers(), c.max_tokens);
  }
  throw ConfigError("unknown report '" + std::string(kind) + "'");
}

std::vector<std::pair<std::string, std::string>> report_provenance(const ProvenanceInputs& in) {
  return {{"tool", std::string(kToolName) + " " + std::string(kToolVersion)},
          {"seed", std::to_string(in.seed)},
          {"dump", in.model_name},
          {"dump_hash", in.dump_hash},
          {"lens", in.lens},
          {"translator_hash", in.translator_hash},
          {"bucket_source", in.bucket_source}};
}

std::string training_log_csv(const std::vector<TrainLogRow>& log,
                             const std::vector<std::pair<std::string, std::string>>& provenance) {
  ReportTable t;
  t.kind = "train_log";
  t.provenance = provenance;
  t.columns = {"layer", "epoch", "mean_kl"};
  for (const auto& row : log) {
    t.rows.push_back({static_cast<std::int64_t>(row.layer), static_cast<std::int64_t>(row.epoch),
                      row.mean_kl});
  }
  return to_csv(t);
}

}  // namespace depthlens
