#include "depthlens/analysis.hpp"

#include <algorithm>
#include <map>
#include <string>

#include "depthlens/error.hpp"
#include "depthlens/parallel.hpp"

namespace depthlens {

namespace {

constexpr std::size_t kExampleBlock = 8;

Cell integer(std::size_t v) { return static_cast<std::int64_t>(v); }

}  // namespace

std::vector<std::string> BucketSpec::names() const {
  std::vector<std::string> out;
  std::size_t prev = 0;
  for (std::size_t b : boundaries) {
    out.push_back("Top" + std::to_string(prev + 1) + "-" + std::to_string(b));
    prev = b;
  }
  out.push_back("Top" + std::to_string(prev) + "+");
  return out;
}

void BucketSpec::validate() const {
  std::size_t prev = 0;
  for (std::size_t b : boundaries) {
    if (b <= prev) throw ConfigError("bucket boundaries must be positive and strictly ascending");
    prev = b;
  }
}

BucketAssignment::BucketAssignment(std::vector<std::size_t> bucket_of_token,
                                   std::vector<std::string> names)
    : bucket_of_token_(std::move(bucket_of_token)), names_(std::move(names)) {}

std::size_t BucketAssignment::bucket_of(TokenId token) const {
  if (token >= bucket_of_token_.size()) {
    throw ShapeError("token " + std::to_string(token) + " outside bucketed vocabulary of " +
                     std::to_string(bucket_of_token_.size()));
  }
  return bucket_of_token_[token];
}

BucketAssignment assign_buckets(const FrequencyTable& freq, const BucketSpec& spec,
                                std::size_t vocab_size) {
  spec.validate();
  std::vector<std::string> names = spec.names();
  const std::size_t last = names.size() - 1;
  std::vector<std::size_t> bucket(vocab_size, last);
  const std::vector<TokenId> ranked = freq.ranked();
  std::size_t b = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    const std::size_t rank = i + 1;
    while (b < spec.boundaries.size() && rank > spec.boundaries[b]) ++b;
    if (ranked[i] >= vocab_size) {
      throw DataError("frequency table token " + std::to_string(ranked[i]) +
                      " >= vocab size " + std::to_string(vocab_size));
    }
    bucket[ranked[i]] = b;
  }
  return BucketAssignment(std::move(bucket), std::move(names));
}

std::vector<TokenId> frequency_order(const FrequencyTable& freq, std::size_t vocab_size) {
  std::vector<TokenId> order = freq.ranked();
  std::vector<bool> seen(vocab_size, false);
  for (TokenId t : order) {
    if (t >= vocab_size) {
      throw DataError("frequency table token " + std::to_string(t) + " >= vocab size " +
                      std::to_string(vocab_size));
    }
    seen[t] = true;
  }
  for (std::size_t t = 0; t < vocab_size; ++t) {
    if (!seen[t]) order.push_back(static_cast<TokenId>(t));
  }
  return order;
}

DecodeSummary summarize(const ModelDump& dump, const LensKind& lens, const DecodeRequest& request,
                        std::size_t threads) {
  const std::size_t n = dump.num_examples();
  const std::size_t layers = dump.num_layers();
  const std::size_t vocab = dump.vocab_size();
  if (!request.targets.empty() && request.targets.size() != n) {
    throw ShapeError("decode request has " + std::to_string(request.targets.size()) +
                     " targets for " + std::to_string(n) + " examples");
  }
  for (TokenId t : request.targets) {
    if (t >= vocab) throw DataError("target token " + std::to_string(t) + " >= vocab size");
  }
  for (TokenId t : request.options) {
    if (t >= vocab) throw DataError("option token " + std::to_string(t) + " >= vocab size");
  }
  check_lens(dump, lens);

  DecodeSummary out;
  out.top1 = TopPredictions(n, layers);
  if (!request.targets.empty()) out.target_rank = RankGrid(n, layers);
  if (!request.options.empty()) out.option_rank = RankGrid(n, layers, request.options.size());

  const std::size_t blocks = (n + kExampleBlock - 1) / kExampleBlock;
  std::vector<std::vector<double>> partial(request.probability_mass ? blocks : 0);

  parallel_blocks(n, kExampleBlock, threads, [&](std::size_t begin, std::size_t end, std::size_t b) {
    std::vector<double> sums;
    if (request.probability_mass) sums.assign(layers * vocab, 0.0);
    for (std::size_t ex = begin; ex < end; ++ex) {
      for (std::size_t l = 0; l < layers; ++l) {
        const Vector logits = decode(dump, lens, ex, l);
        out.top1.at(ex, l) = top1(logits);
        if (!request.targets.empty()) out.target_rank.at(ex, l) = rank_of(logits, request.targets[ex]);
        for (std::size_t k = 0; k < request.options.size(); ++k) {
          out.option_rank.at(ex, l, k) = rank_of(logits, request.options[k]);
        }
        if (request.probability_mass) {
          const Vector q = softmax(logits);
          double* row = sums.data() + l * vocab;
          for (std::size_t v = 0; v < vocab; ++v) row[v] += q[v];
        }
      }
    }
    if (request.probability_mass) partial[b] = std::move(sums);
  });

  if (request.probability_mass) {
    out.mean_probability.assign(layers * vocab, 0.0);
    for (const auto& p : partial) {
      for (std::size_t i = 0; i < p.size(); ++i) out.mean_probability[i] += p[i];
    }
    for (double& v : out.mean_probability) v /= static_cast<double>(n);
  }
  return out;
}

TopPredictions top_predictions(const DecodedLogits& logits) {
  TopPredictions out(logits.examples(), logits.layers());
  for (std::size_t n = 0; n < logits.examples(); ++n) {
    for (std::size_t l = 0; l < logits.layers(); ++l) out.at(n, l) = top1(logits.at(n, l));
  }
  return out;
}

ReportTable bucket_composition(const TopPredictions& top1, const BucketAssignment& buckets) {
  ReportTable t;
  t.kind = "buckets";
  t.columns = {"layer", "bucket", "fraction"};
  const std::size_t nb = buckets.num_buckets();
  const auto n = static_cast<double>(top1.examples());
  for (std::size_t l = 0; l < top1.layers(); ++l) {
    std::vector<std::size_t> counts(nb, 0);
    for (std::size_t ex = 0; ex < top1.examples(); ++ex) ++counts[buckets.bucket_of(top1.at(ex, l))];
    for (std::size_t b = 0; b < nb; ++b) {
      t.rows.push_back({integer(l + 1), buckets.names()[b],
                        top1.examples() ? static_cast<double>(counts[b]) / n : 0.0});
    }
  }
  return t;
}

ReportTable decision_flip_rates(const TopPredictions& top1, std::span<const TokenId> final_top1,
                                const BucketAssignment& buckets) {
  if (final_top1.size() != top1.examples()) {
    throw ShapeError("decision_flip_rates: " + std::to_string(final_top1.size()) +
                     " final predictions for " + std::to_string(top1.examples()) + " examples");
  }
  ReportTable t;
  t.kind = "flips";
  t.columns = {"layer", "bucket", "flip_rate", "count"};
  const std::size_t nb = buckets.num_buckets();
  for (std::size_t l = 0; l < top1.layers(); ++l) {
    std::vector<std::size_t> total(nb, 0), flipped(nb, 0);
    for (std::size_t ex = 0; ex < top1.examples(); ++ex) {
      const TokenId pred = top1.at(ex, l);
      const std::size_t b = buckets.bucket_of(pred);
      ++total[b];
      if (pred != final_top1[ex]) ++flipped[b];
    }
    for (std::size_t b = 0; b < nb; ++b) {
      Cell rate;
      if (total[b] > 0) rate = static_cast<double>(flipped[b]) / static_cast<double>(total[b]);
      t.rows.push_back({integer(l + 1), buckets.names()[b], rate, integer(total[b])});
    }
  }
  return t;
}

void validate_thresholds(std::span<const std::size_t> thresholds) {
  std::size_t prev = 0;
  for (std::size_t k : thresholds) {
    if (k <= prev) throw ConfigError("rank thresholds must be >= 1 and strictly ascending");
    prev = k;
  }
}

const std::vector<std::size_t>& default_thresholds() {
  static const std::vector<std::size_t> thresholds{1, 2, 5, 10, 50, 100, 1000};
  return thresholds;
}

std::vector<std::optional<std::size_t>> earliest_crossing(std::span<const std::size_t> ranks,
                                                          std::span<const std::size_t> thresholds) {
  validate_thresholds(thresholds);
  std::vector<std::optional<std::size_t>> out(thresholds.size());
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    for (std::size_t l = 0; l < ranks.size(); ++l) {
      if (ranks[l] <= thresholds[i]) {
        out[i] = l + 1;
        break;
      }
    }
  }
  return out;
}

std::vector<RankTrace> rank_traces_from(const RankGrid& ranks, std::span<const TokenId> targets,
                                        const std::vector<Labels>& labels) {
  if (targets.size() != ranks.examples() || (!labels.empty() && labels.size() != ranks.examples())) {
    throw ShapeError("rank_traces_from: targets/labels do not match the rank grid");
  }
  std::vector<RankTrace> traces(ranks.examples());
  for (std::size_t n = 0; n < ranks.examples(); ++n) {
    RankTrace& t = traces[n];
    t.example = n;
    t.target = targets[n];
    t.ranks.resize(ranks.layers());
    for (std::size_t l = 0; l < ranks.layers(); ++l) t.ranks[l] = ranks.at(n, l);
    if (!labels.empty()) t.labels = labels[n];
  }
  return traces;
}

std::vector<RankTrace> build_rank_traces(const ModelDump& dump, const LensKind& lens,
                                         std::span<const TokenId> targets, std::size_t threads) {
  DecodeRequest request;
  if (targets.empty()) {
    request.targets = dump.target_tokens;
  } else {
    request.targets.assign(targets.begin(), targets.end());
  }
  const DecodeSummary s = summarize(dump, lens, request, threads);
  return rank_traces_from(s.target_rank, request.targets, dump.labels);
}

ReportTable onset_report(std::span<const RankTrace> traces, std::span<const std::size_t> thresholds,
                         const OnsetOptions& options) {
  validate_thresholds(thresholds);
  if (options.category_keys.empty()) throw ConfigError("onset report needs at least one category key");
  const std::size_t layers = traces.empty() ? 0 : traces.front().ranks.size();

  struct Acc {
    std::size_t traces = 0;
    std::vector<std::size_t> crossed, layer_sum;
  };
  std::map<std::string, Acc> by_category;
  for (const RankTrace& trace : traces) {
    if (trace.ranks.size() != layers) throw ShapeError("onset report: traces differ in layer count");
    std::string category;
    for (std::size_t i = 0; i < options.category_keys.size(); ++i) {
      const std::string& key = options.category_keys[i];
      auto it = trace.labels.find(key);
      if (it == trace.labels.end()) {
        throw DataError("onset report: example " + std::to_string(trace.example) +
                        " has no '" + key + "' label");
      }
      if (i) category += "/";
      category += it->second;
    }
    if (std::find(options.excluded_categories.begin(), options.excluded_categories.end(),
                  category) != options.excluded_categories.end()) {
      continue;
    }
    Acc& acc = by_category[category];
    if (acc.crossed.empty()) {
      acc.crossed.assign(thresholds.size(), 0);
      acc.layer_sum.assign(thresholds.size(), 0);
    }
    ++acc.traces;
    const auto crossing = earliest_crossing(trace.ranks, thresholds);
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      if (crossing[i]) {
        ++acc.crossed[i];
        acc.layer_sum[i] += *crossing[i];
      }
    }
  }

  ReportTable t;
  t.kind = "onset";
  t.columns = {"category", "threshold", "mean_layer", "count", "never_fraction"};
  for (const auto& [category, acc] : by_category) {
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      Cell mean;
      if (acc.crossed[i] > 0) {
        mean = static_cast<double>(acc.layer_sum[i]) / static_cast<double>(acc.crossed[i]);
      }
      const double never =
          static_cast<double>(acc.traces - acc.crossed[i]) / static_cast<double>(acc.traces);
      t.rows.push_back({category, integer(thresholds[i]), mean, integer(acc.traces), never});
    }
  }
  return t;
}

ReportTable mean_rank_trace(std::span<const TokenId> options, const RankGrid& option_ranks,
                            std::span<const std::string> option_names) {
  if (option_ranks.width() != options.size()) {
    throw ShapeError("mean_rank_trace: rank grid width does not match the option list");
  }
  if (!option_names.empty() && option_names.size() != options.size()) {
    throw ShapeError("mean_rank_trace: option names do not match the option list");
  }
  ReportTable t;
  t.kind = "meanrank";
  t.columns = {"layer", "option", "mean_rank"};
  for (std::size_t l = 0; l < option_ranks.layers(); ++l) {
    for (std::size_t k = 0; k < options.size(); ++k) {
      std::uint64_t sum = 0;
      for (std::size_t n = 0; n < option_ranks.examples(); ++n) sum += option_ranks.at(n, l, k);
      const std::string name =
          option_names.empty() ? std::to_string(options[k]) : option_names[k];
      Cell mean;
      if (option_ranks.examples() > 0) {
        mean = static_cast<double>(sum) / static_cast<double>(option_ranks.examples());
      }
      t.rows.push_back({integer(l + 1), name, mean});
    }
  }
  return t;
}

ReportTable mean_rank_trace(std::span<const TokenId> options, const DecodedLogits& logits,
                            std::span<const std::string> option_names) {
  RankGrid ranks(logits.examples(), logits.layers(), options.size());
  for (std::size_t n = 0; n < logits.examples(); ++n) {
    for (std::size_t l = 0; l < logits.layers(); ++l) {
      for (std::size_t k = 0; k < options.size(); ++k) {
        ranks.at(n, l, k) = rank_of(logits.at(n, l), options[k]);
      }
    }
  }
  return mean_rank_trace(options, ranks, option_names);
}

ReportTable prob_mass_report(std::span<const ProbMassSeries> series,
                             std::span<const double> final_mean, std::span<const TokenId> freq_order,
                             std::size_t layers, std::size_t max_tokens) {
  const std::size_t vocab = final_mean.size();
  for (const auto& s : series) {
    if (s.by_layer.size() != layers * vocab) {
      throw ShapeError("prob_mass_report: series '" + s.lens + "' is not layers x vocab");
    }
  }
  const std::size_t count =
      max_tokens == 0 ? freq_order.size() : std::min(max_tokens, freq_order.size());
  ReportTable t;
  t.kind = "probmass";
  t.columns = {"freq_rank", "token", "layer", "lens", "mean_prob"};
  for (std::size_t r = 0; r < count; ++r) {
    const TokenId token = freq_order[r];
    if (token >= vocab) throw ShapeError("prob_mass_report: token outside vocabulary");
    for (const auto& s : series) {
      for (std::size_t l = 0; l < layers; ++l) {
        t.rows.push_back({integer(r + 1), integer(token), integer(l + 1), s.lens,
                          s.by_layer[l * vocab + token]});
      }
    }
    t.rows.push_back({integer(r + 1), integer(token), integer(layers), std::string("final"),
                      final_mean[token]});
  }
  return t;
}

std::vector<double> final_mean_probability(const ModelDump& dump, std::size_t threads) {
  const std::size_t n = dump.num_examples();
  const std::size_t vocab = dump.vocab_size();
  // block layout shared with summarize()
  std::vector<std::vector<double>> partial((n + kExampleBlock - 1) / kExampleBlock);
  parallel_blocks(n, kExampleBlock, threads, [&](std::size_t begin, std::size_t end, std::size_t b) {
    std::vector<double> sums(vocab, 0.0);
    for (std::size_t ex = begin; ex < end; ++ex) {
      const Vector p = softmax(reference_logits(dump, ex));
      for (std::size_t v = 0; v < vocab; ++v) sums[v] += p[v];
    }
    partial[b] = std::move(sums);
  });
  std::vector<double> mean(vocab, 0.0);
  for (const auto& p : partial) {
    for (std::size_t v = 0; v < vocab; ++v) mean[v] += p[v];
  }
  for (double& v : mean) v /= static_cast<double>(n);
  return mean;
}

}  // namespace depthlens
