#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "depthlens/dump_io.hpp"
#include "depthlens/lens.hpp"
#include "depthlens/report.hpp"

namespace depthlens {

// Frequency-rank cut points. The defaults give Top1-10, Top11-100,
// Top101-1000 and Top1000+.
struct BucketSpec {
  std::vector<std::size_t> boundaries{10, 100, 1000};

  std::vector<std::string> names() const;
  void validate() const;
};

class BucketAssignment {
 public:
  BucketAssignment(std::vector<std::size_t> bucket_of_token, std::vector<std::string> names);

  std::size_t bucket_of(TokenId token) const;
  std::size_t num_buckets() const { return names_.size(); }
  std::size_t vocab_size() const { return bucket_of_token_.size(); }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::size_t> bucket_of_token_;
  std::vector<std::string> names_;
};

// Tokens ranked by (count desc, id asc); zero-count tokens always land in the
// last bucket.
BucketAssignment assign_buckets(const FrequencyTable& freq, const BucketSpec& spec,
                                std::size_t vocab_size);

// Whole vocabulary in descending frequency: counted tokens by (count desc,
// id asc), then zero-count tokens by id.
std::vector<TokenId> frequency_order(const FrequencyTable& freq, std::size_t vocab_size);

// Values indexed by (example, layer), `width` entries per cell.
template <typename T>
class ExampleLayerGrid {
 public:
  ExampleLayerGrid() = default;
  ExampleLayerGrid(std::size_t examples, std::size_t layers, std::size_t width = 1)
      : examples_(examples), layers_(layers), width_(width), data_(examples * layers * width) {}

  std::size_t examples() const { return examples_; }
  std::size_t layers() const { return layers_; }
  std::size_t width() const { return width_; }

  T& at(std::size_t n, std::size_t l, std::size_t k = 0) {
    return data_[(n * layers_ + l) * width_ + k];
  }
  const T& at(std::size_t n, std::size_t l, std::size_t k = 0) const {
    return data_[(n * layers_ + l) * width_ + k];
  }

 private:
  std::size_t examples_ = 0;
  std::size_t layers_ = 0;
  std::size_t width_ = 1;
  std::vector<T> data_;
};

using TopPredictions = ExampleLayerGrid<TokenId>;
using RankGrid = ExampleLayerGrid<std::size_t>;

struct DecodeRequest {
  std::vector<TokenId> targets;  // one per example, or empty
  std::vector<TokenId> options;  // global option list, or empty
  bool probability_mass = false;
};

// Everything the reports need from one streaming decode pass.
struct DecodeSummary {
  TopPredictions top1;
  RankGrid target_rank;  // empty unless targets requested
  RankGrid option_rank;  // width = options.size()
  // layers x |V| mean softmax probability, row-major; empty unless requested.
  std::vector<double> mean_probability;
};

// Output does not depend on the thread count: probability sums are merged
// per fixed block of examples in block order.
DecodeSummary summarize(const ModelDump& dump, const LensKind& lens, const DecodeRequest& request,
                        std::size_t threads = 1);

TopPredictions top_predictions(const DecodedLogits& logits);

// layer,bucket,fraction
ReportTable bucket_composition(const TopPredictions& top1, const BucketAssignment& buckets);

// layer,bucket,flip_rate,count. count is the conditional denominator; the
// rate is left empty when it is zero.
ReportTable decision_flip_rates(const TopPredictions& top1, std::span<const TokenId> final_top1,
                                const BucketAssignment& buckets);

struct RankTrace {
  std::size_t example = 0;
  TokenId target = 0;
  std::vector<std::size_t> ranks;  // ranks[l] for 0-based layer l
  Labels labels;
};

// First 1-based layer whose rank is <= each threshold; later rises are
// ignored. Thresholds must be >= 1 and strictly ascending.
std::vector<std::optional<std::size_t>> earliest_crossing(std::span<const std::size_t> ranks,
                                                          std::span<const std::size_t> thresholds);

void validate_thresholds(std::span<const std::size_t> thresholds);
const std::vector<std::size_t>& default_thresholds();

std::vector<RankTrace> build_rank_traces(const ModelDump& dump, const LensKind& lens,
                                         std::span<const TokenId> targets = {},
                                         std::size_t threads = 1);
std::vector<RankTrace> rank_traces_from(const RankGrid& ranks, std::span<const TokenId> targets,
                                        const std::vector<Labels>& labels);

struct OnsetOptions {
  // Label keys whose values, joined with '/', name the category.
  std::vector<std::string> category_keys{"pos"};
  std::vector<std::string> excluded_categories{"OTHER"};
};

// category,threshold,mean_layer,count,never_fraction. count is the number of
// traces in the category; mean_layer averages crossing traces only.
ReportTable onset_report(std::span<const RankTrace> traces, std::span<const std::size_t> thresholds,
                         const OnsetOptions& options = {});

// layer,option,mean_rank. option_names defaults to the token ids.
ReportTable mean_rank_trace(std::span<const TokenId> options, const RankGrid& option_ranks,
                            std::span<const std::string> option_names = {});
ReportTable mean_rank_trace(std::span<const TokenId> options, const DecodedLogits& logits,
                            std::span<const std::string> option_names = {});

struct ProbMassSeries {
  std::string lens;             // "tuned", "logit"
  std::vector<double> by_layer;  // layers x |V|, row-major
};

// freq_rank,token,layer,lens,mean_prob. The final distribution is emitted
// once as lens "final" at the last layer. max_tokens = 0 keeps the whole
// vocabulary.
ReportTable prob_mass_report(std::span<const ProbMassSeries> series,
                             std::span<const double> final_mean, std::span<const TokenId> freq_order,
                             std::size_t layers, std::size_t max_tokens = 0);

// Mean over examples of softmax(reference logits).
std::vector<double> final_mean_probability(const ModelDump& dump, std::size_t threads = 1);

}  // namespace depthlens
