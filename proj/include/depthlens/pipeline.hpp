#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "depthlens/analysis.hpp"
#include "depthlens/dump_io.hpp"
#include "depthlens/lens.hpp"

namespace depthlens {

inline constexpr std::string_view kToolName = "depthlens";
inline constexpr std::string_view kToolVersion = DEPTHLENS_VERSION;

// Hash over manifest.json and every file it references, in name order.
std::string dump_fingerprint(const std::filesystem::path& dir);

const std::vector<std::string>& report_kinds();

struct ReportContext {
  const ModelDump* dump = nullptr;
  LensKind lens = LensKind::logit();
  const FrequencyTable* frequencies = nullptr;  // buckets, flips, probmass
  BucketSpec buckets;
  std::vector<std::size_t> thresholds = default_thresholds();
  OnsetOptions onset;
  std::vector<TokenId> options;  // meanrank
  std::vector<std::string> option_names;
  std::size_t max_tokens = 0;  // probmass; 0 = whole vocabulary
  std::size_t threads = 1;
};

// Option ids from the explicit list, else from the `option_ids` label
// ("|"-separated, identical across examples). Names come from the explicit
// list, else the `options` label when it has the same arity.
std::pair<std::vector<TokenId>, std::vector<std::string>> resolve_options(
    const ModelDump& dump, std::vector<TokenId> ids, std::vector<std::string> names);

// Dispatches to the depth-analysis report of the given kind. Provenance is
// left empty.
ReportTable build_report(std::string_view kind, const ReportContext& context);

struct ProvenanceInputs {
  std::uint64_t seed = 0;
  std::string dump_hash;
  std::string model_name;
  std::string lens;
  std::string translator_hash = "none";
  std::string bucket_source = "none";
};

std::vector<std::pair<std::string, std::string>> report_provenance(const ProvenanceInputs& in);

// layer,epoch,mean_kl with provenance lines.
std::string training_log_csv(const std::vector<TrainLogRow>& log,
                             const std::vector<std::pair<std::string, std::string>>& provenance);

}  // namespace depthlens
