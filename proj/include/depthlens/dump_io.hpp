#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "depthlens/numerics.hpp"

namespace depthlens {

using Labels = std::map<std::string, std::string>;

// Residual-stream states at the final prompt position, shape [N, L, d].
// Layer indices are 0-based here; layer L-1 is the last block's output.
class HiddenStates {
 public:
  HiddenStates() = default;
  HiddenStates(std::size_t examples, std::size_t layers, std::size_t dim);
  HiddenStates(std::size_t examples, std::size_t layers, std::size_t dim, std::vector<double> data);

  std::size_t examples() const { return examples_; }
  std::size_t layers() const { return layers_; }
  std::size_t dim() const { return dim_; }

  std::span<double> at(std::size_t example, std::size_t layer) {
    return {data_.data() + (example * layers_ + layer) * dim_, dim_};
  }
  std::span<const double> at(std::size_t example, std::size_t layer) const {
    return {data_.data() + (example * layers_ + layer) * dim_, dim_};
  }
  std::span<const double> values() const { return data_; }

  friend bool operator==(const HiddenStates&, const HiddenStates&) = default;

 private:
  std::size_t examples_ = 0;
  std::size_t layers_ = 0;
  std::size_t dim_ = 0;
  std::vector<double> data_;
};

// In-memory model dump. Values are held at 64-bit; on disk they are float32,
// so anything written must already be float32-representable to round-trip.
struct ModelDump {
  std::string model_name;
  NormSpec norm = NormSpec::rms_norm(1e-5, {});
  Matrix unembedding;  // |V| x d
  HiddenStates hidden;
  std::optional<Matrix> final_logits;  // N x |V|
  std::vector<TokenId> target_tokens;
  std::vector<Labels> labels;  // empty, or one map per example

  std::size_t num_examples() const { return hidden.examples(); }
  std::size_t num_layers() const { return hidden.layers(); }
  std::size_t hidden_dim() const { return hidden.dim(); }
  std::size_t vocab_size() const { return unembedding.rows(); }

  friend bool operator==(const ModelDump&, const ModelDump&) = default;
};

enum class CheckSeverity { error, warning };

struct DumpCheck {
  std::string name;
  CheckSeverity severity = CheckSeverity::error;
  bool passed = true;
  std::string detail;
};

struct DumpValidation {
  std::vector<DumpCheck> checks;
  bool ok() const;        // no failed error-level check
  bool clean() const;     // no failed check at all
};

constexpr double kLayerIdentityTolerance = 1e-4;

// Checks the cross-field invariants of a structurally sound dump.
DumpValidation validate_dump(const ModelDump& dump, double tolerance = kLayerIdentityTolerance);

struct ReadOptions {
  bool validate = true;
  double tolerance = kLayerIdentityTolerance;
};

// Missing files, size/shape disagreements and malformed fields always throw.
// Invariant violations throw DataError when options.validate is set.
ModelDump read_dump(const std::filesystem::path& dir, const ReadOptions& options = {});
void write_dump(const ModelDump& dump, const std::filesystem::path& dir);

// Reference distribution logits: final_logits when present, otherwise the
// last layer decoded through the final norm and unembedding.
Vector reference_logits(const ModelDump& dump, std::size_t example);

class FrequencyTable {
 public:
  FrequencyTable() = default;
  explicit FrequencyTable(std::map<TokenId, std::uint64_t> counts);

  std::uint64_t count(TokenId token) const;
  std::uint64_t total() const { return total_; }
  const std::map<TokenId, std::uint64_t>& counts() const { return counts_; }
  bool empty() const { return counts_.empty(); }

  void add(const FrequencyTable& other);

  // Tokens with a non-zero count, ordered by (count desc, id asc).
  std::vector<TokenId> ranked() const;

  friend bool operator==(const FrequencyTable&, const FrequencyTable&) = default;

 private:
  std::map<TokenId, std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

// Rejects any id >= vocab_size, naming its stream position.
FrequencyTable count_tokens(std::span<const TokenId> tokens, std::size_t vocab_size);

void write_frequency_table(const FrequencyTable& table, const std::filesystem::path& path);
FrequencyTable read_frequency_table(const std::filesystem::path& path);

struct Translator {
  Matrix weight;  // d x d
  Vector bias;    // d

  static Translator identity(std::size_t dim);
  friend bool operator==(const Translator&, const Translator&) = default;
};

struct TrainingMetadata {
  std::size_t epochs = 0;
  std::size_t batch_size = 0;
  double learning_rate = 0.0;
  std::string optimizer;
  std::string init;
  std::uint64_t seed = 0;
  // "none", or e.g. "weight:token=262,factor=0.001"
  std::string loss_mask = "none";
  std::vector<bool> trained;           // per layer; false = fixed identity
  std::vector<double> final_mean_kl;   // per layer, unweighted
  std::vector<std::pair<std::string, std::string>> provenance;

  friend bool operator==(const TrainingMetadata&, const TrainingMetadata&) = default;
};

struct TranslatorSet {
  std::vector<Translator> layers;
  TrainingMetadata metadata;

  std::size_t num_layers() const { return layers.size(); }
  std::size_t dim() const { return layers.empty() ? 0 : layers.front().bias.size(); }

  friend bool operator==(const TranslatorSet&, const TranslatorSet&) = default;
};

std::string serialize_translators(const TranslatorSet& set);
TranslatorSet deserialize_translators(std::string_view bytes);
void write_translators(const TranslatorSet& set, const std::filesystem::path& path);
TranslatorSet read_translators(const std::filesystem::path& path);

// Picks a split point uniformly among the starts of the second through last
// words and returns the text before it (trailing whitespace dropped) when it
// has at least min_chars characters. Lengths count UTF-8 code points.
std::optional<std::string> make_prefix(std::string_view line, std::mt19937_64& rng,
                                       std::size_t min_chars = 15);

// Writes to a sibling temporary and renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace depthlens
