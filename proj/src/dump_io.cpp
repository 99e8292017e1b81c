#include "depthlens/dump_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

#include "depthlens/error.hpp"

namespace depthlens {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
void append_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
  }
}

template <typename U>
U load_le(const char* p) {
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    value |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
  }
  return value;
}

void append_f32(std::string& out, double v) {
  append_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

void append_f64(std::string& out, double v) { append_le(out, std::bit_cast<std::uint64_t>(v)); }

std::string shape_text(std::span<const std::size_t> shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t product(std::span<const std::size_t> shape) {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  return n;
}

// Cursor over a byte buffer that reports truncation with the source name.
class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <typename U>
  U take() {
    need(sizeof(U));
    U v = load_le<U>(bytes_.data() + pos_);
    pos_ += sizeof(U);
    return v;
  }
  double take_f64() { return std::bit_cast<double>(take<std::uint64_t>()); }
  std::string_view take_bytes(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw ShapeError(source_ + ": truncated at byte " + std::to_string(pos_));
    }
  }
  std::string_view bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

struct TensorRef {
  std::string field;  // manifest field naming the file
  std::string file;
};

std::vector<double> load_f32(const fs::path& dir, const TensorRef& ref,
                             std::span<const std::size_t> shape) {
  const fs::path path = dir / ref.file;
  if (!fs::exists(path)) {
    throw IoError("missing file for " + ref.field + ": " + path.string());
  }
  const std::string bytes = read_file(path);
  const std::size_t count = product(shape);
  if (bytes.size() != count * 4) {
    throw ShapeError(ref.field + " '" + ref.file + "': expected " + std::to_string(count * 4) +
                     " bytes for float32 shape " + shape_text(shape) + ", found " +
                     std::to_string(bytes.size()));
  }
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const float f = std::bit_cast<float>(load_le<std::uint32_t>(bytes.data() + 4 * i));
    if (!std::isfinite(f)) {
      throw DataError(ref.field + " '" + ref.file + "': non-finite value at element " +
                      std::to_string(i));
    }
    out[i] = f;
  }
  return out;
}

std::string encode_f32(std::span<const double> values) {
  std::string out;
  out.reserve(values.size() * 4);
  for (double v : values) append_f32(out, v);
  return out;
}

const json& require_field(const json& obj, const std::string& key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw DataError(where + ": field '" + key + "' missing");
  }
  return obj.at(key);
}

std::string require_string(const json& obj, const std::string& key, const std::string& where) {
  const json& v = require_field(obj, key, where);
  if (!v.is_string()) throw DataError(where + ": field '" + key + "' must be a string");
  return v.get<std::string>();
}

std::size_t require_count(const json& obj, const std::string& key, const std::string& where) {
  const json& v = require_field(obj, key, where);
  if (!v.is_number_unsigned() || v.get<std::uint64_t>() == 0) {
    throw DataError(where + ": field '" + key + "' must be a positive integer");
  }
  return v.get<std::size_t>();
}

std::optional<std::string> optional_string(const json& obj, const std::string& key,
                                           const std::string& where) {
  if (!obj.contains(key) || obj.at(key).is_null()) return std::nullopt;
  if (!obj.at(key).is_string()) throw DataError(where + ": field '" + key + "' must be a string");
  return obj.at(key).get<std::string>();
}

// Optional "tensors" block: {"name": {"dtype": "...", "shape": [...]}}.
void check_declared_tensor(const json& manifest, const std::string& name, const std::string& dtype,
                           std::span<const std::size_t> shape) {
  if (!manifest.contains("tensors")) return;
  const json& tensors = manifest.at("tensors");
  if (!tensors.is_object() || !tensors.contains(name)) return;
  const json& t = tensors.at(name);
  const std::string where = "manifest tensors." + name;
  const std::string declared = require_string(t, "dtype", where);
  if (declared != dtype) {
    throw ShapeError(where + ": dtype '" + declared + "' but " + dtype + " is required");
  }
  const json& s = require_field(t, "shape", where);
  std::vector<std::size_t> declared_shape;
  if (s.is_array()) {
    for (const auto& e : s) {
      if (!e.is_number_unsigned()) throw DataError(where + ": shape entries must be integers");
      declared_shape.push_back(e.get<std::size_t>());
    }
  }
  if (!std::equal(declared_shape.begin(), declared_shape.end(), shape.begin(), shape.end())) {
    throw ShapeError(where + ": declared shape " + shape_text(declared_shape) +
                     " disagrees with manifest dimensions " + shape_text(shape));
  }
}

json tensor_entry(const std::string& dtype, std::vector<std::size_t> shape) {
  return json{{"dtype", dtype}, {"shape", std::move(shape)}};
}

Vector logit_lens_final(const ModelDump& dump, std::size_t example) {
  return project(dump.unembedding,
                 apply_norm(dump.hidden.at(example, dump.num_layers() - 1), dump.norm));
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

}  // namespace

HiddenStates::HiddenStates(std::size_t examples, std::size_t layers, std::size_t dim)
    : examples_(examples), layers_(layers), dim_(dim), data_(examples * layers * dim, 0.0) {}

HiddenStates::HiddenStates(std::size_t examples, std::size_t layers, std::size_t dim,
                           std::vector<double> data)
    : examples_(examples), layers_(layers), dim_(dim), data_(std::move(data)) {
  if (data_.size() != examples * layers * dim) {
    throw ShapeError("hidden states hold " + std::to_string(data_.size()) +
                     " values, expected shape [" + std::to_string(examples) + "," +
                     std::to_string(layers) + "," + std::to_string(dim) + "]");
  }
  require_finite(data_, "hidden states");
}

bool DumpValidation::ok() const {
  return std::none_of(checks.begin(), checks.end(), [](const DumpCheck& c) {
    return !c.passed && c.severity == CheckSeverity::error;
  });
}

bool DumpValidation::clean() const {
  return std::all_of(checks.begin(), checks.end(), [](const DumpCheck& c) { return c.passed; });
}

Vector reference_logits(const ModelDump& dump, std::size_t example) {
  if (dump.final_logits) {
    const auto row = dump.final_logits->row(example);
    return Vector(row.begin(), row.end());
  }
  return logit_lens_final(dump, example);
}

DumpValidation validate_dump(const ModelDump& dump, double tolerance) {
  DumpValidation result;
  const std::size_t n = dump.num_examples();
  const std::size_t v = dump.vocab_size();

  DumpCheck shapes{"shapes", CheckSeverity::error, true, ""};
  auto shape_fail = [&](const std::string& msg) {
    if (shapes.passed) shapes.detail = msg;
    shapes.passed = false;
  };
  if (n == 0 || dump.num_layers() == 0 || dump.hidden_dim() == 0 || v == 0) {
    shape_fail("num_examples, num_layers, hidden_dim and vocab_size must all be positive");
  }
  if (dump.unembedding.cols() != dump.hidden_dim()) {
    shape_fail("unembedding has " + std::to_string(dump.unembedding.cols()) +
               " columns, hidden_dim is " + std::to_string(dump.hidden_dim()));
  }
  if (dump.norm.dim() != dump.hidden_dim()) {
    shape_fail("norm gamma has length " + std::to_string(dump.norm.dim()) + ", hidden_dim is " +
               std::to_string(dump.hidden_dim()));
  }
  if (dump.target_tokens.size() != n) {
    shape_fail("target_tokens has " + std::to_string(dump.target_tokens.size()) +
               " entries, num_examples is " + std::to_string(n));
  }
  if (dump.final_logits && (dump.final_logits->rows() != n || dump.final_logits->cols() != v)) {
    shape_fail("final_logits shape disagrees with [num_examples, vocab_size]");
  }
  if (!dump.labels.empty() && dump.labels.size() != n) {
    shape_fail("labels has " + std::to_string(dump.labels.size()) + " entries, num_examples is " +
               std::to_string(n));
  }
  result.checks.push_back(shapes);
  if (!shapes.passed) return result;

  DumpCheck range{"target_tokens_in_range", CheckSeverity::error, true, ""};
  for (std::size_t i = 0; i < n && range.passed; ++i) {
    if (dump.target_tokens[i] >= v) {
      range.passed = false;
      range.detail = "example " + std::to_string(i) + ": target " +
                     std::to_string(dump.target_tokens[i]) + " >= vocab_size " + std::to_string(v);
    }
  }
  result.checks.push_back(range);
  if (!range.passed) return result;

  DumpCheck target{"target_matches_final_top1", CheckSeverity::error, true, ""};
  DumpCheck identity{"final_layer_identity", CheckSeverity::error, true, ""};
  DumpCheck agreement{"final_layer_top1_agreement", CheckSeverity::warning, true, ""};
  double max_diff = 0.0;
  std::size_t worst = 0;
  std::size_t disagreements = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vector ref = reference_logits(dump, i);
    const TokenId best = top1(ref);
    if (target.passed && best != dump.target_tokens[i]) {
      target.passed = false;
      target.detail = "example " + std::to_string(i) + ": target_tokens has " +
                      std::to_string(dump.target_tokens[i]) + " but top1(final logits) is " +
                      std::to_string(best);
    }
    const Vector decoded = dump.final_logits ? logit_lens_final(dump, i) : ref;
    if (dump.final_logits) {
      for (std::size_t k = 0; k < v; ++k) {
        const double diff = std::abs(decoded[k] - ref[k]);
        if (diff > max_diff) {
          max_diff = diff;
          worst = i;
        }
      }
    }
    if (top1(decoded) != dump.target_tokens[i]) ++disagreements;
  }
  result.checks.push_back(target);
  if (dump.final_logits) {
    identity.passed = max_diff <= tolerance;
    identity.detail = "max abs diff " + format_double(max_diff) + " (example " +
                      std::to_string(worst) + "), tolerance " + format_double(tolerance);
    result.checks.push_back(identity);
  }
  agreement.passed = disagreements == 0;
  agreement.detail = std::to_string(disagreements) +
                     " example(s) where the final-layer logit lens top-1 differs from target";
  result.checks.push_back(agreement);
  return result;
}

ModelDump read_dump(const fs::path& dir, const ReadOptions& options) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw IoError("missing file: " + manifest_path.string());
  json m;
  try {
    m = json::parse(read_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw DataError(manifest_path.string() + ": invalid JSON: " + e.what());
  }
  const std::string where = manifest_path.string();
  const json& version = require_field(m, "format_version", where);
  if (!version.is_number_integer() || version.get<long long>() != 1) {
    throw DataError(where + ": unsupported format_version " + version.dump());
  }
  ModelDump dump;
  dump.model_name = require_string(m, "model_name", where);
  const std::size_t layers = require_count(m, "num_layers", where);
  const std::size_t dim = require_count(m, "hidden_dim", where);
  const std::size_t vocab = require_count(m, "vocab_size", where);
  const std::size_t examples = require_count(m, "num_examples", where);

  const json& norm = require_field(m, "norm", where);
  const std::string norm_where = where + " norm";
  const NormKind kind = parse_norm_kind(require_string(norm, "kind", norm_where));
  const json& eps_json = require_field(norm, "eps", norm_where);
  if (!eps_json.is_number()) throw DataError(norm_where + ": field 'eps' must be a number");
  const double eps = eps_json.get<double>();
  const std::size_t dshape[] = {dim};
  Vector gamma = load_f32(dir, {"norm.gamma_file", require_string(norm, "gamma_file", norm_where)},
                          dshape);
  check_declared_tensor(m, "norm_gamma", "float32", dshape);
  const auto beta_file = optional_string(norm, "beta_file", norm_where);
  if (kind == NormKind::layernorm) {
    if (!beta_file) throw DataError(norm_where + ": layernorm requires 'beta_file'");
    check_declared_tensor(m, "norm_beta", "float32", dshape);
    dump.norm = NormSpec::layer_norm(eps, std::move(gamma),
                                     load_f32(dir, {"norm.beta_file", *beta_file}, dshape));
  } else {
    if (beta_file) throw DataError(norm_where + ": rmsnorm must not declare 'beta_file'");
    dump.norm = NormSpec::rms_norm(eps, std::move(gamma));
  }

  const std::size_t ushape[] = {vocab, dim};
  check_declared_tensor(m, "unembedding", "float32", ushape);
  dump.unembedding = Matrix(
      vocab, dim,
      load_f32(dir, {"unembedding_file", require_string(m, "unembedding_file", where)}, ushape));

  const std::size_t hshape[] = {examples, layers, dim};
  check_declared_tensor(m, "hidden_states", "float32", hshape);
  dump.hidden = HiddenStates(
      examples, layers, dim,
      load_f32(dir, {"hidden_states_file", require_string(m, "hidden_states_file", where)},
               hshape));

  if (auto file = optional_string(m, "final_logits_file", where)) {
    const std::size_t fshape[] = {examples, vocab};
    check_declared_tensor(m, "final_logits", "float32", fshape);
    dump.final_logits = Matrix(examples, vocab, load_f32(dir, {"final_logits_file", *file}, fshape));
  }

  {
    const std::string file = require_string(m, "target_tokens_file", where);
    const std::size_t tshape[] = {examples};
    check_declared_tensor(m, "target_tokens", "uint32", tshape);
    const fs::path path = dir / file;
    if (!fs::exists(path)) throw IoError("missing file for target_tokens_file: " + path.string());
    const std::string bytes = read_file(path);
    if (bytes.size() != examples * 4) {
      throw ShapeError("target_tokens_file '" + file + "': expected " +
                       std::to_string(examples * 4) + " bytes for uint32 shape [" +
                       std::to_string(examples) + "], found " + std::to_string(bytes.size()));
    }
    dump.target_tokens.resize(examples);
    for (std::size_t i = 0; i < examples; ++i) {
      dump.target_tokens[i] = load_le<std::uint32_t>(bytes.data() + 4 * i);
    }
  }

  if (auto file = optional_string(m, "labels_file", where)) {
    const fs::path path = dir / *file;
    if (!fs::exists(path)) throw IoError("missing file for labels_file: " + path.string());
    std::istringstream in(read_file(path));
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::string lwhere = "labels_file '" + *file + "' line " + std::to_string(line_no);
      json obj;
      try {
        obj = json::parse(line);
      } catch (const json::parse_error& e) {
        throw DataError(lwhere + ": invalid JSON: " + e.what());
      }
      if (!obj.is_object()) throw DataError(lwhere + ": expected a JSON object");
      Labels labels;
      for (const auto& [key, value] : obj.items()) {
        if (!value.is_string()) {
          throw DataError(lwhere + ": label '" + key + "' must be a string");
        }
        labels.emplace(key, value.get<std::string>());
      }
      dump.labels.push_back(std::move(labels));
    }
    if (dump.labels.size() != examples) {
      throw ShapeError("labels_file '" + *file + "': " + std::to_string(dump.labels.size()) +
                       " lines, num_examples is " + std::to_string(examples));
    }
  }

  if (options.validate) {
    const DumpValidation v = validate_dump(dump, options.tolerance);
    for (const auto& c : v.checks) {
      if (!c.passed && c.severity == CheckSeverity::error) {
        throw DataError(dir.string() + ": invariant " + c.name + " violated: " + c.detail);
      }
    }
  }
  return dump;
}

void write_dump(const ModelDump& dump, const fs::path& dir) {
  const DumpValidation v = validate_dump(dump, std::numeric_limits<double>::infinity());
  if (!v.checks.empty() && !v.checks.front().passed) {
    throw ShapeError("write_dump: " + v.checks.front().detail);
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  const std::size_t n = dump.num_examples(), l = dump.num_layers(), d = dump.hidden_dim(),
                    vsz = dump.vocab_size();
  json norm{{"kind", std::string(to_string(dump.norm.kind()))},
            {"eps", dump.norm.epsilon()},
            {"gamma_file", "norm_gamma.f32"}};
  json tensors{{"norm_gamma", tensor_entry("float32", {d})},
               {"unembedding", tensor_entry("float32", {vsz, d})},
               {"hidden_states", tensor_entry("float32", {n, l, d})},
               {"target_tokens", tensor_entry("uint32", {n})}};
  write_file_atomic(dir / "norm_gamma.f32", encode_f32(dump.norm.gamma()));
  if (dump.norm.has_beta()) {
    norm["beta_file"] = "norm_beta.f32";
    tensors["norm_beta"] = tensor_entry("float32", {d});
    write_file_atomic(dir / "norm_beta.f32", encode_f32(dump.norm.beta()));
  }
  json m{{"format_version", 1},
         {"model_name", dump.model_name},
         {"num_layers", l},
         {"hidden_dim", d},
         {"vocab_size", vsz},
         {"num_examples", n},
         {"norm", norm},
         {"unembedding_file", "unembedding.f32"},
         {"hidden_states_file", "hidden_states.f32"},
         {"target_tokens_file", "target_tokens.u32"}};
  write_file_atomic(dir / "unembedding.f32", encode_f32(dump.unembedding.values()));
  write_file_atomic(dir / "hidden_states.f32", encode_f32(dump.hidden.values()));
  if (dump.final_logits) {
    m["final_logits_file"] = "final_logits.f32";
    tensors["final_logits"] = tensor_entry("float32", {n, vsz});
    write_file_atomic(dir / "final_logits.f32", encode_f32(dump.final_logits->values()));
  }
  std::string targets;
  for (TokenId t : dump.target_tokens) append_le(targets, t);
  write_file_atomic(dir / "target_tokens.u32", targets);
  if (!dump.labels.empty()) {
    m["labels_file"] = "labels.jsonl";
    std::string lines;
    for (const auto& labels : dump.labels) lines += json(labels).dump() + "\n";
    write_file_atomic(dir / "labels.jsonl", lines);
  }
  m["tensors"] = tensors;
  write_file_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

FrequencyTable::FrequencyTable(std::map<TokenId, std::uint64_t> counts) : counts_(std::move(counts)) {
  for (const auto& [token, c] : counts_) total_ += c;
}

std::uint64_t FrequencyTable::count(TokenId token) const {
  auto it = counts_.find(token);
  return it == counts_.end() ? 0 : it->second;
}

void FrequencyTable::add(const FrequencyTable& other) {
  for (const auto& [token, c] : other.counts_) counts_[token] += c;
  total_ += other.total_;
}

std::vector<TokenId> FrequencyTable::ranked() const {
  std::vector<std::pair<TokenId, std::uint64_t>> entries;
  for (const auto& e : counts_) {
    if (e.second > 0) entries.push_back(e);
  }
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<TokenId> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.first);
  return out;
}

FrequencyTable count_tokens(std::span<const TokenId> tokens, std::size_t vocab_size) {
  std::vector<std::uint64_t> dense(vocab_size, 0);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= vocab_size) {
      throw DataError("token id " + std::to_string(tokens[i]) + " at position " +
                      std::to_string(i) + " is >= vocab size " + std::to_string(vocab_size));
    }
    ++dense[tokens[i]];
  }
  std::map<TokenId, std::uint64_t> counts;
  for (std::size_t t = 0; t < vocab_size; ++t) {
    if (dense[t] > 0) counts.emplace_hint(counts.end(), static_cast<TokenId>(t), dense[t]);
  }
  return FrequencyTable(std::move(counts));
}

void write_frequency_table(const FrequencyTable& table, const fs::path& path) {
  std::string out;
  out.reserve(8 + 12 * table.counts().size());
  append_le<std::uint64_t>(out, table.counts().size());
  for (const auto& [token, c] : table.counts()) {
    append_le<std::uint32_t>(out, token);
    append_le<std::uint64_t>(out, c);
  }
  write_file_atomic(path, out);
}

FrequencyTable read_frequency_table(const fs::path& path) {
  const std::string bytes = read_file(path);
  ByteReader r(bytes, path.string());
  const auto pairs = r.take<std::uint64_t>();
  if (r.remaining() != pairs * 12) {
    throw ShapeError(path.string() + ": header declares " + std::to_string(pairs) +
                     " pairs (" + std::to_string(pairs * 12) + " bytes) but " +
                     std::to_string(r.remaining()) + " bytes follow");
  }
  std::map<TokenId, std::uint64_t> counts;
  std::optional<TokenId> prev;
  for (std::uint64_t i = 0; i < pairs; ++i) {
    const auto token = r.take<std::uint32_t>();
    const auto c = r.take<std::uint64_t>();
    if (prev && token <= *prev) {
      throw DataError(path.string() + ": token ids not strictly ascending at pair " +
                      std::to_string(i));
    }
    prev = token;
    counts.emplace_hint(counts.end(), token, c);
  }
  return FrequencyTable(std::move(counts));
}

Translator Translator::identity(std::size_t dim) { return {Matrix::identity(dim), Vector(dim, 0.0)}; }

namespace {

constexpr char kTranslatorMagic[4] = {'D', 'L', 'T', 'S'};

json metadata_to_json(const TrainingMetadata& m) {
  json prov = json::array();
  for (const auto& [k, v] : m.provenance) prov.push_back(json::array({k, v}));
  return json{{"epochs", m.epochs},
              {"batch_size", m.batch_size},
              {"learning_rate", m.learning_rate},
              {"optimizer", m.optimizer},
              {"init", m.init},
              {"seed", m.seed},
              {"loss_mask", m.loss_mask},
              {"trained", m.trained},
              {"final_mean_kl", m.final_mean_kl},
              {"provenance", prov}};
}

TrainingMetadata metadata_from_json(const json& j) {
  const std::string where = "translator metadata";
  TrainingMetadata m;
  try {
    m.epochs = require_field(j, "epochs", where).get<std::size_t>();
    m.batch_size = require_field(j, "batch_size", where).get<std::size_t>();
    m.learning_rate = require_field(j, "learning_rate", where).get<double>();
    m.optimizer = require_string(j, "optimizer", where);
    m.init = require_string(j, "init", where);
    m.seed = require_field(j, "seed", where).get<std::uint64_t>();
    m.loss_mask = require_string(j, "loss_mask", where);
    m.trained = require_field(j, "trained", where).get<std::vector<bool>>();
    m.final_mean_kl = require_field(j, "final_mean_kl", where).get<std::vector<double>>();
    for (const auto& p : require_field(j, "provenance", where)) {
      m.provenance.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
    }
  } catch (const json::exception& e) {
    throw DataError(where + ": " + e.what());
  }
  return m;
}

}  // namespace

std::string serialize_translators(const TranslatorSet& set) {
  const std::size_t d = set.dim();
  for (std::size_t l = 0; l < set.layers.size(); ++l) {
    const auto& t = set.layers[l];
    if (t.weight.rows() != d || t.weight.cols() != d || t.bias.size() != d) {
      throw ShapeError("translator for layer " + std::to_string(l + 1) +
                       " does not match dimension " + std::to_string(d));
    }
  }
  std::string out(kTranslatorMagic, 4);
  append_le<std::uint32_t>(out, 1);
  append_le<std::uint32_t>(out, static_cast<std::uint32_t>(set.layers.size()));
  append_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  const std::string meta = metadata_to_json(set.metadata).dump();
  append_le<std::uint64_t>(out, meta.size());
  out += meta;
  for (const auto& t : set.layers) {
    for (double w : t.weight.values()) append_f64(out, w);
    for (double b : t.bias) append_f64(out, b);
  }
  return out;
}

TranslatorSet deserialize_translators(std::string_view bytes) {
  ByteReader r(bytes, "translator set");
  if (r.take_bytes(4) != std::string_view(kTranslatorMagic, 4)) {
    throw DataError("translator set: bad magic");
  }
  if (const auto version = r.take<std::uint32_t>(); version != 1) {
    throw DataError("translator set: unsupported version " + std::to_string(version));
  }
  const auto layers = r.take<std::uint32_t>();
  const auto d = r.take<std::uint32_t>();
  const auto meta_len = r.take<std::uint64_t>();
  TranslatorSet set;
  try {
    set.metadata = metadata_from_json(json::parse(r.take_bytes(meta_len)));
  } catch (const json::parse_error& e) {
    throw DataError(std::string("translator metadata: invalid JSON: ") + e.what());
  }
  const std::size_t per_layer = (static_cast<std::size_t>(d) * d + d) * 8;
  if (r.remaining() != per_layer * layers) {
    throw ShapeError("translator set: expected " + std::to_string(per_layer * layers) +
                     " bytes of parameters for " + std::to_string(layers) + " layers of dim " +
                     std::to_string(d) + ", found " + std::to_string(r.remaining()));
  }
  for (std::uint32_t l = 0; l < layers; ++l) {
    std::vector<double> w(static_cast<std::size_t>(d) * d);
    for (double& x : w) x = r.take_f64();
    Vector b(d);
    for (double& x : b) x = r.take_f64();
    require_finite(b, "translator bias");
    set.layers.push_back({Matrix(d, d, std::move(w)), std::move(b)});
  }
  return set;
}

void write_translators(const TranslatorSet& set, const fs::path& path) {
  write_file_atomic(path, serialize_translators(set));
}

TranslatorSet read_translators(const fs::path& path) {
  try {
    return deserialize_translators(read_file(path));
  } catch (const ShapeError& e) {
    throw ShapeError(path.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  } catch (const NumericalError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::optional<std::string> make_prefix(std::string_view line, std::mt19937_64& rng,
                                       std::size_t min_chars) {
  if (line.find('\n') != std::string_view::npos) {
    throw DataError("make_prefix: line contains an internal newline");
  }
  auto is_space = [](char c) {
    return c == ' ' || c == '\t' || c == '\r' || c == '\f' || c == '\v';
  };
  // End offsets of every word except the last; each is a candidate prefix end.
  std::vector<std::size_t> ends;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && is_space(line[i])) ++i;
    if (i == line.size()) break;
    while (i < line.size() && !is_space(line[i])) ++i;
    ends.push_back(i);
  }
  if (ends.size() < 2) return std::nullopt;
  ends.pop_back();
  std::uniform_int_distribution<std::size_t> pick(0, ends.size() - 1);
  const std::string_view prefix = line.substr(0, ends[pick(rng)]);
  const auto chars = static_cast<std::size_t>(std::count_if(
      prefix.begin(), prefix.end(), [](char c) { return (static_cast<unsigned char>(c) & 0xC0) != 0x80; }));
  if (chars < min_chars) return std::nullopt;
  return std::string(prefix);
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

}  // namespace depthlens
