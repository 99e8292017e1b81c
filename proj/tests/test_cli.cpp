#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "doctest.h"
#include "json.hpp"

#include "depthlens/analysis.hpp"
#include "depthlens/dump_io.hpp"
#include "depthlens/hash.hpp"
#include "depthlens/pipeline.hpp"
#include "depthlens/synthetic.hpp"
#include "support.hpp"

using namespace depthlens;
using testing::run_cli;
using testing::TempDir;

namespace {

std::string u32_stream(const std::vector<TokenId>& ids) {
  std::string bytes;
  for (TokenId t : ids) {
    for (int k = 0; k < 4; ++k) bytes += static_cast<char>((t >> (8 * k)) & 0xff);
  }
  return bytes;
}

std::vector<std::string> csv_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("# ", 0) != 0) out.push_back(line);
  }
  return out;
}

std::vector<std::string> fields(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  for (std::string f; std::getline(in, f, ',');) out.push_back(f);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

ModelDump small_dump(std::uint64_t seed = 3) {
  synthetic::DumpShape shape;
  shape.examples = 24;
  shape.vocab = 20;
  shape.seed = seed;
  return synthetic::random_dump(shape);
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("freq counts tokens and records provenance") {
  TempDir tmp;
  write_file_atomic(tmp / "a.u32", u32_stream({3, 1, 3, 3, 0}));
  write_file_atomic(tmp / "b.u32", u32_stream({1, 9}));
  auto r = run_cli({"--out", (tmp / "out").string(), "--seed", "4", "freq", (tmp / "a.u32").string(),
                    (tmp / "b.u32").string(), "--vocab-size", "10"},
                   tmp.path());
  REQUIRE(r.code == 0);
  const FrequencyTable f = read_frequency_table(tmp / "out" / "freq.bin");
  CHECK(f == FrequencyTable({{0, 1}, {1, 2}, {3, 3}, {9, 1}}));
  const auto prov = nlohmann::json::parse(read_file(tmp / "out" / "freq.bin.provenance.json"));
  CHECK(prov["tool"] == "depthlens 0.1.0");
  CHECK(prov["seed"] == "4");
  CHECK(prov["total"] == 7);
  CHECK(prov["inputs"][1]["file"] == "b.u32");
  CHECK(prov["inputs"][1]["hash"] == hash_file(tmp / "b.u32"));

  // additivity: counting the concatenation equals the sum of the parts
  write_file_atomic(tmp / "ab.u32", u32_stream({3, 1, 3, 3, 0, 1, 9}));
  r = run_cli({"--out", (tmp / "cat").string(), "freq", (tmp / "ab.u32").string(), "--vocab-size", "10"},
              tmp.path());
  REQUIRE(r.code == 0);
  CHECK(read_frequency_table(tmp / "cat" / "freq.bin") == f);

  write_file_atomic(tmp / "t.txt", "4 4\n2  4\n");
  r = run_cli({"--out", (tmp / "txt").string(), "freq", (tmp / "t.txt").string(), "--vocab-size", "5",
               "--format", "text"},
              tmp.path());
  REQUIRE(r.code == 0);
  CHECK(read_frequency_table(tmp / "txt" / "freq.bin") == FrequencyTable({{2, 1}, {4, 3}}));
}

TEST_CASE("freq edge cases") {
  TempDir tmp;
  write_file_atomic(tmp / "empty.u32", "");
  auto r = run_cli({"--out", tmp.path().string(), "freq", (tmp / "empty.u32").string(), "--vocab-size", "3"},
                   tmp.path());
  CHECK(r.code == 0);
  CHECK(read_frequency_table(tmp / "freq.bin").total() == 0);

  write_file_atomic(tmp / "bad.u32", u32_stream({0, 3}));
  r = run_cli({"--out", tmp.path().string(), "freq", (tmp / "bad.u32").string(), "--vocab-size", "3"},
              tmp.path());
  CHECK(r.code == 2);
  CHECK(r.err.find("bad.u32") != std::string::npos);

  write_file_atomic(tmp / "odd.u32", "abcde");
  r = run_cli({"--out", tmp.path().string(), "freq", (tmp / "odd.u32").string(), "--vocab-size", "3"},
              tmp.path());
  CHECK(r.code == 2);

  r = run_cli({"freq", (tmp / "empty.u32").string()}, tmp.path());
  CHECK(r.code == 1);
}

TEST_CASE("freq on a million-token stream matches a direct count") {
  TempDir tmp;
  std::mt19937_64 rng(17);
  std::geometric_distribution<TokenId> geo(0.002);
  std::vector<TokenId> ids(1000000);
  std::map<TokenId, std::uint64_t> expected;
  for (auto& t : ids) {
    t = std::min<TokenId>(geo(rng), 49999);
    ++expected[t];
  }
  write_file_atomic(tmp / "big.u32", u32_stream(ids));
  const auto r = run_cli({"--out", tmp.path().string(), "freq", (tmp / "big.u32").string(), "--vocab-size",
                          "50000"},
                         tmp.path());
  REQUIRE(r.code == 0);
  const FrequencyTable f = read_frequency_table(tmp / "freq.bin");
  CHECK(f.counts() == expected);
  CHECK(f.total() == 1000000);
}

TEST_CASE("prefixes") {
  TempDir tmp;
  const std::string text =
      "Volume production of the new engine began in the spring of 1998.\r\n"
      "short line\n"
      "The committee published its final report after three years of hearings.\n"
      "\n"
      "A river runs through the old town and under seven stone bridges.\n";
  write_file_atomic(tmp / "in.txt", text);
  auto run = [&](const std::string& out, const std::string& seed) {
    return run_cli({"--out", (tmp / out).string(), "--seed", seed, "prefixes", (tmp / "in.txt").string()},
                   tmp.path());
  };
  REQUIRE(run("a", "11").code == 0);
  REQUIRE(run("b", "11").code == 0);
  const std::string a = read_file(tmp / "a" / "prefixes.txt");
  CHECK(a == read_file(tmp / "b" / "prefixes.txt"));
  CHECK(read_file(tmp / "a" / "prefixes.json") == read_file(tmp / "b" / "prefixes.json"));

  // same draws as the library with one generator over all lines
  std::mt19937_64 rng(11);
  std::string expected;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (auto p = make_prefix(line, rng)) expected += *p + "\n";
  }
  CHECK(a == expected);

  std::istringstream got(a);
  for (std::string p; std::getline(got, p);) {
    CHECK(p.size() >= 15);
    CHECK(text.find(p + " ") != std::string::npos);
  }
  const auto meta = nlohmann::json::parse(read_file(tmp / "a" / "prefixes.json"));
  CHECK(meta["lines"] == 5);
  CHECK(meta["accepted"].get<int>() + meta["rejected"].get<int>() == 5);
  CHECK(meta["input_hash"] == hash_file(tmp / "in.txt"));

  write_file_atomic(tmp / "short.txt", "one two\nthree\n");
  REQUIRE(run_cli({"--out", (tmp / "s").string(), "prefixes", (tmp / "short.txt").string()}, tmp.path())
              .code == 0);
  CHECK(read_file(tmp / "s" / "prefixes.txt").empty());
}

TEST_CASE("train writes reproducible translators") {
  TempDir tmp;
  synthetic::DumpShape shape;
  shape.examples = 64;
  shape.dim = 4;
  shape.vocab = 12;
  shape.seed = 21;
  write_dump(synthetic::affine_dump(shape), tmp / "dump");
  auto train = [&](const std::string& out, std::vector<std::string> extra) {
    std::vector<std::string> args{"--out", (tmp / out).string(), "--seed", "5", "train",
                                  (tmp / "dump").string(), "--epochs", "40"};
    args.insert(args.end(), extra.begin(), extra.end());
    return run_cli(args, tmp.path());
  };
  REQUIRE(train("a", {}).code == 0);
  REQUIRE(train("b", {}).code == 0);
  REQUIRE(train("m", {"--mask-token", "3", "--mask-factor", "1"}).code == 0);
  const std::string a = read_file(tmp / "a" / "translators.bin");
  CHECK(a == read_file(tmp / "b" / "translators.bin"));
  CHECK(a == read_file(tmp / "m" / "translators.bin"));
  CHECK(read_file(tmp / "a" / "train_log.csv") == read_file(tmp / "b" / "train_log.csv"));

  const TranslatorSet ts = read_translators(tmp / "a" / "translators.bin");
  CHECK(ts.metadata.epochs == 40);
  CHECK(ts.metadata.seed == 5);
  CHECK(ts.metadata.provenance.at(3).first == "dump_hash");
  CHECK(ts.metadata.provenance.at(3).second == dump_fingerprint(tmp / "dump"));
  CHECK(ts.metadata.trained == std::vector<bool>{true, true, false});
  const auto log = csv_lines(read_file(tmp / "a" / "train_log.csv"));
  CHECK(log.front() == "layer,epoch,mean_kl");
  CHECK(log.size() == 1 + 2 * 40);

  REQUIRE(train("w", {"--mask-token", "3", "--mask-factor", "0"}).code == 0);
  CHECK(read_translators(tmp / "w" / "translators.bin").metadata.loss_mask == "weight:token=3,factor=0");
  CHECK(train("x", {"--mask-factor", "0.5"}).code == 1);
  CHECK(train("x", {"--mask-token", "99", "--mask-factor", "0.5"}).code == 1);
  CHECK(train("x", {"--optimizer", "rmsprop"}).code == 1);
  CHECK(train("x", {"--lr", "-1"}).code == 1);

  synthetic::DumpShape noisy;
  noisy.examples = 8;
  write_dump(synthetic::random_dump(noisy), tmp / "noisy");
  const auto r = run_cli({"--out", (tmp / "x").string(), "train", (tmp / "noisy").string(), "--epochs", "50",
                          "--optimizer", "sgd", "--lr", "1e308"},
                         tmp.path());
  CHECK(r.code == 3);
  CHECK(r.err.find("layer 1, epoch") != std::string::npos);
}

TEST_CASE("trained affine translators reach low KL through the CLI") {
  TempDir tmp;
  synthetic::DumpShape shape;
  shape.examples = 256;
  shape.dim = 6;
  shape.vocab = 16;
  shape.seed = 2;
  const ModelDump d = synthetic::affine_dump(shape);
  write_dump(d, tmp / "dump");
  REQUIRE(run_cli({"--out", tmp.path().string(), "train", (tmp / "dump").string()}, tmp.path()).code == 0);
  const TranslatorSet ts = read_translators(tmp / "translators.bin");
  for (std::size_t l = 0; l < 3; ++l) {
    CHECK(ts.metadata.final_mean_kl[l] <= 1e-3);
    CHECK(mean_layer_kl(read_dump(tmp / "dump"), l, ts.layers[l]) == ts.metadata.final_mean_kl[l]);
  }
}

TEST_CASE("report csv equals the library output byte for byte") {
  TempDir tmp;
  const ModelDump d = small_dump();
  write_dump(d, tmp / "dump");
  const FrequencyTable f({{0, 40}, {2, 30}, {5, 30}, {7, 8}, {11, 1}});
  write_frequency_table(f, tmp / "freq.bin");
  TranslatorSet ts;
  ts.layers.assign(3, Translator::identity(4));
  ts.layers[0].bias[1] = 0.5;
  write_translators(ts, tmp / "t.bin");

  for (const std::string lens : {"logit", "tuned"}) {
    CAPTURE(lens);
    std::vector<std::string> args{"--out", (tmp / lens).string(), "--seed", "9", "--lens", lens};
    if (lens == "tuned") {
      args.push_back("--translators");
      args.push_back((tmp / "t.bin").string());
    }
    args.insert(args.end(), {"report", (tmp / "dump").string(), "--freq", (tmp / "freq.bin").string(),
                             "--buckets", "1,3", "--thresholds", "1,3,10", "--options", "1,2,3,4",
                             "--top-tokens", "5"});
    const auto r = run_cli(args, tmp.path());
    REQUIRE_MESSAGE(r.code == 0, r.err);

    const ModelDump back = read_dump(tmp / "dump");
    ReportContext ctx;
    ctx.dump = &back;
    if (lens == "tuned") ctx.lens = LensKind::tuned(ts);
    ctx.frequencies = &f;
    ctx.buckets = BucketSpec{{1, 3}};
    ctx.thresholds = {1, 3, 10};
    std::tie(ctx.options, ctx.option_names) = resolve_options(back, {1, 2, 3, 4}, {});
    ctx.max_tokens = 5;
    ProvenanceInputs pin;
    pin.seed = 9;
    pin.dump_hash = dump_fingerprint(tmp / "dump");
    pin.model_name = back.model_name;
    pin.lens = lens;
    if (lens == "tuned") pin.translator_hash = hash_file(tmp / "t.bin");
    pin.bucket_source = "freq:" + hash_file(tmp / "freq.bin");
    for (const auto& kind : report_kinds()) {
      CAPTURE(kind);
      ReportTable t = build_report(kind, ctx);
      t.provenance = report_provenance(pin);
      CHECK(read_file(tmp / lens / (kind + ".csv")) == to_csv(t));
      CHECK(read_file(tmp / lens / (kind + ".svg")) == render_svg(t));
    }

    // bucket fractions sum to one per layer
    std::map<std::string, double> sums;
    const auto rows = csv_lines(read_file(tmp / lens / "buckets.csv"));
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto f3 = fields(rows[i]);
      sums[f3[0]] += std::stod(f3[2]);
    }
    CHECK(sums.size() == 3);
    for (const auto& [layer, s] : sums) CHECK(std::abs(s - 1.0) <= 1e-9);
    const auto flips = csv_lines(read_file(tmp / lens / "flips.csv"));
    for (std::size_t i = 1; i < flips.size(); ++i) {
      const auto c = fields(flips[i]);
      if (c[0] == "3" && !c[2].empty()) CHECK(c[2] == "0");
    }
  }
}

TEST_CASE("report failures map to exit codes") {
  TempDir tmp;
  ModelDump d = small_dump();
  d.labels.clear();
  write_dump(d, tmp / "dump");
  auto r = run_cli({"--out", tmp.path().string(), "report", (tmp / "dump").string(), "--which", "onset"},
                   tmp.path());
  CHECK(r.code == 2);
  CHECK(r.err.find("label") != std::string::npos);
  CHECK_FALSE(std::filesystem::exists(tmp / "onset.csv"));

  r = run_cli({"--out", tmp.path().string(), "report", (tmp / "dump").string(), "--which", "buckets"},
              tmp.path());
  CHECK(r.code == 1);
  r = run_cli({"--out", tmp.path().string(), "report", (tmp / "dump").string(), "--which", "nope"},
              tmp.path());
  CHECK(r.code == 1);
  r = run_cli({"--out", tmp.path().string(), "--lens", "tuned", "report", (tmp / "dump").string()},
              tmp.path());
  CHECK(r.code == 1);
  r = run_cli({"--out", tmp.path().string(), "report", (tmp / "dump").string(), "--which", "meanrank",
               "--thresholds", "5,1"},
              tmp.path());
  CHECK(r.code == 1);
  r = run_cli({"--out", tmp.path().string(), "report", (tmp / "dump").string(), "--which", "meanrank",
               "--options", "1,2"},
              tmp.path());
  CHECK(r.code == 0);
  r = run_cli({"--out", tmp.path().string(), "report", (tmp / "missing").string()}, tmp.path());
  CHECK(r.code == 1);
  r = run_cli({"--threads", "0", "report", (tmp / "dump").string()}, tmp.path());
  CHECK(r.code == 1);
  r = run_cli({"--out", tmp.path().string(), "report", (tmp / "dump").string(), "--which", "meanrank",
               "--options", "1"},
              tmp.path(), "DEPTHLENS_THREADS=abc");
  CHECK(r.code == 1);
  CHECK(run_cli({}, tmp.path()).code == 1);
  CHECK(run_cli({"--help"}, tmp.path()).code == 0);
}

TEST_CASE("validate") {
  TempDir tmp;
  const ModelDump d = small_dump();
  write_dump(d, tmp / "good");
  auto r = run_cli({"validate", (tmp / "good").string()}, tmp.path());
  CHECK(r.code == 0);
  CHECK(r.out.find("FAIL") == std::string::npos);

  ModelDump bad = d;
  bad.target_tokens[0] = (bad.target_tokens[0] + 1) % 20;
  write_dump(bad, tmp / "targets");
  r = run_cli({"validate", (tmp / "targets").string()}, tmp.path());
  CHECK(r.code == 2);
  CHECK(r.err.find("invariant target_matches_final_top1 violated") != std::string::npos);

  ModelDump shifted = d;
  (*shifted.final_logits)(2, 5) += 0.5f;
  write_dump(shifted, tmp / "shifted");
  r = run_cli({"validate", (tmp / "shifted").string()}, tmp.path());
  CHECK(r.code == 2);
  const std::string key = "FAIL final_layer_identity: max abs diff ";
  const auto at = r.out.find(key);
  REQUIRE(at != std::string::npos);
  CHECK(std::abs(std::stod(r.out.substr(at + key.size())) - 0.5) <= 1e-6);
  CHECK(r.out.find("(example 2), tolerance 0.0001") != std::string::npos);
  CHECK(r.err.find("invariant final_layer_identity violated") != std::string::npos);
  r = run_cli({"validate", (tmp / "shifted").string(), "--tolerance", "1"}, tmp.path());
  CHECK(r.out.find("ok   final_layer_identity") != std::string::npos);

  // reading the same dump through report fails with the data exit code
  r = run_cli({"--out", tmp.path().string(), "report", (tmp / "targets").string(), "--which", "onset"},
              tmp.path());
  CHECK(r.code == 2);
}

}
