#pragma once

// Exhaustive recomputation of every report from per-element decodes.

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "depthlens/analysis.hpp"
#include "oracle.hpp"

namespace oracle {

using depthlens::Cell;
using depthlens::ModelDump;
using depthlens::ReportTable;
using depthlens::TranslatorSet;

using Grid = std::vector<std::vector<std::vector<double>>>;  // [n][l][v]

inline Grid decode(const ModelDump& d, const TranslatorSet* ts) {
  Grid g(d.num_examples(), std::vector<std::vector<double>>(d.num_layers()));
  for (std::size_t n = 0; n < d.num_examples(); ++n) {
    for (std::size_t l = 0; l < d.num_layers(); ++l) {
      g[n][l] = lens(d.hidden.at(n, l), d.norm, d.unembedding, ts ? &ts->layers[l] : nullptr);
    }
  }
  return g;
}

inline std::int64_t I(std::size_t v) { return static_cast<std::int64_t>(v); }

inline std::vector<std::size_t> bucket_of(const depthlens::FrequencyTable& f,
                                          const std::vector<std::size_t>& boundaries,
                                          std::size_t vocab) {
  const auto r = frequency_rank(f.counts(), vocab);
  std::vector<std::size_t> b(vocab);
  for (TokenId t = 0; t < vocab; ++t) b[t] = bucket(r[t], f.count(t), boundaries);
  return b;
}

inline ReportTable buckets(const Grid& g, const std::vector<std::size_t>& bucket_of_token,
                           const std::vector<std::string>& names) {
  ReportTable t;
  t.kind = "buckets";
  t.columns = {"layer", "bucket", "fraction"};
  const std::size_t layers = g.front().size();
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t b = 0; b < names.size(); ++b) {
      std::size_t hits = 0;
      for (const auto& ex : g) hits += bucket_of_token[argmax(ex[l])] == b;
      t.rows.push_back({I(l + 1), names[b], static_cast<double>(hits) / static_cast<double>(g.size())});
    }
  }
  return t;
}

inline ReportTable flips(const Grid& g, const std::vector<TokenId>& final_top1,
                         const std::vector<std::size_t>& bucket_of_token,
                         const std::vector<std::string>& names) {
  ReportTable t;
  t.kind = "flips";
  t.columns = {"layer", "bucket", "flip_rate", "count"};
  const std::size_t layers = g.front().size();
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t b = 0; b < names.size(); ++b) {
      std::size_t in = 0, flipped = 0;
      for (std::size_t n = 0; n < g.size(); ++n) {
        const TokenId top = argmax(g[n][l]);
        if (bucket_of_token[top] != b) continue;
        ++in;
        flipped += top != final_top1[n];
      }
      Cell rate;
      if (in) rate = static_cast<double>(flipped) / static_cast<double>(in);
      t.rows.push_back({I(l + 1), names[b], rate, I(in)});
    }
  }
  return t;
}

inline ReportTable onset(const Grid& g, const ModelDump& d, const std::vector<std::size_t>& thresholds,
                         const std::vector<std::string>& keys, const std::vector<std::string>& excluded) {
  std::map<std::string, std::vector<std::vector<std::size_t>>> by_cat;  // category -> rank traces
  for (std::size_t n = 0; n < g.size(); ++n) {
    std::string cat;
    for (std::size_t i = 0; i < keys.size(); ++i) cat += (i ? "/" : "") + d.labels[n].at(keys[i]);
    bool skip = false;
    for (const auto& e : excluded) skip = skip || e == cat;
    if (skip) continue;
    std::vector<std::size_t> ranks;
    for (const auto& logits : g[n]) ranks.push_back(rank(logits, d.target_tokens[n]));
    by_cat[cat].push_back(ranks);
  }
  ReportTable t;
  t.kind = "onset";
  t.columns = {"category", "threshold", "mean_layer", "count", "never_fraction"};
  for (const auto& [cat, traces] : by_cat) {
    for (std::size_t k : thresholds) {
      double sum = 0;
      std::size_t crossed = 0;
      for (const auto& r : traces) {
        if (auto c = first_crossing(r, k)) {
          sum += static_cast<double>(*c);
          ++crossed;
        }
      }
      Cell mean;
      if (crossed) mean = sum / static_cast<double>(crossed);
      t.rows.push_back({cat, I(k), mean, I(traces.size()),
                        static_cast<double>(traces.size() - crossed) / static_cast<double>(traces.size())});
    }
  }
  return t;
}

inline ReportTable meanrank(const Grid& g, const std::vector<TokenId>& options,
                            const std::vector<std::string>& names) {
  ReportTable t;
  t.kind = "meanrank";
  t.columns = {"layer", "option", "mean_rank"};
  const std::size_t layers = g.front().size();
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t k = 0; k < options.size(); ++k) {
      double sum = 0;
      for (const auto& ex : g) sum += static_cast<double>(rank(ex[l], options[k]));
      t.rows.push_back({I(l + 1), names.empty() ? std::to_string(options[k]) : names[k],
                        sum / static_cast<double>(g.size())});
    }
  }
  return t;
}

// series: lens name -> grid. Final distribution from final_logits when stored.
inline ReportTable probmass(const std::vector<std::pair<std::string, const Grid*>>& series,
                            const ModelDump& d, const depthlens::FrequencyTable& f,
                            std::size_t max_tokens) {
  const std::size_t vocab = d.vocab_size(), layers = d.num_layers(), n = d.num_examples();
  const auto r = frequency_rank(f.counts(), vocab);
  std::vector<TokenId> order(vocab);
  for (TokenId t = 0; t < vocab; ++t) order[r[t]] = t;
  std::vector<long double> final_mean(vocab, 0);
  for (std::size_t ex = 0; ex < n; ++ex) {
    std::vector<double> ref;
    if (d.final_logits) {
      ref.assign(d.final_logits->row(ex).begin(), d.final_logits->row(ex).end());
    } else {
      ref = lens(d.hidden.at(ex, layers - 1), d.norm, d.unembedding);
    }
    const auto p = softmax(ref);
    for (std::size_t v = 0; v < vocab; ++v) final_mean[v] += p[v] / n;
  }
  ReportTable t;
  t.kind = "probmass";
  t.columns = {"freq_rank", "token", "layer", "lens", "mean_prob"};
  const std::size_t count = max_tokens == 0 ? vocab : std::min(max_tokens, vocab);
  for (std::size_t i = 0; i < count; ++i) {
    const TokenId tok = order[i];
    for (const auto& [name, grid] : series) {
      for (std::size_t l = 0; l < layers; ++l) {
        long double m = 0;
        for (std::size_t ex = 0; ex < n; ++ex) m += softmax((*grid)[ex][l])[tok];
        t.rows.push_back({I(i + 1), I(tok), I(l + 1), name, static_cast<double>(m / n)});
      }
    }
    t.rows.push_back({I(i + 1), I(tok), I(layers), std::string("final"),
                      static_cast<double>(final_mean[tok])});
  }
  return t;
}

inline std::string cell_text(const Cell& c) {
  switch (c.index()) {
    case 0: return "<empty>";
    case 1: return std::to_string(std::get<std::int64_t>(c));
    case 2: {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", std::get<double>(c));
      return buf;
    }
    default: return std::get<std::string>(c);
  }
}

// Empty string when the tables agree: integers and strings exactly, floats
// within tol.
inline std::string compare(const ReportTable& got, const ReportTable& want, double tol) {
  if (got.columns != want.columns) return "column mismatch";
  if (got.rows.size() != want.rows.size()) {
    return "row count " + std::to_string(got.rows.size()) + " vs " + std::to_string(want.rows.size());
  }
  for (std::size_t r = 0; r < got.rows.size(); ++r) {
    for (std::size_t c = 0; c < got.columns.size(); ++c) {
      const Cell& a = got.rows[r][c];
      const Cell& b = want.rows[r][c];
      bool same = a.index() == b.index();
      if (same && a.index() == 2) {
        same = std::abs(std::get<double>(a) - std::get<double>(b)) <= tol;
      } else if (same) {
        same = a == b;
      }
      if (!same) {
        return want.kind + " row " + std::to_string(r) + " column " + got.columns[c] + ": got " +
               cell_text(a) + ", expected " + cell_text(b);
      }
    }
  }
  return "";
}

}  // namespace oracle
