// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "slowrec/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ostream.h>

namespace slowrec {

std::size_t Corpus::num_interactions() const {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.size();
  return n;
}

void Corpus::validate() const {
  if (sequences.size() != user_ids.size()) {
    throw DataError("corpus: one sequence per user required");
  }
  for (std::size_t u = 0; u < sequences.size(); ++u) {
    for (auto i : sequences[u]) {
      if (i >= item_ids.size()) {
        throw DataError(fmt::format("corpus: user '{}' references unknown item index {}", user_ids[u], i));
      }
    }
  }
}

CorpusStats corpus_stats(const Corpus& corpus) {
  CorpusStats s;
  s.sequences = corpus.num_users();
  s.items = corpus.num_items();
  s.actions = corpus.num_interactions();
  if (s.sequences > 0) {
    s.avg_length = static_cast<double>(s.actions) / static_cast<double>(s.sequences);
  }
  if (s.sequences > 0 && s.items > 0) {
    s.sparsity = 1.0 - static_cast<double>(s.actions) /
                           (static_cast<double>(s.sequences) * static_cast<double>(s.items));
  }
  return s;
}

ItemEmbeddingTable::ItemEmbeddingTable(std::vector<std::string> ids, std::size_t dim,
                                       std::vector<double> values)
    : ids_(std::move(ids)), dim_(dim), values_(std::move(values)) {
  if (values_.size() != ids_.size() * dim_) {
    throw DataError(fmt::format("embedding table: {} values for {} rows of dimension {}",
                                values_.size(), ids_.size(), dim_));
  }
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (!index_.emplace(ids_[i], i).second) throw DataError("embedding table: duplicate item '" + ids_[i] + "'");
  }
  for (double v : values_) {
    if (!std::isfinite(v)) throw DataError("embedding table: non-finite value");
  }
}

std::ptrdiff_t ItemEmbeddingTable::find(const std::string& id) const {
  auto it = index_.find(id);
  return it == index_.end() ? -1 : static_cast<std::ptrdiff_t>(it->second);
}

ItemEmbeddingTable ItemEmbeddingTable::aligned_to(const Corpus& corpus) const {
  std::vector<double> values;
  values.reserve(corpus.num_items() * dim_);
  for (const auto& id : corpus.item_ids) {
    auto r = find(id);
    if (r < 0) throw DataError("embedding table has no vector for item '" + id + "'");
    auto src = row(static_cast<std::size_t>(r));
    values.insert(values.end(), src.begin(), src.end());
  }
  return {corpus.item_ids, dim_, std::move(values)};
}

Corpus five_core_filter(const Corpus& corpus, std::size_t k) {
  std::vector<std::vector<ItemIndex>> seqs = corpus.sequences;
  std::vector<bool> user_alive(seqs.size(), true);
  std::vector<bool> item_alive(corpus.num_items(), true);
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<std::size_t> item_count(corpus.num_items(), 0);
    for (std::size_t u = 0; u < seqs.size(); ++u) {
      if (!user_alive[u]) continue;
      if (seqs[u].size() < k) {
        user_alive[u] = false;
        changed = true;
        continue;
      }
      for (auto i : seqs[u]) ++item_count[i];
    }
    for (std::size_t i = 0; i < item_count.size(); ++i) {
      if (item_alive[i] && item_count[i] < k) {
        item_alive[i] = false;
        changed = true;
      }
    }
    for (std::size_t u = 0; u < seqs.size(); ++u) {
      if (!user_alive[u]) continue;
      auto& s = seqs[u];
      s.erase(std::remove_if(s.begin(), s.end(), [&](ItemIndex i) { return !item_alive[i]; }), s.end());
    }
  }

  Corpus out;
  out.max_seq_len = corpus.max_seq_len;
  std::vector<ItemIndex> remap(corpus.num_items(), 0);
  for (std::size_t i = 0; i < corpus.num_items(); ++i) {
    if (!item_alive[i]) continue;
    remap[i] = static_cast<ItemIndex>(out.item_ids.size());
    out.item_ids.push_back(corpus.item_ids[i]);
  }
  for (std::size_t u = 0; u < seqs.size(); ++u) {
    if (!user_alive[u]) continue;
    out.user_ids.push_back(corpus.user_ids[u]);
    auto& s = out.sequences.emplace_back();
    for (auto i : seqs[u]) s.push_back(remap[i]);
  }
  if (out.empty() || out.item_ids.empty()) {
    throw DataError(fmt::format("degenerate corpus: nothing survives {}-core filtering", k));
  }
  return out;
}

namespace {

std::vector<ItemIndex> tail(std::span<const ItemIndex> s, std::size_t max_len) {
  const auto n = std::min(s.size(), max_len);
  return {s.end() - static_cast<std::ptrdiff_t>(n), s.end()};
}

}  // namespace

SplitSet leave_one_out_split(const Corpus& corpus, TrainPrefixMode mode, std::size_t max_len) {
  SplitSet split;
  for (std::size_t u = 0; u < corpus.num_users(); ++u) {
    std::span<const ItemIndex> s = corpus.sequences[u];
    const auto n = s.size();
    if (n < 3) {
      split.warnings.push_back(
          fmt::format("user '{}' has {} interaction(s); excluded from split", corpus.user_ids[u], n));
      continue;
    }
    const auto uid = static_cast<UserIndex>(u);
    split.test.push_back({uid, tail(s.first(n - 1), max_len), s[n - 1]});
    split.valid.push_back({uid, tail(s.first(n - 2), max_len), s[n - 2]});
    split.train_prefixes.emplace_back(s.begin(), s.end() - 2);
    // Training targets come from the training portion only, so no
    // validation/test target is ever a training target.
    const auto train_len = n - 2;
    if (train_len < 2) continue;
    if (mode == TrainPrefixMode::last) {
      split.train.push_back({uid, tail(s.first(train_len - 1), max_len), s[train_len - 1]});
    } else {
      for (std::size_t t = 1; t < train_len; ++t) {
        split.train.push_back({uid, tail(s.first(t), max_len), s[t]});
      }
    }
  }
  return split;
}

SyntheticCorpus synth_corpus(const SynthConfig& config) {
  if (config.n_clusters == 0 || config.n_items < config.n_clusters) {
    throw std::invalid_argument("synth_corpus: need n_items >= n_clusters >= 1");
  }
  if (config.min_length < 1 || config.max_length < config.min_length) {
    throw std::invalid_argument("synth_corpus: invalid sequence length range");
  }
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto C = config.n_clusters;
  const auto d = config.embedding_dim;

  SyntheticCorpus out;
  std::vector<std::vector<double>> centroids(C, std::vector<double>(d));
  for (auto& c : centroids)
    for (auto& v : c) v = normal(rng);

  out.transition.assign(C, std::vector<double>(C));
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> logits(C);
    for (auto& v : logits) v = config.transition_sharpness * normal(rng);
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t j = 0; j < C; ++j) z += std::exp(logits[j] - mx);
    for (std::size_t j = 0; j < C; ++j) out.transition[c][j] = std::exp(logits[j] - mx) / z;
  }

  // Items are dealt round-robin to clusters; members of a cluster are
  // ranked by index for the Zipf weights.
  out.item_cluster.resize(config.n_items);
  std::vector<std::vector<ItemIndex>> members(C);
  for (std::size_t i = 0; i < config.n_items; ++i) {
    out.item_cluster[i] = i % C;
    members[i % C].push_back(static_cast<ItemIndex>(i));
  }
  out.within_cluster.assign(config.n_items, 0.0);
  std::vector<std::discrete_distribution<std::size_t>> pick(C);
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> w(members[c].size());
    for (std::size_t r = 0; r < w.size(); ++r) {
      w[r] = 1.0 / std::pow(static_cast<double>(r + 1), config.popularity_skew);
    }
    const double z = std::accumulate(w.begin(), w.end(), 0.0);
    for (std::size_t r = 0; r < w.size(); ++r) out.within_cluster[members[c][r]] = w[r] / z;
    pick[c] = std::discrete_distribution<std::size_t>(w.begin(), w.end());
  }
  std::vector<std::discrete_distribution<std::size_t>> next(C);
  for (std::size_t c = 0; c < C; ++c) {
    next[c] = std::discrete_distribution<std::size_t>(out.transition[c].begin(), out.transition[c].end());
  }

  std::vector<double> emb(config.n_items * d);
  std::vector<std::string> ids(config.n_items);
  for (std::size_t i = 0; i < config.n_items; ++i) {
    ids[i] = fmt::format("i{}", i);
    for (std::size_t j = 0; j < d; ++j) {
      emb[i * d + j] = centroids[out.item_cluster[i]][j] + config.embedding_noise * normal(rng);
    }
  }
  out.embeddings = ItemEmbeddingTable(ids, d, std::move(emb));

  auto& corpus = out.corpus;
  corpus.item_ids = ids;
  std::uniform_int_distribution<std::size_t> length(config.min_length, config.max_length);
  std::uniform_int_distribution<std::size_t> first(0, C - 1);
  for (std::size_t u = 0; u < config.n_users; ++u) {
    corpus.user_ids.push_back(fmt::format("u{}", u));
    auto& seq = corpus.sequences.emplace_back();
    const auto len = length(rng);
    std::size_t c = first(rng);
    for (std::size_t t = 0; t < len; ++t) {
      if (t > 0) c = next[c](rng);
      seq.push_back(members[c][pick[c](rng)]);
    }
  }
  return out;
}

namespace {

std::vector<std::string> split_on(const std::string& line, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, sep)) parts.push_back(cur);
  if (!line.empty() && line.back() == sep) parts.emplace_back();
  return parts;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(out);
}

}  // namespace

Corpus load_interactions(const std::filesystem::path& path, std::vector<std::string>* diagnostics) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open interaction log " + path.string());

  struct Record {
    double ts;
    std::size_t line;
    ItemIndex item;
  };
  Corpus corpus;
  std::unordered_map<std::string, std::size_t> users, items;
  std::vector<std::vector<Record>> per_user;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    auto f = split_on(line, '\t');
    double ts = 0.0;
    if (f.size() != 3 || f[0].empty() || f[1].empty() || !parse_double(f[2], ts)) {
      throw DataError(fmt::format("{}:{}: expected 'user_id<TAB>item_id<TAB>timestamp', got '{}'",
                                  path.string(), lineno, line));
    }
    auto [uit, unew] = users.emplace(f[0], users.size());
    if (unew) {
      corpus.user_ids.push_back(f[0]);
      per_user.emplace_back();
    }
    auto [iit, inew] = items.emplace(f[1], items.size());
    if (inew) corpus.item_ids.push_back(f[1]);
    per_user[uit->second].push_back({ts, lineno, static_cast<ItemIndex>(iit->second)});
  }
  for (auto& recs : per_user) {
    std::stable_sort(recs.begin(), recs.end(), [](const Record& a, const Record& b) { return a.ts < b.ts; });
    auto& seq = corpus.sequences.emplace_back();
    for (const auto& r : recs) seq.push_back(r.item);
  }
  if (corpus.empty() && diagnostics) {
    diagnostics->push_back(fmt::format("{}: no interactions found; corpus is empty", path.string()));
  }
  return corpus;
}

ItemEmbeddingTable load_embeddings(const std::filesystem::path& path, std::vector<std::string>* diagnostics) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open embedding table " + path.string());
  std::vector<std::string> ids;
  std::vector<double> values;
  std::size_t dim = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip_cr(line);
    std::istringstream ss(line);
    std::string id;
    if (!(ss >> id)) continue;
    std::vector<double> row;
    std::string tok;
    while (ss >> tok) {
      double v = 0.0;
      if (!parse_double(tok, v)) {
        throw DataError(fmt::format("{}:{}: bad value '{}' for item '{}'", path.string(), lineno, tok, id));
      }
      row.push_back(v);
    }
    if (row.empty()) throw DataError(fmt::format("{}:{}: item '{}' has no vector", path.string(), lineno, id));
    if (dim == 0) dim = row.size();
    if (row.size() != dim) {
      throw DataError(fmt::format("{}:{}: item '{}' has dimension {}, expected {}", path.string(), lineno, id,
                                  row.size(), dim));
    }
    ids.push_back(id);
    values.insert(values.end(), row.begin(), row.end());
  }
  if (ids.empty() && diagnostics) {
    diagnostics->push_back(fmt::format("{}: no embeddings found; table is empty", path.string()));
  }
  try {
    return {std::move(ids), dim, std::move(values)};
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void save_interactions(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t u = 0; u < corpus.num_users(); ++u) {
    for (std::size_t t = 0; t < corpus.sequences[u].size(); ++t) {
      fmt::print(out, "{}\t{}\t{}\n", corpus.user_ids[u], corpus.item_ids[corpus.sequences[u][t]], t);
    }
  }
}

void save_embeddings(const ItemEmbeddingTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t i = 0; i < table.size(); ++i) {
    fmt::print(out, "{} {}\n", table.ids()[i], fmt::join(table.row(i), " "));
  }
}

}  // namespace slowrec
