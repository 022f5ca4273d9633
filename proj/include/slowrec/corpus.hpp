// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Interaction logs, item embeddings, five-core filtering, leave-one-out
// splitting, and a synthetic corpus with cluster-level Markov structure.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace slowrec {

using ItemIndex = std::uint32_t;
using UserIndex = std::uint32_t;

/// Malformed or degenerate input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kDefaultMaxSeqLen = 20;

struct Corpus {
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
  /// Per-user item indices in ascending timestamp order.
  std::vector<std::vector<ItemIndex>> sequences;
  std::size_t max_seq_len = kDefaultMaxSeqLen;

  std::size_t num_users() const { return user_ids.size(); }
  std::size_t num_items() const { return item_ids.size(); }
  std::size_t num_interactions() const;
  bool empty() const { return user_ids.empty(); }
  /// Throws DataError if any sequence references an unknown item.
  void validate() const;
};

struct CorpusStats {
  std::size_t sequences = 0;
  std::size_t items = 0;
  std::size_t actions = 0;
  double avg_length = 0.0;
  /// 1 - actions / (sequences * items)
  double sparsity = 0.0;
};

CorpusStats corpus_stats(const Corpus& corpus);

/// One real vector of uniform dimension per item id.
class ItemEmbeddingTable {
 public:
  ItemEmbeddingTable() = default;
  ItemEmbeddingTable(std::vector<std::string> ids, std::size_t dim, std::vector<double> values);

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  const std::vector<std::string>& ids() const { return ids_; }
  std::span<const double> row(std::size_t i) const { return {values_.data() + i * dim_, dim_}; }
  std::span<const double> values() const { return values_; }
  /// Row index of an item id, or -1.
  std::ptrdiff_t find(const std::string& id) const;

  /// Rows reordered to the corpus item indexing. Throws DataError when an
  /// item has no embedding.
  ItemEmbeddingTable aligned_to(const Corpus& corpus) const;

 private:
  std::vector<std::string> ids_;
  std::size_t dim_ = 0;
  std::vector<double> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Iteratively drops users and items with fewer than `k` interactions until
/// both sides satisfy the threshold. Throws DataError when nothing survives.
Corpus five_core_filter(const Corpus& corpus, std::size_t k = 5);

struct Example {
  UserIndex user = 0;
  std::vector<ItemIndex> history;
  ItemIndex target = 0;
};

enum class TrainPrefixMode {
  /// One example per user: training prefix minus its last item -> that item.
  last,
  /// Every prefix of the training portion -> its next item.
  all,
};

struct SplitSet {
  std::vector<Example> train;
  std::vector<Example> valid;
  std::vector<Example> test;
  /// Per-user training portion (sequence without its last two items).
  std::vector<std::vector<ItemIndex>> train_prefixes;
  std::vector<std::string> warnings;
};

/// Leave-one-out: last item is the test target, penultimate the validation
/// target, the rest is training data. Histories keep the most recent
/// `max_len` items. Users with fewer than three interactions are skipped
/// with a warning.
SplitSet leave_one_out_split(const Corpus& corpus, TrainPrefixMode mode = TrainPrefixMode::last,
                             std::size_t max_len = kDefaultMaxSeqLen);

struct SynthConfig {
  std::size_t n_users = 2000;
  std::size_t n_items = 500;
  std::size_t n_clusters = 16;
  /// Scale of the random next-cluster logits; 0 gives uniform transitions.
  double transition_sharpness = 4.0;
  /// Zipf exponent of the within-cluster item choice; 0 is uniform.
  double popularity_skew = 1.0;
  std::size_t min_length = 5;
  std::size_t max_length = 12;
  std::size_t embedding_dim = 32;
  double embedding_noise = 0.25;
  std::uint64_t seed = 1;
};

struct SyntheticCorpus {
  Corpus corpus;
  ItemEmbeddingTable embeddings;
  std::vector<std::size_t> item_cluster;
  /// transition[c][c'] = P(next cluster c' | cluster c)
  std::vector<std::vector<double>> transition;
  /// within_cluster[i] = P(item i | its cluster)
  std::vector<double> within_cluster;
};

SyntheticCorpus synth_corpus(const SynthConfig& config);

/// Tab-separated `user_id item_id timestamp` per line. Blank lines are
/// skipped; any other malformed line raises DataError naming the line.
/// Diagnostics (e.g. an empty file) are appended to `diagnostics`.
Corpus load_interactions(const std::filesystem::path& path,
                         std::vector<std::string>* diagnostics = nullptr);
/// `item_id v_1 ... v_d` per line, whitespace separated, constant d.
ItemEmbeddingTable load_embeddings(const std::filesystem::path& path,
                                   std::vector<std::string>* diagnostics = nullptr);

void save_interactions(const Corpus& corpus, const std::filesystem::path& path);
void save_embeddings(const ItemEmbeddingTable& table, const std::filesystem::path& path);

}  // namespace slowrec
