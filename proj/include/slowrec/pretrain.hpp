// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Retrieval-augmented targets and the sequence-to-sequence pretraining loop.

#pragma once

#include <filesystem>
#include <vector>

#include "slowrec/backbone.hpp"

namespace slowrec {

/// Items ranked by cosine similarity of their raw embeddings, most similar
/// first, ties by item id. An item is never its own neighbor.
class NeighborIndex {
 public:
  NeighborIndex() = default;
  /// `embeddings` must be aligned to the corpus item indexing; keeps the
  /// `depth` nearest neighbors of every item.
  NeighborIndex(const ItemEmbeddingTable& embeddings, std::size_t depth);

  std::size_t depth() const { return depth_; }
  std::span<const ItemIndex> neighbors(ItemIndex item) const;
  /// The first `n` neighbors; throws DataError when fewer exist.
  std::span<const ItemIndex> nearest(ItemIndex item, std::size_t n) const;

 private:
  std::size_t depth_ = 0;
  std::vector<std::vector<ItemIndex>> lists_;
};

struct PretrainExample {
  UserIndex user = 0;
  ItemIndex target_item = 0;
  /// Token count of the target item (the tail of `target`).
  std::size_t item_len = 0;
  std::vector<Token> history;
  /// Retrieved items' tokens (most similar first) followed by the target's.
  std::vector<Token> target;
};

std::vector<Token> build_pretrain_target(ItemIndex target, const NeighborIndex& neighbors, std::size_t n_retrieve,
                                         const ItemCatalog& catalog);

std::vector<PretrainExample> build_pretrain_examples(std::span<const Example> examples, const NeighborIndex& neighbors,
                                                     std::size_t n_retrieve, const ItemCatalog& catalog);

struct PretrainConfig {
  std::size_t n_retrieve = 2;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::size_t batch_size = 32;
  double grad_clip = 1.0;
  /// Also fit the direct (reference) decoder on target-only sequences.
  bool train_reference = true;
};

/// Summed token NLL of a packed batch plus the number of supervised tokens.
struct BatchLoss {
  num::Tensor sum;
  std::size_t tokens = 0;
};

/// Teacher-forced NLL of `targets` given `sources` over all target positions.
BatchLoss sequence_nll(const EncoderDecoder& model, std::span<const std::vector<Token>> sources,
                       std::span<const std::vector<Token>> targets, num::Rng* dropout_rng);

struct PretrainEpochStats {
  /// Mean per-token NLL of the backbone over the epoch.
  double loss = 0.0;
  /// Mean per-token NLL of the direct decoder (0 when not trained).
  double reference_loss = 0.0;
  std::size_t steps = 0;
};

/// Parameters updated by pretraining: shared encoder, backbone decoder and,
/// if given, the reference decoder stack.
num::ParamList pretrain_params(const BackboneModel& model, const ReferenceDecoder* reference);

/// One shuffled pass. Throws num::NumericalError naming the batch when the
/// loss turns non-finite (parameters are left as before that batch).
PretrainEpochStats pretrain_epoch(BackboneModel& model, ReferenceDecoder* reference,
                                  std::span<const PretrainExample> examples, num::AdamW& optimizer,
                                  const PretrainConfig& config, num::Rng& rng);

/// `user<TAB>history tokens | target tokens` per line.
void save_pretrain_cache(std::span<const PretrainExample> examples, const std::filesystem::path& path);
std::vector<PretrainExample> load_pretrain_cache(const std::filesystem::path& path, const ItemCatalog& catalog);

}  // namespace slowrec
