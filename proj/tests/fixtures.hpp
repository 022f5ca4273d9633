// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Small end-to-end world shared by the training-stage tests.

#pragma once

#include "slowrec/backbone.hpp"
#include "slowrec/pretrain.hpp"

namespace slowrec::testing {

struct MiniWorld {
  SyntheticCorpus synth;
  Corpus corpus;
  SplitSet split;
  ItemEmbeddingTable embeddings;
  SemanticIdMap ids;
  Vocabulary vocab;
  ItemCatalog catalog;
  NeighborIndex neighbors;
  BackboneConfig backbone;
};

inline MiniWorld make_world(std::size_t users = 120, std::size_t items = 60, std::uint64_t seed = 1) {
  MiniWorld w;
  SynthConfig sc;
  sc.n_users = users;
  sc.n_items = items;
  sc.n_clusters = 6;
  sc.embedding_dim = 8;
  sc.seed = seed;
  w.synth = synth_corpus(sc);
  w.corpus = w.synth.corpus;
  w.split = leave_one_out_split(w.corpus);
  w.embeddings = w.synth.embeddings.aligned_to(w.corpus);
  RqVaeConfig rc;
  rc.levels = 3;
  rc.codebook_size = 8;
  rc.latent_dim = 8;
  rc.epochs = 30;
  rc.batch_size = 32;
  rc.seed = seed;
  auto rq = train_rqvae(w.embeddings, rc);
  w.ids = assign_ids(rq.model, w.embeddings);
  w.vocab = Vocabulary(rc.levels, rc.codebook_size, w.ids.suffix_range());
  w.catalog = ItemCatalog(w.ids, w.vocab);
  w.neighbors = NeighborIndex(w.embeddings, 20);
  w.backbone.hidden = 16;
  w.backbone.ffn = 32;
  w.backbone.encoder_layers = 1;
  w.backbone.decoder_layers = 1;
  w.backbone.heads = 2;
  w.backbone.dropout = 0.0;
  w.backbone.max_source_len = 20 * w.catalog.max_item_len();
  w.backbone.max_target_len = 16;
  w.backbone.seed = seed;
  return w;
}

}  // namespace slowrec::testing
