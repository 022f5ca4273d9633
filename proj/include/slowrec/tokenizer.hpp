// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Residual-quantized autoencoder that maps item embeddings to short
// discrete codes ("semantic ids").

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "slowrec/corpus.hpp"
#include "slowrec/numerics/layers.hpp"

namespace slowrec {

using Code = std::uint32_t;

struct RqVaeConfig {
  std::size_t levels = 4;
  std::size_t codebook_size = 64;
  std::size_t latent_dim = 32;
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double lr = 3e-3;
  double weight_decay = 0.01;
  double commitment = 0.25;
  std::size_t kmeans_iters = 25;
  bool reseed_dead_codes = true;
  std::uint64_t seed = 1;
};

struct SemanticId {
  std::vector<Code> codes;
  /// Set only for items whose codes are shared with another item.
  std::optional<Code> suffix;

  friend bool operator==(const SemanticId&, const SemanticId&) = default;
};

struct QuantizationRecord {
  /// residuals[0] is the encoder output, residuals[d + 1] what is left after
  /// level d; levels + 1 vectors in total.
  std::vector<std::vector<double>> residuals;
  std::vector<Code> codes;
  std::vector<double> reconstruction;
};

class RqVaeModel {
 public:
  RqVaeModel() = default;
  /// Feed-forward encoder/decoder with one hidden layer of width 2 * latent.
  RqVaeModel(std::size_t input_dim, const RqVaeConfig& config, num::Rng& rng);
  /// Identity encoder (latent == input), for inspection and tests.
  static RqVaeModel with_identity_encoder(std::size_t dim, std::vector<num::Tensor> codebooks,
                                          double commitment = 0.25);

  std::size_t input_dim() const { return input_dim_; }
  std::size_t latent_dim() const { return latent_dim_; }
  std::size_t levels() const { return codebooks_.size(); }
  std::size_t codebook_size() const { return codebooks_.empty() ? 0 : codebooks_[0].rows(); }
  double commitment() const { return commitment_; }
  bool identity_encoder() const { return identity_; }

  const std::vector<num::Tensor>& codebooks() const { return codebooks_; }
  std::vector<num::Tensor>& codebooks() { return codebooks_; }

  num::Tensor encode(const num::Tensor& x) const;
  num::Tensor decode(const num::Tensor& latent) const;

  num::ParamList network_params() const;
  num::ParamList codebook_params() const;

 private:
  std::size_t input_dim_ = 0;
  std::size_t latent_dim_ = 0;
  double commitment_ = 0.25;
  bool identity_ = false;
  num::Linear enc1_, enc2_, dec1_, dec2_;
  std::vector<num::Tensor> codebooks_;
};

/// Nearest codeword by squared distance; ties go to the lowest index.
Code nearest_code(const num::Tensor& codebook, std::span<const double> residual);

std::pair<SemanticId, QuantizationRecord> quantize(const RqVaeModel& model,
                                                   std::span<const double> embedding);

struct RqVaeBatchLoss {
  /// (recon + quant) / batch size.
  num::Tensor loss;
  num::Tensor recon;
  num::Tensor quant;
  /// Per level: the chosen codes and the incoming residuals (row-major).
  std::vector<std::vector<Code>> codes;
  std::vector<std::vector<double>> residuals;
};

/// Training loss of one batch [B, input_dim]: reconstruction through a
/// straight-through decoder input plus codebook and commitment terms.
RqVaeBatchLoss rqvae_batch_loss(const RqVaeModel& model, const num::Tensor& x);

struct RqVaeEpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double recon = 0.0;
  double quant = 0.0;
  std::size_t reseeded = 0;
};

struct RqVaeTrainResult {
  RqVaeModel model;
  std::vector<RqVaeEpochLog> log;
};

/// Minimizes reconstruction + codebook + commitment loss with the decoder
/// fed the summed codewords through a straight-through estimator. Codebooks
/// start from k-means on the first batch. Throws num::NumericalError when the
/// loss turns non-finite.
RqVaeTrainResult train_rqvae(const ItemEmbeddingTable& embeddings, const RqVaeConfig& config);

/// Training on a caller-provided model (e.g. an identity encoder).
std::vector<RqVaeEpochLog> train_rqvae(RqVaeModel& model, const ItemEmbeddingTable& embeddings,
                                       const RqVaeConfig& config, bool init_codebooks = true);

struct SemanticIdMap {
  std::vector<std::string> item_ids;
  std::vector<SemanticId> ids;
  std::size_t levels = 0;
  std::size_t codebook_size = 0;
  /// Groups of row indices sharing all level codes (size >= 2).
  std::vector<std::vector<std::size_t>> collision_groups;
  /// Fraction of items that share their codes with another item.
  double collision_rate = 0.0;
  /// Per level: fraction of codewords used by at least one item.
  std::vector<double> utilization;

  std::size_t size() const { return ids.size(); }
  bool has_collisions() const { return !collision_groups.empty(); }
  /// Largest suffix + 1 over all ids (0 when no id carries a suffix).
  std::size_t suffix_range() const;
};

SemanticIdMap assign_ids(const RqVaeModel& model, const ItemEmbeddingTable& embeddings);

/// `item_id<TAB>c_1 c_2 ... c_m [suffix]`, preceded by a `# levels K` header.
void save_semantic_ids(const SemanticIdMap& map, const std::filesystem::path& path);
SemanticIdMap load_semantic_ids(const std::filesystem::path& path);

/// Reorders to the corpus item indexing; throws DataError on a missing item.
SemanticIdMap aligned_to(const SemanticIdMap& map, const Corpus& corpus);

}  // namespace slowrec
