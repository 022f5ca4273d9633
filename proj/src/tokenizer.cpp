// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "slowrec/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace slowrec {

using num::Tensor;

RqVaeModel::RqVaeModel(std::size_t input_dim, const RqVaeConfig& config, num::Rng& rng)
    : input_dim_(input_dim), latent_dim_(config.latent_dim), commitment_(config.commitment) {
  if (config.levels < 1 || config.codebook_size < 2) {
    throw std::invalid_argument("rq-vae: need at least one level and two codewords");
  }
  const auto hidden = 2 * latent_dim_;
  enc1_ = num::Linear(input_dim, hidden, rng);
  enc2_ = num::Linear(hidden, latent_dim_, rng);
  dec1_ = num::Linear(latent_dim_, hidden, rng);
  dec2_ = num::Linear(hidden, input_dim, rng);
  for (std::size_t d = 0; d < config.levels; ++d) {
    codebooks_.push_back(num::randn({config.codebook_size, latent_dim_}, 0.1, rng));
  }
}

RqVaeModel RqVaeModel::with_identity_encoder(std::size_t dim, std::vector<Tensor> codebooks,
                                             double commitment) {
  if (codebooks.empty()) throw std::invalid_argument("rq-vae: no codebooks");
  RqVaeModel m;
  m.input_dim_ = m.latent_dim_ = dim;
  m.commitment_ = commitment;
  m.identity_ = true;
  for (auto& cb : codebooks) {
    if (cb.cols() != dim || cb.rows() != codebooks[0].rows()) {
      throw std::invalid_argument("rq-vae: codebooks must be K x latent and share K");
    }
    cb.set_requires_grad(true);
  }
  m.codebooks_ = std::move(codebooks);
  return m;
}

Tensor RqVaeModel::encode(const Tensor& x) const {
  if (identity_) return x;
  return enc2_(num::gelu(enc1_(x)));
}

Tensor RqVaeModel::decode(const Tensor& latent) const {
  if (identity_) return latent;
  return dec2_(num::gelu(dec1_(latent)));
}

num::ParamList RqVaeModel::network_params() const {
  num::ParamList out;
  if (identity_) return out;
  enc1_.collect("encoder.0", out);
  enc2_.collect("encoder.1", out);
  dec1_.collect("decoder.0", out);
  dec2_.collect("decoder.1", out);
  return out;
}

num::ParamList RqVaeModel::codebook_params() const {
  num::ParamList out;
  for (std::size_t d = 0; d < codebooks_.size(); ++d) out.push_back({fmt::format("codebook.{}", d), codebooks_[d]});
  return out;
}

Code nearest_code(const Tensor& codebook, std::span<const double> residual) {
  const auto k = codebook.rows(), dim = codebook.cols();
  auto cb = codebook.data();
  Code best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) {
    double d = 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
      const double diff = residual[c] - cb[j * dim + c];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = static_cast<Code>(j);
    }
  }
  return best;
}

std::pair<SemanticId, QuantizationRecord> quantize(const RqVaeModel& model,
                                                   std::span<const double> embedding) {
  if (embedding.size() != model.input_dim()) {
    throw std::invalid_argument(fmt::format("quantize: embedding of dim {}, model expects {}",
                                            embedding.size(), model.input_dim()));
  }
  num::NoGradGuard guard;
  const auto dim = model.latent_dim();
  auto z = model.encode(Tensor::from({1, embedding.size()}, {embedding.begin(), embedding.end()}));
  QuantizationRecord rec;
  rec.residuals.emplace_back(z.data().begin(), z.data().end());
  std::vector<double> sum(dim, 0.0);
  for (const auto& cb : model.codebooks()) {
    const auto& h = rec.residuals.back();
    const Code c = nearest_code(cb, h);
    auto e = cb.data().subspan(c * dim, dim);
    std::vector<double> next(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      next[i] = h[i] - e[i];
      sum[i] += e[i];
    }
    rec.codes.push_back(c);
    rec.residuals.push_back(std::move(next));
  }
  auto xhat = model.decode(Tensor::from({1, dim}, sum));
  rec.reconstruction.assign(xhat.data().begin(), xhat.data().end());
  return {SemanticId{rec.codes, std::nullopt}, std::move(rec)};
}

namespace {

// k-means++ seeding followed by Lloyd iterations over row-major points.
std::vector<double> kmeans(const std::vector<double>& pts, std::size_t n, std::size_t dim, std::size_t k,
                           std::size_t iters, num::Rng& rng) {
  auto dist2 = [&](const double* a, const double* b) {
    double s = 0.0;
    for (std::size_t c = 0; c < dim; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
    return s;
  };
  std::vector<double> cent(k * dim);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::size_t first = pick(rng);
  std::copy_n(&pts[first * dim], dim, &cent[0]);
  for (std::size_t j = 1; j < k; ++j) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], dist2(&pts[i * dim], &cent[(j - 1) * dim]));
      total += best[i];
    }
    std::size_t chosen = pick(rng);
    if (total > 0.0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (std::size_t i = 0; i < n; ++i) {
        u -= best[i];
        if (u <= 0.0) {
          chosen = i;
          break;
        }
      }
    }
    std::copy_n(&pts[chosen * dim], dim, &cent[j * dim]);
  }
  std::vector<std::size_t> assign(n);
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        const double d = dist2(&pts[i * dim], &cent[j * dim]);
        if (d < bd) {
          bd = d;
          assign[i] = j;
        }
      }
    }
    std::vector<double> acc(k * dim, 0.0);
    std::vector<std::size_t> cnt(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++cnt[assign[i]];
      for (std::size_t c = 0; c < dim; ++c) acc[assign[i] * dim + c] += pts[i * dim + c];
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (cnt[j] == 0) continue;
      for (std::size_t c = 0; c < dim; ++c) cent[j * dim + c] = acc[j * dim + c] / static_cast<double>(cnt[j]);
    }
  }
  return cent;
}

std::size_t distinct_rows(const ItemEmbeddingTable& t) {
  std::set<std::vector<double>> seen;
  for (std::size_t i = 0; i < t.size(); ++i) seen.emplace(t.row(i).begin(), t.row(i).end());
  return seen.size();
}

Tensor gather_rows(const ItemEmbeddingTable& t, std::span<const std::size_t> rows) {
  std::vector<double> v;
  v.reserve(rows.size() * t.dim());
  for (auto r : rows) v.insert(v.end(), t.row(r).begin(), t.row(r).end());
  return Tensor::from({rows.size(), t.dim()}, std::move(v));
}

}  // namespace

RqVaeBatchLoss rqvae_batch_loss(const RqVaeModel& model, const Tensor& x) {
  const auto b = x.rows();
  const auto dim = model.latent_dim();
  const auto levels = model.levels();
  RqVaeBatchLoss out;
  out.codes.resize(levels);
  out.residuals.resize(levels);
  auto z = model.encode(x);
  Tensor h = z;
  Tensor quant = Tensor::scalar(0.0);
  std::vector<double> qsum(b * dim, 0.0);
  for (std::size_t d = 0; d < levels; ++d) {
    const auto& cb = model.codebooks()[d];
    auto hv = h.data();
    out.residuals[d].assign(hv.begin(), hv.end());
    std::vector<std::size_t> rows(b);
    for (std::size_t i = 0; i < b; ++i) rows[i] = nearest_code(cb, hv.subspan(i * dim, dim));
    out.codes[d].assign(rows.begin(), rows.end());
    auto e = num::embedding(cb, rows);
    auto codebook_term = num::squared_norm(h.detach() - e);
    auto commit_term = num::squared_norm(h - e.detach());
    quant = quant + codebook_term + model.commitment() * commit_term;
    for (std::size_t i = 0; i < qsum.size(); ++i) qsum[i] += e.data()[i];
    h = h - e.detach();
  }
  auto dec_in = num::straight_through(Tensor::from({b, dim}, std::move(qsum)), z);
  out.recon = num::squared_norm(x - model.decode(dec_in));
  out.quant = quant;
  out.loss = (out.recon + quant) * (1.0 / static_cast<double>(b));
  return out;
}

std::vector<RqVaeEpochLog> train_rqvae(RqVaeModel& model, const ItemEmbeddingTable& embeddings,
                                       const RqVaeConfig& config, bool init_codebooks) {
  const auto n = embeddings.size(), dim = model.latent_dim(), k = model.codebook_size();
  if (embeddings.dim() != model.input_dim()) {
    throw std::invalid_argument("rq-vae: embedding dimension does not match the model");
  }
  if (distinct_rows(embeddings) < k) {
    throw DataError(fmt::format("rq-vae: {} distinct embeddings, need at least K = {}", distinct_rows(embeddings), k));
  }
  std::vector<RqVaeEpochLog> log;
  if (config.epochs == 0) return log;

  num::Rng rng(num::derive_seed(config.seed, 0x52515641));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const auto batch = std::max<std::size_t>(1, std::min(config.batch_size, n));

  if (init_codebooks) {
    std::shuffle(order.begin(), order.end(), rng);
    const auto m = std::min(n, std::max(batch, k));
    std::vector<double> res;
    {
      num::NoGradGuard guard;
      auto z = model.encode(gather_rows(embeddings, std::span(order).first(m)));
      res.assign(z.data().begin(), z.data().end());
    }
    for (auto& cb : model.codebooks()) {
      auto cent = kmeans(res, m, dim, k, config.kmeans_iters, rng);
      std::copy(cent.begin(), cent.end(), cb.mutable_data().begin());
      for (std::size_t i = 0; i < m; ++i) {
        const auto c = nearest_code(cb, std::span(res).subspan(i * dim, dim));
        for (std::size_t j = 0; j < dim; ++j) res[i * dim + j] -= cent[c * dim + j];
      }
    }
  }

  num::AdamW net_opt(model.network_params(), {.lr = config.lr, .weight_decay = config.weight_decay});
  num::AdamW cb_opt(model.codebook_params(), {.lr = config.lr, .weight_decay = 0.0});
  const auto levels = model.levels();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> usage(levels, std::vector<std::size_t>(k, 0));
    std::vector<std::vector<double>> last_residuals(levels);
    RqVaeEpochLog entry{.epoch = epoch};
    for (std::size_t start = 0; start < n; start += batch) {
      const auto b = std::min(batch, n - start);
      auto x = gather_rows(embeddings, std::span(order).subspan(start, b));
      auto step = rqvae_batch_loss(model, x);
      for (std::size_t d = 0; d < levels; ++d) {
        for (auto c : step.codes[d]) ++usage[d][c];
        last_residuals[d] = std::move(step.residuals[d]);
      }
      const auto& loss = step.loss;
      const auto& recon = step.recon;
      const auto& quant = step.quant;
      if (!std::isfinite(loss.item())) {
        throw num::NumericalError(fmt::format("rq-vae diverged at epoch {} batch {}: recon {} quant {}", epoch,
                                              start / batch, recon.item(), quant.item()));
      }
      loss.backward();
      net_opt.step();
      cb_opt.step();
      net_opt.zero_grad();
      cb_opt.zero_grad();
      entry.loss += loss.item() * static_cast<double>(b);
      entry.recon += recon.item();
      entry.quant += quant.item();
    }
    entry.loss /= static_cast<double>(n);
    entry.recon /= static_cast<double>(n);
    entry.quant /= static_cast<double>(n);
    if (config.reseed_dead_codes) {
      for (std::size_t d = 0; d < levels; ++d) {
        const auto& res = last_residuals[d];
        const auto rows = res.size() / dim;
        auto cb = model.codebooks()[d].mutable_data();
        std::uniform_int_distribution<std::size_t> pick(0, rows - 1);
        for (std::size_t j = 0; j < k; ++j) {
          if (usage[d][j] > 0) continue;
          const auto r = pick(rng);
          std::copy_n(res.begin() + static_cast<std::ptrdiff_t>(r * dim), dim, cb.begin() + static_cast<std::ptrdiff_t>(j * dim));
          ++entry.reseeded;
        }
      }
    }
    log.push_back(entry);
  }
  return log;
}

RqVaeTrainResult train_rqvae(const ItemEmbeddingTable& embeddings, const RqVaeConfig& config) {
  num::Rng rng(num::derive_seed(config.seed, 0x494e4954));
  RqVaeTrainResult out{RqVaeModel(embeddings.dim(), config, rng), {}};
  out.log = train_rqvae(out.model, embeddings, config, true);
  return out;
}

std::size_t SemanticIdMap::suffix_range() const {
  std::size_t r = 0;
  for (const auto& id : ids)
    if (id.suffix) r = std::max<std::size_t>(r, *id.suffix + 1);
  return r;
}

namespace {

void fill_collisions(SemanticIdMap& map) {
  std::map<std::vector<Code>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < map.ids.size(); ++i) groups[map.ids[i].codes].push_back(i);
  map.collision_groups.clear();
  std::size_t colliding = 0;
  for (auto& [codes, rows] : groups) {
    if (rows.size() < 2) continue;
    colliding += rows.size();
    map.collision_groups.push_back(rows);
  }
  std::sort(map.collision_groups.begin(), map.collision_groups.end());
  map.collision_rate = map.ids.empty() ? 0.0 : static_cast<double>(colliding) / static_cast<double>(map.ids.size());
  map.utilization.assign(map.levels, 0.0);
  for (std::size_t d = 0; d < map.levels; ++d) {
    std::set<Code> used;
    for (const auto& id : map.ids) used.insert(id.codes[d]);
    map.utilization[d] = static_cast<double>(used.size()) / static_cast<double>(map.codebook_size);
  }
}

}  // namespace

SemanticIdMap assign_ids(const RqVaeModel& model, const ItemEmbeddingTable& embeddings) {
  SemanticIdMap map;
  map.item_ids = embeddings.ids();
  map.levels = model.levels();
  map.codebook_size = model.codebook_size();
  for (std::size_t i = 0; i < embeddings.size(); ++i) map.ids.push_back(quantize(model, embeddings.row(i)).first);
  fill_collisions(map);
  for (const auto& g : map.collision_groups) {
    for (std::size_t j = 0; j < g.size(); ++j) map.ids[g[j]].suffix = static_cast<Code>(j);
  }
  return map;
}

void save_semantic_ids(const SemanticIdMap& map, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw DataError(fmt::format("cannot write {}", path.string()));
  os << fmt::format("# levels={} codebook={}\n", map.levels, map.codebook_size);
  for (std::size_t i = 0; i < map.size(); ++i) {
    os << map.item_ids[i] << '\t' << fmt::format("{}", fmt::join(map.ids[i].codes, " "));
    if (map.ids[i].suffix) os << ' ' << *map.ids[i].suffix;
    os << '\n';
  }
}

SemanticIdMap load_semantic_ids(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError(fmt::format("{}: cannot open", path.string()));
  SemanticIdMap map;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (std::sscanf(line.c_str(), "# levels=%zu codebook=%zu", &map.levels, &map.codebook_size) != 2) {
        throw DataError(fmt::format("{}:{}: bad header", path.string(), lineno));
      }
      header = true;
      continue;
    }
    if (!header) throw DataError(fmt::format("{}:{}: missing header", path.string(), lineno));
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError(fmt::format("{}:{}: expected item<TAB>codes", path.string(), lineno));
    std::istringstream ss(line.substr(tab + 1));
    std::vector<Code> vals;
    long long v;
    while (ss >> v) {
      if (v < 0) throw DataError(fmt::format("{}:{}: negative code", path.string(), lineno));
      vals.push_back(static_cast<Code>(v));
    }
    if (!ss.eof() || (vals.size() != map.levels && vals.size() != map.levels + 1)) {
      throw DataError(fmt::format("{}:{}: expected {} codes", path.string(), lineno, map.levels));
    }
    SemanticId id;
    id.codes.assign(vals.begin(), vals.begin() + static_cast<std::ptrdiff_t>(map.levels));
    for (auto c : id.codes) {
      if (c >= map.codebook_size) throw DataError(fmt::format("{}:{}: code {} out of range", path.string(), lineno, c));
    }
    if (vals.size() > map.levels) id.suffix = vals.back();
    map.item_ids.push_back(line.substr(0, tab));
    map.ids.push_back(std::move(id));
  }
  fill_collisions(map);
  return map;
}

SemanticIdMap aligned_to(const SemanticIdMap& map, const Corpus& corpus) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < map.size(); ++i) index.emplace(map.item_ids[i], i);
  SemanticIdMap out;
  out.levels = map.levels;
  out.codebook_size = map.codebook_size;
  for (const auto& item : corpus.item_ids) {
    auto it = index.find(item);
    if (it == index.end()) throw DataError(fmt::format("no semantic id for item '{}'", item));
    out.item_ids.push_back(item);
    out.ids.push_back(map.ids[it->second]);
  }
  // suffixes are kept from the source map so ids stay identical
  fill_collisions(out);
  return out;
}

}  // namespace slowrec
