// Copyright 2026 The slowrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "slowrec/annotator.hpp"

#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace slowrec {

using num::Tensor;

AnnotatorHeads::AnnotatorHeads(std::size_t hidden, const AnnotatorConfig& config) : hidden_(hidden) {
  if (hidden == 0 || config.width == 0) throw std::invalid_argument("annotator: zero width");
  num::Rng rng(num::derive_seed(config.seed, 0x414e4e));
  res_in_ = num::Linear(hidden, config.width, rng);
  res_out_ = num::Linear(config.width, hidden, rng, config.output_std);
  state_in_ = num::Linear(hidden, config.width, rng);
  state_out_ = num::Linear(config.width, hidden, rng, config.output_std);
}

Tensor AnnotatorHeads::apply(const num::Linear& in, const num::Linear& out, const Tensor& x) {
  return num::add(x, out(num::gelu(in(x))));
}

num::ParamList AnnotatorHeads::params() const {
  num::ParamList p;
  res_in_.collect("residual.in", p);
  res_out_.collect("residual.out", p);
  state_in_.collect("state.in", p);
  state_out_.collect("state.out", p);
  return p;
}

Tensor target_representation(const EncoderDecoder& model, std::span<const Token> item_tokens) {
  if (item_tokens.empty()) throw std::invalid_argument("target_representation: empty item");
  std::vector<std::size_t> ids;
  for (auto t : item_tokens) {
    if (t >= model.vocab_size()) throw std::invalid_argument(fmt::format("target_representation: token {}", t));
    ids.push_back(t);
  }
  return num::mean_rows(num::embedding(model.encoder()->token_embedding, ids));
}

Token pseudo_label(std::span<const double> r, const Tensor& embedding, const Vocabulary& vocab) {
  const auto h = embedding.cols();
  if (r.size() != h) throw std::invalid_argument("pseudo_label: width mismatch");
  for (double v : r) {
    if (!std::isfinite(v)) throw num::NumericalError("pseudo_label: residual is not finite");
  }
  auto e = embedding.data();
  Token best = Vocabulary::kFirstCode;
  double best_d = std::numeric_limits<double>::infinity();
  const auto end = static_cast<Token>(Vocabulary::kFirstCode + vocab.num_code_tokens());
  for (Token t = Vocabulary::kFirstCode; t < end; ++t) {
    double d = 0.0;
    for (std::size_t c = 0; c < h; ++c) {
      const double x = e[t * h + c] - r[c];
      d += x * x;
    }
    if (d < best_d) {
      best_d = d;
      best = t;
    }
  }
  return best;
}

std::vector<Token> ReasoningTrace::label() const {
  std::vector<Token> y(think);
  y.insert(y.end(), target.begin(), target.end());
  return y;
}

namespace {

Tensor row_tensor(std::span<const double> v) { return Tensor::from({1, v.size()}, {v.begin(), v.end()}); }

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

ReasoningTrace annotate(const EncoderDecoder& model, const AnnotatorHeads& heads, std::span<const Token> history,
                        ItemIndex target_item, const ItemCatalog& catalog, std::size_t steps, UserIndex user) {
  if (steps == 0) throw std::invalid_argument("annotate: at least one reasoning step is required");
  if (heads.hidden() != model.hidden()) throw std::invalid_argument("annotate: head width does not match the model");
  const auto& target = catalog.tokens(target_item);
  if (steps + target.size() > model.config().max_target_len) {
    throw std::invalid_argument(fmt::format("annotate: trace of {} tokens exceeds the decoder length {}",
                                            steps + target.size(), model.config().max_target_len));
  }
  num::NoGradGuard nograd;
  ReasoningTrace tr;
  tr.user = user;
  tr.target_item = target_item;
  tr.history.assign(history.begin(), history.end());
  tr.target = target;
  const auto enc = model.encode(history);
  const auto t = target_representation(model, target);
  tr.target_repr = values(t);

  tr.decoder_states.push_back(enc.pooled);
  tr.states.push_back(enc.pooled);
  Tensor running = row_tensor(enc.pooled);
  Tensor state = running;
  IncrementalDecoder dec(model, enc);
  dec.push(Vocabulary::kBos);
  for (std::size_t i = 0; i < steps; ++i) {
    auto r = heads.residual(num::sub(t, state));
    tr.residuals.push_back(values(r));
    const Token o = pseudo_label(r.data(), model.encoder()->token_embedding, catalog.vocab());
    tr.think.push_back(o);
    dec.push(o);
    std::vector<double> d(dec.hidden().begin(), dec.hidden().end());
    running = num::add(running, row_tensor(d));
    tr.decoder_states.push_back(std::move(d));
    state = heads.state(running);
    tr.states.push_back(values(state));
  }
  return tr;
}

TraceTensors trace_tensors(const EncoderDecoder& model, const AnnotatorHeads& heads, const ForwardResult& forward,
                           std::span<const ReasoningTrace> traces) {
  const auto batch = traces.size();
  if (batch == 0 || forward.target_offsets.size() != batch + 1) {
    throw std::invalid_argument("trace_tensors: batch does not match the forward pass");
  }
  const auto steps = traces[0].think.size();
  std::vector<std::size_t> target_ids, target_offsets{0};
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& tr = traces[b];
    if (tr.think.size() != steps) throw std::invalid_argument("trace_tensors: traces differ in length");
    if (forward.target_offsets[b + 1] - forward.target_offsets[b] < steps + 1) {
      throw std::invalid_argument("trace_tensors: decoder input shorter than the think block");
    }
    target_ids.insert(target_ids.end(), tr.target.begin(), tr.target.end());
    target_offsets.push_back(target_ids.size());
  }
  const auto& table = model.encoder()->token_embedding;
  TraceTensors out;
  out.targets = num::segment_mean_rows(num::embedding(table, target_ids), target_offsets);
  Tensor running = forward.pooled;
  Tensor state = forward.pooled;
  std::vector<std::size_t> rows(batch), think(batch);
  for (std::size_t i = 1; i <= steps; ++i) {
    out.residuals.push_back(heads.residual(num::sub(out.targets, state)));
    for (std::size_t b = 0; b < batch; ++b) {
      rows[b] = forward.target_offsets[b] + i;
      think[b] = traces[b].think[i - 1];
    }
    out.labels.push_back(num::embedding(table, think));
    running = num::add(running, num::embedding(forward.hidden, rows));
    state = heads.state(running);
    out.states.push_back(state);
  }
  return out;
}

AnnotationBatch annotate_all(const EncoderDecoder& model, const AnnotatorHeads& heads,
                             std::span<const Example> examples, const ItemCatalog& catalog, std::size_t steps) {
  AnnotationBatch out;
  out.traces.reserve(examples.size());
  for (const auto& ex : examples) {
    try {
      out.traces.push_back(
          annotate(model, heads, history_tokens(catalog, ex.history), ex.target, catalog, steps, ex.user));
    } catch (const std::invalid_argument&) {
      ++out.skipped;
    }
  }
  return out;
}

void save_traces(std::span<const ReasoningTrace> traces, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw DataError(fmt::format("cannot write {}", path.string()));
  for (const auto& t : traces) {
    os << fmt::format("{}\t{} | {} | {}\n", t.user, fmt::join(t.history, " "), fmt::join(t.think, " "),
                      fmt::join(t.target, " "));
  }
}

std::vector<ReasoningTrace> load_traces(const std::filesystem::path& path, const ItemCatalog& catalog) {
  std::ifstream is(path);
  if (!is) throw DataError(fmt::format("{}: cannot open", path.string()));
  auto read = [](const std::string& s) {
    std::istringstream ss(s);
    std::vector<Token> v;
    unsigned long x;
    while (ss >> x) v.push_back(static_cast<Token>(x));
    return v;
  };
  std::vector<ReasoningTrace> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    const auto b1 = line.find(" | ", tab == std::string::npos ? 0 : tab);
    const auto b2 = b1 == std::string::npos ? b1 : line.find(" | ", b1 + 3);
    if (tab == std::string::npos || b2 == std::string::npos) {
      throw DataError(fmt::format("{}:{}: expected user<TAB>history | think | target", path.string(), lineno));
    }
    ReasoningTrace t;
    t.user = static_cast<UserIndex>(std::stoul(line.substr(0, tab)));
    t.history = read(line.substr(tab + 1, b1 - tab - 1));
    t.think = read(line.substr(b1 + 3, b2 - b1 - 3));
    t.target = read(line.substr(b2 + 3));
    auto item = catalog.parse(t.target);
    if (!item) throw DataError(fmt::format("{}:{}: target tokens do not name an item", path.string(), lineno));
    t.target_item = *item;
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace slowrec
