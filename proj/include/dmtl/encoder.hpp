#pragma once

// Shared sentence encoder: pluggable sentence embedder, document-level embedding
// augmentations, and a bidirectional LSTM that contextualizes the sentence
// sequence of a document.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dmtl/autograd.hpp"
#include "dmtl/common.hpp"
#include "dmtl/corpus.hpp"

namespace dmtl::encoder {

using ag::Matrix;
using ag::Var;

// Lower-cased alphanumeric runs; bytes >= 0x80 are kept so UTF-8 words survive.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c) || c >= 0x80 || c == '_') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// One freezable unit of an embedder, ordered input -> output.
struct EmbedderBlock {
  std::string name;
  std::vector<ag::Parameter*> params;
};

class SentenceEmbedder {
 public:
  virtual ~SentenceEmbedder() = default;

  virtual std::size_t dim() const = 0;
  virtual std::size_t max_tokens() const = 0;
  // Summary representation of one tokenized sentence, shape (1, dim).
  virtual Var embed(const std::vector<std::string>& tokens) = 0;
  virtual std::vector<EmbedderBlock> blocks() = 0;

  // One row per sentence. Implementations may override for batching.
  virtual Var embed_batch(const std::vector<std::vector<std::string>>& sentences) {
    std::vector<Var> rows;
    rows.reserve(sentences.size());
    for (const auto& s : sentences) rows.push_back(embed(s));
    return ag::concat_rows(rows);
  }

  std::vector<ag::Parameter*> parameters() {
    std::vector<ag::Parameter*> out;
    for (auto& b : blocks()) out.insert(out.end(), b.params.begin(), b.params.end());
    return out;
  }
};

struct ToyEmbedderConfig {
  std::size_t dim = 64;
  std::size_t buckets = 4096;
  std::size_t blocks = 2;
  std::size_t max_tokens = 128;
};

// Deterministic stand-in for a pretrained transformer: tokens hash into a
// pseudo-random embedding table, are mean-pooled, and pass through residual
// tanh blocks. Block list: "embedding", "block0", "block1", ...
class ToyEmbedder final : public SentenceEmbedder {
 public:
  ToyEmbedder(ToyEmbedderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg_.dim == 0 || cfg_.buckets == 0 || cfg_.max_tokens == 0) throw ValidationError("toy embedder: zero size");
    const auto d = static_cast<ag::Index>(cfg_.dim);
    table_ = ag::Parameter("embedder.embedding",
                           ag::uniform_init(static_cast<ag::Index>(cfg_.buckets), d, std::sqrt(3.0),
                                            derive_seed(seed, "embedder.embedding")),
                           ag::ParamGroup::embedder);
    for (std::size_t i = 0; i < cfg_.blocks; ++i) {
      const std::string base = "embedder.block" + std::to_string(i);
      weights_.emplace_back(base + ".weight", ag::xavier_init(d, d, derive_seed(seed, base + ".weight")) * 0.5,
                            ag::ParamGroup::embedder);
      biases_.emplace_back(base + ".bias", Matrix::Zero(1, d), ag::ParamGroup::embedder);
    }
  }

  std::size_t dim() const override { return cfg_.dim; }
  std::size_t max_tokens() const override { return cfg_.max_tokens; }

  std::size_t bucket(const std::string& token) const { return fnv1a(token) % cfg_.buckets; }

  Var embed(const std::vector<std::string>& tokens) override { return embed_batch({tokens}); }

  Var embed_batch(const std::vector<std::vector<std::string>>& sentences) override {
    std::vector<std::vector<ag::Index>> ids(sentences.size());
    for (std::size_t i = 0; i < sentences.size(); ++i) {
      const auto& toks = sentences[i];
      if (toks.empty()) {
        ids[i].push_back(static_cast<ag::Index>(bucket("<empty>")));
        continue;
      }
      for (std::size_t t = 0; t < std::min(toks.size(), cfg_.max_tokens); ++t)
        ids[i].push_back(static_cast<ag::Index>(bucket(toks[t])));
    }
    Var h = ag::embedding_bag_mean(table_.var(), std::move(ids));
    for (std::size_t b = 0; b < weights_.size(); ++b)
      h = ag::add(h, ag::tanh(ag::add_row(ag::matmul(h, weights_[b].var()), biases_[b].var())));
    return h;
  }

  std::vector<EmbedderBlock> blocks() override {
    std::vector<EmbedderBlock> out{{"embedding", {&table_}}};
    for (std::size_t b = 0; b < weights_.size(); ++b)
      out.push_back({"block" + std::to_string(b), {&weights_[b], &biases_[b]}});
    return out;
  }

 private:
  ToyEmbedderConfig cfg_;
  ag::Parameter table_;
  std::vector<ag::Parameter> weights_;
  std::vector<ag::Parameter> biases_;
};

// ---- freezing -------------------------------------------------------------------

// Per-block trainable flags, ordered like SentenceEmbedder::blocks().
struct FreezePolicy {
  std::vector<bool> trainable;

  static FreezePolicy all(std::size_t blocks, bool train) { return {std::vector<bool>(blocks, train)}; }

  // Freezes everything except the `k` blocks closest to the output.
  static FreezePolicy unfreeze_last(std::size_t blocks, std::size_t k) {
    FreezePolicy p = all(blocks, false);
    for (std::size_t i = blocks - std::min(k, blocks); i < blocks; ++i) p.trainable[i] = true;
    return p;
  }
};

inline void apply_freeze_policy(SentenceEmbedder& embedder, const FreezePolicy& policy) {
  auto blocks = embedder.blocks();
  if (blocks.size() != policy.trainable.size())
    throw ValidationError("freeze policy lists " + std::to_string(policy.trainable.size()) +
                          " blocks but the embedder has " + std::to_string(blocks.size()));
  for (std::size_t i = 0; i < blocks.size(); ++i)
    for (auto* p : blocks[i].params) p->set_trainable(policy.trainable[i]);
}

inline std::size_t trainable_parameter_count(SentenceEmbedder& embedder) {
  std::size_t n = 0;
  for (auto* p : embedder.parameters())
    if (p->trainable()) n += static_cast<std::size_t>(p->size());
  return n;
}

inline std::size_t parameter_count(SentenceEmbedder& embedder) {
  std::size_t n = 0;
  for (auto* p : embedder.parameters()) n += static_cast<std::size_t>(p->size());
  return n;
}

// ---- embeddings -------------------------------------------------------------------

inline constexpr std::size_t kMaxSentences = 200;

// Sentences longer than the embedder's token limit are truncated with a warning.
inline Var embed_sentences(const Document& doc, SentenceEmbedder& embedder) {
  if (doc.sentences.empty()) throw ValidationError("document '" + doc.doc_id + "' has no sentences");
  std::vector<std::vector<std::string>> toks;
  toks.reserve(doc.sentences.size());
  for (const auto& s : doc.sentences) {
    auto t = tokenize(s.text);
    if (t.size() > embedder.max_tokens()) {
      warn("document '" + doc.doc_id + "' sentence " + std::to_string(s.index) + ": " + std::to_string(t.size()) +
           " tokens truncated to " + std::to_string(embedder.max_tokens()));
      t.resize(embedder.max_tokens());
    }
    toks.push_back(std::move(t));
  }
  return embedder.embed_batch(toks);
}

struct Pooled {
  Var document;  // (1, d)
  Var weights;   // (1, N), sums to 1
};

// Attention pooling with a single learned query: w = softmax(S q), D = w S.
inline Pooled document_embedding(const Var& S, const Var& query) {
  if (S.rows() == 0) throw ValidationError("document_embedding: no sentences");
  if (query.rows() != S.cols() || query.cols() != 1) throw ValidationError("document_embedding: query width mismatch");
  Var scores = ag::matmul(S, query);  // (N, 1)
  Var w = ag::softmax_rows(ag::make_op(scores.value().transpose(), {scores}, [](ag::Node& s) {
    ag::detail::push(s, 0, s.grad.transpose());
  }));
  return {ag::matmul(w, S), w};
}

// Rows A_j = (D * S_j) ++ (D - S_j).
inline Var document_arithmetic(const Var& D, const Var& S) {
  if (D.rows() != 1 || D.cols() != S.cols()) throw ValidationError("document_arithmetic: width mismatch");
  Var Db = ag::broadcast_rows(D, S.rows());
  return ag::concat_cols({ag::mul(Db, S), ag::sub(Db, S)});
}

// Transformer-style sin/cos table indexed by sentence position.
inline Matrix sinusoidal_positions(std::size_t n, std::size_t width) {
  if (width == 0 || width % 2 != 0) throw ValidationError("sinusoidal positional width must be even");
  Matrix p(static_cast<ag::Index>(n), static_cast<ag::Index>(width));
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < width / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(width));
      p(static_cast<ag::Index>(pos), static_cast<ag::Index>(2 * i)) = std::sin(static_cast<double>(pos) * freq);
      p(static_cast<ag::Index>(pos), static_cast<ag::Index>(2 * i + 1)) = std::cos(static_cast<double>(pos) * freq);
    }
  }
  return p;
}

// Learned lookup by sentence position.
inline Var vanilla_positions(const ag::Parameter& table, std::size_t n) {
  if (n > static_cast<std::size_t>(table.value().rows()))
    throw ValidationError("sentence position " + std::to_string(n - 1) + " exceeds positional table capacity " +
                          std::to_string(table.value().rows()));
  std::vector<ag::Index> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = static_cast<ag::Index>(i);
  return ag::gather_rows(table.var(), std::move(rows));
}

// ---- augmentation bundle -------------------------------------------------------------

struct AugmentationMask {
  bool position = false;    // P, learned
  bool sinusoidal = false;  // P(s)
  bool document = false;    // D
  bool arithmetic = false;  // A
  bool headline = false;    // H

  static AugmentationMask from_bits(unsigned bits) {
    return {(bits & 1u) != 0, (bits & 2u) != 0, (bits & 4u) != 0, (bits & 8u) != 0, (bits & 16u) != 0};
  }

  static AugmentationMask parse(const std::vector<std::string>& names) {
    AugmentationMask m;
    for (const auto& n : names) {
      if (n == "P")
        m.position = true;
      else if (n == "Ps")
        m.sinusoidal = true;
      else if (n == "D")
        m.document = true;
      else if (n == "A")
        m.arithmetic = true;
      else if (n == "H")
        m.headline = true;
      else
        throw ValidationError("unknown embedding augmentation '" + n + "' (expected P, Ps, D, A, H)");
    }
    return m;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    if (position) out.push_back("P");
    if (sinusoidal) out.push_back("Ps");
    if (document) out.push_back("D");
    if (arithmetic) out.push_back("A");
    if (headline) out.push_back("H");
    return out;
  }

  std::size_t width(std::size_t d, std::size_t dp) const {
    return d + (position ? dp : 0) + (sinusoidal ? dp : 0) + (document ? d : 0) + (arithmetic ? 2 * d : 0) +
           (headline ? d : 0);
  }
};

// Per-document pieces before concatenation. The document embedding is computed
// whenever D or A is active, since A is derived from it.
struct EmbeddingBundle {
  Var sentences;
  std::optional<Var> position, sinusoidal, document, arithmetic, headline;
  AugmentationMask mask;

  Var concat() const {
    const auto n = sentences.rows();
    std::vector<Var> parts{sentences};
    if (mask.position) parts.push_back(*position);
    if (mask.sinusoidal) parts.push_back(*sinusoidal);
    if (mask.document) parts.push_back(ag::broadcast_rows(*document, n));
    if (mask.arithmetic) parts.push_back(*arithmetic);
    if (mask.headline) parts.push_back(ag::broadcast_rows(*headline, n));
    return ag::concat_cols(parts);
  }
};

// ---- contextualizer ------------------------------------------------------------------

class BiLstm {
 public:
  BiLstm() = default;
  BiLstm(std::size_t input, std::size_t hidden, std::uint64_t seed, const std::string& prefix = "encoder.bilstm") {
    const auto in = static_cast<ag::Index>(input), h = static_cast<ag::Index>(hidden);
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (const char* dir : {"forward", "backward"}) {
      const std::string base = prefix + "." + dir;
      params_.emplace_back(base + ".wx", ag::uniform_init(in, 4 * h, bound, derive_seed(seed, base + ".wx")),
                           ag::ParamGroup::shared);
      params_.emplace_back(base + ".wh", ag::uniform_init(h, 4 * h, bound, derive_seed(seed, base + ".wh")),
                           ag::ParamGroup::shared);
      params_.emplace_back(base + ".b", ag::uniform_init(1, 4 * h, bound, derive_seed(seed, base + ".b")),
                           ag::ParamGroup::shared);
    }
  }

  std::size_t hidden() const { return static_cast<std::size_t>(params_.at(1).value().rows()); }
  std::size_t output_width() const { return 2 * hidden(); }

  // Forward-direction states in the first half of the columns, backward in the second.
  Var operator()(const Var& X) const {
    Var f = ag::lstm(X, params_[0].var(), params_[1].var(), params_[2].var(), false);
    Var b = ag::lstm(X, params_[3].var(), params_[4].var(), params_[5].var(), true);
    return ag::concat_cols({f, b});
  }

  std::vector<ag::Parameter*> parameters() {
    std::vector<ag::Parameter*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

 private:
  std::vector<ag::Parameter> params_;  // forward wx, wh, b, backward wx, wh, b
};

struct EncoderConfig {
  ToyEmbedderConfig embedder;
  AugmentationMask mask;
  std::size_t positional_dim = 64;
  std::size_t max_sentences = kMaxSentences;
  std::size_t lstm_hidden = 256;
};

struct Encoded {
  Var contextual;  // (N, 2 * hidden)
  Var sentences;   // (N, d)
  std::optional<Var> attention;
};

class SentenceEncoder {
 public:
  SentenceEncoder(const EncoderConfig& cfg, std::uint64_t seed)
      : SentenceEncoder(cfg, std::make_unique<ToyEmbedder>(cfg.embedder, seed), seed) {}

  SentenceEncoder(const EncoderConfig& cfg, std::unique_ptr<SentenceEmbedder> embedder, std::uint64_t seed)
      : cfg_(cfg), embedder_(std::move(embedder)) {
    if (cfg_.mask.sinusoidal && cfg_.positional_dim % 2 != 0)
      throw ValidationError("sinusoidal positional width must be even");
    const auto d = static_cast<ag::Index>(embedder_->dim());
    query_ = ag::Parameter("encoder.attention.query", Matrix::Zero(d, 1), ag::ParamGroup::shared);
    positions_ = ag::Parameter("encoder.position",
                               ag::uniform_init(static_cast<ag::Index>(cfg_.max_sentences),
                                                static_cast<ag::Index>(cfg_.positional_dim), 0.1,
                                                derive_seed(seed, "encoder.position")),
                               ag::ParamGroup::shared);
    lstm_ = BiLstm(input_width(), cfg_.lstm_hidden, seed);
  }

  const EncoderConfig& config() const { return cfg_; }
  SentenceEmbedder& embedder() { return *embedder_; }
  std::size_t input_width() const { return cfg_.mask.width(embedder_->dim(), cfg_.positional_dim); }
  std::size_t output_width() const { return lstm_.output_width(); }
  const BiLstm& contextualizer() const { return lstm_; }

  EmbeddingBundle bundle(const Document& doc) {
    if (doc.sentences.size() > cfg_.max_sentences)
      throw ValidationError("document '" + doc.doc_id + "' has " + std::to_string(doc.sentences.size()) +
                            " sentences; the limit is " + std::to_string(cfg_.max_sentences));
    EmbeddingBundle b;
    b.mask = cfg_.mask;
    b.sentences = embed_sentences(doc, *embedder_);
    const std::size_t n = doc.sentences.size();
    if (cfg_.mask.position) b.position = vanilla_positions(positions_, n);
    if (cfg_.mask.sinusoidal) b.sinusoidal = ag::constant(sinusoidal_positions(n, cfg_.positional_dim));
    if (cfg_.mask.document || cfg_.mask.arithmetic) {
      b.document = document_embedding(b.sentences, query_.var()).document;
      if (cfg_.mask.arithmetic) b.arithmetic = document_arithmetic(*b.document, b.sentences);
    }
    if (cfg_.mask.headline) {
      if (doc.headline)
        b.headline = embedder_->embed(tokenize(*doc.headline));
      else
        b.headline = ag::constant(Matrix::Zero(1, static_cast<ag::Index>(embedder_->dim())));
    }
    return b;
  }

  Encoded encode(const Document& doc) {
    EmbeddingBundle b = bundle(doc);
    return {lstm_(b.concat()), b.sentences, std::nullopt};
  }

  // Contextualizer, attention query and positional table; the embedder is separate.
  std::vector<ag::Parameter*> shared_parameters() {
    std::vector<ag::Parameter*> out{&query_, &positions_};
    for (auto* p : lstm_.parameters()) out.push_back(p);
    return out;
  }

  std::vector<ag::Parameter*> parameters() {
    auto out = embedder_->parameters();
    for (auto* p : shared_parameters()) out.push_back(p);
    return out;
  }

 private:
  EncoderConfig cfg_;
  std::unique_ptr<SentenceEmbedder> embedder_;
  ag::Parameter query_;
  ag::Parameter positions_;
  BiLstm lstm_;
};

}  // namespace dmtl::encoder
