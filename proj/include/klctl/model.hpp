#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "klctl/data.hpp"
#include "klctl/error.hpp"
#include "klctl/graph.hpp"
#include "klctl/parameters.hpp"
#include "klctl/rng.hpp"

namespace klctl {

enum class PriorKind { Conditional, StandardNormal };

// Network sizes. Word and order embeddings share the model width, since the
// conditional encoder adds them elementwise and feeds the sum to the residual
// stream.
struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t width = 64;
  std::size_t ffn_width = 128;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t heads = 4;
  std::size_t latent_dim = 16;
  std::vector<std::size_t> fc_hidden{64, 32};
  std::size_t n_max = 100;
  std::size_t m_max = 16;
  PriorKind prior = PriorKind::Conditional;
  // Output logits reuse the token embedding table (plus a bias).
  bool tie_output = true;
  // Drop probability on embeddings and on sublayer outputs; active only
  // while a dropout seed is set (training).
  double dropout = 0.0;

  void validate() const {
    if (vocab_size <= kEos) throw InputError("vocab_size must exceed the reserved ids");
    if (width == 0 || heads == 0 || width % heads != 0) throw InputError("width must be a positive multiple of heads");
    if (ffn_width == 0) throw InputError("ffn_width must be positive");
    if (latent_dim < 1) throw InputError("latent_dim must be >= 1");
    if (n_max < 1 || m_max < 1) throw InputError("n_max and m_max must be >= 1");
    for (auto h : fc_hidden)
      if (h == 0) throw InputError("fc hidden sizes must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw InputError("dropout must lie in [0, 1)");
  }

  // Full-size network: 512-wide, three layers, eight heads, FC 400-200-100.
  static ModelConfig full_scale(std::size_t vocab) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.width = 512;
    c.ffn_width = 2048;
    c.encoder_layers = 3;
    c.decoder_layers = 3;
    c.heads = 8;
    c.latent_dim = 64;
    c.fc_hidden = {400, 200, 100};
    c.n_max = 100;
    c.m_max = 50;
    return c;
  }
};

// Condition summary c (one row per example) and per-keyword outputs E
// (keyword_len rows per example, padded rows masked out).
struct ConditionEncoding {
  Var summary;
  Var keywords;
  std::size_t batch = 0;
  std::size_t keyword_len = 0;
  std::vector<std::uint8_t> keyword_mask;
};

// Diagonal Gaussian as graph nodes, [batch x latent] each.
struct LatentDistribution {
  Var mu;
  Var log_sigma;
};

// Conditional VAE: target encoder, conditional encoder with order
// embeddings, posterior and prior heads, and a decoder that cross-attends to
// the projected [z ; E_j] rows.
template <class T>
class Cvae {
 public:
  Cvae(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(derive_seed(seed, 0x1417));
    const std::size_t d = cfg_.width;
    add_embedding("tok_emb", cfg_.vocab_size, d, rng);
    add_embedding("order_emb", cfg_.m_max + 1, d, rng);
    add_embedding("tgt.pos", cfg_.n_max + 1, d, rng);
    add_embedding("cond.pos", cfg_.m_max + 1, d, rng);
    add_embedding("dec.pos", cfg_.n_max + 1, d, rng);
    for (std::size_t l = 0; l < cfg_.encoder_layers; ++l) {
      add_block("tgt.l" + std::to_string(l), false, rng);
      add_block("cond.l" + std::to_string(l), false, rng);
    }
    add_norm("tgt.ln_f");
    add_norm("cond.ln_f");
    for (std::size_t l = 0; l < cfg_.decoder_layers; ++l) add_block("dec.l" + std::to_string(l), true, rng);
    add_norm("dec.ln_f");
    add_linear("dec.memory", cfg_.latent_dim + d, d, rng);
    if (cfg_.tie_output) {
      params_.add("dec.out.b", Tensor<T>(1, cfg_.vocab_size));
    } else {
      add_linear("dec.out", d, cfg_.vocab_size, rng);
    }
    add_mlp("post", 2 * d, rng);
    if (cfg_.prior == PriorKind::Conditional) add_mlp("prior", d, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& parameters() { return params_; }
  const ParameterStore<T>& parameters() const { return params_; }

  // Enables dropout with masks drawn from `seed`; nullopt disables it.
  void set_dropout_seed(std::optional<std::uint64_t> seed) {
    if (seed) dropout_rng_.emplace(*seed);
    else dropout_rng_.reset();
  }

  // CLS hidden state of the target encoder, [batch x width].
  Var encode_target(Graph<T>& g, const Batch& b) {
    const std::size_t B = b.size, L = b.text_len + 1;
    for (std::size_t i = 0; i < B; ++i) {
      if (b.lengths[i] < 1 || b.lengths[i] > cfg_.n_max) {
        throw InputError("target length " + std::to_string(b.lengths[i]) + " outside [1, n_max]");
      }
    }
    std::vector<int> ids(B * L, kPad);
    std::vector<std::uint8_t> mask(B * L, 0);
    std::vector<std::size_t> pos(B * L);
    for (std::size_t i = 0; i < B; ++i) {
      ids[i * L] = kCls;
      mask[i * L] = 1;
      for (std::size_t t = 0; t < b.text_len; ++t) {
        const int tok = b.tokens[i * b.text_len + t];
        check_token(tok);
        ids[i * L + t + 1] = tok;
        mask[i * L + t + 1] = b.token_mask[i * b.text_len + t];
      }
      for (std::size_t t = 0; t < L; ++t) pos[i * L + t] = t;
    }
    Var x = dropout(g, g.add(g.embedding(p(g, "tok_emb"), ids), g.gather_rows(p(g, "tgt.pos"), pos)));
    x = encoder_stack(g, x, "tgt", B, L, mask);
    return g.gather_rows(x, cls_rows(B, L));
  }

  ConditionEncoding encode_condition(Graph<T>& g, const Batch& b) {
    const std::size_t B = b.size, M = b.keyword_len, L = M + 1;
    for (std::size_t i = 0; i < B; ++i) {
      if (b.keyword_counts[i] < 1 || b.keyword_counts[i] > cfg_.m_max) {
        throw InputError("keyword count " + std::to_string(b.keyword_counts[i]) + " outside [1, m_max]");
      }
    }
    std::vector<int> ids(B * L, kPad);
    std::vector<int> orders(B * L, 0);
    std::vector<std::uint8_t> mask(B * L, 0);
    std::vector<std::size_t> pos(B * L);
    for (std::size_t i = 0; i < B; ++i) {
      ids[i * L] = kCls;
      mask[i * L] = 1;
      for (std::size_t j = 0; j < M; ++j) {
        const std::size_t src = i * M + j;
        const int o = b.orders[src];
        if (b.keyword_mask[src]) {
          check_token(b.keywords[src]);
          if (o < 0 || static_cast<std::size_t>(o) > cfg_.m_max) {
            throw InputError("order label " + std::to_string(o) + " outside [0, m_max]");
          }
        }
        ids[i * L + j + 1] = b.keywords[src];
        orders[i * L + j + 1] = b.keyword_mask[src] ? o : 0;
        mask[i * L + j + 1] = b.keyword_mask[src];
      }
      for (std::size_t t = 0; t < L; ++t) pos[i * L + t] = t;
    }
    Var x = g.add(g.embedding(p(g, "tok_emb"), ids), g.embedding(p(g, "order_emb"), orders));
    x = dropout(g, g.add(x, g.gather_rows(p(g, "cond.pos"), pos)));
    x = encoder_stack(g, x, "cond", B, L, mask);
    std::vector<std::size_t> kw_rows;
    kw_rows.reserve(B * M);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < M; ++j) kw_rows.push_back(i * L + j + 1);
    ConditionEncoding enc;
    enc.summary = g.gather_rows(x, cls_rows(B, L));
    enc.keywords = g.gather_rows(x, std::move(kw_rows));
    enc.batch = B;
    enc.keyword_len = M;
    enc.keyword_mask = b.keyword_mask;
    return enc;
  }

  // q(z | x, y) from [h ; c].
  LatentDistribution infer_posterior(Graph<T>& g, Var h, Var c) {
    require_width(g, h, "h");
    require_width(g, c, "c");
    return mlp_heads(g, "post", g.concat_cols(h, c));
  }

  // p(z | y) from c, or N(0, I) when the prior is fixed.
  LatentDistribution infer_prior(Graph<T>& g, Var c) {
    require_width(g, c, "c");
    if (cfg_.prior == PriorKind::StandardNormal) {
      const std::size_t B = g.shape(c).rows;
      Var zero = g.input(Tensor<T>(B, cfg_.latent_dim));
      return {zero, zero};
    }
    return mlp_heads(g, "prior", c);
  }

  // z = mu + exp(log_sigma) * eps.
  Var sample_latent(Graph<T>& g, const LatentDistribution& dist, Var eps) {
    return g.add(dist.mu, g.mul(g.exp(dist.log_sigma), eps));
  }

  // Logits [batch*prefix_len x vocab] for a BOS-led prefix. Row t depends on
  // prefix[0..t] and on (z, E) only.
  Var decode_logits(Graph<T>& g, Var z, const ConditionEncoding& cond, const std::vector<int>& prefix,
                    std::size_t prefix_len) {
    const std::size_t B = cond.batch, M = cond.keyword_len;
    if (prefix_len < 1 || prefix.size() != B * prefix_len) throw StructuralError("decode_logits: prefix shape");
    if (prefix_len > cfg_.n_max + 1) {
      throw InputError("prefix of length " + std::to_string(prefix_len) + " exceeds BOS + n_max");
    }
    if (g.shape(z) != Shape{B, cfg_.latent_dim}) throw StructuralError("decode_logits: z shape " + to_string(g.shape(z)));
    for (std::size_t i = 0; i < B; ++i)
      if (prefix[i * prefix_len] != kBos) throw InputError("prefix must begin with BOS");
    for (int t : prefix) check_token(t);

    std::vector<std::size_t> z_rows(B * M), pos(B * prefix_len);
    for (std::size_t i = 0; i < B; ++i) {
      for (std::size_t j = 0; j < M; ++j) z_rows[i * M + j] = i;
      for (std::size_t t = 0; t < prefix_len; ++t) pos[i * prefix_len + t] = t;
    }
    Var memory = linear(g, g.concat_cols(g.gather_rows(z, std::move(z_rows)), cond.keywords), "dec.memory");

    Var x = dropout(g, g.add(g.embedding(p(g, "tok_emb"), prefix), g.gather_rows(p(g, "dec.pos"), std::move(pos))));
    const AttentionSpec self_spec{B, prefix_len, prefix_len, cfg_.heads, true, {}};
    const AttentionSpec cross_spec{B, prefix_len, M, cfg_.heads, false, cond.keyword_mask};
    for (std::size_t l = 0; l < cfg_.decoder_layers; ++l) {
      const std::string name = "dec.l" + std::to_string(l);
      Var h = norm(g, x, name + ".ln1");
      x = g.add(x, dropout(g, attention(g, h, h, name + ".self", self_spec)));
      h = norm(g, x, name + ".ln_cross");
      x = g.add(x, dropout(g, attention(g, h, memory, name + ".cross", cross_spec)));
      x = g.add(x, dropout(g, feed_forward(g, norm(g, x, name + ".ln2"), name + ".ffn")));
    }
    Var h = norm(g, x, "dec.ln_f");
    if (cfg_.tie_output) return g.add(g.matmul(h, p(g, "tok_emb"), true), p(g, "dec.out.b"));
    return linear(g, h, "dec.out");
  }

 private:
  Var p(Graph<T>& g, const std::string& name) { return g.param(params_.at(name)); }

  void check_token(int t) const {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab_size) {
      throw InputError("token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(cfg_.vocab_size));
    }
  }

  void require_width(Graph<T>& g, Var v, const char* what) const {
    if (g.shape(v).cols != cfg_.width) throw StructuralError(std::string(what) + " must be width-" + std::to_string(cfg_.width));
  }

  static std::vector<std::size_t> cls_rows(std::size_t B, std::size_t L) {
    std::vector<std::size_t> rows(B);
    for (std::size_t i = 0; i < B; ++i) rows[i] = i * L;
    return rows;
  }

  void add_embedding(const std::string& name, std::size_t rows, std::size_t cols, Rng& rng) {
    params_.add(name, init_embedding<T>(rows, cols, rng));
  }
  void add_linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    params_.add(name + ".w", init_uniform_fan_in<T>(in, out, rng));
    params_.add(name + ".b", Tensor<T>(1, out));
  }
  void add_norm(const std::string& name) {
    params_.add(name + ".g", Tensor<T>(1, cfg_.width, T(1)));
    params_.add(name + ".b", Tensor<T>(1, cfg_.width));
  }
  void add_attention(const std::string& name, Rng& rng) {
    for (const char* proj : {".q", ".k", ".v", ".o"}) add_linear(name + proj, cfg_.width, cfg_.width, rng);
  }
  void add_block(const std::string& name, bool cross, Rng& rng) {
    add_norm(name + ".ln1");
    add_attention(name + ".self", rng);
    if (cross) {
      add_norm(name + ".ln_cross");
      add_attention(name + ".cross", rng);
    }
    add_norm(name + ".ln2");
    add_linear(name + ".ffn.in", cfg_.width, cfg_.ffn_width, rng);
    add_linear(name + ".ffn.out", cfg_.ffn_width, cfg_.width, rng);
  }
  void add_mlp(const std::string& name, std::size_t in, Rng& rng) {
    for (std::size_t i = 0; i < cfg_.fc_hidden.size(); ++i) {
      add_linear(name + ".fc" + std::to_string(i), in, cfg_.fc_hidden[i], rng);
      in = cfg_.fc_hidden[i];
    }
    add_linear(name + ".mu", in, cfg_.latent_dim, rng);
    add_linear(name + ".log_sigma", in, cfg_.latent_dim, rng);
  }

  // Inverted dropout: kept entries are scaled by 1 / (1 - p).
  Var dropout(Graph<T>& g, Var x) {
    if (!dropout_rng_ || cfg_.dropout == 0.0) return x;
    const Shape s = g.shape(x);
    Tensor<T> mask(s.rows, s.cols);
    const T keep = static_cast<T>(1.0 / (1.0 - cfg_.dropout));
    for (auto& m : mask.data) m = dropout_rng_->bernoulli(cfg_.dropout) ? T(0) : keep;
    return g.mul(x, g.input(std::move(mask)));
  }

  Var linear(Graph<T>& g, Var x, const std::string& name) {
    return g.add(g.matmul(x, p(g, name + ".w")), p(g, name + ".b"));
  }
  Var norm(Graph<T>& g, Var x, const std::string& name) {
    return g.layer_norm(x, p(g, name + ".g"), p(g, name + ".b"));
  }
  Var attention(Graph<T>& g, Var query_in, Var kv_in, const std::string& name, const AttentionSpec& spec) {
    Var q = linear(g, query_in, name + ".q");
    Var k = linear(g, kv_in, name + ".k");
    Var v = linear(g, kv_in, name + ".v");
    return linear(g, g.attention(q, k, v, spec), name + ".o");
  }
  Var feed_forward(Graph<T>& g, Var x, const std::string& name) {
    return linear(g, g.relu(linear(g, x, name + ".in")), name + ".out");
  }

  // Pre-norm encoder blocks followed by a final norm.
  Var encoder_stack(Graph<T>& g, Var x, const std::string& name, std::size_t B, std::size_t L,
                    const std::vector<std::uint8_t>& mask) {
    const AttentionSpec spec{B, L, L, cfg_.heads, false, mask};
    for (std::size_t l = 0; l < cfg_.encoder_layers; ++l) {
      const std::string block = name + ".l" + std::to_string(l);
      Var h = norm(g, x, block + ".ln1");
      x = g.add(x, dropout(g, attention(g, h, h, block + ".self", spec)));
      x = g.add(x, dropout(g, feed_forward(g, norm(g, x, block + ".ln2"), block + ".ffn")));
    }
    return norm(g, x, name + ".ln_f");
  }

  LatentDistribution mlp_heads(Graph<T>& g, const std::string& name, Var x) {
    for (std::size_t i = 0; i < cfg_.fc_hidden.size(); ++i) x = g.relu(linear(g, x, name + ".fc" + std::to_string(i)));
    return {linear(g, x, name + ".mu"), linear(g, x, name + ".log_sigma")};
  }

  ModelConfig cfg_;
  ParameterStore<T> params_;
  std::optional<Rng> dropout_rng_;
};

// Batch-of-one helpers for single sequences.
inline Batch single_example_batch(const std::vector<int>& text, const KeywordSpec& spec) {
  Batch b;
  b.size = 1;
  b.text_len = text.size();
  b.tokens = text;
  b.token_mask.assign(text.size(), 1);
  b.lengths = {text.size()};
  if (spec.keywords.size() != spec.orders.size()) throw InputError("keywords and order labels differ in length");
  b.keyword_len = spec.keywords.size();
  b.keywords = spec.keywords;
  b.orders = spec.orders;
  b.keyword_mask.assign(spec.keywords.size(), 1);
  b.keyword_counts = {spec.keywords.size()};
  return b;
}

}  // namespace klctl
