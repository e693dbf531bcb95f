#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "klctl/data.hpp"
#include "klctl/error.hpp"
#include "klctl/graph.hpp"
#include "klctl/model.hpp"
#include "klctl/rng.hpp"

namespace klctl {

enum class DecodeMode { Greedy, Temperature };

struct GenerationRequest {
  KeywordSpec spec;
  DecodeMode mode = DecodeMode::Greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::size_t max_length = 100;
};

namespace detail {

inline void validate_request(const GenerationRequest& r, const ModelConfig& cfg) {
  if (r.spec.keywords.empty()) throw InputError("spec has no keywords");
  if (r.spec.keywords.size() != r.spec.orders.size()) throw InputError("keywords and order labels differ in length");
  if (r.spec.keywords.size() > cfg.m_max) throw InputError("spec has more than m_max keywords");
  if (!valid_order_labels(r.spec.orders)) throw InputError("order labels are not a valid ranking");
  if (r.max_length < 1 || r.max_length > cfg.n_max) {
    throw InputError("max length " + std::to_string(r.max_length) + " outside [1, n_max]");
  }
  if (r.mode == DecodeMode::Temperature && !(r.temperature > 0.0 && std::isfinite(r.temperature))) {
    throw InputError("temperature must be positive");
  }
}

inline bool emittable(int token) { return token != kPad && token != kUnk && token != kCls && token != kBos; }

}  // namespace detail

// Decodes every request together. Each request draws its latent noise and its
// sampling noise from its own seed, so results do not depend on how requests
// are grouped.
template <class T>
std::vector<std::vector<int>> generate_batch(Cvae<T>& model, const std::vector<GenerationRequest>& requests) {
  const ModelConfig& cfg = model.config();
  for (const auto& r : requests) detail::validate_request(r, cfg);
  const std::size_t B = requests.size();
  if (B == 0) return {};

  std::vector<TrainingExample> conds(B);
  std::size_t max_len = 0;
  Tensor<T> eps(B, cfg.latent_dim);
  std::vector<Rng> samplers;
  samplers.reserve(B);
  for (std::size_t i = 0; i < B; ++i) {
    conds[i].spec = requests[i].spec;
    max_len = std::max(max_len, requests[i].max_length);
    Rng latent(derive_seed(requests[i].seed, 0x1A7));
    for (std::size_t c = 0; c < cfg.latent_dim; ++c) eps.data[i * cfg.latent_dim + c] = static_cast<T>(latent.normal());
    samplers.emplace_back(derive_seed(requests[i].seed, 0x5A3));
  }
  const Batch batch = make_batch(conds, cfg.n_max);

  std::vector<std::vector<int>> seqs(B, std::vector<int>{kBos});
  std::vector<bool> done(B, false);
  std::vector<double> probs(cfg.vocab_size);
  for (std::size_t step = 0; step < max_len; ++step) {
    if (std::all_of(done.begin(), done.end(), [](bool d) { return d; })) break;
    // Finished rows are padded with EOS; attention is causal so the padding
    // never influences live rows.
    const std::size_t len = step + 1;
    std::vector<int> prefix(B * len);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t t = 0; t < len; ++t) prefix[i * len + t] = t < seqs[i].size() ? seqs[i][t] : kEos;

    Graph<T> g(false);
    const ConditionEncoding cond = model.encode_condition(g, batch);
    const LatentDistribution prior = model.infer_prior(g, cond.summary);
    const Var z = model.sample_latent(g, prior, g.input(eps));
    const Tensor<T>& logits = g.value(model.decode_logits(g, z, cond, prefix, len));

    for (std::size_t i = 0; i < B; ++i) {
      if (done[i]) continue;
      const auto& req = requests[i];
      const T* row = logits.data.data() + (i * len + step) * cfg.vocab_size;
      int next = kEos;
      if (req.mode == DecodeMode::Greedy) {
        T best = -std::numeric_limits<T>::infinity();
        for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
          if (detail::emittable(static_cast<int>(v)) && row[v] > best) {
            best = row[v];
            next = static_cast<int>(v);
          }
        }
      } else {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < cfg.vocab_size; ++v)
          if (detail::emittable(static_cast<int>(v))) mx = std::max(mx, static_cast<double>(row[v]) / req.temperature);
        double total = 0.0;
        for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
          probs[v] = detail::emittable(static_cast<int>(v)) ? std::exp(static_cast<double>(row[v]) / req.temperature - mx) : 0.0;
          total += probs[v];
        }
        double u = samplers[i].uniform() * total;
        for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
          if (probs[v] <= 0.0) continue;
          next = static_cast<int>(v);
          u -= probs[v];
          if (u < 0.0) break;
        }
      }
      if (next == kEos) {
        done[i] = true;
        continue;
      }
      seqs[i].push_back(next);
      if (seqs[i].size() - 1 >= req.max_length) done[i] = true;
    }
  }
  for (auto& s : seqs) s.erase(s.begin());
  return seqs;
}

template <class T>
std::vector<int> generate(Cvae<T>& model, const GenerationRequest& request) {
  return generate_batch(model, std::vector<GenerationRequest>{request}).front();
}

// Generates for many specs in fixed-size groups; spec i uses seed
// derive_seed(seed, 0x6E, i).
template <class T>
std::vector<std::vector<int>> generate_all(Cvae<T>& model, const std::vector<KeywordSpec>& specs, std::uint64_t seed,
                                           DecodeMode mode = DecodeMode::Greedy, double temperature = 1.0,
                                           std::size_t max_length = 0, std::size_t group = 64) {
  if (group < 1) throw InputError("group size must be >= 1");
  if (max_length == 0) max_length = std::min<std::size_t>(100, model.config().n_max);
  std::vector<std::vector<int>> out;
  out.reserve(specs.size());
  for (std::size_t start = 0; start < specs.size(); start += group) {
    std::vector<GenerationRequest> reqs;
    for (std::size_t i = start; i < std::min(specs.size(), start + group); ++i) {
      reqs.push_back({specs[i], mode, temperature, derive_seed(seed, 0x6E, i), max_length});
    }
    for (auto& s : generate_batch(model, reqs)) out.push_back(std::move(s));
  }
  return out;
}

}  // namespace klctl
