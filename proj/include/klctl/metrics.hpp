#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "klctl/data.hpp"
#include "klctl/error.hpp"

namespace klctl {

template <class Token>
using NgramCounts = std::map<std::vector<Token>, std::size_t>;

template <class Token>
NgramCounts<Token> count_ngrams(std::span<const Token> text, std::size_t n) {
  NgramCounts<Token> counts;
  if (n == 0 || text.size() < n) return counts;
  for (std::size_t i = 0; i + n <= text.size(); ++i) ++counts[std::vector<Token>(text.begin() + i, text.begin() + i + n)];
  return counts;
}

// Number of distinct n-grams across the whole corpus.
template <class Token>
std::size_t dis_n(const std::vector<std::vector<Token>>& corpus, std::size_t n) {
  if (n < 1) throw InputError("dis_n: n must be >= 1");
  std::set<std::vector<Token>> seen;
  for (const auto& text : corpus)
    for (std::size_t i = 0; i + n <= text.size(); ++i) seen.emplace(text.begin() + i, text.begin() + i + n);
  return seen.size();
}

inline constexpr double kBleuSmoothing = 1e-9;

// Cumulative BLEU-max_n with uniform weights: geometric mean of clipped n-gram
// precisions (a zero match count is replaced by `smoothing`) times the brevity
// penalty against the closest reference length.
template <class Token>
double bleu(const std::vector<Token>& candidate, const std::vector<std::vector<Token>>& references, std::size_t max_n,
            double smoothing = kBleuSmoothing) {
  if (max_n < 1) throw InputError("bleu: max_n must be >= 1");
  if (references.empty()) throw InputError("bleu: no references");
  if (candidate.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    const auto cand = count_ngrams<Token>(candidate, n);
    NgramCounts<Token> max_ref;
    for (const auto& ref : references) {
      for (const auto& [gram, c] : count_ngrams<Token>(ref, n)) {
        if (cand.count(gram) == 0) continue;
        auto& m = max_ref[gram];
        m = std::max(m, c);
      }
    }
    std::size_t total = 0, clipped = 0;
    for (const auto& [gram, c] : cand) {
      total += c;
      auto it = max_ref.find(gram);
      if (it != max_ref.end()) clipped += std::min(c, it->second);
    }
    const double precision = total == 0 ? smoothing
                                        : (clipped == 0 ? smoothing : static_cast<double>(clipped)) / static_cast<double>(total);
    log_sum += std::log(precision);
  }
  const double c = static_cast<double>(candidate.size());
  double r = static_cast<double>(references.front().size());
  for (const auto& ref : references) {
    const double len = static_cast<double>(ref.size());
    if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) r = len;
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

// Mean BLEU of every text against all the others.
template <class Token>
double self_bleu(const std::vector<std::vector<Token>>& corpus, std::size_t max_n) {
  if (corpus.size() < 2) throw InputError("self_bleu needs at least two texts");
  double total = 0.0;
  std::vector<std::vector<Token>> others;
  others.reserve(corpus.size() - 1);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    others.clear();
    for (std::size_t j = 0; j < corpus.size(); ++j)
      if (j != i) others.push_back(corpus[j]);
    total += bleu(corpus[i], others, max_n);
  }
  return total / static_cast<double>(corpus.size());
}

template <class Token>
std::size_t lcs_length(const std::vector<Token>& a, const std::vector<Token>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// LCS-based F1 between candidate and reference.
template <class Token>
double rouge_l(const std::vector<Token>& candidate, const std::vector<Token>& reference) {
  if (reference.empty()) throw InputError("rouge_l: empty reference");
  if (candidate.empty()) return 0.0;
  const double l = static_cast<double>(lcs_length(candidate, reference));
  if (l == 0.0) return 0.0;
  const double p = l / static_cast<double>(candidate.size());
  const double r = l / static_cast<double>(reference.size());
  return 2.0 * p * r / (p + r);
}

// True when every keyword with a nonzero label occurs and their first
// occurrences appear in label order. Label-0 keywords are ignored, unless
// `strict`, in which case their appearance is a failure.
template <class Token>
bool order_correct(const std::vector<Token>& text, const std::vector<Token>& keywords, std::span<const int> orders,
                   bool strict = false) {
  std::vector<std::pair<int, std::size_t>> ranked;  // (label, first position)
  for (std::size_t i = 0; i < keywords.size(); ++i) {
    auto it = std::find(text.begin(), text.end(), keywords[i]);
    if (orders[i] == 0) {
      if (strict && it != text.end()) return false;
      continue;
    }
    if (it == text.end()) return false;
    ranked.emplace_back(orders[i], static_cast<std::size_t>(it - text.begin()));
  }
  std::sort(ranked.begin(), ranked.end());
  for (std::size_t i = 1; i < ranked.size(); ++i)
    if (ranked[i - 1].second >= ranked[i].second) return false;
  return true;
}

inline double order_accuracy(const std::vector<std::vector<int>>& generations, const std::vector<KeywordSpec>& specs,
                             bool strict = false) {
  if (generations.empty()) throw InputError("order_accuracy: nothing to score");
  if (generations.size() != specs.size()) throw InputError("order_accuracy: generations and specs differ in count");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < generations.size(); ++i)
    if (order_correct(generations[i], specs[i].keywords, specs[i].orders, strict)) ++ok;
  return static_cast<double>(ok) / static_cast<double>(generations.size());
}

struct MetricsReport {
  std::size_t dis_1 = 0, dis_2 = 0, dis_3 = 0;
  double self_bleu_1 = 0.0, self_bleu_2 = 0.0, self_bleu_3 = 0.0;
  double rouge_l = 0.0;
  double order_accuracy = 0.0;
};

// Corpus-level suite; ROUGE-L is averaged over aligned (generation, reference) pairs.
inline MetricsReport evaluate_generations(const std::vector<std::vector<int>>& generations,
                                          const std::vector<std::vector<int>>& references,
                                          const std::vector<KeywordSpec>& specs, bool strict = false) {
  if (generations.size() != references.size() || generations.size() != specs.size()) {
    throw InputError("generations, references and specs must align line for line");
  }
  if (generations.empty()) throw InputError("nothing to evaluate");
  MetricsReport m;
  m.dis_1 = dis_n(generations, 1);
  m.dis_2 = dis_n(generations, 2);
  m.dis_3 = dis_n(generations, 3);
  if (generations.size() >= 2) {
    m.self_bleu_1 = self_bleu(generations, 1);
    m.self_bleu_2 = self_bleu(generations, 2);
    m.self_bleu_3 = self_bleu(generations, 3);
  }
  double r = 0.0;
  for (std::size_t i = 0; i < generations.size(); ++i) r += rouge_l(generations[i], references[i]);
  m.rouge_l = r / static_cast<double>(generations.size());
  m.order_accuracy = order_accuracy(generations, specs, strict);
  return m;
}

// One `key = value` line per metric; reals carry 6 significant digits.
inline std::string format_report(const MetricsReport& m) {
  const auto real = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return std::string(buf);
  };
  std::string out;
  out += "dis_1 = " + std::to_string(m.dis_1) + "\n";
  out += "dis_2 = " + std::to_string(m.dis_2) + "\n";
  out += "dis_3 = " + std::to_string(m.dis_3) + "\n";
  out += "self_bleu_1 = " + real(m.self_bleu_1) + "\n";
  out += "self_bleu_2 = " + real(m.self_bleu_2) + "\n";
  out += "self_bleu_3 = " + real(m.self_bleu_3) + "\n";
  out += "rouge_l = " + real(m.rouge_l) + "\n";
  out += "order_accuracy = " + real(m.order_accuracy) + "\n";
  return out;
}

}  // namespace klctl
