#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <string>
#include <unordered_set>
#include <vector>

#include "klctl/data.hpp"

// Independent reference implementations for the metric suite.

// Longest common subsequence by trying every subsequence of the shorter text.
inline std::size_t brute_force_lcs(const std::vector<int>& a, const std::vector<int>& b) {
  const auto& s = a.size() <= b.size() ? a : b;
  const auto& l = a.size() <= b.size() ? b : a;
  std::size_t best = 0;
  for (std::uint32_t mask = 0; mask < (1u << s.size()); ++mask) {
    std::size_t j = 0, len = 0;
    bool ok = true;
    for (std::size_t i = 0; i < s.size() && ok; ++i) {
      if (!(mask & (1u << i))) continue;
      while (j < l.size() && l[j] != s[i]) ++j;
      if (j == l.size()) ok = false;
      else {
        ++j;
        ++len;
      }
    }
    if (ok) best = std::max(best, len);
  }
  return best;
}

// BLEU written out from its definition with string-keyed n-gram tables.
inline double direct_bleu(const std::vector<int>& cand, const std::vector<std::vector<int>>& refs, std::size_t max_n) {
  if (cand.empty()) return 0.0;
  const auto key = [](const std::vector<int>& t, std::size_t i, std::size_t n) {
    std::string k;
    for (std::size_t j = 0; j < n; ++j) k += std::to_string(t[i + j]) + ",";
    return k;
  };
  double log_p = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    std::map<std::string, int> c;
    for (std::size_t i = 0; i + n <= cand.size(); ++i) ++c[key(cand, i, n)];
    int total = 0, matched = 0;
    for (const auto& [g, cnt] : c) {
      int best = 0;
      for (const auto& r : refs) {
        int rc = 0;
        for (std::size_t i = 0; i + n <= r.size(); ++i) rc += key(r, i, n) == g;
        best = std::max(best, rc);
      }
      total += cnt;
      matched += std::min(cnt, best);
    }
    // A zero match count becomes 1e-9; with no candidate n-grams at all the
    // precision itself is 1e-9.
    log_p += std::log(total == 0 ? 1e-9 : (matched == 0 ? 1e-9 : double(matched)) / total);
  }
  std::size_t r = refs[0].size();
  for (const auto& ref : refs) {
    const long d = std::labs(long(ref.size()) - long(cand.size())), e = std::labs(long(r) - long(cand.size()));
    if (d < e || (d == e && ref.size() < r)) r = ref.size();
  }
  const double bp = cand.size() > r ? 1.0 : std::exp(1.0 - double(r) / double(cand.size()));
  return bp * std::exp(log_p / double(max_n));
}

// Walks the text once, checking that labelled keywords appear in label order.
inline bool scan_order_correct(const std::vector<int>& text, const klctl::KeywordSpec& s) {
  std::map<int, int> label_of;
  int k = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.orders[i] > 0) {
      label_of[s.keywords[i]] = s.orders[i];
      ++k;
    }
  }
  int expected = 1;
  std::unordered_set<int> seen;
  for (int tok : text) {
    auto it = label_of.find(tok);
    if (it == label_of.end() || !seen.insert(tok).second) continue;
    if (it->second != expected) return false;
    ++expected;
  }
  return expected == k + 1;
}

// Distinct n-grams counted through string keys in a hash set.
inline std::size_t hash_set_dis_n(const std::vector<std::vector<int>>& corpus, std::size_t n) {
  std::unordered_set<std::string> distinct;
  for (const auto& t : corpus) {
    for (std::size_t i = 0; i + n <= t.size(); ++i) {
      std::string k;
      for (std::size_t j = 0; j < n; ++j) k += std::to_string(t[i + j]) + ",";
      distinct.insert(k);
    }
  }
  return distinct.size();
}
