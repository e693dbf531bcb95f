#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "klctl/error.hpp"
#include "klctl/rng.hpp"

namespace klctl {

enum ReservedToken : int { kPad = 0, kUnk = 1, kCls = 2, kBos = 3, kEos = 4 };

class Vocabulary {
 public:
  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  // Reserved tokens come first; `tokens` follow in the given order.
  explicit Vocabulary(const std::vector<std::string>& tokens) {
    for (const char* r : {"<pad>", "<unk>", "<cls>", "<bos>", "<eos>"}) append(r);
    for (const auto& t : tokens) {
      if (!contains(t)) append(t);
    }
  }

  // Rebuilds from a full id-ordered list (including the reserved prefix).
  static Vocabulary from_id_order(const std::vector<std::string>& all) {
    if (all.size() < 5) throw LoadError("vocabulary shorter than the reserved block");
    return Vocabulary(std::vector<std::string>(all.begin() + 5, all.end()));
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& t) const { return ids_.count(t) != 0; }

  int id(const std::string& t) const {
    auto it = ids_.find(t);
    return it == ids_.end() ? kUnk : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw InputError("token id " + std::to_string(id) + " outside vocabulary");
    return tokens_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(const std::vector<std::string>& words) const {
    std::vector<int> out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (int i : ids) {
      if (!out.empty()) out += ' ';
      out += token(i);
    }
    return out;
  }

 private:
  void append(const std::string& t) {
    ids_.emplace(t, static_cast<int>(tokens_.size()));
    tokens_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// Keywords Y_a with order labels Y_p; label 0 marks a keyword absent from the
// text, labels 1..k give the rank of first occurrence.
struct KeywordSpec {
  std::vector<int> keywords;
  std::vector<int> orders;

  std::size_t size() const { return keywords.size(); }
  bool operator==(const KeywordSpec&) const = default;
};

struct TrainingExample {
  std::vector<int> text;
  KeywordSpec spec;

  bool operator==(const TrainingExample&) const = default;
};

inline std::vector<std::string> split_words(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

// Ranks keywords by first occurrence in the reference; absent keywords get 0.
inline std::vector<int> derive_order_labels(std::span<const int> keywords, std::span<const int> reference) {
  std::set<int> seen;
  for (int k : keywords) {
    if (!seen.insert(k).second) throw InputError("duplicate keyword id " + std::to_string(k));
  }
  std::vector<std::pair<std::size_t, std::size_t>> first;  // (position, keyword index)
  for (std::size_t i = 0; i < keywords.size(); ++i) {
    auto it = std::find(reference.begin(), reference.end(), keywords[i]);
    if (it != reference.end()) first.emplace_back(static_cast<std::size_t>(it - reference.begin()), i);
  }
  std::sort(first.begin(), first.end());
  std::vector<int> labels(keywords.size(), 0);
  for (std::size_t r = 0; r < first.size(); ++r) labels[first[r].second] = static_cast<int>(r + 1);
  return labels;
}

// Nonzero labels must be exactly {1..k}.
inline bool valid_order_labels(std::span<const int> orders) {
  std::vector<int> nz;
  for (int o : orders) {
    if (o < 0) return false;
    if (o > 0) nz.push_back(o);
  }
  std::sort(nz.begin(), nz.end());
  for (std::size_t i = 0; i < nz.size(); ++i)
    if (nz[i] != static_cast<int>(i + 1)) return false;
  return true;
}

// --- synthetic grammar -----------------------------------------------------

// A keyword-eligible category: its filler words and the phrase frames that
// realize one filler ("{}" marks the slot).
struct PhraseCategory {
  std::string name;
  std::vector<std::string> fillers;
  std::vector<std::vector<std::string>> frames;
};

// Sentence frame: head (with an "{item}" slot) + joined phrases + tail.
struct SentenceTemplate {
  std::vector<std::string> head;
  std::vector<std::string> tail;
};

struct SyntheticGrammar {
  std::vector<std::string> items;
  std::vector<SentenceTemplate> templates;
  std::vector<PhraseCategory> categories;
  std::vector<std::string> connectives{",", "and"};

  // Keyword-eligible words and frame words must not overlap, otherwise order
  // labels derived from the text would pick up frame tokens.
  void validate() const {
    std::set<std::string> fillers;
    for (const auto& c : categories)
      for (const auto& f : c.fillers)
        if (!fillers.insert(f).second) throw InputError("filler '" + f + "' appears in two categories");
    auto check = [&](const std::vector<std::string>& words, const std::string& where) {
      for (const auto& w : words)
        if (fillers.count(w) != 0) throw InputError("frame word '" + w + "' in " + where + " is a keyword filler");
    };
    check(items, "items");
    check(connectives, "connectives");
    for (const auto& t : templates) {
      check(t.head, "template head");
      check(t.tail, "template tail");
    }
    for (const auto& c : categories)
      for (const auto& f : c.frames) check(f, "frame of " + c.name);
  }

  std::vector<std::string> all_tokens() const {
    std::vector<std::string> out;
    auto add = [&](const std::vector<std::string>& ws) {
      for (const auto& w : ws)
        if (w != "{}" && w != "{item}" && std::find(out.begin(), out.end(), w) == out.end()) out.push_back(w);
    };
    for (const auto& t : templates) {
      add(t.head);
      add(t.tail);
    }
    add(connectives);
    add(items);
    for (const auto& c : categories) {
      for (const auto& f : c.frames) add(f);
      add(c.fillers);
    }
    return out;
  }
};

// Product-description style grammar: 12 sentence frames, 14 items and nine
// keyword categories with three phrase frames each.
inline SyntheticGrammar default_grammar() {
  auto w = split_words;
  SyntheticGrammar g;
  g.items = w("shirt dress jacket coat sweater skirt scarf blouse hoodie vest cardigan trousers jeans shorts");
  g.templates = {
      {w("this {item} comes"), w(".")},
      {w("our {item} is"), w(".")},
      {w("the new {item} arrives"), w(".")},
      {w("a lovely {item}"), w(".")},
      {w("meet this {item} ,"), w(".")},
      {w("discover our {item}"), w(".")},
      {w("here is a {item}"), w(".")},
      {w("try this {item}"), w("today .")},
      {w("the perfect {item}"), w("for you .")},
      {w("a must have {item}"), w(".")},
      {w("enjoy this {item}"), w(".")},
      {w("everyone needs this {item}"), w(".")},
  };
  g.categories = {
      {"color", w("red blue green black white grey pink navy beige brown purple yellow"),
       {w("in {}"), w("with a {} tone"), w("dyed {}")}},
      {"material", w("cotton silk wool linen denim leather cashmere velvet satin nylon"),
       {w("made of {}"), w("crafted from {}"), w("in pure {}")}},
      {"feel", w("soft light warm breathable durable comfortable smooth cozy stretchy crisp"),
       {w("that feels {}"), w("so {} to wear"), w("with a {} touch")}},
      {"style", w("casual elegant classic modern vintage sporty minimalist chic relaxed bold"),
       {w("in a {} style"), w("with a {} look"), w("for a {} vibe")}},
      {"season", w("spring summer autumn winter"),
       {w("ideal for {}"), w("made for {} days"), w("great in {}")}},
      {"occasion", w("office party travel weekend wedding beach gym dinner"),
       {w("perfect for the {}"), w("ready for any {}"), w("suited to {} wear")}},
      {"fit", w("slim loose oversized tailored cropped regular"),
       {w("with a {} fit"), w("cut {}"), w("in a {} shape")}},
      {"pattern", w("striped floral plain checked dotted printed"),
       {w("with a {} print"), w("featuring {} details"), w("in a {} pattern")}},
      {"detail", w("pocket collar zipper hood belt lace ruffle"),
       {w("with a {}"), w("featuring a neat {}"), w("finished with a {}")}},
  };
  return g;
}

inline Vocabulary build_vocabulary(const SyntheticGrammar& g) { return Vocabulary(g.all_tokens()); }

struct CorpusOptions {
  // Number of keywords that occur in the text (uniform in [min, max]).
  std::size_t min_keywords = 2;
  std::size_t max_keywords = 3;
  // Probability that an example carries absent (label 0) distractor keywords,
  // and how many at most.
  double distractor_prob = 1.0;
  std::size_t max_distractors = 2;
  // Probability of one extra phrase whose filler is not a keyword.
  double extra_phrase_prob = 0.3;
};

// Renders one sentence: the phrases for `chosen` categories in the given
// order, joined "p1 , p2 , ... and pk".
inline std::vector<std::string> render_sentence(const SyntheticGrammar& g, std::size_t template_index,
                                                const std::string& item,
                                                const std::vector<std::vector<std::string>>& phrases) {
  const auto& t = g.templates[template_index];
  std::vector<std::string> out;
  for (const auto& h : t.head) out.push_back(h == "{item}" ? item : h);
  for (std::size_t i = 0; i < phrases.size(); ++i) {
    if (i > 0) out.push_back(i + 1 == phrases.size() ? g.connectives[1] : g.connectives[0]);
    out.insert(out.end(), phrases[i].begin(), phrases[i].end());
  }
  out.insert(out.end(), t.tail.begin(), t.tail.end());
  return out;
}

inline std::vector<TrainingExample> generate_corpus(const SyntheticGrammar& g, const Vocabulary& vocab,
                                                    std::size_t count, std::uint64_t seed,
                                                    const CorpusOptions& opt = {}) {
  g.validate();
  if (opt.min_keywords < 1 || opt.max_keywords < opt.min_keywords) throw InputError("bad keyword count range");
  const std::size_t extra_max = opt.max_keywords + 1;
  if (extra_max > g.categories.size()) throw InputError("grammar has too few categories for max_keywords");
  std::vector<std::string> all_fillers;
  for (const auto& c : g.categories) all_fillers.insert(all_fillers.end(), c.fillers.begin(), c.fillers.end());

  Rng rng(derive_seed(seed, 0xC0));
  std::vector<TrainingExample> corpus;
  corpus.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    const std::size_t k = opt.min_keywords + rng.below(opt.max_keywords - opt.min_keywords + 1);
    const bool extra = rng.bernoulli(opt.extra_phrase_prob);
    const std::size_t phrases_n = k + (extra ? 1 : 0);

    std::vector<std::size_t> cats(g.categories.size());
    for (std::size_t i = 0; i < cats.size(); ++i) cats[i] = i;
    rng.shuffle(cats.begin(), cats.end());
    cats.resize(phrases_n);
    const std::size_t extra_slot = extra ? rng.below(phrases_n) : phrases_n;

    const std::size_t template_index = rng.below(g.templates.size());
    const std::string& item = g.items[rng.below(g.items.size())];
    std::vector<std::vector<std::string>> phrases;
    std::vector<std::string> keywords;
    for (std::size_t i = 0; i < phrases_n; ++i) {
      const auto& cat = g.categories[cats[i]];
      const std::string& filler = cat.fillers[rng.below(cat.fillers.size())];
      const auto& frame = cat.frames[rng.below(cat.frames.size())];
      std::vector<std::string> ph;
      for (const auto& fw : frame) ph.push_back(fw == "{}" ? filler : fw);
      phrases.push_back(std::move(ph));
      if (i != extra_slot) keywords.push_back(filler);
    }
    const auto words = render_sentence(g, template_index, item, phrases);

    if (rng.bernoulli(opt.distractor_prob)) {
      const std::size_t nd = 1 + rng.below(opt.max_distractors);
      for (std::size_t d = 0; d < nd;) {
        const std::string& cand = all_fillers[rng.below(all_fillers.size())];
        if (std::find(words.begin(), words.end(), cand) != words.end()) continue;
        if (std::find(keywords.begin(), keywords.end(), cand) != keywords.end()) continue;
        keywords.push_back(cand);
        ++d;
      }
    }
    rng.shuffle(keywords.begin(), keywords.end());

    TrainingExample ex;
    ex.text = vocab.encode(words);
    ex.spec.keywords = vocab.encode(keywords);
    ex.spec.orders = derive_order_labels(ex.spec.keywords, ex.text);
    corpus.push_back(std::move(ex));
  }
  return corpus;
}

// --- batching ----------------------------------------------------------------

// Row-major padded batch. Text rows are `text_len` wide, keyword rows
// `keyword_len` wide; masks are 1 on real entries.
struct Batch {
  std::size_t size = 0;
  std::size_t text_len = 0;
  std::size_t keyword_len = 0;
  std::vector<int> tokens;
  std::vector<std::uint8_t> token_mask;
  std::vector<int> keywords;
  std::vector<int> orders;
  std::vector<std::uint8_t> keyword_mask;
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> keyword_counts;
};

inline Batch make_batch(std::span<const TrainingExample> examples, std::size_t n_max) {
  if (examples.empty()) throw InputError("empty batch");
  Batch b;
  b.size = examples.size();
  for (const auto& ex : examples) {
    if (ex.text.size() > n_max) {
      throw InputError("example of length " + std::to_string(ex.text.size()) + " exceeds n_max " + std::to_string(n_max));
    }
    if (ex.spec.keywords.size() != ex.spec.orders.size()) throw InputError("keyword/order length mismatch");
    b.text_len = std::max(b.text_len, ex.text.size());
    b.keyword_len = std::max(b.keyword_len, ex.spec.keywords.size());
  }
  b.tokens.assign(b.size * b.text_len, kPad);
  b.token_mask.assign(b.size * b.text_len, 0);
  b.keywords.assign(b.size * b.keyword_len, kPad);
  b.orders.assign(b.size * b.keyword_len, 0);
  b.keyword_mask.assign(b.size * b.keyword_len, 0);
  for (std::size_t i = 0; i < b.size; ++i) {
    const auto& ex = examples[i];
    b.lengths.push_back(ex.text.size());
    b.keyword_counts.push_back(ex.spec.keywords.size());
    for (std::size_t t = 0; t < ex.text.size(); ++t) {
      b.tokens[i * b.text_len + t] = ex.text[t];
      b.token_mask[i * b.text_len + t] = 1;
    }
    for (std::size_t j = 0; j < ex.spec.keywords.size(); ++j) {
      b.keywords[i * b.keyword_len + j] = ex.spec.keywords[j];
      b.orders[i * b.keyword_len + j] = ex.spec.orders[j];
      b.keyword_mask[i * b.keyword_len + j] = 1;
    }
  }
  return b;
}

inline std::vector<Batch> batchify(std::span<const TrainingExample> examples, std::size_t batch_size,
                                   std::size_t n_max) {
  if (batch_size < 1) throw InputError("batch size must be >= 1");
  std::vector<Batch> out;
  for (std::size_t i = 0; i < examples.size(); i += batch_size) {
    out.push_back(make_batch(examples.subspan(i, std::min(batch_size, examples.size() - i)), n_max));
  }
  return out;
}

// Inverse of make_batch: strips padding.
inline std::vector<TrainingExample> unbatch(const Batch& b) {
  std::vector<TrainingExample> out(b.size);
  for (std::size_t i = 0; i < b.size; ++i) {
    for (std::size_t t = 0; t < b.text_len; ++t)
      if (b.token_mask[i * b.text_len + t]) out[i].text.push_back(b.tokens[i * b.text_len + t]);
    for (std::size_t j = 0; j < b.keyword_len; ++j) {
      if (!b.keyword_mask[i * b.keyword_len + j]) continue;
      out[i].spec.keywords.push_back(b.keywords[i * b.keyword_len + j]);
      out[i].spec.orders.push_back(b.orders[i * b.keyword_len + j]);
    }
  }
  return out;
}

struct CorpusSplit {
  std::vector<TrainingExample> train, validation, test;
};

// Contiguous partition; split sizes are rounded and the test split takes the remainder.
inline CorpusSplit split_corpus(const std::vector<TrainingExample>& examples, std::array<double, 3> fractions) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0) || !std::isfinite(f)) throw InputError("split fractions must be finite and non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InputError("split fractions must sum to 1");
  if (fractions[0] <= 0.0) throw InputError("training fraction must be positive");
  const auto n = examples.size();
  const auto n_train = std::min(n, static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n))));
  const auto n_valid =
      std::min(n - n_train, static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n))));
  CorpusSplit s;
  s.train.assign(examples.begin(), examples.begin() + n_train);
  s.validation.assign(examples.begin() + n_train, examples.begin() + n_train + n_valid);
  s.test.assign(examples.begin() + n_train + n_valid, examples.end());
  return s;
}

// --- file formats --------------------------------------------------------------
//
// Corpus: one example per line, "<text tokens>\t<kw>:<order> <kw>:<order> ...".
// Spec files use the keyword column alone; a line holding a tab is read from
// the text after the last tab, so corpus files double as spec files.

inline std::string format_spec(const KeywordSpec& s, const Vocabulary& v) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i > 0) out += ' ';
    out += v.token(s.keywords[i]) + ":" + std::to_string(s.orders[i]);
  }
  return out;
}

inline std::string format_example(const TrainingExample& ex, const Vocabulary& v) {
  return v.decode(ex.text) + "\t" + format_spec(ex.spec, v);
}

inline KeywordSpec parse_spec(const std::string& line, const Vocabulary& v) {
  const auto tab = line.rfind('\t');
  const std::string body = tab == std::string::npos ? line : line.substr(tab + 1);
  KeywordSpec s;
  for (const auto& pair : split_words(body)) {
    const auto colon = pair.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == pair.size()) {
      throw InputError("expected keyword:order, got '" + pair + "'");
    }
    const std::string word = pair.substr(0, colon);
    const std::string ord = pair.substr(colon + 1);
    if (!std::all_of(ord.begin(), ord.end(), [](char c) { return c >= '0' && c <= '9'; }) || ord.size() > 6) {
      throw InputError("bad order label '" + ord + "'");
    }
    if (!v.contains(word) || v.id(word) < 5) throw InputError("unknown keyword '" + word + "'");
    s.keywords.push_back(v.id(word));
    s.orders.push_back(std::stoi(ord));
  }
  if (s.keywords.empty()) throw InputError("no keywords");
  if (!valid_order_labels(s.orders)) throw InputError("order labels must be 0 or a permutation of 1..k");
  std::set<int> distinct(s.keywords.begin(), s.keywords.end());
  if (distinct.size() != s.keywords.size()) throw InputError("duplicate keyword");
  return s;
}

inline TrainingExample parse_example(const std::string& line, const Vocabulary& v) {
  const auto tab = line.find('\t');
  if (tab == std::string::npos) throw InputError("missing tab separator");
  TrainingExample ex;
  const auto words = split_words(line.substr(0, tab));
  for (const auto& w : words)
    if (!v.contains(w)) throw InputError("unknown token '" + w + "'");
  ex.text = v.encode(words);
  ex.spec = parse_spec(line.substr(tab + 1), v);
  return ex;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

// Parse failures carry the 1-based line number.
inline std::vector<TrainingExample> read_corpus(const std::string& path, const Vocabulary& v) {
  std::vector<TrainingExample> out;
  std::size_t n = 0;
  for (const auto& line : read_lines(path)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(parse_example(line, v));
    } catch (const InputError& e) {
      throw InputError(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<KeywordSpec> read_specs(const std::string& path, const Vocabulary& v) {
  std::vector<KeywordSpec> out;
  std::size_t n = 0;
  for (const auto& line : read_lines(path)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(parse_spec(line, v));
    } catch (const InputError& e) {
      throw InputError(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline void write_corpus(const std::string& path, const std::vector<TrainingExample>& corpus, const Vocabulary& v) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  for (const auto& ex : corpus) out << format_example(ex, v) << '\n';
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

}  // namespace klctl
