#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "klctl/klctl.hpp"

namespace fs = std::filesystem;
using namespace klctl;

namespace {

// Bad flags or configuration: exit code 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;

  RunConfig load() const {
    try {
      RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
      for (const auto& o : overrides) apply_override(cfg, o);
      cfg.validate();
      return cfg;
    } catch (const InputError& e) {
      throw UsageError(e.what());
    }
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "key = value configuration file");
  cmd->add_option("--set", c.overrides, "override one config key (key=value); repeatable");
}

std::string sig6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write '" + path + "'");
  out << text;
  if (!out) throw LoadError("write to '" + path + "' failed");
}

Vocabulary grammar_vocabulary() { return build_vocabulary(default_grammar()); }

std::string corpus_summary(const std::vector<TrainingExample>& corpus) {
  double len = 0.0, kw = 0.0;
  for (const auto& ex : corpus) {
    len += static_cast<double>(ex.text.size());
    kw += static_cast<double>(ex.spec.keywords.size());
  }
  const double n = corpus.empty() ? 1.0 : static_cast<double>(corpus.size());
  return "count = " + std::to_string(corpus.size()) + "\nmean_length = " + sig6(len / n) +
         "\nmean_keyword_count = " + sig6(kw / n) + "\n";
}

int cmd_make_corpus(const Common& common, const std::string& out, const std::string& split_dir) {
  const RunConfig cfg = common.load();
  const auto grammar = default_grammar();
  const auto vocab = build_vocabulary(grammar);
  const auto corpus = generate_corpus(grammar, vocab, cfg.corpus.count, cfg.corpus.seed, cfg.corpus.options);
  write_corpus(out, corpus, vocab);
  if (!split_dir.empty()) {
    fs::create_directories(split_dir);
    const double test = 1.0 - cfg.corpus.train_fraction - cfg.corpus.valid_fraction;
    const auto split = split_corpus(corpus, {cfg.corpus.train_fraction, cfg.corpus.valid_fraction, std::max(0.0, test)});
    write_corpus((fs::path(split_dir) / "train.tsv").string(), split.train, vocab);
    write_corpus((fs::path(split_dir) / "valid.tsv").string(), split.validation, vocab);
    write_corpus((fs::path(split_dir) / "test.tsv").string(), split.test, vocab);
  }
  std::cout << corpus_summary(corpus);
  return 0;
}

// Keeps trace rows up to `step` so a resumed run continues a clean file.
void truncate_trace(const std::string& path, std::uint64_t step) {
  std::string text = std::string(kTraceHeader) + "\n";
  if (fs::exists(path)) {
    for (const auto& r : read_trace(path))
      if (r.step <= step) text += format_trace_row(r) + "\n";
  }
  write_text(path, text);
}

int cmd_train(const Common& common, const std::string& corpus_path, const std::string& out_dir,
              std::optional<std::uint64_t> seed, const std::string& resume) {
  std::optional<Checkpoint> ckpt;
  RunConfig cfg;
  if (!resume.empty()) {
    ckpt = load_checkpoint(resume);
    cfg = checkpoint_config(*ckpt);
    try {
      for (const auto& o : common.overrides) apply_override(cfg, o);
      cfg.validate();
    } catch (const InputError& e) {
      throw UsageError(e.what());
    }
    if (seed && *seed != cfg.train.seed) throw UsageError("--seed differs from the checkpoint's train.seed");
  } else {
    if (!seed) throw UsageError("train requires --seed");
    cfg = common.load();
    cfg.train.seed = *seed;
  }
  const Vocabulary vocab = ckpt ? Vocabulary::from_id_order(ckpt->vocabulary) : grammar_vocabulary();
  auto corpus = read_corpus(corpus_path, vocab);
  if (corpus.empty()) throw InputError("corpus '" + corpus_path + "' is empty");

  fs::create_directories(out_dir);
  const std::string trace_path = (fs::path(out_dir) / "trace.csv").string();
  const std::string ckpt_path = (fs::path(out_dir) / "checkpoint.bin").string();
  write_text((fs::path(out_dir) / "config.txt").string(), cfg.to_text());

  Trainer trainer(cfg.train_config(vocab.size()), std::move(corpus));
  if (ckpt) {
    restore_trainer(trainer, *ckpt);
    truncate_trace(trace_path, ckpt->step);
  }
  TraceWriter writer(trace_path, ckpt.has_value());
  const auto save = [&](const Trainer& t) { save_checkpoint(ckpt_path, capture_checkpoint(t, cfg, vocab)); };
  const auto trace = train(trainer, [&](const TraceRecord& r) { writer.write(r); }, cfg.checkpoint_interval, save);
  std::cout << "steps = " << trainer.step() << "\n";
  if (!trace.empty()) std::cout << "final_phase_kl = " << sig6(final_phase_mean_kl(read_trace(trace_path))) << "\n";
  std::cout << "checkpoint = " << ckpt_path << "\ntrace = " << trace_path << "\n";
  return 0;
}

int cmd_calibrate(const Common& common, const std::string& corpus_path, std::optional<std::uint64_t> seed,
                  const std::string& trace_path) {
  RunConfig cfg = common.load();
  if (seed) cfg.train.seed = *seed;
  const Vocabulary vocab = grammar_vocabulary();
  const auto corpus = read_corpus(corpus_path, vocab);
  if (corpus.empty()) throw InputError("corpus '" + corpus_path + "' is empty");
  std::vector<TraceRecord> last_trace;
  const TrainingRun run = [&](const TrainConfig& tc) {
    Trainer t(tc, corpus);
    last_trace = t.run();
    return last_trace;
  };
  const CalibrationResult res = calibrate_setpoint(cfg.train_config(vocab.size()), run, cfg.calibrate);
  if (!trace_path.empty()) {
    TraceWriter w(trace_path, false);
    for (const auto& r : last_trace) w.write(r);
  }
  for (std::size_t i = 0; i < res.attempts.size(); ++i) {
    std::cout << "attempt_" << i + 1 << " = weight " << format_exact(res.attempts[i].weight) << " kl "
              << format_exact(res.attempts[i].final_kl) << "\n";
  }
  std::cout << "weight = " << format_exact(res.weight) << "\nsetpoint = " << format_exact(res.setpoint) << "\n";
  return 0;
}

int cmd_generate(const Common& common, const std::string& ckpt_path, const std::string& specs_path,
                 std::optional<std::uint64_t> seed, const std::string& out) {
  if (!seed) throw UsageError("generate requires --seed");
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  RunConfig cfg = checkpoint_config(ckpt);
  try {
    for (const auto& o : common.overrides) apply_override(cfg, o);
    cfg.validate();
  } catch (const InputError& e) {
    throw UsageError(e.what());
  }
  const Vocabulary vocab = Vocabulary::from_id_order(ckpt.vocabulary);
  const auto specs = read_specs(specs_path, vocab);
  TrainConfig tc = cfg.train_config(vocab.size());
  Cvae<float> model(tc.model, tc.seed);
  restore_parameters(model, ckpt);
  const auto gens = generate_all(model, specs, *seed, cfg.generate.decode_mode(), cfg.generate.temperature,
                                 cfg.generate.max_length);
  std::string text;
  for (const auto& g : gens) text += vocab.decode(g) + "\n";
  write_text(out, text);
  std::cout << "generated = " << gens.size() << "\n";
  return 0;
}

// Text column of a corpus line, or the whole line.
std::string text_column(const std::string& line) {
  const auto tab = line.find('\t');
  return tab == std::string::npos ? line : line.substr(0, tab);
}

int cmd_evaluate(const Common& common, const std::string& gen_path, const std::string& ref_path,
                 const std::string& spec_path, const std::string& out, bool strict_flag) {
  const RunConfig cfg = common.load();
  const bool strict = strict_flag || cfg.strict_order;
  auto gen_lines = read_lines(gen_path);
  auto ref_lines = read_lines(ref_path);
  auto spec_lines = read_lines(spec_path);
  for (auto* lines : {&gen_lines, &ref_lines, &spec_lines})
    while (!lines->empty() && lines->back().empty()) lines->pop_back();
  if (gen_lines.size() != ref_lines.size() || gen_lines.size() != spec_lines.size()) {
    throw InputError("line counts differ: " + std::to_string(gen_lines.size()) + " generations, " +
                     std::to_string(ref_lines.size()) + " references, " + std::to_string(spec_lines.size()) + " specs");
  }
  if (gen_lines.empty()) throw InputError("nothing to evaluate");

  // Words are interned over all three files, so evaluation needs no model.
  std::set<std::string> words;
  for (const auto& l : gen_lines)
    for (auto& w : split_words(l)) words.insert(w);
  for (const auto& l : ref_lines)
    for (auto& w : split_words(text_column(l))) words.insert(w);
  for (const auto& l : spec_lines) {
    const auto tab = l.rfind('\t');
    for (const auto& pair : split_words(tab == std::string::npos ? l : l.substr(tab + 1))) {
      const auto colon = pair.rfind(':');
      if (colon != std::string::npos) words.insert(pair.substr(0, colon));
    }
  }
  const Vocabulary vocab(std::vector<std::string>(words.begin(), words.end()));

  std::vector<std::vector<int>> gens, refs;
  std::vector<KeywordSpec> specs;
  for (std::size_t i = 0; i < gen_lines.size(); ++i) {
    gens.push_back(vocab.encode(split_words(gen_lines[i])));
    refs.push_back(vocab.encode(split_words(text_column(ref_lines[i]))));
    if (refs.back().empty()) throw InputError(ref_path + ":" + std::to_string(i + 1) + ": empty reference");
    try {
      specs.push_back(parse_spec(spec_lines[i], vocab));
    } catch (const InputError& e) {
      throw InputError(spec_path + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  const MetricsReport m = evaluate_generations(gens, refs, specs, strict);
  const std::string report = format_report(m);
  if (!out.empty()) write_text(out, report);
  std::cout << report;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"klctl: keyword-conditioned CVAE with PI-controlled KL"};
  app.require_subcommand(1);

  Common common;
  std::string out, corpus_path, split_dir, out_dir, resume, trace_path, ckpt_path, specs_path, gen_path, ref_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> count;
  bool strict = false;

  auto* mk = app.add_subcommand("make-corpus", "generate a synthetic corpus");
  add_common(mk, common);
  mk->add_option("--out", out, "corpus file to write")->required();
  mk->add_option("--count", count, "number of examples (corpus.count)");
  mk->add_option("--seed", seed, "corpus seed (corpus.seed)");
  mk->add_option("--split-dir", split_dir, "also write train/valid/test splits here");

  auto* tr = app.add_subcommand("train", "train a model; writes trace.csv and checkpoint.bin");
  add_common(tr, common);
  tr->add_option("--corpus", corpus_path, "training corpus")->required();
  tr->add_option("--out", out_dir, "output directory")->required();
  tr->add_option("--seed", seed, "training seed (required unless resuming)");
  tr->add_option("--resume", resume, "checkpoint to continue from");

  auto* cal = app.add_subcommand("calibrate", "find a KL set point from constant-weight runs");
  add_common(cal, common);
  cal->add_option("--corpus", corpus_path, "training corpus")->required();
  cal->add_option("--seed", seed, "training seed");
  cal->add_option("--trace", trace_path, "write the accepted run's trace here");

  auto* gen = app.add_subcommand("generate", "generate one text per keyword spec");
  add_common(gen, common);
  gen->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
  gen->add_option("--specs", specs_path, "spec file (keyword:order per token; corpus lines accepted)")->required();
  gen->add_option("--seed", seed, "generation seed");
  gen->add_option("--out", out, "output file")->required();

  auto* ev = app.add_subcommand("evaluate", "score generations against references and specs");
  add_common(ev, common);
  ev->add_option("--generations", gen_path, "one generation per line")->required();
  ev->add_option("--references", ref_path, "reference texts (corpus lines accepted)")->required();
  ev->add_option("--specs", specs_path, "keyword specs (corpus lines accepted)")->required();
  ev->add_option("--out", out, "report file");
  ev->add_flag("--strict-order", strict, "count emitted label-0 keywords as order failures");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (mk->parsed()) {
      if (count) common.overrides.push_back("corpus.count=" + std::to_string(*count));
      if (seed) common.overrides.push_back("corpus.seed=" + std::to_string(*seed));
      if (count && *count == 0) throw UsageError("--count must be at least 1");
      return cmd_make_corpus(common, out, split_dir);
    }
    if (tr->parsed()) return cmd_train(common, corpus_path, out_dir, seed, resume);
    if (cal->parsed()) return cmd_calibrate(common, corpus_path, seed, trace_path);
    if (gen->parsed()) return cmd_generate(common, ckpt_path, specs_path, seed, out);
    if (ev->parsed()) return cmd_evaluate(common, gen_path, ref_path, specs_path, out, strict);
  } catch (const UsageError& e) {
    std::cerr << "klctl: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "klctl: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
