#pragma once

#include <charconv>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "klctl/control.hpp"
#include "klctl/data.hpp"
#include "klctl/error.hpp"
#include "klctl/generate.hpp"
#include "klctl/trainer.hpp"

namespace klctl {

struct CorpusSettings {
  std::size_t count = 2000;
  std::uint64_t seed = 7;
  CorpusOptions options;
  double train_fraction = 0.8;
  double valid_fraction = 0.1;
};

// Parameters for every scheduler; `kind` picks the one in use.
struct SchedulerSettings {
  std::string kind = "pi";
  PIConfig pi;
  CostAnneal cost;
  CyclicalAnneal cyclical;
  ConstantWeight constant;

  // A cyclical total of 0 spans the whole run.
  SchedulerKind resolve(std::uint64_t run_steps) const {
    if (kind == "pi") return pi;
    if (kind == "cost") return cost;
    if (kind == "cyclical") {
      CyclicalAnneal c = cyclical;
      if (c.total == 0) c.total = run_steps;
      return c;
    }
    if (kind == "constant") return constant;
    throw InputError("unknown scheduler kind '" + kind + "' (expected pi, cost, cyclical or constant)");
  }
};

struct GenerateSettings {
  std::string mode = "greedy";
  double temperature = 1.0;
  std::size_t max_length = 100;

  DecodeMode decode_mode() const {
    if (mode == "greedy") return DecodeMode::Greedy;
    if (mode == "temperature") return DecodeMode::Temperature;
    throw InputError("unknown decode mode '" + mode + "' (expected greedy or temperature)");
  }
};

// Everything a command can be configured with. Defaults are the desk-scale
// setup the acceptance runs use.
struct RunConfig {
  CorpusSettings corpus;
  TrainConfig train = desk_train_config();
  SchedulerSettings scheduler = desk_scheduler();
  CalibrationOptions calibrate;
  GenerateSettings generate;
  bool strict_order = false;
  std::uint64_t checkpoint_interval = 0;

  static TrainConfig desk_train_config() {
    TrainConfig t;
    t.model.width = 32;
    t.model.ffn_width = 64;
    t.model.heads = 4;
    t.model.latent_dim = 16;
    t.model.n_max = 100;
    t.model.m_max = 16;
    t.model.dropout = 0.1;
    t.adam.learning_rate = 2e-3;
    t.total_steps = 4000;
    t.batch_size = 32;
    return t;
  }

  static SchedulerSettings desk_scheduler() {
    SchedulerSettings s;
    s.pi.setpoint = 1.0;
    s.pi.kp = -0.01;
    s.pi.ki = -0.003;
    s.cost = {1000.0, 100.0};
    s.cyclical = {0, 5, 0.5};
    return s;
  }

  // Trainer settings with the scheduler resolved and vocab size filled in.
  TrainConfig train_config(std::size_t vocab_size) const {
    TrainConfig t = train;
    t.model.vocab_size = vocab_size;
    t.scheduler = scheduler.resolve(t.total_steps);
    return t;
  }

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  std::string to_text() const {
    std::string out;
    for (const auto& k : keys()) out += k + " = " + get(k) + "\n";
    return out;
  }

  void validate() const {
    if (corpus.count < 1) throw InputError("corpus.count must be >= 1");
    if (!(corpus.train_fraction > 0.0) || corpus.valid_fraction < 0.0 || corpus.train_fraction + corpus.valid_fraction > 1.0) {
      throw InputError("corpus split fractions must be non-negative and sum to at most 1");
    }
    train_config(kEos + 1).validate();
    KlScheduler check(scheduler.resolve(train.total_steps), train.kl_smoothing);
    (void)generate.decode_mode();
    if (generate.mode == "temperature" && !(generate.temperature > 0.0)) throw InputError("generate.temperature must be positive");
    if (generate.max_length < 1 || generate.max_length > train.model.n_max) {
      throw InputError("generate.max_length must lie in [1, model.n_max]");
    }
  }
};

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class Int>
Int parse_uint(const std::string& key, const std::string& v) {
  Int out{};
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
    throw InputError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
    throw InputError("'" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw InputError("'" + key + "' expects true or false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_uint<std::size_t>(key, trim(item)));
  return out;
}

inline std::string format_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string& key, const std::string&)> set;
};

inline Field uint_field(std::function<std::uint64_t&(RunConfig&)> ref) {
  return {[ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
          [ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_uint<std::uint64_t>(k, v); }};
}

inline Field size_field(std::function<std::size_t&(RunConfig&)> ref) {
  return {[ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
          [ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_uint<std::size_t>(k, v); }};
}

inline Field double_field(std::function<double&(RunConfig&)> ref) {
  return {[ref](const RunConfig& c) { return format_exact(ref(const_cast<RunConfig&>(c))); },
          [ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_double(k, v); }};
}

inline Field bool_field(std::function<bool&(RunConfig&)> ref) {
  return {[ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_bool(k, v); }};
}

inline Field string_field(std::function<std::string&(RunConfig&)> ref) {
  return {[ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)); },
          [ref](RunConfig& c, const std::string&, const std::string& v) { ref(c) = v; }};
}

inline const std::vector<std::pair<std::string, Field>>& registry() {
  static const std::vector<std::pair<std::string, Field>> fields = [] {
    std::vector<std::pair<std::string, Field>> f;
    f.emplace_back("corpus.count", size_field([](RunConfig& c) -> std::size_t& { return c.corpus.count; }));
    f.emplace_back("corpus.seed", uint_field([](RunConfig& c) -> std::uint64_t& { return c.corpus.seed; }));
    f.emplace_back("corpus.min_keywords", size_field([](RunConfig& c) -> std::size_t& { return c.corpus.options.min_keywords; }));
    f.emplace_back("corpus.max_keywords", size_field([](RunConfig& c) -> std::size_t& { return c.corpus.options.max_keywords; }));
    f.emplace_back("corpus.distractor_prob", double_field([](RunConfig& c) -> double& { return c.corpus.options.distractor_prob; }));
    f.emplace_back("corpus.max_distractors", size_field([](RunConfig& c) -> std::size_t& { return c.corpus.options.max_distractors; }));
    f.emplace_back("corpus.extra_phrase_prob", double_field([](RunConfig& c) -> double& { return c.corpus.options.extra_phrase_prob; }));
    f.emplace_back("corpus.train_fraction", double_field([](RunConfig& c) -> double& { return c.corpus.train_fraction; }));
    f.emplace_back("corpus.valid_fraction", double_field([](RunConfig& c) -> double& { return c.corpus.valid_fraction; }));

    f.emplace_back("model.width", size_field([](RunConfig& c) -> std::size_t& { return c.train.model.width; }));
    f.emplace_back("model.ffn_width", size_field([](RunConfig& c) -> std::size_t& { return c.train.model.ffn_width; }));
    f.emplace_back("model.encoder_layers", size_field([](RunConfig& c) -> std::size_t& { return c.train.model.encoder_layers; }));
    f.emplace_back("model.decoder_layers", size_field([](RunConfig& c) -> std::size_t& { return c.train.model.decoder_layers; }));
    f.emplace_back("model.heads", size_field([](RunConfig& c) -> std::size_t& { return c.train.model.heads; }));
    f.emplace_back("model.latent_dim", size_field([](RunConfig& c) -> std::size_t& { return c.train.model.latent_dim; }));
    f.emplace_back("model.fc_hidden",
                   Field{[](const RunConfig& c) { return format_list(c.train.model.fc_hidden); },
                         [](RunConfig& c, const std::string& k, const std::string& v) { c.train.model.fc_hidden = parse_list(k, v); }});
    f.emplace_back("model.n_max", size_field([](RunConfig& c) -> std::size_t& { return c.train.model.n_max; }));
    f.emplace_back("model.m_max", size_field([](RunConfig& c) -> std::size_t& { return c.train.model.m_max; }));
    f.emplace_back("model.prior",
                   Field{[](const RunConfig& c) {
                           return std::string(c.train.model.prior == PriorKind::Conditional ? "conditional" : "standard_normal");
                         },
                         [](RunConfig& c, const std::string& k, const std::string& v) {
                           if (v == "conditional") c.train.model.prior = PriorKind::Conditional;
                           else if (v == "standard_normal") c.train.model.prior = PriorKind::StandardNormal;
                           else throw InputError("'" + k + "' expects conditional or standard_normal, got '" + v + "'");
                         }});
    f.emplace_back("model.tie_output", bool_field([](RunConfig& c) -> bool& { return c.train.model.tie_output; }));
    f.emplace_back("model.dropout", double_field([](RunConfig& c) -> double& { return c.train.model.dropout; }));

    f.emplace_back("train.seed", uint_field([](RunConfig& c) -> std::uint64_t& { return c.train.seed; }));
    f.emplace_back("train.steps", uint_field([](RunConfig& c) -> std::uint64_t& { return c.train.total_steps; }));
    f.emplace_back("train.batch_size", size_field([](RunConfig& c) -> std::size_t& { return c.train.batch_size; }));
    f.emplace_back("train.learning_rate", double_field([](RunConfig& c) -> double& { return c.train.adam.learning_rate; }));
    f.emplace_back("train.beta1", double_field([](RunConfig& c) -> double& { return c.train.adam.beta1; }));
    f.emplace_back("train.beta2", double_field([](RunConfig& c) -> double& { return c.train.adam.beta2; }));
    f.emplace_back("train.adam_eps", double_field([](RunConfig& c) -> double& { return c.train.adam.epsilon; }));
    f.emplace_back("train.decay_factor", double_field([](RunConfig& c) -> double& { return c.train.adam.decay_factor; }));
    f.emplace_back("train.decay_interval", uint_field([](RunConfig& c) -> std::uint64_t& { return c.train.adam.decay_interval; }));
    f.emplace_back("train.grad_clip", double_field([](RunConfig& c) -> double& { return c.train.grad_clip; }));
    f.emplace_back("train.kl_smoothing", double_field([](RunConfig& c) -> double& { return c.train.kl_smoothing; }));
    f.emplace_back("train.checkpoint_interval", uint_field([](RunConfig& c) -> std::uint64_t& { return c.checkpoint_interval; }));

    f.emplace_back("scheduler.kind", string_field([](RunConfig& c) -> std::string& { return c.scheduler.kind; }));
    f.emplace_back("scheduler.setpoint", double_field([](RunConfig& c) -> double& { return c.scheduler.pi.setpoint; }));
    f.emplace_back("scheduler.kp", double_field([](RunConfig& c) -> double& { return c.scheduler.pi.kp; }));
    f.emplace_back("scheduler.ki", double_field([](RunConfig& c) -> double& { return c.scheduler.pi.ki; }));
    f.emplace_back("scheduler.sampling_period", uint_field([](RunConfig& c) -> std::uint64_t& { return c.scheduler.pi.sampling_period; }));
    f.emplace_back("scheduler.anti_windup", bool_field([](RunConfig& c) -> bool& { return c.scheduler.pi.anti_windup; }));
    f.emplace_back("scheduler.midpoint", double_field([](RunConfig& c) -> double& { return c.scheduler.cost.midpoint; }));
    f.emplace_back("scheduler.slope", double_field([](RunConfig& c) -> double& { return c.scheduler.cost.slope; }));
    f.emplace_back("scheduler.total", uint_field([](RunConfig& c) -> std::uint64_t& { return c.scheduler.cyclical.total; }));
    f.emplace_back("scheduler.cycles", uint_field([](RunConfig& c) -> std::uint64_t& { return c.scheduler.cyclical.cycles; }));
    f.emplace_back("scheduler.ramp", double_field([](RunConfig& c) -> double& { return c.scheduler.cyclical.ramp; }));
    f.emplace_back("scheduler.weight", double_field([](RunConfig& c) -> double& { return c.scheduler.constant.weight; }));

    f.emplace_back("calibrate.initial_weight", double_field([](RunConfig& c) -> double& { return c.calibrate.initial_weight; }));
    f.emplace_back("calibrate.collapse_threshold",
                   double_field([](RunConfig& c) -> double& { return c.calibrate.collapse_threshold; }));
    f.emplace_back("calibrate.max_retries", size_field([](RunConfig& c) -> std::size_t& { return c.calibrate.max_retries; }));
    f.emplace_back("calibrate.final_fraction", double_field([](RunConfig& c) -> double& { return c.calibrate.final_fraction; }));

    f.emplace_back("generate.mode", string_field([](RunConfig& c) -> std::string& { return c.generate.mode; }));
    f.emplace_back("generate.temperature", double_field([](RunConfig& c) -> double& { return c.generate.temperature; }));
    f.emplace_back("generate.max_length", size_field([](RunConfig& c) -> std::size_t& { return c.generate.max_length; }));

    f.emplace_back("evaluate.strict_order", bool_field([](RunConfig& c) -> bool& { return c.strict_order; }));
    return f;
  }();
  return fields;
}

inline const Field& lookup(const std::string& key) {
  for (const auto& [k, f] : registry())
    if (k == key) return f;
  throw InputError("unknown config key '" + key + "'");
}

}  // namespace config_detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  config_detail::lookup(key).set(*this, key, config_detail::trim(value));
}

inline std::string RunConfig::get(const std::string& key) const { return config_detail::lookup(key).get(*this); }

inline const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [name, f] : config_detail::registry()) out.push_back(name);
    return out;
  }();
  return k;
}

// Applies `key = value` lines; `#` starts a comment. `origin` names the
// source in error messages.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "config") {
  std::stringstream ss(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(ss, line)) {
    ++n;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = config_detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw InputError(origin + ":" + std::to_string(n) + ": expected 'key = value'");
    try {
      cfg.set(config_detail::trim(body.substr(0, eq)), body.substr(eq + 1));
    } catch (const InputError& e) {
      throw InputError(origin + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw InputError("override '" + assignment + "' is not key=value");
  cfg.set(config_detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline RunConfig load_run_config(const std::string& path) {
  RunConfig cfg;
  std::string text;
  for (const auto& l : read_lines(path)) text += l + "\n";
  apply_config_text(cfg, text, path);
  return cfg;
}

}  // namespace klctl
