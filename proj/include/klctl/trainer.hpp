#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "klctl/adam.hpp"
#include "klctl/control.hpp"
#include "klctl/data.hpp"
#include "klctl/error.hpp"
#include "klctl/model.hpp"
#include "klctl/objective.hpp"

namespace klctl {

struct TrainConfig {
  ModelConfig model;
  SchedulerKind scheduler = PIConfig{};
  double kl_smoothing = 0.0;
  std::size_t batch_size = 32;
  std::uint64_t total_steps = 4000;
  AdamConfig adam{1e-3, 0.9, 0.999, 1e-8, 0.9, 1000};
  double grad_clip = 5.0;
  std::uint64_t seed = 1;

  void validate() const {
    model.validate();
    if (batch_size < 1) throw InputError("batch size must be >= 1");
    if (total_steps < 1) throw InputError("total steps must be >= 1");
    if (!(adam.learning_rate > 0.0) || !(adam.decay_factor > 0.0)) throw InputError("learning rate and decay must be positive");
  }
};

struct TraceRecord {
  std::uint64_t step = 0;
  double kl = 0.0;
  double weight = 0.0;
  double recon_nll = 0.0;
  double total_loss = 0.0;

  bool operator==(const TraceRecord&) const = default;
};

// Shortest decimal that round-trips the double.
inline std::string format_exact(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline const char* kTraceHeader = "step,kl,weight,recon_nll,total_loss";

inline std::string format_trace_row(const TraceRecord& r) {
  return std::to_string(r.step) + "," + format_exact(r.kl) + "," + format_exact(r.weight) + "," +
         format_exact(r.recon_nll) + "," + format_exact(r.total_loss);
}

// Append-only CSV sink. A fresh file gets the header; resuming appends rows.
class TraceWriter {
 public:
  TraceWriter(const std::string& path, bool append) {
    const bool existing = append && std::ifstream(path).good();
    out_.open(path, append ? std::ios::app | std::ios::binary : std::ios::trunc | std::ios::binary);
    if (!out_) throw std::runtime_error("cannot open trace file '" + path + "'");
    if (!existing) out_ << kTraceHeader << '\n';
  }
  void write(const TraceRecord& r) {
    out_ << format_trace_row(r) << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

inline std::vector<TraceRecord> read_trace(const std::string& path) {
  const auto lines = read_lines(path);
  if (lines.empty() || lines[0] != kTraceHeader) throw LoadError("'" + path + "' is not a trace file");
  std::vector<TraceRecord> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    TraceRecord r;
    std::string row = lines[i];
    std::replace(row.begin(), row.end(), ',', ' ');
    std::istringstream in(row);
    if (!(in >> r.step >> r.kl >> r.weight >> r.recon_nll >> r.total_loss)) {
      throw LoadError(path + ":" + std::to_string(i + 1) + ": malformed trace row");
    }
    out.push_back(r);
  }
  return out;
}

// Mean sampled KL over the last `fraction` of the trace (at least one row).
inline double final_phase_mean_kl(const std::vector<TraceRecord>& trace, double fraction = 0.2) {
  if (trace.empty()) throw InputError("empty trace");
  const auto n = trace.size();
  const auto tail = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n))), 1, n);
  double s = 0.0;
  for (std::size_t i = n - tail; i < n; ++i) s += trace[i].kl;
  return s / static_cast<double>(tail);
}

// Graph nodes of one CVAE forward pass over a batch.
struct ForwardPass {
  Var recon;  // batch-mean of per-sequence summed NLL
  Var kl;     // batch-mean of per-example KL summed over latent dims
  LatentDistribution posterior;
  LatentDistribution prior;
  Var z;
  Var logits;
};

// Decoder input is BOS + text; targets are text + EOS.
inline void teacher_forcing(const Batch& b, std::vector<int>& prefix, std::vector<int>& targets,
                            std::vector<std::uint8_t>& mask) {
  const std::size_t L = b.text_len + 1;
  prefix.assign(b.size * L, kPad);
  targets.assign(b.size * L, kPad);
  mask.assign(b.size * L, 0);
  for (std::size_t i = 0; i < b.size; ++i) {
    prefix[i * L] = kBos;
    for (std::size_t t = 0; t < b.lengths[i]; ++t) {
      prefix[i * L + t + 1] = b.tokens[i * b.text_len + t];
      targets[i * L + t] = b.tokens[i * b.text_len + t];
      mask[i * L + t] = 1;
    }
    targets[i * L + b.lengths[i]] = kEos;
    mask[i * L + b.lengths[i]] = 1;
  }
}

template <class T>
ForwardPass cvae_forward(Graph<T>& g, Cvae<T>& model, const Batch& b, const Tensor<T>& eps) {
  ForwardPass f;
  Var h = model.encode_target(g, b);
  ConditionEncoding cond = model.encode_condition(g, b);
  f.posterior = model.infer_posterior(g, h, cond.summary);
  f.prior = model.infer_prior(g, cond.summary);
  f.z = model.sample_latent(g, f.posterior, g.input(eps));
  std::vector<int> prefix, targets;
  std::vector<std::uint8_t> mask;
  teacher_forcing(b, prefix, targets, mask);
  f.logits = model.decode_logits(g, f.z, cond, prefix, b.text_len + 1);
  const T inv_batch = T(1) / static_cast<T>(b.size);
  f.recon = g.scale(reconstruction_nll(g, f.logits, targets, mask), inv_batch);
  f.kl = g.mean_all(gaussian_kl(g, f.posterior, f.prior));
  return f;
}

// Standard-normal draws for the reparameterization, one row per example.
template <class T>
Tensor<T> draw_noise(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t(rows, cols);
  for (auto& v : t.data) v = static_cast<T>(rng.normal());
  return t;
}

// Owns model, optimizer and scheduler for one run. Batch order and noise are
// pure functions of (seed, step), so the step counter plus the numeric state
// is all a checkpoint has to carry.
class Trainer {
 public:
  using Real = float;

  Trainer(TrainConfig cfg, std::vector<TrainingExample> corpus)
      : cfg_(std::move(cfg)),
        corpus_(std::move(corpus)),
        model_((cfg_.validate(), cfg_.model), cfg_.seed),
        scheduler_(cfg_.scheduler, cfg_.kl_smoothing) {
    if (corpus_.empty()) throw InputError("training corpus is empty");
    adam_.config = cfg_.adam;
    for (const auto& ex : corpus_) {
      if (ex.text.size() > cfg_.model.n_max) throw InputError("corpus example longer than n_max");
    }
  }

  const TrainConfig& config() const { return cfg_; }
  Cvae<Real>& model() { return model_; }
  const Cvae<Real>& model() const { return model_; }
  AdamState<Real>& optimizer() { return adam_; }
  const AdamState<Real>& optimizer() const { return adam_; }
  KlScheduler& scheduler() { return scheduler_; }
  const KlScheduler& scheduler() const { return scheduler_; }
  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }

  // Examples used at a given (0-based) step.
  std::vector<std::size_t> batch_indices(std::uint64_t step) {
    const std::size_t n = corpus_.size();
    const std::size_t B = std::min(cfg_.batch_size, n);
    const std::uint64_t per_epoch = (n + B - 1) / B;
    const std::uint64_t epoch = step / per_epoch;
    const std::uint64_t within = step % per_epoch;
    if (!order_epoch_ || *order_epoch_ != epoch) {
      order_.resize(n);
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      Rng rng(derive_seed(cfg_.seed, 0xDA7A, epoch));
      rng.shuffle(order_.begin(), order_.end());
      order_epoch_ = epoch;
    }
    const std::size_t begin = static_cast<std::size_t>(within) * B;
    const std::size_t end = std::min(n, begin + B);
    return {order_.begin() + static_cast<std::ptrdiff_t>(begin), order_.begin() + static_cast<std::ptrdiff_t>(end)};
  }

  TraceRecord train_step() {
    const std::uint64_t s = step_;
    std::vector<TrainingExample> picked;
    for (std::size_t i : batch_indices(s)) picked.push_back(corpus_[i]);
    const Batch batch = make_batch(picked, cfg_.model.n_max);
    const auto eps = draw_noise<Real>(batch.size, cfg_.model.latent_dim, derive_seed(cfg_.seed, 0xE95, s));

    TraceRecord rec;
    rec.step = s + 1;
    try {
      Graph<Real> g;
      model_.set_dropout_seed(derive_seed(cfg_.seed, 0xD0, s));
      ForwardPass f = cvae_forward(g, model_, batch, eps);
      model_.set_dropout_seed(std::nullopt);
      rec.kl = std::max(0.0, static_cast<double>(g.item(f.kl)));
      rec.recon_nll = static_cast<double>(g.item(f.recon));
      rec.weight = scheduler_.next(s, rec.kl);
      Var total = weighted_loss(g, f.recon, f.kl, rec.weight);
      rec.total_loss = static_cast<double>(g.item(total));
      model_.parameters().zero_grad();
      g.backward(total);
    } catch (const NumericError& e) {
      throw NumericError("non-finite loss at step " + std::to_string(rec.step) + ": " + e.what());
    }
    if (!std::isfinite(rec.total_loss)) throw NumericError("non-finite loss at step " + std::to_string(rec.step));
    clip_global_norm(model_.parameters(), cfg_.grad_clip);
    adam_update(model_.parameters(), adam_);
    ++step_;
    return rec;
  }

  // Runs until `total_steps` (or `until` if given), reporting every row.
  std::vector<TraceRecord> run(const std::function<void(const TraceRecord&)>& on_row = {},
                               std::optional<std::uint64_t> until = std::nullopt) {
    const std::uint64_t last = until.value_or(cfg_.total_steps);
    std::vector<TraceRecord> trace;
    while (step_ < last) {
      trace.push_back(train_step());
      if (on_row) on_row(trace.back());
    }
    return trace;
  }

 private:
  TrainConfig cfg_;
  std::vector<TrainingExample> corpus_;
  Cvae<Real> model_;
  AdamState<Real> adam_;
  KlScheduler scheduler_;
  std::uint64_t step_ = 0;
  std::vector<std::size_t> order_;
  std::optional<std::uint64_t> order_epoch_;
};

// Full run. `on_checkpoint` fires every `checkpoint_interval` steps (0 = never)
// and once at the end.
inline std::vector<TraceRecord> train(Trainer& trainer, const std::function<void(const TraceRecord&)>& on_row = {},
                                      std::uint64_t checkpoint_interval = 0,
                                      const std::function<void(const Trainer&)>& on_checkpoint = {}) {
  std::vector<TraceRecord> trace;
  while (trainer.step() < trainer.config().total_steps) {
    trace.push_back(trainer.train_step());
    if (on_row) on_row(trace.back());
    if (on_checkpoint && checkpoint_interval > 0 && trainer.step() % checkpoint_interval == 0) on_checkpoint(trainer);
  }
  if (on_checkpoint) on_checkpoint(trainer);
  return trace;
}

struct CalibrationOptions {
  double initial_weight = 0.5;
  double collapse_threshold = 0.05;
  std::size_t max_retries = 4;
  double final_fraction = 0.2;
};

struct CalibrationAttempt {
  double weight = 0.0;
  double final_kl = 0.0;
};

struct CalibrationResult {
  double setpoint = 0.0;
  double weight = 0.0;
  std::vector<CalibrationAttempt> attempts;
};

using TrainingRun = std::function<std::vector<TraceRecord>(const TrainConfig&)>;

inline TrainingRun default_training_run(const std::vector<TrainingExample>& corpus) {
  return [&corpus](const TrainConfig& cfg) {
    Trainer t(cfg, corpus);
    return t.run();
  };
}

// Trains at a constant KL weight (0.5 first) and returns the final-phase mean
// KL as the set point. A collapsed run halves the weight and retries.
inline CalibrationResult calibrate_setpoint(const TrainConfig& base, const TrainingRun& run,
                                            const CalibrationOptions& opt = {}) {
  CalibrationResult result;
  double w = opt.initial_weight;
  for (std::size_t attempt = 0; attempt <= opt.max_retries; ++attempt, w *= 0.5) {
    TrainConfig cfg = base;
    cfg.scheduler = ConstantWeight{w};
    const double kl = final_phase_mean_kl(run(cfg), opt.final_fraction);
    result.attempts.push_back({w, kl});
    if (kl >= opt.collapse_threshold) {
      result.setpoint = kl;
      result.weight = w;
      return result;
    }
  }
  throw CalibrationError("KL collapsed below " + format_exact(opt.collapse_threshold) + " nats at every weight down to " +
                         format_exact(w * 2.0));
}

inline CalibrationResult calibrate_setpoint(const TrainConfig& base, const std::vector<TrainingExample>& corpus,
                                            const CalibrationOptions& opt = {}) {
  if (corpus.empty()) throw InputError("calibration corpus is empty");
  return calibrate_setpoint(base, default_training_run(corpus), opt);
}

}  // namespace klctl
