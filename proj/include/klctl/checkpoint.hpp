#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "klctl/config.hpp"
#include "klctl/data.hpp"
#include "klctl/error.hpp"
#include "klctl/trainer.hpp"

namespace klctl {

inline constexpr char kCheckpointMagic[8] = {'K', 'L', 'C', 'T', 'L', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Everything needed to resume a run or to generate from it.
struct Checkpoint {
  std::string config_text;
  std::vector<std::string> vocabulary;
  std::uint64_t step = 0;
  std::uint64_t adam_step = 0;
  SchedulerState scheduler;
  std::map<std::string, Tensor<float>> parameters;
  std::map<std::string, Tensor<float>> first_moment;
  std::map<std::string, Tensor<float>> second_moment;
};

inline Checkpoint capture_checkpoint(const Trainer& t, const RunConfig& cfg, const Vocabulary& vocab) {
  Checkpoint c;
  c.config_text = cfg.to_text();
  c.vocabulary = vocab.tokens();
  c.step = t.step();
  c.adam_step = t.optimizer().step;
  c.scheduler = t.scheduler().state();
  for (const auto& [name, p] : t.model().parameters()) c.parameters.emplace(name, p.value);
  c.first_moment = t.optimizer().first_moment;
  c.second_moment = t.optimizer().second_moment;
  return c;
}

namespace ckpt_detail {

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

class Writer {
 public:
  template <class U>
  void pod(const U& v) {
    char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out_.append(buf, sizeof(U));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_ += s;
  }
  void tensors(const std::map<std::string, Tensor<float>>& m) {
    pod<std::uint64_t>(m.size());
    for (const auto& [name, t] : m) {
      str(name);
      pod<std::uint64_t>(t.rows());
      pod<std::uint64_t>(t.cols());
      out_.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
    }
  }
  const std::string& bytes() const { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& bytes, std::string path) : in_(bytes), path_(std::move(path)) {}
  template <class U>
  U pod() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, in_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::map<std::string, Tensor<float>> tensors() {
    std::map<std::string, Tensor<float>> m;
    const auto n = pod<std::uint64_t>();
    for (std::uint64_t i = 0; i < n; ++i) {
      std::string name = str();
      const auto r = pod<std::uint64_t>();
      const auto c = pod<std::uint64_t>();
      if (c != 0 && r > (in_.size() - pos_) / sizeof(float) / c) fail("tensor '" + name + "' overruns the file");
      Tensor<float> t(r, c);
      need(t.data.size() * sizeof(float));
      std::memcpy(t.data.data(), in_.data() + pos_, t.data.size() * sizeof(float));
      pos_ += t.data.size() * sizeof(float);
      m.emplace(std::move(name), std::move(t));
    }
    return m;
  }
  bool at_end() const { return pos_ == in_.size(); }
  [[noreturn]] void fail(const std::string& what) const { throw LoadError("'" + path_ + "': " + what); }

 private:
  void need(std::uint64_t n) const {
    if (n > in_.size() - pos_) fail("truncated checkpoint");
  }
  const std::string& in_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace ckpt_detail

// Layout: magic, version, payload length, payload, FNV-1a of the payload.
inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  ckpt_detail::Writer w;
  w.str(c.config_text);
  w.pod<std::uint64_t>(c.vocabulary.size());
  for (const auto& t : c.vocabulary) w.str(t);
  w.pod(c.step);
  w.pod(c.adam_step);
  w.pod(c.scheduler.pi.integral);
  w.pod(c.scheduler.pi.last_raw);
  w.pod(c.scheduler.pi.step);
  w.pod(c.scheduler.held_weight);
  w.pod(c.scheduler.smoothed_kl);
  w.pod<std::uint8_t>(c.scheduler.has_smoothed ? 1 : 0);
  w.tensors(c.parameters);
  w.tensors(c.first_moment);
  w.tensors(c.second_moment);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write checkpoint '" + path + "'");
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = w.bytes().size();
    const std::uint64_t sum = ckpt_detail::fnv1a(w.bytes());
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(w.bytes().data(), static_cast<std::streamsize>(len));
    out.write(reinterpret_cast<const char*>(&sum), sizeof sum);
    if (!out) throw LoadError("failed writing checkpoint '" + path + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw LoadError("cannot move checkpoint into '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint '" + path + "'");
  const std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t header = sizeof kCheckpointMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (file.size() < header + sizeof(std::uint64_t) || std::memcmp(file.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw LoadError("'" + path + "' is not a checkpoint");
  }
  std::uint32_t version = 0;
  std::uint64_t len = 0, sum = 0;
  std::memcpy(&version, file.data() + sizeof kCheckpointMagic, sizeof version);
  std::memcpy(&len, file.data() + sizeof kCheckpointMagic + sizeof version, sizeof len);
  if (version != kCheckpointVersion) {
    throw LoadError("'" + path + "' has checkpoint version " + std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
  }
  if (len != file.size() - header - sizeof(std::uint64_t)) throw LoadError("'" + path + "' is truncated");
  const std::string payload = file.substr(header, len);
  std::memcpy(&sum, file.data() + header + len, sizeof sum);
  if (sum != ckpt_detail::fnv1a(payload)) throw LoadError("'" + path + "' failed its checksum");

  ckpt_detail::Reader r(payload, path);
  Checkpoint c;
  c.config_text = r.str();
  const auto nv = r.pod<std::uint64_t>();
  if (nv > payload.size()) r.fail("implausible vocabulary size");
  for (std::uint64_t i = 0; i < nv; ++i) c.vocabulary.push_back(r.str());
  c.step = r.pod<std::uint64_t>();
  c.adam_step = r.pod<std::uint64_t>();
  c.scheduler.pi.integral = r.pod<double>();
  c.scheduler.pi.last_raw = r.pod<double>();
  c.scheduler.pi.step = r.pod<std::uint64_t>();
  c.scheduler.held_weight = r.pod<double>();
  c.scheduler.smoothed_kl = r.pod<double>();
  c.scheduler.has_smoothed = r.pod<std::uint8_t>() != 0;
  c.parameters = r.tensors();
  c.first_moment = r.tensors();
  c.second_moment = r.tensors();
  if (!r.at_end()) r.fail("trailing bytes after payload");
  return c;
}

inline RunConfig checkpoint_config(const Checkpoint& c) {
  RunConfig cfg;
  apply_config_text(cfg, c.config_text, "checkpoint config");
  return cfg;
}

// Copies parameter values into `model`; names and shapes must match exactly.
template <class T>
void restore_parameters(Cvae<T>& model, const Checkpoint& c) {
  auto& store = model.parameters();
  if (store.size() != c.parameters.size()) {
    throw LoadError("checkpoint has " + std::to_string(c.parameters.size()) + " parameters, model expects " +
                    std::to_string(store.size()));
  }
  for (auto& [name, p] : store) {
    auto it = c.parameters.find(name);
    if (it == c.parameters.end()) throw LoadError("checkpoint lacks parameter '" + name + "'");
    if (it->second.shape != p.value.shape) {
      throw LoadError("parameter '" + name + "' is " + to_string(it->second.shape) + " in the checkpoint, " +
                      to_string(p.value.shape) + " in the model");
    }
    p.value = tensor_cast<T>(it->second);
  }
}

// Brings a freshly constructed trainer to the checkpointed state.
inline void restore_trainer(Trainer& t, const Checkpoint& c) {
  restore_parameters(t.model(), c);
  auto& opt = t.optimizer();
  opt.step = c.adam_step;
  opt.first_moment = c.first_moment;
  opt.second_moment = c.second_moment;
  t.scheduler().state() = c.scheduler;
  t.set_step(c.step);
}

}  // namespace klctl
