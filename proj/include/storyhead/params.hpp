#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "storyhead/config.hpp"
#include "storyhead/tensor.hpp"

namespace storyhead {

// Named, shaped parameter tensors of a model. Names are hierarchical
// ("encoder/layer0/attn/wq"); iteration order is the sorted name order,
// which keeps checkpoints and optimizers deterministic.
class ParameterStore {
 public:
  Tensor& create(const std::string& name, Shape shape, Rng& rng, double init_std = 0.02) {
    Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
    if (init_std > 0.0) {
      for (double& v : t.values()) v = rng.truncated_normal(init_std);
    }
    return insert(name, std::move(t));
  }

  Tensor& create_zeros(const std::string& name, Shape shape) {
    return insert(name, Tensor::zeros(std::move(shape), /*requires_grad=*/true));
  }

  Tensor& create_ones(const std::string& name, Shape shape) {
    return insert(name, Tensor::full(std::move(shape), 1.0, /*requires_grad=*/true));
  }

  Tensor& insert(const std::string& name, Tensor t) {
    if (params_.count(name)) throw DataError("params: duplicate parameter name '" + name + "'");
    t.set_requires_grad(true);
    auto [it, ok] = params_.emplace(name, std::move(t));
    (void)ok;
    return it->second;
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw DataError("params: unknown parameter '" + name + "'");
    return it->second;
  }

  Tensor& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw DataError("params: unknown parameter '" + name + "'");
    return it->second;
  }

  const std::map<std::string, Tensor>& entries() const { return params_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [name, t] : params_) out.push_back(name);
    return out;
  }

  long long total_parameters() const {
    long long n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  // Bitwise value copy between same-shaped parameters.
  void copy_values(const std::string& from, const std::string& to) {
    const Tensor& src = get(from);
    Tensor& dst = get(to);
    if (src.shape() != dst.shape()) {
      throw DataError("params: copy shape mismatch " + shape_to_string(src.shape()) + " -> " +
                      shape_to_string(dst.shape()) + " (" + from + " -> " + to + ")");
    }
    dst.values() = src.values();
  }

 private:
  std::map<std::string, Tensor> params_;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t take_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw DataError("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(in[pos++])) << (8 * i);
  return v;
}

inline std::uint64_t take_u64(const std::string& in, std::size_t& pos) {
  if (pos + 8 > in.size()) throw DataError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(in[pos++])) << (8 * i);
  return v;
}

inline std::uint64_t fnv1a64(const char* data, std::size_t len) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

// Versioned checkpoint container: header, JSON model config, manifest of
// (name, shape, offset), then all values as little-endian doubles with an
// FNV-1a checksum over the payload. Round trips are bitwise exact.
inline constexpr char kCheckpointMagic[8] = {'S', 'H', 'C', 'K', 'P', 'T', '0', '1'};

inline std::string serialize_checkpoint(const ParameterStore& params, const ModelConfig& config) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::string config_json = config.to_json().dump();
  detail::put_u32(out, static_cast<std::uint32_t>(config_json.size()));
  out += config_json;

  detail::put_u32(out, static_cast<std::uint32_t>(params.entries().size()));
  std::string payload;
  for (const auto& [name, t] : params.entries()) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    detail::put_u64(out, payload.size());
    for (double v : t.values()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      detail::put_u64(payload, bits);
    }
  }
  detail::put_u64(out, payload.size());
  out += payload;
  detail::put_u64(out, detail::fnv1a64(payload.data(), payload.size()));
  return out;
}

struct Checkpoint {
  ModelConfig config;
  ParameterStore params;
};

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw DataError("checkpoint: bad magic or unsupported version");
  }
  std::size_t pos = sizeof(kCheckpointMagic);
  const std::uint32_t config_len = detail::take_u32(bytes, pos);
  if (pos + config_len > bytes.size()) throw DataError("checkpoint: truncated config");
  Checkpoint ck;
  ck.config = ModelConfig::from_json(nlohmann::json::parse(bytes.substr(pos, config_len)));
  pos += config_len;

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  const std::uint32_t count = detail::take_u32(bytes, pos);
  std::vector<Entry> manifest;
  manifest.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const std::uint32_t name_len = detail::take_u32(bytes, pos);
    if (pos + name_len > bytes.size()) throw DataError("checkpoint: truncated name");
    e.name = bytes.substr(pos, name_len);
    pos += name_len;
    const std::uint32_t rank = detail::take_u32(bytes, pos);
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(static_cast<int>(detail::take_u32(bytes, pos)));
    e.offset = detail::take_u64(bytes, pos);
    manifest.push_back(std::move(e));
  }
  const std::uint64_t payload_len = detail::take_u64(bytes, pos);
  if (pos + payload_len + 8 > bytes.size()) throw DataError("checkpoint: truncated payload");
  const char* payload = bytes.data() + pos;
  pos += payload_len;
  const std::uint64_t stored_sum = detail::take_u64(bytes, pos);
  if (stored_sum != detail::fnv1a64(payload, payload_len)) {
    throw DataError("checkpoint: payload checksum mismatch");
  }
  for (const Entry& e : manifest) {
    const int n = shape_numel(e.shape);
    if (e.offset + static_cast<std::uint64_t>(n) * 8 > payload_len) {
      throw DataError("checkpoint: tensor '" + e.name + "' overruns payload");
    }
    std::vector<double> values(static_cast<std::size_t>(n));
    std::size_t p = static_cast<std::size_t>(e.offset);
    for (int i = 0; i < n; ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) {
        bits |= std::uint64_t(static_cast<unsigned char>(payload[p++])) << (8 * b);
      }
      double v;
      std::memcpy(&v, &bits, sizeof(v));
      values[static_cast<std::size_t>(i)] = v;
    }
    ck.params.insert(e.name, Tensor::from(e.shape, std::move(values), /*requires_grad=*/true));
  }
  return ck;
}

inline void save_checkpoint(const ParameterStore& params, const ModelConfig& config, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot open '" + path + "' for writing");
  const std::string bytes = serialize_checkpoint(params, config);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("checkpoint: write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

// Adam with per-parameter moment state and bias correction.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Applies one update to every parameter currently holding a gradient.
  void step(ParameterStore& params) {
    for (auto& [name, t] : const_cast<std::map<std::string, Tensor>&>(params.entries())) {
      if (!t.has_grad()) continue;
      State& s = state_[name];
      if (s.m.empty()) {
        s.m.assign(t.values().size(), 0.0);
        s.v.assign(t.values().size(), 0.0);
      }
      s.t += 1;
      const auto& g = t.grad();
      auto& value = t.values();
      const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(s.t));
      const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(s.t));
      for (std::size_t i = 0; i < value.size(); ++i) {
        s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
        s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
        value[i] -= lr_ * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + eps_);
      }
    }
  }

  double learning_rate() const { return lr_; }

 private:
  struct State {
    std::vector<double> m, v;
    long long t = 0;
  };
  double lr_, beta1_, beta2_, eps_;
  std::map<std::string, State> state_;
};

// ---- finite-difference gradient checking ----

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> per_parameter;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// Compares analytic gradients of a scalar-valued function of the parameter
// store against central finite differences. Relative error uses the
// standard scaled form |a - n| / max(1, |a|, |n|).
inline GradCheckReport finite_difference_check(const std::function<Tensor(Tape&)>& f, ParameterStore& params,
                                               double step, double tolerance) {
  if (step <= 0.0) throw NumericError("finite_difference_check: step must be positive");
  params.zero_grads();
  std::map<std::string, std::vector<double>> analytic;
  {
    Tape tape(Tape::Mode::Grad);
    Tensor loss = f(tape);
    if (loss.size() != 1) {
      throw NumericError("finite_difference_check: f must be scalar-valued, got shape " +
                         shape_to_string(loss.shape()));
    }
    if (tape.num_ops() > 0) tape.backward(loss);
    for (const auto& [name, t] : params.entries()) {
      analytic[name] = t.has_grad() ? t.grad() : std::vector<double>(t.values().size(), 0.0);
    }
  }

  auto eval = [&]() {
    Tape tape(Tape::Mode::NoGrad);
    return f(tape).item();
  };

  GradCheckReport report;
  report.tolerance = tolerance;
  for (auto& [name, t] : const_cast<std::map<std::string, Tensor>&>(params.entries())) {
    GradCheckEntry entry;
    entry.name = name;
    auto& value = t.values();
    const auto& a = analytic[name];
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + step;
      const double f_plus = eval();
      value[i] = saved - step;
      const double f_minus = eval();
      value[i] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * step);
      const double denom = std::max({1.0, std::fabs(a[i]), std::fabs(numeric)});
      entry.max_rel_err = std::max(entry.max_rel_err, std::fabs(a[i] - numeric) / denom);
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.per_parameter.push_back(std::move(entry));
  }
  report.passed = report.max_rel_err < tolerance;
  params.zero_grads();
  return report;
}

}  // namespace storyhead
