#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cpdg/common.hpp"
#include "cpdg/tensor.hpp"

namespace cpdg {

enum class Init { Zero, Xavier, Identity };

struct OptimizerConfig {
  enum class Kind { Adam, Sgd } kind = Kind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0;  // global gradient-norm clip per store; 0 disables
};

// Named trainable tensors plus optimizer state. Exactly one owner mutates
// the store between batches.
template <typename T>
class ParameterStore {
 public:
  struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> m, v;  // adam moments
  };

  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

  Param& add(const std::string& name, std::vector<std::size_t> shape,
             Init init = Init::Xavier) {
    CPDG_REQUIRE(!index_.count(name), "duplicate parameter '", name, "'");
    Param p;
    p.name = name;
    p.value = Tensor<T>(shape);
    p.grad = Tensor<T>(shape);
    p.m = Tensor<T>(shape);
    p.v = Tensor<T>(std::move(shape));
    if (init == Init::Xavier) {
      xavier_fill(p);
    } else if (init == Init::Identity) {
      CPDG_REQUIRE(p.value.rank() == 2 && p.value.shape[0] == p.value.shape[1],
                   "identity init needs a square matrix");
      for (std::size_t i = 0; i < p.value.shape[0]; ++i) p.value.at(i, i) = T{1};
    }
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return params_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Param& at(const std::string& name) {
    auto it = index_.find(name);
    CPDG_REQUIRE(it != index_.end(), "unknown parameter '", name, "'");
    return params_[it->second];
  }
  const Param& at(const std::string& name) const {
    auto it = index_.find(name);
    CPDG_REQUIRE(it != index_.end(), "unknown parameter '", name, "'");
    return params_[it->second];
  }

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  // ---- per-batch tape interface ---------------------------------------------

  struct Lease {
    std::unordered_map<std::string, Var> vars;
    Var operator[](const std::string& name) const {
      auto it = vars.find(name);
      CPDG_REQUIRE(it != vars.end(), "parameter '", name, "' not leased");
      return it->second;
    }
  };

  Lease lease(Tape<T>& tape) const {
    Lease l;
    for (const auto& p : params_) l.vars[p.name] = tape.leaf(p.value, true);
    return l;
  }

  void zero_grads() {
    for (auto& p : params_) p.grad.data.assign(p.grad.data.size(), T{0});
  }

  // Pull tape gradients of leased leaves back into the store (accumulating).
  void absorb_grads(const Tape<T>& tape, const Lease& lease) {
    for (auto& p : params_) {
      const auto& g = tape.grad(lease[p.name]);
      if (g.empty()) continue;
      for (std::size_t i = 0; i < g.size(); ++i) p.grad.data[i] += g[i];
    }
  }

  void step(const OptimizerConfig& opt) {
    ++step_count_;
    if (opt.clip_norm > 0) {
      double sq = 0;
      for (const auto& p : params_)
        for (T g : p.grad.data) sq += static_cast<double>(g) * static_cast<double>(g);
      double norm = std::sqrt(sq);
      if (norm > opt.clip_norm) {
        T scale = static_cast<T>(opt.clip_norm / norm);
        for (auto& p : params_)
          for (T& g : p.grad.data) g *= scale;
      }
    }
    if (opt.kind == OptimizerConfig::Kind::Sgd) {
      for (auto& p : params_)
        for (std::size_t i = 0; i < p.value.data.size(); ++i)
          p.value.data[i] -= static_cast<T>(opt.lr) * p.grad.data[i];
      return;
    }
    const double bc1 = 1.0 - std::pow(opt.beta1, step_count_);
    const double bc2 = 1.0 - std::pow(opt.beta2, step_count_);
    for (auto& p : params_) {
      for (std::size_t i = 0; i < p.value.data.size(); ++i) {
        double g = static_cast<double>(p.grad.data[i]);
        double m = opt.beta1 * p.m.data[i] + (1 - opt.beta1) * g;
        double v = opt.beta2 * p.v.data[i] + (1 - opt.beta2) * g * g;
        p.m.data[i] = static_cast<T>(m);
        p.v.data[i] = static_cast<T>(v);
        p.value.data[i] -=
            static_cast<T>(opt.lr * (m / bc1) / (std::sqrt(v / bc2) + opt.eps));
      }
    }
  }

  // ---- checkpoint file --------------------------------------------------------

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    CPDG_REQUIRE(os.good(), "cannot open ", path, " for writing");
    io::write_magic(os, "CPAR");
    io::write_pod<std::uint32_t>(os, 1);
    io::write_pod<std::uint8_t>(os, sizeof(T));
    io::write_pod<std::uint64_t>(os, params_.size());
    std::uint64_t offset = 0;
    for (const auto& p : params_) {
      io::write_string(os, p.name);
      io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
      for (std::size_t d : p.value.shape) io::write_pod<std::uint64_t>(os, d);
      io::write_pod<std::uint64_t>(os, offset);
      offset += p.value.numel() * sizeof(T);
    }
    for (const auto& p : params_) io::write_vec(os, p.value.data);
    CPDG_REQUIRE(os.good(), "write failure on ", path);
  }

  void load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    CPDG_REQUIRE(is.good(), "cannot open parameter checkpoint ", path);
    io::expect_magic(is, "CPAR", path);
    auto version = io::read_pod<std::uint32_t>(is);
    CPDG_REQUIRE(version == 1, "unsupported CPAR version ", version);
    auto dtype = io::read_pod<std::uint8_t>(is);
    CPDG_REQUIRE(dtype == sizeof(T), "checkpoint dtype width ", int(dtype),
                 " does not match engine width ", sizeof(T));
    auto count = io::read_pod<std::uint64_t>(is);
    struct Entry {
      std::string name;
      std::vector<std::size_t> shape;
    };
    std::vector<Entry> dir(count);
    for (auto& e : dir) {
      e.name = io::read_string(is);
      auto rank = io::read_pod<std::uint32_t>(is);
      e.shape.resize(rank);
      for (auto& d : e.shape) d = io::read_pod<std::uint64_t>(is);
      io::read_pod<std::uint64_t>(is);  // offset, implicit in read order
    }
    for (const auto& e : dir) {
      std::vector<T> data;
      io::read_vec(is, data, Tensor<T>::numel_of(e.shape));
      if (has(e.name)) {
        Param& p = at(e.name);
        CPDG_REQUIRE(p.value.shape == e.shape, "shape mismatch loading '", e.name, "'");
        p.value.data = std::move(data);
      }
      // unknown names are skipped: downstream stores may be supersets
    }
  }

  std::uint64_t seed() const { return seed_; }

 private:
  void xavier_fill(Param& p) {
    std::size_t fan_in, fan_out;
    if (p.value.rank() == 2) {
      fan_in = p.value.shape[0];
      fan_out = p.value.shape[1];
    } else {
      fan_in = fan_out = std::max<std::size_t>(p.value.numel(), 1);
    }
    double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    StreamRng rng(seed_, hash_str(p.name), 0, 0, hash_str("xavier"));
    for (auto& v : p.value.data) v = static_cast<T>(rng.uniform_range(-a, a));
  }

  std::uint64_t seed_;
  std::vector<Param> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::uint64_t step_count_ = 0;
};

// ---- finite-difference gradient checking --------------------------------------

struct GradCheckReport {
  double max_rel_err = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0;
  double numeric = 0;
  std::size_t coords_checked = 0;

  bool passed(double tol) const { return max_rel_err < tol; }
};

// Compares tape gradients of a scalar-valued build function against central
// differences over every coordinate of every listed store. 64-bit only:
// float FD noise would swamp the comparison.
inline GradCheckReport grad_check(
    const std::vector<ParameterStore<double>*>& stores,
    const std::function<double(bool /*with_grad*/)>& eval_loss, double eps = 1e-5) {
  // eval_loss(true) must run forward+backward leaving grads in the stores;
  // eval_loss(false) is forward-only at the stores' current values.
  for (auto* s : stores) s->zero_grads();
  eval_loss(true);
  std::vector<std::vector<std::vector<double>>> analytic(stores.size());
  for (std::size_t si = 0; si < stores.size(); ++si)
    for (auto& p : stores[si]->params()) analytic[si].push_back(p.grad.data);

  GradCheckReport rep;
  for (std::size_t si = 0; si < stores.size(); ++si) {
    for (std::size_t pi = 0; pi < stores[si]->params().size(); ++pi) {
      auto& p = stores[si]->params()[pi];
      for (std::size_t i = 0; i < p.value.data.size(); ++i) {
        double orig = p.value.data[i];
        p.value.data[i] = orig + eps;
        double up = eval_loss(false);
        p.value.data[i] = orig - eps;
        double down = eval_loss(false);
        p.value.data[i] = orig;
        double numeric = (up - down) / (2 * eps);
        double a = analytic[si][pi][i];
        double rel =
            std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1.0});
        ++rep.coords_checked;
        if (rel > rep.max_rel_err) {
          rep.max_rel_err = rel;
          rep.worst_param = p.name;
          rep.worst_index = i;
          rep.analytic = a;
          rep.numeric = numeric;
        }
      }
    }
  }
  return rep;
}

inline GradCheckReport grad_check(
    ParameterStore<double>& store,
    const std::function<double(bool /*with_grad*/)>& eval_loss, double eps = 1e-5) {
  return grad_check(std::vector<ParameterStore<double>*>{&store}, eval_loss, eps);
}

}  // namespace cpdg
