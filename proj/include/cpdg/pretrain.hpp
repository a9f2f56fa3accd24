#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "cpdg/common.hpp"
#include "cpdg/dgnn.hpp"
#include "cpdg/params.hpp"
#include "cpdg/sampler.hpp"
#include "cpdg/temporal_graph.hpp"
#include "cpdg/tensor.hpp"

#include <nlohmann/json.hpp>

namespace cpdg {

struct LossConfig {
  double alpha = 1.0;            // triplet margin
  double beta = 0.5;             // temporal/structural mixing
  int negatives_per_edge = 1;    // corrupted destinations per TLP positive
  bool beta_endpoint_ablation = false;  // permit beta in {0, 1}

  void validate() const {
    CPDG_REQUIRE(alpha >= 0, "margin alpha must be nonnegative");
    if (beta_endpoint_ablation)
      CPDG_REQUIRE(beta >= 0 && beta <= 1, "beta must be in [0,1]");
    else
      CPDG_REQUIRE(beta > 0 && beta < 1,
                   "beta must be in (0,1); set the ablation flag for the endpoints");
    CPDG_REQUIRE(negatives_per_edge >= 1, "need at least one negative per edge");
  }
};

// Mean pooling of member memory states into one subgraph embedding.
// Duplicate member occurrences count once each (multiset readout).
template <typename T>
Var readout(typename DgnnEncoder<T>::BatchContext& ctx,
            const std::vector<NodeId>& members) {
  CPDG_REQUIRE(!members.empty(), "readout of empty member set");
  if (members.size() == 1) return ctx.row(members[0]);
  std::vector<Var> rows;
  rows.reserve(members.size());
  for (NodeId n : members) rows.push_back(ctx.row(n));
  return ctx.tape->mean_rows(ctx.tape->stack_rows(rows));
}

// Triplet margin term shared by temporal and structural contrast.
template <typename T>
Var contrast_loss(Tape<T>& tape, Var z, Var h_pos, Var h_neg, double alpha) {
  Var d_pos = tape.euclidean_distance(z, h_pos);
  Var d_neg = tape.euclidean_distance(z, h_neg);
  return tape.triplet_margin(d_pos, d_neg, static_cast<T>(alpha));
}

// (1-beta) * l_eta + beta * l_eps + l_tlp
template <typename T>
Var combined_loss(Tape<T>& tape, Var l_eta, Var l_eps, Var l_tlp, double beta) {
  CPDG_REQUIRE(beta >= 0 && beta <= 1, "beta outside [0,1]");
  return tape.add(tape.add(tape.scale(l_eta, static_cast<T>(1.0 - beta)),
                           tape.scale(l_eps, static_cast<T>(beta))),
                  l_tlp);
}

inline double combined_loss_value(double l_eta, double l_eps, double l_tlp, double beta) {
  CPDG_REQUIRE(beta >= 0 && beta <= 1, "beta outside [0,1]");
  return (1.0 - beta) * l_eta + beta * l_eps + l_tlp;
}

struct PretrainConfig {
  std::size_t epochs = 3;
  std::size_t batch_size = 256;
  std::size_t checkpoints = 10;  // l
  OptimizerConfig optimizer;
  bool memory_persist_across_epochs = false;
  bool anchor_both_endpoints = false;
  std::uint64_t seed = 0;
};

struct BatchLogEntry {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double l_eta = 0;
  double l_eps = 0;
  double l_tlp = 0;
  double l_pre = 0;
  std::size_t skipped_eta = 0;
  std::size_t skipped_eps = 0;
  double wall_ms = 0;

  nlohmann::json to_json() const {
    return {{"epoch", epoch},   {"batch", batch},
            {"l_eta", l_eta},   {"l_eps", l_eps},
            {"l_tlp", l_tlp},   {"l_pre", l_pre},
            {"skipped_eta", skipped_eta}, {"skipped_eps", skipped_eps},
            {"wall_ms", wall_ms}};
  }
};

// l uniformly spaced memory snapshots captured during pre-training.
template <typename T>
struct CheckpointSequence {
  std::vector<MemoryStore<T>> snapshots;
  std::vector<std::size_t> capture_batches;  // global batch index at capture
  std::vector<Time> capture_times;           // last event time at capture

  std::size_t count() const { return snapshots.size(); }

  void save(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["count"] = snapshots.size();
    manifest["capture_batches"] = capture_batches;
    manifest["capture_times"] = capture_times;
    std::vector<std::string> files;
    for (std::size_t i = 0; i < snapshots.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "ck_%03zu.cmem", i);
      snapshots[i].save((fs::path(dir) / name).string(), capture_times[i]);
      files.push_back(name);
    }
    manifest["files"] = files;
    std::ofstream os(fs::path(dir) / "manifest.json");
    os << manifest.dump(2) << "\n";
  }

  static CheckpointSequence load(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream is(fs::path(dir) / "manifest.json");
    CPDG_REQUIRE(is.good(), "cannot open checkpoint manifest in ", dir);
    nlohmann::json manifest;
    is >> manifest;
    CheckpointSequence seq;
    seq.capture_batches = manifest["capture_batches"].get<std::vector<std::size_t>>();
    seq.capture_times = manifest["capture_times"].get<std::vector<Time>>();
    for (const auto& f : manifest["files"]) {
      seq.snapshots.push_back(
          MemoryStore<T>::load((fs::path(dir) / f.get<std::string>()).string()));
    }
    CPDG_REQUIRE(seq.snapshots.size() == manifest["count"].get<std::size_t>(),
                 "checkpoint manifest count mismatch in ", dir);
    return seq;
  }
};

template <typename T>
struct PretrainResult {
  CheckpointSequence<T> checkpoints;
  std::vector<BatchLogEntry> log;
  MemoryStore<T> final_memory{0, 0};

  double epoch_mean_loss(std::size_t epoch) const {
    double sum = 0;
    std::size_t n = 0;
    for (const auto& e : log)
      if (e.epoch == epoch) {
        sum += e.l_pre;
        ++n;
      }
    return n ? sum / static_cast<double>(n) : 0.0;
  }
};

// Uniform capture schedule: after batches round((i+1) * total / l) - 1.
inline std::vector<std::size_t> checkpoint_schedule(std::size_t total_batches,
                                                    std::size_t l) {
  CPDG_REQUIRE(l >= 1, "need at least one checkpoint");
  CPDG_REQUIRE(total_batches >= l, "fewer batches (", total_batches,
               ") than requested checkpoints (", l, ")");
  std::vector<std::size_t> out;
  out.reserve(l);
  for (std::size_t i = 1; i <= l; ++i)
    out.push_back(static_cast<std::size_t>(std::llround(
                      static_cast<double>(i) * static_cast<double>(total_batches) /
                      static_cast<double>(l))) -
                  1);
  return out;
}

// Per-anchor contrastive terms plus auxiliary link-prediction pairs for one
// batch, built on the supplied tape. Shared by the trainer and the gradient
// checker so both paths exercise the identical loss graph.
template <typename T>
struct BatchLossOutput {
  Var loss;  // scalar L_pre
  double l_eta = 0, l_eps = 0, l_tlp = 0;
  std::size_t skipped_eta = 0, skipped_eps = 0;
  std::size_t anchors = 0;
  std::size_t sampled_member_work = 0;  // TP+TN+SP+SN member count
};

template <typename T>
class PretrainDriver {
 public:
  PretrainDriver(const TemporalGraph& graph, DgnnEncoder<T>& encoder,
                 SamplerConfig sampler_cfg, LossConfig loss_cfg, PretrainConfig cfg,
                 const SamplePlan* plan = nullptr)
      : graph_(graph),
        encoder_(encoder),
        sampler_cfg_(sampler_cfg),
        loss_cfg_(loss_cfg),
        cfg_(cfg),
        plan_(plan),
        aux_(cfg.seed ^ hash_str("tlp_head")),
        sn_pool_(structural_negative_pool(graph)) {
    sampler_cfg_.validate();
    loss_cfg_.validate();
    if (plan_) {
      const SamplerConfig& pc = plan_->config();
      CPDG_REQUIRE(pc.eta == sampler_cfg_.eta && pc.epsilon == sampler_cfg_.epsilon &&
                       pc.depth == sampler_cfg_.depth && pc.tau == sampler_cfg_.tau &&
                       pc.seed == sampler_cfg_.seed,
                   "sample plan was built with a different sampler config");
    }
    const std::size_t dz = encoder_.config().embed_dim;
    aux_.add("tlp.w1", {2 * dz, dz});
    aux_.add("tlp.b1", {dz}, Init::Zero);
    aux_.add("tlp.w2", {dz, 1});
    aux_.add("tlp.b2", {1}, Init::Zero);
  }

  ParameterStore<T>& aux_params() { return aux_; }

  // Affinity logit sigma^-1(y_hat) = MLP(z_i || z_j). tanh hidden layer:
  // keeps the loss surface smooth for the finite-difference checks.
  Var affinity_logit(typename DgnnEncoder<T>::BatchContext& ctx,
                     const typename ParameterStore<T>::Lease& aux_lease, Var zi,
                     Var zj) const {
    Tape<T>& t = *ctx.tape;
    Var x = t.concat({zi, zj});
    Var h = t.tanh_(t.add(t.matmul(x, aux_lease["tlp.w1"]), aux_lease["tlp.b1"]));
    return t.add(t.matmul(h, aux_lease["tlp.w2"]), aux_lease["tlp.b2"]);
  }

  // Builds L_pre for events [begin, end) of the graph on an existing context.
  BatchLossOutput<T> build_batch_loss(typename DgnnEncoder<T>::BatchContext& ctx,
                                      const typename ParameterStore<T>::Lease& aux_lease,
                                      std::size_t begin, std::size_t end) {
    Tape<T>& t = *ctx.tape;
    BatchLossOutput<T> out;
    std::vector<Var> eta_terms, eps_terms, tlp_terms;

    for (std::size_t k = begin; k < end; ++k) {
      const Event& e = graph_.event(k);
      Var zi = encoder_.embed(ctx, e.src, e.time);
      Var zj = encoder_.embed(ctx, e.dst, e.time);

      std::vector<std::pair<NodeId, Var>> anchors = {{e.src, zi}};
      if (cfg_.anchor_both_endpoints) anchors.emplace_back(e.dst, zj);

      for (auto [anchor, z] : anchors) {
        ++out.anchors;
        auto [tp, tn, sp, sn] = anchor_members(k, anchor, e.time);
        out.sampled_member_work += tp.size() + tn.size() + sp.size() + sn.size();
        if (tp.size() > 1 && tn.size() > 1) {
          Var h_tp = project_readout(ctx, readout<T>(ctx, tp));
          Var h_tn = project_readout(ctx, readout<T>(ctx, tn));
          eta_terms.push_back(contrast_loss(t, z, h_tp, h_tn, loss_cfg_.alpha));
        } else {
          ++out.skipped_eta;
        }
        if (sp.size() > 1 && sn.size() > 1) {
          Var h_sp = project_readout(ctx, readout<T>(ctx, sp));
          Var h_sn = project_readout(ctx, readout<T>(ctx, sn));
          eps_terms.push_back(contrast_loss(t, z, h_sp, h_sn, loss_cfg_.alpha));
        } else {
          ++out.skipped_eps;
        }
      }

      // auxiliary temporal link prediction with corrupted destinations
      Var pos = t.bce_with_logits(affinity_logit(ctx, aux_lease, zi, zj), T{1});
      for (int neg = 0; neg < loss_cfg_.negatives_per_edge; ++neg) {
        NodeId jn = corrupt_destination(k, static_cast<std::uint64_t>(neg), e.dst);
        Var zjn = encoder_.embed(ctx, jn, e.time);
        Var negl = t.bce_with_logits(affinity_logit(ctx, aux_lease, zi, zjn), T{0});
        tlp_terms.push_back(t.add(pos, negl));
      }
    }

    Var l_eta = mean_or_zero(t, eta_terms);
    Var l_eps = mean_or_zero(t, eps_terms);
    Var l_tlp = mean_or_zero(t, tlp_terms);
    out.loss = combined_loss(t, l_eta, l_eps, l_tlp, loss_cfg_.beta);
    out.l_eta = t.scalar_value(l_eta);
    out.l_eps = t.scalar_value(l_eps);
    out.l_tlp = t.scalar_value(l_tlp);
    return out;
  }

  // Both endpoints of each event in [begin, end) receive a message.
  std::vector<RawMessage> batch_messages(std::size_t begin, std::size_t end) const {
    std::vector<RawMessage> msgs;
    msgs.reserve(2 * (end - begin));
    for (std::size_t k = begin; k < end; ++k) {
      const Event& e = graph_.event(k);
      msgs.push_back({e.src, e.dst, e.time, k});
      msgs.push_back({e.dst, e.src, e.time, k});
    }
    return msgs;
  }

  PretrainResult<T> run(std::size_t seg_begin, std::size_t seg_end,
                        MemoryStore<T>& memory) {
    CPDG_REQUIRE(seg_begin < seg_end && seg_end <= graph_.num_events(),
                 "pretrain segment empty or out of range");
    const std::size_t events = seg_end - seg_begin;
    const std::size_t batches_per_epoch =
        (events + cfg_.batch_size - 1) / cfg_.batch_size;
    const std::size_t total_batches = batches_per_epoch * cfg_.epochs;
    auto schedule = checkpoint_schedule(total_batches, cfg_.checkpoints);

    PretrainResult<T> result;
    std::vector<RawMessage> pending;
    std::size_t global_batch = 0;
    std::size_t next_capture = 0;

    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      if (epoch == 0 || !cfg_.memory_persist_across_epochs) {
        memory.reset();
        pending.clear();
      }
      for (std::size_t b = 0; b < batches_per_epoch; ++b, ++global_batch) {
        std::size_t begin = seg_begin + b * cfg_.batch_size;
        std::size_t end = std::min(seg_end, begin + cfg_.batch_size);
        auto t0 = std::chrono::steady_clock::now();
        BatchLogEntry entry;
        entry.epoch = epoch;
        entry.batch = b;
        try {
          Tape<T> tape;
          auto ctx = encoder_.make_context(tape, memory, graph_);
          auto aux_lease = aux_.lease(tape);
          encoder_.apply_messages(ctx, pending);
          auto out = build_batch_loss(ctx, aux_lease, begin, end);
          tape.backward(out.loss);
          encoder_.params().zero_grads();
          aux_.zero_grads();
          encoder_.params().absorb_grads(tape, ctx.lease);
          aux_.absorb_grads(tape, aux_lease);
          encoder_.params().step(cfg_.optimizer);
          aux_.step(cfg_.optimizer);
          encoder_.write_back(ctx);
          entry.l_eta = out.l_eta;
          entry.l_eps = out.l_eps;
          entry.l_tlp = out.l_tlp;
          entry.l_pre = combined_loss_value(out.l_eta, out.l_eps, out.l_tlp, loss_cfg_.beta);
          entry.skipped_eta = out.skipped_eta;
          entry.skipped_eps = out.skipped_eps;
        } catch (const Error& err) {
          fail("pretrain aborted at epoch ", epoch, " batch ", b, ": ", err.what());
        }
        pending = batch_messages(begin, end);

        if (next_capture < schedule.size() && global_batch == schedule[next_capture]) {
          flush_pending(memory, pending);
          result.checkpoints.snapshots.push_back(memory);
          result.checkpoints.capture_batches.push_back(global_batch);
          result.checkpoints.capture_times.push_back(graph_.event(end - 1).time);
          ++next_capture;
        }
        auto t1 = std::chrono::steady_clock::now();
        entry.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        result.log.push_back(entry);
      }
      flush_pending(memory, pending);
    }
    result.final_memory = memory;
    return result;
  }

 private:
  // Apply queued messages outside any training tape so the stored memory
  // reflects every consumed event (used at checkpoints and epoch ends).
  void flush_pending(MemoryStore<T>& memory, std::vector<RawMessage>& pending) {
    if (pending.empty()) return;
    Tape<T> tape;
    auto ctx = encoder_.make_context(tape, memory, graph_);
    encoder_.apply_messages(ctx, pending);
    encoder_.write_back(ctx);
    pending.clear();
  }

  // Member node lists (TP, TN, SP, SN) for one anchor, from the plan when
  // present, sampled online otherwise. Lists of size 1 mean an empty
  // neighborhood (root only).
  std::array<std::vector<NodeId>, 4> anchor_members(EventOrdinal ordinal, NodeId anchor,
                                                    Time time) {
    std::array<std::vector<NodeId>, 4> out;
    if (plan_ && !cfg_.anchor_both_endpoints) {
      const PlanRecord* rec = plan_->find(ordinal);
      if (rec) {
        for (std::size_t s = 0; s < 4; ++s) {
          out[s].reserve(rec->members[s].size());
          for (auto [node, hop] : rec->members[s]) out[s].push_back(node);
        }
        return out;
      }
    }
    AnchorSamples s = sample_anchor(graph_, ordinal, anchor, time, sampler_cfg_, sn_pool_);
    auto names = {&s.tp, &s.tn, &s.sp, &s.sn};
    std::size_t idx = 0;
    for (const SampledSubgraph* sub : names) {
      out[idx].reserve(sub->members.size());
      for (const auto& m : sub->members) out[idx].push_back(m.node);
      ++idx;
    }
    return out;
  }

  NodeId corrupt_destination(EventOrdinal ordinal, std::uint64_t k, NodeId true_dst) const {
    NodeId begin = graph_.negative_pool_begin();
    NodeId pool = graph_.negative_pool_size();
    CPDG_REQUIRE(pool >= 2, "no eligible negative destination");
    StreamRng rng(cfg_.seed, ordinal, k, 0, hash_str("tlp_neg"));
    // single uniform draw over the pool minus the true destination
    std::uint64_t m = pool - (true_dst >= begin ? 1 : 0);
    std::uint64_t r = rng.below(m);
    NodeId cand = begin + static_cast<NodeId>(r);
    if (true_dst >= begin && cand >= true_dst) ++cand;
    return cand;
  }

  Var project_readout(typename DgnnEncoder<T>::BatchContext& ctx, Var h) const {
    if (encoder_.config().memory_dim == encoder_.config().embed_dim) return h;
    return ctx.tape->matmul(h, ctx.lease["readout.proj"]);
  }

  static Var mean_or_zero(Tape<T>& t, const std::vector<Var>& terms) {
    if (terms.empty()) return t.scalar_const(T{0});
    Var acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = t.add(acc, terms[i]);
    return t.scale(acc, T{1} / static_cast<T>(terms.size()));
  }

  const TemporalGraph& graph_;
  DgnnEncoder<T>& encoder_;
  SamplerConfig sampler_cfg_;
  LossConfig loss_cfg_;
  PretrainConfig cfg_;
  const SamplePlan* plan_;
  ParameterStore<T> aux_;
  std::vector<NodeId> sn_pool_;
};

}  // namespace cpdg
