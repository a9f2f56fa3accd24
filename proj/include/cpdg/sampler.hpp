#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cpdg/common.hpp"
#include "cpdg/temporal_graph.hpp"

namespace cpdg {

struct SamplerConfig {
  std::uint32_t eta = 20;      // breadth per hop
  std::uint32_t epsilon = 20;  // recency width
  std::uint32_t depth = 2;     // hops
  double tau = 1.0;            // softmax temperature
  std::uint64_t seed = 0;

  void validate() const {
    CPDG_REQUIRE(eta >= 1 && epsilon >= 1 && depth >= 1,
                 "sampler eta/epsilon/depth must all be >= 1");
    CPDG_REQUIRE(tau > 0, "sampler tau must be positive, got ", tau);
  }
};

enum class SubgraphKind : std::uint8_t {
  TemporalPositive = 0,
  TemporalNegative = 1,
  StructuralPositive = 2,
  StructuralNegative = 3,
};

enum class BfsMode { Chronological, Reverse };

struct SubgraphMember {
  NodeId node;
  std::uint32_t hop;
  std::int32_t parent;  // index into members; -1 for the root
};

struct SampledSubgraph {
  NodeId root = 0;
  Time anchor_time = 0;
  SubgraphKind kind = SubgraphKind::TemporalPositive;
  bool empty_neighborhood = false;
  std::vector<SubgraphMember> members;  // members[0] is always the root
};

namespace detail {

// softmax with max subtraction; exact [1.0] for singletons.
inline std::vector<double> stable_softmax(std::vector<double> scores) {
  if (scores.size() == 1) return {1.0};
  double mx = *std::max_element(scores.begin(), scores.end());
  double sum = 0;
  for (double& s : scores) {
    s = std::exp(s - mx);
    sum += s;
  }
  for (double& s : scores) s /= sum;
  return scores;
}

inline std::vector<double> normalized_times(std::span<const Time> times, Time t) {
  CPDG_REQUIRE(!times.empty(), "no neighbors");
  for (Time tu : times)
    CPDG_REQUIRE(tu < t, "neighbor time ", tu, " is not before cutoff ", t);
  if (times.size() == 1) return {0.0};
  Time lo = *std::min_element(times.begin(), times.end());
  double denom = t - lo;
  std::vector<double> out(times.size());
  for (std::size_t i = 0; i < times.size(); ++i)
    out[i] = (times[i] - lo) / denom;
  return out;
}

}  // namespace detail

// Recency-weighted sampling probabilities: p_u proportional to
// exp(t_hat_u / tau), t_hat_u = (t_u - min T) / (t - min T).
inline std::vector<double> chrono_probs(std::span<const Time> times, Time t, double tau) {
  CPDG_REQUIRE(tau > 0, "tau must be positive");
  auto scores = detail::normalized_times(times, t);
  for (double& s : scores) s /= tau;
  return detail::stable_softmax(std::move(scores));
}

// Mirror weighting: p_u proportional to exp((1 - t_hat_u) / tau).
inline std::vector<double> reverse_chrono_probs(std::span<const Time> times, Time t,
                                                double tau) {
  CPDG_REQUIRE(tau > 0, "tau must be positive");
  auto scores = detail::normalized_times(times, t);
  for (double& s : scores) s = (1.0 - s) / tau;
  return detail::stable_softmax(std::move(scores));
}

namespace detail {

// Successive weighted draws without replacement over neighbor entries;
// entries resolving to a node already chosen under this parent are consumed
// but not re-added, so members under one parent stay distinct.
inline void expand_weighted(const TemporalGraph& g, SampledSubgraph& out,
                            std::size_t parent_idx, std::uint32_t hop,
                            const SamplerConfig& cfg, BfsMode mode,
                            std::uint64_t stream, std::vector<std::size_t>& added) {
  NodeId parent = out.members[parent_idx].node;
  auto span = g.neighbors_before(parent, out.anchor_time);
  if (span.empty()) return;

  std::vector<Time> times(span.size());
  for (std::size_t i = 0; i < span.size(); ++i) times[i] = span[i].time;
  std::vector<double> weights = (mode == BfsMode::Chronological)
                                    ? chrono_probs(times, out.anchor_time, cfg.tau)
                                    : reverse_chrono_probs(times, out.anchor_time, cfg.tau);

  StreamRng rng(cfg.seed, stream, hop, parent_idx,
                mode == BfsMode::Chronological ? 0x7470ULL : 0x746eULL);
  std::vector<bool> dead(span.size(), false);
  double total = 1.0;
  std::vector<NodeId> chosen;
  std::size_t alive = span.size();
  while (chosen.size() < cfg.eta && alive > 0) {
    double x = rng.uniform() * total;
    std::size_t pick = span.size();
    double acc = 0;
    for (std::size_t i = 0; i < span.size(); ++i) {
      if (dead[i]) continue;
      acc += weights[i];
      pick = i;
      if (x < acc) break;  // falls through to the last alive entry on roundoff
    }
    dead[pick] = true;
    total -= weights[pick];
    --alive;
    NodeId cand = span[pick].node;
    if (std::find(chosen.begin(), chosen.end(), cand) == chosen.end()) {
      chosen.push_back(cand);
      out.members.push_back({cand, hop, static_cast<std::int32_t>(parent_idx)});
      added.push_back(out.members.size() - 1);
    }
  }
}

}  // namespace detail

// Temporal eta-BFS: per frontier node draw up to eta distinct neighbors
// without replacement, weighted chronologically (positives) or
// reverse-chronologically (negatives), recursing to cfg.depth hops. All
// expansion uses the anchor-time cutoff. Deterministic given (seed, stream).
inline SampledSubgraph sample_eta_bfs(const TemporalGraph& g, NodeId root, Time t,
                                      const SamplerConfig& cfg, BfsMode mode,
                                      std::uint64_t stream) {
  cfg.validate();
  CPDG_REQUIRE(root < g.num_nodes(), "root node ", root, " out of range");
  SampledSubgraph out;
  out.root = root;
  out.anchor_time = t;
  out.kind = mode == BfsMode::Chronological ? SubgraphKind::TemporalPositive
                                            : SubgraphKind::TemporalNegative;
  out.members.push_back({root, 0, -1});
  out.empty_neighborhood = g.neighbors_before(root, t).empty();

  std::vector<std::size_t> frontier = {0};
  for (std::uint32_t hop = 1; hop <= cfg.depth && !frontier.empty(); ++hop) {
    std::vector<std::size_t> next;
    for (std::size_t parent_idx : frontier)
      detail::expand_weighted(g, out, parent_idx, hop, cfg, mode, stream, next);
    frontier = std::move(next);
  }
  return out;
}

// Structural epsilon-DFS: per frontier node select exactly the epsilon
// most recently interacted distinct neighbors (deterministic), recursing
// depth-first to cfg.depth hops at the anchor-time cutoff.
inline SampledSubgraph sample_eps_dfs(const TemporalGraph& g, NodeId root, Time t,
                                      const SamplerConfig& cfg,
                                      SubgraphKind kind = SubgraphKind::StructuralPositive) {
  cfg.validate();
  CPDG_REQUIRE(root < g.num_nodes(), "root node ", root, " out of range");
  SampledSubgraph out;
  out.root = root;
  out.anchor_time = t;
  out.kind = kind;
  out.members.push_back({root, 0, -1});
  out.empty_neighborhood = g.neighbors_before(root, t).empty();

  struct Frame {
    std::size_t member_idx;
    std::uint32_t hop;
  };
  std::vector<Frame> stack = {{0, 0}};
  while (!stack.empty()) {
    Frame f = stack.back();
    stack.pop_back();
    if (f.hop == cfg.depth) continue;
    NodeId node = out.members[f.member_idx].node;
    auto span = g.neighbors_before(node, t);
    // walk from most recent; ties resolve to the later ingest position
    std::vector<NodeId> chosen;
    for (std::size_t r = span.size(); r-- > 0 && chosen.size() < cfg.epsilon;) {
      NodeId cand = span[r].node;
      if (std::find(chosen.begin(), chosen.end(), cand) == chosen.end())
        chosen.push_back(cand);
    }
    for (NodeId c : chosen) {
      out.members.push_back({c, f.hop + 1, static_cast<std::int32_t>(f.member_idx)});
      stack.push_back({out.members.size() - 1, f.hop + 1});
    }
  }
  return out;
}

// Nodes eligible as structural-negative roots: any node with at least one
// event, in id order.
inline std::vector<NodeId> structural_negative_pool(const TemporalGraph& g) {
  std::vector<NodeId> pool;
  for (NodeId i = 0; i < g.num_nodes(); ++i)
    if (g.total_degree(i) > 0) pool.push_back(i);
  return pool;
}

// Uniform draw over eligible nodes excluding the anchor (single draw, exact).
inline NodeId sample_structural_negative_root(const TemporalGraph& g, NodeId anchor,
                                              StreamRng& rng,
                                              const std::vector<NodeId>* pool_hint = nullptr) {
  std::vector<NodeId> local;
  const std::vector<NodeId>& pool = pool_hint ? *pool_hint : (local = structural_negative_pool(g));
  auto it = std::lower_bound(pool.begin(), pool.end(), anchor);
  bool anchor_in_pool = it != pool.end() && *it == anchor;
  std::size_t m = pool.size() - (anchor_in_pool ? 1 : 0);
  CPDG_REQUIRE(m >= 1, "no eligible structural-negative root besides anchor ", anchor);
  std::size_t r = rng.below(m);
  if (anchor_in_pool && r >= static_cast<std::size_t>(it - pool.begin())) ++r;
  return pool[r];
}

// Upper bound on members of one subgraph: 1 + w + w^2 + ... + w^k.
inline std::size_t subgraph_member_budget(std::size_t width, std::size_t depth) {
  std::size_t total = 1, level = 1;
  for (std::size_t h = 0; h < depth; ++h) {
    level *= width;
    total += level;
  }
  return total;
}

// ---- precomputed sampling plans ---------------------------------------------

struct PlanRecord {
  EventOrdinal event;
  // TP, TN, SP, SN in kind order; (node, hop) pairs as serialized
  std::array<std::vector<std::pair<NodeId, std::uint32_t>>, 4> members;
  NodeId sn_root = kInvalidNode;
};

inline std::vector<std::pair<NodeId, std::uint32_t>> strip_parents(
    const SampledSubgraph& s) {
  std::vector<std::pair<NodeId, std::uint32_t>> out;
  out.reserve(s.members.size());
  for (const auto& m : s.members) out.emplace_back(m.node, m.hop);
  return out;
}

// The four contrastive subgraphs for one anchor event, sampled online.
struct AnchorSamples {
  SampledSubgraph tp, tn, sp, sn;
};

inline AnchorSamples sample_anchor(const TemporalGraph& g, EventOrdinal ordinal,
                                   NodeId anchor, Time t, const SamplerConfig& cfg,
                                   const std::vector<NodeId>& sn_pool) {
  AnchorSamples out;
  out.tp = sample_eta_bfs(g, anchor, t, cfg, BfsMode::Chronological, ordinal);
  out.tn = sample_eta_bfs(g, anchor, t, cfg, BfsMode::Reverse, ordinal);
  out.sp = sample_eps_dfs(g, anchor, t, cfg, SubgraphKind::StructuralPositive);
  StreamRng rng(cfg.seed, ordinal, 0, 0, hash_str("sn_root"));
  NodeId neg_root = sample_structural_negative_root(g, anchor, rng, &sn_pool);
  out.sn = sample_eps_dfs(g, neg_root, t, cfg, SubgraphKind::StructuralNegative);
  return out;
}

class SamplePlan {
 public:
  SamplePlan() = default;
  SamplePlan(SamplerConfig cfg, std::vector<PlanRecord> records)
      : cfg_(cfg), records_(std::move(records)) {
    rebuild_lookup();
  }

  const SamplerConfig& config() const { return cfg_; }
  const std::vector<PlanRecord>& records() const { return records_; }

  const PlanRecord* find(EventOrdinal ordinal) const {
    auto it = lookup_.find(ordinal);
    return it == lookup_.end() ? nullptr : &records_[it->second];
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    CPDG_REQUIRE(os.good(), "cannot open ", path, " for writing");
    io::write_magic(os, "CPLN");
    io::write_pod<std::uint32_t>(os, 1);
    io::write_pod<std::uint32_t>(os, cfg_.eta);
    io::write_pod<std::uint32_t>(os, cfg_.epsilon);
    io::write_pod<std::uint32_t>(os, cfg_.depth);
    io::write_pod<double>(os, cfg_.tau);
    io::write_pod<std::uint64_t>(os, cfg_.seed);
    io::write_pod<std::uint64_t>(os, records_.size());
    for (const PlanRecord& r : records_) {
      io::write_pod<std::uint64_t>(os, r.event);
      io::write_pod<std::uint32_t>(os, r.sn_root);
      for (const auto& list : r.members) {
        io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(list.size()));
        for (auto [node, hop] : list) {
          io::write_pod<std::uint32_t>(os, node);
          io::write_pod<std::uint32_t>(os, hop);
        }
      }
    }
    CPDG_REQUIRE(os.good(), "write failure on ", path);
  }

  static SamplePlan load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    CPDG_REQUIRE(is.good(), "cannot open plan file ", path);
    io::expect_magic(is, "CPLN", path);
    auto version = io::read_pod<std::uint32_t>(is);
    CPDG_REQUIRE(version == 1, "unsupported CPLN version ", version);
    SamplerConfig cfg;
    cfg.eta = io::read_pod<std::uint32_t>(is);
    cfg.epsilon = io::read_pod<std::uint32_t>(is);
    cfg.depth = io::read_pod<std::uint32_t>(is);
    cfg.tau = io::read_pod<double>(is);
    cfg.seed = io::read_pod<std::uint64_t>(is);
    auto count = io::read_pod<std::uint64_t>(is);
    std::vector<PlanRecord> records(count);
    for (auto& r : records) {
      r.event = io::read_pod<std::uint64_t>(is);
      r.sn_root = io::read_pod<std::uint32_t>(is);
      for (auto& list : r.members) {
        auto n = io::read_pod<std::uint32_t>(is);
        list.resize(n);
        for (auto& [node, hop] : list) {
          node = io::read_pod<std::uint32_t>(is);
          hop = io::read_pod<std::uint32_t>(is);
        }
      }
    }
    return SamplePlan(cfg, std::move(records));
  }

 private:
  void rebuild_lookup() {
    lookup_.clear();
    lookup_.reserve(records_.size());
    for (std::size_t i = 0; i < records_.size(); ++i)
      lookup_[records_[i].event] = i;
  }

  SamplerConfig cfg_;
  std::vector<PlanRecord> records_;
  std::unordered_map<EventOrdinal, std::size_t> lookup_;
};

// Precompute TP/TN/SP/SN for every event in [begin, end), anchored at the
// source node. Replaying the plan is bit-identical to online sampling with
// the same seed because both paths share the per-ordinal RNG streams.
inline SamplePlan precompute_sample_plan(const TemporalGraph& g, const SamplerConfig& cfg,
                                         std::size_t begin, std::size_t end) {
  cfg.validate();
  CPDG_REQUIRE(begin < end && end <= g.num_events(), "empty or out-of-range segment");
  auto pool = structural_negative_pool(g);
  std::vector<PlanRecord> records;
  records.reserve(end - begin);
  for (std::size_t k = begin; k < end; ++k) {
    const Event& e = g.event(k);
    AnchorSamples s = sample_anchor(g, k, e.src, e.time, cfg, pool);
    PlanRecord r;
    r.event = k;
    r.sn_root = s.sn.root;
    r.members[0] = strip_parents(s.tp);
    r.members[1] = strip_parents(s.tn);
    r.members[2] = strip_parents(s.sp);
    r.members[3] = strip_parents(s.sn);
    records.push_back(std::move(r));
  }
  return SamplePlan(cfg, std::move(records));
}

}  // namespace cpdg
