#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "cpdg/common.hpp"
#include "cpdg/params.hpp"
#include "cpdg/temporal_graph.hpp"
#include "cpdg/tensor.hpp"

namespace cpdg {

enum class EmbedFn { Identity, TimeProjection, Attention };
enum class MsgFn { Identity, Attention, Mlp };
enum class AggFn { None, Mean, LastTime };
enum class MemFn { Rnn, Gru };

struct BackboneConfig {
  EmbedFn embed_fn = EmbedFn::Attention;
  MsgFn msg_fn = MsgFn::Identity;
  AggFn agg_fn = AggFn::LastTime;
  MemFn mem_fn = MemFn::Gru;
  std::size_t memory_dim = 32;
  std::size_t embed_dim = 32;
  std::size_t time_dim = 8;
  std::size_t embed_degree = 10;  // neighbors visible to attention embedding

  std::size_t message_dim() const {
    // identity and attention messages are [s_i || s_j-side || phi]; the mlp
    // message compresses that concat down to memory_dim
    return msg_fn == MsgFn::Mlp ? memory_dim : 2 * memory_dim + time_dim;
  }

  static BackboneConfig preset(const std::string& name) {
    BackboneConfig c;
    if (name == "jodie") {
      c.embed_fn = EmbedFn::TimeProjection;
      c.msg_fn = MsgFn::Identity;
      c.agg_fn = AggFn::None;
      c.mem_fn = MemFn::Rnn;
    } else if (name == "dyrep") {
      c.embed_fn = EmbedFn::Identity;
      c.msg_fn = MsgFn::Attention;
      c.agg_fn = AggFn::None;
      c.mem_fn = MemFn::Rnn;
    } else if (name == "tgn") {
      c.embed_fn = EmbedFn::Attention;
      c.msg_fn = MsgFn::Identity;
      c.agg_fn = AggFn::LastTime;
      c.mem_fn = MemFn::Gru;
    } else {
      throw ConfigError(concat("unknown backbone preset '", name,
                               "' (expected jodie|dyrep|tgn)"));
    }
    return c;
  }
};

// Per-node state vectors plus last-update times. All states start at zero.
template <typename T>
class MemoryStore {
 public:
  MemoryStore() = default;
  MemoryStore(std::size_t num_nodes, std::size_t dim)
      : dim_(dim), states_(num_nodes * dim, T{0}), last_update_(num_nodes, 0.0) {}

  std::size_t num_nodes() const { return last_update_.size(); }
  std::size_t dim() const { return dim_; }

  std::span<const T> row(NodeId i) const {
    return {states_.data() + i * dim_, dim_};
  }
  void set_row(NodeId i, std::span<const T> v, Time t) {
    CPDG_REQUIRE(v.size() == dim_, "memory row width mismatch");
    std::copy(v.begin(), v.end(), states_.begin() + static_cast<std::ptrdiff_t>(i * dim_));
    last_update_[i] = t;
  }
  Time last_update(NodeId i) const { return last_update_[i]; }

  void reset() {
    std::fill(states_.begin(), states_.end(), T{0});
    std::fill(last_update_.begin(), last_update_.end(), 0.0);
  }

  const std::vector<T>& raw_states() const { return states_; }
  const std::vector<Time>& raw_last_update() const { return last_update_; }

  void save(const std::string& path, Time checkpoint_time) const {
    std::ofstream os(path, std::ios::binary);
    CPDG_REQUIRE(os.good(), "cannot open ", path, " for writing");
    io::write_magic(os, "CMEM");
    io::write_pod<std::uint32_t>(os, 1);
    io::write_pod<std::uint64_t>(os, num_nodes());
    io::write_pod<std::uint64_t>(os, dim_);
    io::write_pod<std::uint8_t>(os, sizeof(T));
    io::write_pod<double>(os, checkpoint_time);
    io::write_vec(os, states_);
    io::write_vec(os, last_update_);
    CPDG_REQUIRE(os.good(), "write failure on ", path);
  }

  static MemoryStore load(const std::string& path, Time* checkpoint_time = nullptr) {
    std::ifstream is(path, std::ios::binary);
    CPDG_REQUIRE(is.good(), "cannot open memory checkpoint ", path);
    io::expect_magic(is, "CMEM", path);
    auto version = io::read_pod<std::uint32_t>(is);
    CPDG_REQUIRE(version == 1, "unsupported CMEM version ", version);
    auto n = io::read_pod<std::uint64_t>(is);
    auto d = io::read_pod<std::uint64_t>(is);
    auto dtype = io::read_pod<std::uint8_t>(is);
    CPDG_REQUIRE(dtype == sizeof(T), "memory checkpoint dtype width ", int(dtype),
                 " does not match engine width ", sizeof(T));
    auto ct = io::read_pod<double>(is);
    if (checkpoint_time) *checkpoint_time = ct;
    MemoryStore m(n, d);
    io::read_vec(is, m.states_, n * d);
    io::read_vec(is, m.last_update_, n);
    return m;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<T> states_;
  std::vector<Time> last_update_;
};

// One endpoint's view of an interaction: the node whose state the message
// updates, the other endpoint, and the event time.
struct RawMessage {
  NodeId target;
  NodeId other;
  Time time;
  EventOrdinal event;
};

// Memory-based DGNN encoder: time encoding, message function, message
// aggregator, memory updater, and embedding function, wired per backbone.
template <typename T>
class DgnnEncoder {
 public:
  DgnnEncoder(BackboneConfig cfg, std::uint64_t seed)
      : cfg_(cfg), store_(seed) {
    register_params();
  }

  const BackboneConfig& config() const { return cfg_; }
  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }

  // Tracks per-batch tape state: leased parameters plus the current row var
  // for every node touched so far. Rows enter the tape lazily as leaves and
  // are replaced by updated vars when messages apply.
  struct BatchContext {
    Tape<T>* tape = nullptr;
    typename ParameterStore<T>::Lease lease;
    MemoryStore<T>* memory = nullptr;
    const TemporalGraph* graph = nullptr;
    std::unordered_map<NodeId, Var> rows;
    std::unordered_map<NodeId, Time> pending_time;
    std::unordered_set<NodeId> dirty;

    Var row(NodeId i) {
      auto it = rows.find(i);
      if (it != rows.end()) return it->second;
      auto span = memory->row(i);
      Var v = tape->leaf(Tensor<T>::vec(std::vector<T>(span.begin(), span.end())), false);
      rows.emplace(i, v);
      return v;
    }

    Time last_update(NodeId i) const {
      auto it = pending_time.find(i);
      return it != pending_time.end() ? it->second : memory->last_update(i);
    }
  };

  BatchContext make_context(Tape<T>& tape, MemoryStore<T>& memory,
                            const TemporalGraph& graph) {
    BatchContext ctx;
    ctx.tape = &tape;
    ctx.lease = store_.lease(tape);
    ctx.memory = &memory;
    ctx.graph = &graph;
    return ctx;
  }

  // phi(dt) = cos(omega * dt + phase), differentiable in omega and phase.
  Var encode_time(BatchContext& ctx, Time dt) const {
    CPDG_REQUIRE(std::isfinite(dt) && dt >= 0,
                 "negative or non-finite time delta ", dt, " (out-of-order event?)");
    Tape<T>& t = *ctx.tape;
    return t.cos_(t.add(t.scale(ctx.lease["time.omega"], static_cast<T>(dt)),
                        ctx.lease["time.phase"]));
  }

  // Message that will update `target`'s state for an interaction with
  // `other` at time `time`.
  Var compute_message(BatchContext& ctx, NodeId target, NodeId other, Time time) const {
    Tape<T>& t = *ctx.tape;
    Time last = ctx.last_update(target);
    CPDG_REQUIRE(time >= last, "out-of-order message: event time ", time,
                 " precedes last update ", last, " of node ", target);
    Var phi = encode_time(ctx, time - last);
    Var s_target = ctx.row(target);
    Var s_other_side;
    switch (cfg_.msg_fn) {
      case MsgFn::Identity:
      case MsgFn::Mlp:
        s_other_side = ctx.row(other);
        break;
      case MsgFn::Attention:
        s_other_side = neighborhood_attention(ctx, other, time, "msgattn", nullptr);
        break;
    }
    Var raw = t.concat({s_target, s_other_side, phi});
    if (cfg_.msg_fn == MsgFn::Mlp) {
      Var h = t.relu(t.add(t.matmul(raw, ctx.lease["msg.w1"]), ctx.lease["msg.b1"]));
      return t.add(t.matmul(h, ctx.lease["msg.w2"]), ctx.lease["msg.b2"]);
    }
    return raw;
  }

  // Aggregates same-target messages (times nondecreasing). Mean averages
  // elementwise; LastTime keeps the latest (ties: latest ordinal = last entry).
  Var aggregate_messages(BatchContext& ctx, const std::vector<std::pair<Var, Time>>& msgs) const {
    CPDG_REQUIRE(!msgs.empty(), "aggregate_messages: empty message list");
    Tape<T>& t = *ctx.tape;
    if (msgs.size() == 1) return msgs[0].first;
    if (cfg_.agg_fn == AggFn::LastTime) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < msgs.size(); ++i)
        if (msgs[i].second >= msgs[best].second) best = i;
      return msgs[best].first;
    }
    // Mean (also the fallback when agg "none" receives a multi-message batch
    // outside sequential mode; sequential application never calls it).
    std::vector<Var> rows;
    rows.reserve(msgs.size());
    for (const auto& [v, _] : msgs) rows.push_back(v);
    return t.mean_rows(t.stack_rows(rows));
  }

  // Applies one aggregated message: new row = Mem(prev row, msg).
  Var update_memory(BatchContext& ctx, NodeId target, Var agg_msg, Time time) const {
    Tape<T>& t = *ctx.tape;
    CPDG_REQUIRE(time >= ctx.last_update(target), "out-of-order memory update on node ",
                 target);
    Var prev = ctx.row(target);
    Var next;
    if (cfg_.mem_fn == MemFn::Gru) {
      GruParamVars<T> p{ctx.lease["mem.w_r"], ctx.lease["mem.u_r"], ctx.lease["mem.b_r"],
                        ctx.lease["mem.w_z"], ctx.lease["mem.u_z"], ctx.lease["mem.b_z"],
                        ctx.lease["mem.w_n"], ctx.lease["mem.u_n"], ctx.lease["mem.b_n"]};
      next = gru_cell(t, agg_msg, prev, p);
    } else {
      RnnParamVars<T> p{ctx.lease["mem.w"], ctx.lease["mem.u"], ctx.lease["mem.b"]};
      next = rnn_cell(t, agg_msg, prev, p);
    }
    ctx.rows[target] = next;
    ctx.pending_time[target] = time;
    ctx.dirty.insert(target);
    return next;
  }

  // Applies a batch of raw messages in the current tape. Messages must be in
  // nondecreasing time order. Both endpoints of an event are expected to
  // appear as separate RawMessages (undirected interaction semantics).
  void apply_messages(BatchContext& ctx, const std::vector<RawMessage>& raw) const {
    if (raw.empty()) return;
    if (cfg_.agg_fn == AggFn::None) {
      // no aggregator: events touch memory one at a time, chronologically
      for (const RawMessage& m : raw) {
        Var msg = compute_message(ctx, m.target, m.other, m.time);
        update_memory(ctx, m.target, msg, m.time);
      }
      return;
    }
    std::unordered_map<NodeId, std::vector<const RawMessage*>> by_target;
    std::vector<NodeId> order;
    for (const RawMessage& m : raw) {
      auto [it, inserted] = by_target.try_emplace(m.target);
      if (inserted) order.push_back(m.target);
      it->second.push_back(&m);
    }
    for (NodeId target : order) {
      std::vector<std::pair<Var, Time>> msgs;
      if (cfg_.agg_fn == AggFn::LastTime) {
        // only the latest message survives; skip computing the others
        const RawMessage* last = by_target[target].back();
        msgs.emplace_back(compute_message(ctx, target, last->other, last->time),
                          last->time);
      } else {
        for (const RawMessage* m : by_target[target])
          msgs.emplace_back(compute_message(ctx, target, m->other, m->time), m->time);
      }
      Var agg = aggregate_messages(ctx, msgs);
      update_memory(ctx, target, agg, by_target[target].back()->time);
    }
  }

  // z_i^t per backbone. Optionally reports the attention weights over the
  // neighbor entries used (attention mode only).
  Var embed(BatchContext& ctx, NodeId node, Time time,
            std::vector<T>* attn_weights_out = nullptr) const {
    Tape<T>& t = *ctx.tape;
    Var s = ctx.row(node);
    switch (cfg_.embed_fn) {
      case EmbedFn::Identity:
        return t.matmul(s, ctx.lease["embed.proj"]);
      case EmbedFn::TimeProjection: {
        Time dt = time - ctx.last_update(node);
        CPDG_REQUIRE(dt >= 0, "embed at time ", time, " before last update of node ", node);
        Var factor = t.add_const(t.scale(ctx.lease["embed.time_w"], static_cast<T>(dt)),
                                 T{1});
        return t.matmul(t.mul(factor, s), ctx.lease["embed.proj"]);
      }
      case EmbedFn::Attention: {
        Var attn = neighborhood_attention(ctx, node, time, "embattn", attn_weights_out);
        return t.matmul(t.concat({s, attn}), ctx.lease["embed.out"]);
      }
    }
    fail("unreachable embed mode");
  }

  // Write updated rows back into the memory store (values detach here; the
  // tape is about to be dropped).
  void write_back(BatchContext& ctx) const {
    for (NodeId node : ctx.dirty) {
      const auto& v = ctx.tape->value(ctx.rows.at(node));
      ctx.memory->set_row(node, {v.data(), v.size()}, ctx.pending_time.at(node));
    }
  }

 private:
  // Scaled-dot attention of `node` over its most recent embed_degree
  // neighbor events before `time`. Returns a zero vector for nodes with no
  // history (the caller's own-state path then dominates).
  Var neighborhood_attention(BatchContext& ctx, NodeId node, Time time,
                             const std::string& prefix,
                             std::vector<T>* weights_out) const {
    Tape<T>& t = *ctx.tape;
    auto span = ctx.graph->neighbors_before(node, time);
    if (span.empty()) {
      if (weights_out) weights_out->clear();
      return t.constant(Tensor<T>::zeros({cfg_.memory_dim}));
    }
    std::size_t take = std::min<std::size_t>(cfg_.embed_degree, span.size());
    auto recent = span.subspan(span.size() - take, take);
    Var q = t.matmul(ctx.row(node), ctx.lease[prefix + ".wq"]);
    std::vector<Var> key_rows, val_rows;
    key_rows.reserve(take);
    val_rows.reserve(take);
    for (const NeighborEntry& e : recent) {
      Var phi = encode_time(ctx, time - e.time);
      Var in = t.concat({ctx.row(e.node), phi});
      key_rows.push_back(t.matmul(in, ctx.lease[prefix + ".wk"]));
      val_rows.push_back(t.matmul(in, ctx.lease[prefix + ".wv"]));
    }
    Var keys = t.stack_rows(key_rows);
    Var values = t.stack_rows(val_rows);
    std::size_t dk = t.shape(q)[0];
    Var scores = t.scale(t.matmul(keys, q), T{1} / std::sqrt(static_cast<T>(dk)));
    Var w = t.softmax(scores);
    if (weights_out) *weights_out = t.value(w);
    return t.matmul(w, values);
  }

  void register_params() {
    const std::size_t d = cfg_.memory_dim;
    const std::size_t dz = cfg_.embed_dim;
    const std::size_t dt = cfg_.time_dim;
    const std::size_t dm = cfg_.message_dim();
    const std::size_t raw = 2 * d + dt;

    store_.add("time.omega", {dt});
    store_.add("time.phase", {dt});

    if (cfg_.msg_fn == MsgFn::Mlp) {
      store_.add("msg.w1", {raw, d});
      store_.add("msg.b1", {d}, Init::Zero);
      store_.add("msg.w2", {d, d});
      store_.add("msg.b2", {d}, Init::Zero);
    } else if (cfg_.msg_fn == MsgFn::Attention) {
      store_.add("msgattn.wq", {d, d});
      store_.add("msgattn.wk", {d + dt, d});
      store_.add("msgattn.wv", {d + dt, d});
    }

    if (cfg_.mem_fn == MemFn::Gru) {
      for (const char* g : {"r", "z", "n"}) {
        store_.add(concat("mem.w_", g), {dm, d});
        store_.add(concat("mem.u_", g), {d, d});
        store_.add(concat("mem.b_", g), {d}, Init::Zero);
      }
    } else {
      store_.add("mem.w", {dm, d});
      store_.add("mem.u", {d, d});
      store_.add("mem.b", {d}, Init::Zero);
    }

    switch (cfg_.embed_fn) {
      case EmbedFn::Identity:
        store_.add("embed.proj", {d, dz}, d == dz ? Init::Identity : Init::Xavier);
        break;
      case EmbedFn::TimeProjection:
        store_.add("embed.time_w", {d}, Init::Zero);
        store_.add("embed.proj", {d, dz}, d == dz ? Init::Identity : Init::Xavier);
        break;
      case EmbedFn::Attention:
        store_.add("embattn.wq", {d, d});
        store_.add("embattn.wk", {d + dt, d});
        store_.add("embattn.wv", {d + dt, d});
        store_.add("embed.out", {2 * d, dz});
        break;
    }
    // readouts pool memory rows; reconcile their width to the contrast
    // embedding space when the two differ
    if (d != dz) store_.add("readout.proj", {d, dz});
  }

  BackboneConfig cfg_;
  ParameterStore<T> store_;
};

}  // namespace cpdg
