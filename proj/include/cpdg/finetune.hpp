#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <unordered_map>
#include <string>
#include <vector>

#include "cpdg/common.hpp"
#include "cpdg/dgnn.hpp"
#include "cpdg/metrics.hpp"
#include "cpdg/params.hpp"
#include "cpdg/pretrain.hpp"
#include "cpdg/temporal_graph.hpp"
#include "cpdg/tensor.hpp"

#include <nlohmann/json.hpp>

namespace cpdg {

enum class EieMode { Full, Mean, Attn, Gru };
enum class Task { LinkPrediction, NodeClassification };

inline EieMode eie_mode_from_string(const std::string& s) {
  if (s == "full") return EieMode::Full;
  if (s == "eie-mean") return EieMode::Mean;
  if (s == "eie-attn") return EieMode::Attn;
  if (s == "eie-gru") return EieMode::Gru;
  throw ConfigError(concat("unknown fine-tune mode '", s,
                           "' (expected full|eie-mean|eie-attn|eie-gru)"));
}

inline std::string to_string(EieMode m) {
  switch (m) {
    case EieMode::Full: return "full";
    case EieMode::Mean: return "eie-mean";
    case EieMode::Attn: return "eie-attn";
    case EieMode::Gru: return "eie-gru";
  }
  return "?";
}

struct EIEConfig {
  EieMode mode = EieMode::Gru;
  std::size_t mlp_hidden = 0;  // 0: defaults to the EI dimension
  std::size_t mlp_out = 0;     // 0: defaults to the EI dimension
};

struct FinetuneConfig {
  Task task = Task::LinkPrediction;
  EIEConfig eie;
  std::size_t epochs = 10;
  std::size_t batch_size = 256;
  OptimizerConfig optimizer;            // encoder parameters
  double head_lr = 0;                   // head/EIE parameters; 0: same as encoder
  std::size_t head_hidden = 0;          // task-head hidden width; 0: embed dim
  std::size_t patience = 3;  // epochs without val AUC improvement
  int negatives_per_edge = 1;
  std::uint64_t seed = 0;
  std::uint64_t eval_seed = 0xe7a1;  // negative stream shared across modes
  std::vector<double> split_ratios = {0.8, 0.1, 0.1};

  OptimizerConfig head_optimizer() const {
    OptimizerConfig o = optimizer;
    if (head_lr > 0) o.lr = head_lr;
    return o;
  }
};

struct FinetuneEpochEntry {
  std::size_t epoch = 0;
  double train_loss = 0;  // mean over batches
  double val_auc = 0;
};

struct FinetuneMetrics {
  std::string task;
  std::string mode;
  std::uint64_t seed = 0;
  double auc = 0;
  double ap = 0;
  double micro_f1 = 0;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double initial_loss = 0;  // first training batch loss, for isolation checks
  std::vector<FinetuneEpochEntry> epoch_log;

  nlohmann::json to_json() const {
    return {{"task", task}, {"mode", mode},       {"seed", seed},
            {"auc", auc},   {"ap", ap},           {"micro_f1", micro_f1},
            {"epochs_run", epochs_run}, {"best_epoch", best_epoch}};
  }
};

// Order-invariant fusion without learnable parts: per-node elementwise mean
// over the l snapshots.
template <typename T>
Tensor<T> fuse_checkpoints_mean(const CheckpointSequence<T>& seq) {
  CPDG_REQUIRE(seq.count() >= 1, "need at least one checkpoint");
  std::size_t n = seq.snapshots[0].num_nodes();
  std::size_t d = seq.snapshots[0].dim();
  Tensor<T> out({n, d});
  for (const auto& snap : seq.snapshots) {
    CPDG_REQUIRE(snap.num_nodes() == n && snap.dim() == d,
                 "inconsistent checkpoint shapes");
    for (std::size_t i = 0; i < n * d; ++i)
      out.data[i] += snap.raw_states()[i];
  }
  for (auto& v : out.data) v /= static_cast<T>(seq.count());
  return out;
}

// Downstream adaptation driver: full fine-tuning or one of the EIE variants.
// The encoder arrives initialized (pre-trained or random); its parameters,
// the task head, and any EIE fusion parameters train jointly.
template <typename T>
class FinetuneDriver {
 public:
  FinetuneDriver(const TemporalGraph& graph, DgnnEncoder<T>& encoder,
                 const CheckpointSequence<T>* checkpoints, FinetuneConfig cfg)
      : graph_(graph),
        encoder_(encoder),
        checkpoints_(checkpoints),
        cfg_(cfg),
        aux_(cfg.seed ^ hash_str("finetune_head")) {
    if (cfg_.eie.mode != EieMode::Full) {
      CPDG_REQUIRE(checkpoints_ && checkpoints_->count() >= 1,
                   "EIE fine-tuning requires a checkpoint sequence");
    }
    register_params();
  }

  ParameterStore<T>& aux_params() { return aux_; }
  std::size_t enhanced_dim() const { return enhanced_dim_; }

  // ---- evolution information fusion -----------------------------------------

  // EI row of one node on the tape. Nodes unseen in pre-training get zeros.
  // For attention mode the per-snapshot weights (softmax over l) can be
  // exported for inspection.
  Var fuse_node(typename DgnnEncoder<T>::BatchContext& ctx,
                const typename ParameterStore<T>::Lease& aux_lease, NodeId node,
                Var z_down, std::vector<T>* attn_weights_out = nullptr) const {
    Tape<T>& t = *ctx.tape;
    const std::size_t d = checkpoints_->snapshots[0].dim();
    if (node >= checkpoints_->snapshots[0].num_nodes())
      return t.constant(Tensor<T>::zeros({d}));

    std::vector<Var> snaps;
    snaps.reserve(checkpoints_->count());
    for (const auto& s : checkpoints_->snapshots) {
      auto row = s.row(node);
      snaps.push_back(t.constant(Tensor<T>::vec(std::vector<T>(row.begin(), row.end()))));
    }
    switch (cfg_.eie.mode) {
      case EieMode::Mean:
        return snaps.size() == 1 ? snaps[0] : t.mean_rows(t.stack_rows(snaps));
      case EieMode::Attn: {
        std::vector<Var> scores;
        scores.reserve(snaps.size());
        for (Var s : snaps) {
          Var in = t.concat({s, z_down});
          Var h = t.relu(t.add(t.matmul(in, aux_lease["eie.fa_w1"]),
                               aux_lease["eie.fa_b1"]));
          scores.push_back(t.add(t.matmul(h, aux_lease["eie.fa_w2"]),
                                 aux_lease["eie.fa_b2"]));
        }
        Var w = t.softmax(t.concat(scores));
        if (attn_weights_out) *attn_weights_out = t.value(w);
        return t.matmul(w, t.stack_rows(snaps));
      }
      case EieMode::Gru: {
        GruParamVars<T> p{aux_lease["eie.gru_w_r"], aux_lease["eie.gru_u_r"],
                          aux_lease["eie.gru_b_r"], aux_lease["eie.gru_w_z"],
                          aux_lease["eie.gru_u_z"], aux_lease["eie.gru_b_z"],
                          aux_lease["eie.gru_w_n"], aux_lease["eie.gru_u_n"],
                          aux_lease["eie.gru_b_n"]};
        Var h = t.constant(Tensor<T>::zeros({d}));
        for (Var s : snaps) h = gru_cell(t, s, h, p);
        return h;
      }
      case EieMode::Full:
        break;
    }
    fail("fuse_node called in full mode");
  }

  // Z^eie = [Z^down || MLP(EI)]; plain Z^down in full mode. Mean and gru
  // fusion are independent of Z^down, so their MLP(EI) vars are cached per
  // node within one tape.
  Var enhanced_embedding(typename DgnnEncoder<T>::BatchContext& ctx,
                         const typename ParameterStore<T>::Lease& aux_lease,
                         NodeId node, Time time) const {
    Tape<T>& t = *ctx.tape;
    Var z_down = encoder_.embed(ctx, node, time);
    if (cfg_.eie.mode == EieMode::Full) return z_down;
    bool cacheable = cfg_.eie.mode != EieMode::Attn;
    if (cacheable) {
      if (ei_cache_tape_ != t.uid()) {
        ei_cache_.clear();
        ei_cache_tape_ = t.uid();
      }
      auto it = ei_cache_.find(node);
      if (it != ei_cache_.end()) return t.concat({z_down, it->second});
    }
    Var ei = fuse_node(ctx, aux_lease, node, z_down);
    Var h = t.relu(t.add(t.matmul(ei, aux_lease["eie.mlp_w1"]), aux_lease["eie.mlp_b1"]));
    Var m = t.add(t.matmul(h, aux_lease["eie.mlp_w2"]), aux_lease["eie.mlp_b2"]);
    if (cacheable) ei_cache_[node] = m;
    return t.concat({z_down, m});
  }

  // Whole-matrix fusion with the current parameters (inference only);
  // z_down defaults to zero vectors when the attention mode needs a query
  // and none is supplied.
  Tensor<T> fuse_checkpoints(const Tensor<T>* z_down = nullptr) const {
    CPDG_REQUIRE(cfg_.eie.mode != EieMode::Full, "full mode has no fusion");
    std::size_t n = checkpoints_->snapshots[0].num_nodes();
    std::size_t d = checkpoints_->snapshots[0].dim();
    if (cfg_.eie.mode == EieMode::Attn)
      CPDG_REQUIRE(z_down != nullptr, "attention fusion requires downstream embeddings");
    Tensor<T> out({n, d});
    Tape<T> tape;
    MemoryStore<T> dummy(0, 0);
    auto ctx = encoder_.make_context(tape, dummy, graph_);
    auto aux_lease = aux_.lease(tape);
    for (NodeId i = 0; i < n; ++i) {
      Var zq;
      if (cfg_.eie.mode == EieMode::Attn) {
        std::vector<T> row(z_down->data.begin() + i * z_down->shape[1],
                           z_down->data.begin() + (i + 1) * z_down->shape[1]);
        zq = tape.constant(Tensor<T>::vec(std::move(row)));
      } else {
        zq = tape.constant(Tensor<T>::zeros({encoder_.config().embed_dim}));
      }
      Var ei = fuse_node(ctx, aux_lease, i, zq);
      const auto& v = tape.value(ei);
      std::copy(v.begin(), v.end(), out.data.begin() + i * d);
    }
    return out;
  }

  // ---- training --------------------------------------------------------------

  FinetuneMetrics run(std::size_t seg_begin, std::size_t seg_end,
                      MemoryStore<T>& memory) {
    CPDG_REQUIRE(seg_begin < seg_end && seg_end <= graph_.num_events(),
                 "finetune segment empty or out of range");
    if (cfg_.task == Task::NodeClassification) {
      bool any = false;
      for (std::size_t k = seg_begin; k < seg_end && !any; ++k)
        any = graph_.event(k).label >= 0;
      CPDG_REQUIRE(any, "node-classification on a label-free segment");
    }

    // chronological train/val/test carve within the downstream segment
    const std::size_t n = seg_end - seg_begin;
    CPDG_REQUIRE(cfg_.split_ratios.size() == 3, "finetune split needs 3 ratios");
    std::size_t train_end =
        seg_begin + static_cast<std::size_t>(std::llround(cfg_.split_ratios[0] * n));
    std::size_t val_end = seg_begin + static_cast<std::size_t>(std::llround(
                                          (cfg_.split_ratios[0] + cfg_.split_ratios[1]) * n));
    CPDG_REQUIRE(seg_begin < train_end && train_end < val_end && val_end < seg_end,
                 "downstream segment too small to carve train/val/test");

    FinetuneMetrics best_metrics;
    double best_val_auc = -1;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
    auto best_encoder = encoder_.params();
    auto best_aux = aux_;
    auto best_memory = memory;
    double initial_loss = 0;
    bool first_batch = true;

    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      ++epochs_run;
      memory.reset();
      std::vector<RawMessage> pending;
      double loss_sum = 0;
      std::size_t batches = 0;
      for (std::size_t b = seg_begin; b < train_end; b += cfg_.batch_size) {
        std::size_t e = std::min(train_end, b + cfg_.batch_size);
        double loss = train_batch(memory, pending, b, e);
        loss_sum += loss;
        ++batches;
        if (first_batch) {
          initial_loss = loss;
          first_batch = false;
        }
      }
      // validation continues the memory stream without training
      MetricReport val = eval_range(memory, pending, train_end, val_end);
      flush(memory, pending);
      best_metrics.epoch_log.push_back(
          {epoch, batches ? loss_sum / static_cast<double>(batches) : 0.0, val.auc});
      if (val.auc > best_val_auc + 1e-12) {
        best_val_auc = val.auc;
        best_epoch = epoch;
        best_encoder = encoder_.params();
        best_aux = aux_;
        best_memory = memory;  // state after consuming train+val this epoch
      } else if (epoch - best_epoch >= cfg_.patience) {
        break;
      }
    }

    encoder_.params() = best_encoder;
    aux_ = best_aux;

    // test continues from the best epoch's memory, exactly the stream the
    // selected head was validated on
    memory = best_memory;
    std::vector<RawMessage> pending;
    MetricReport test = eval_range(memory, pending, val_end, seg_end);
    flush(memory, pending);

    best_metrics.task = cfg_.task == Task::LinkPrediction ? "link-prediction"
                                                          : "node-classification";
    best_metrics.mode = to_string(cfg_.eie.mode);
    best_metrics.seed = cfg_.seed;
    best_metrics.auc = test.auc;
    best_metrics.ap = test.ap;
    best_metrics.micro_f1 = test.micro_f1;
    best_metrics.epochs_run = epochs_run;
    best_metrics.best_epoch = best_epoch;
    best_metrics.initial_loss = initial_loss;
    return best_metrics;
  }

  // Scores a range without training. Pending messages from previous batches
  // apply first; every event is scored before its own message lands.
  MetricReport eval_range(MemoryStore<T>& memory, std::vector<RawMessage>& pending,
                          std::size_t begin, std::size_t end) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t b = begin; b < end; b += cfg_.batch_size) {
      std::size_t e = std::min(end, b + cfg_.batch_size);
      Tape<T> tape;
      auto ctx = encoder_.make_context(tape, memory, graph_);
      auto aux_lease = aux_.lease(tape);
      encoder_.apply_messages(ctx, pending);
      for (std::size_t k = b; k < e; ++k) {
        const Event& ev = graph_.event(k);
        if (cfg_.task == Task::LinkPrediction) {
          Var zi = enhanced_embedding(ctx, aux_lease, ev.src, ev.time);
          Var zj = enhanced_embedding(ctx, aux_lease, ev.dst, ev.time);
          scores.push_back(sigmoid_of(tape, head_logit(ctx, aux_lease, zi, &zj)));
          labels.push_back(1);
          NodeId jn = eval_negative(k, ev.dst);
          Var zjn = enhanced_embedding(ctx, aux_lease, jn, ev.time);
          scores.push_back(sigmoid_of(tape, head_logit(ctx, aux_lease, zi, &zjn)));
          labels.push_back(0);
        } else {
          if (ev.label < 0) continue;
          Var zi = enhanced_embedding(ctx, aux_lease, ev.src, ev.time);
          scores.push_back(sigmoid_of(tape, head_logit(ctx, aux_lease, zi, nullptr)));
          labels.push_back(ev.label);
        }
      }
      encoder_.write_back(ctx);
      pending = messages_for(b, e);
    }
    return compute_metrics(scores, labels);
  }

 private:
  Var head_logit(typename DgnnEncoder<T>::BatchContext& ctx,
                 const typename ParameterStore<T>::Lease& aux_lease, Var zi,
                 const Var* zj) const {
    Tape<T>& t = *ctx.tape;
    Var x = zj ? t.concat({zi, *zj}) : zi;
    Var h = t.relu(t.add(t.matmul(x, aux_lease["head.w1"]), aux_lease["head.b1"]));
    return t.add(t.matmul(h, aux_lease["head.w2"]), aux_lease["head.b2"]);
  }

  static double sigmoid_of(Tape<T>& tape, Var logit) {
    double x = static_cast<double>(tape.scalar_value(logit));
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }

  double train_batch(MemoryStore<T>& memory, std::vector<RawMessage>& pending,
                     std::size_t begin, std::size_t end) {
    Tape<T> tape;
    auto ctx = encoder_.make_context(tape, memory, graph_);
    auto aux_lease = aux_.lease(tape);
    encoder_.apply_messages(ctx, pending);

    std::vector<Var> terms;
    for (std::size_t k = begin; k < end; ++k) {
      const Event& ev = graph_.event(k);
      if (cfg_.task == Task::LinkPrediction) {
        Var zi = enhanced_embedding(ctx, aux_lease, ev.src, ev.time);
        Var zj = enhanced_embedding(ctx, aux_lease, ev.dst, ev.time);
        terms.push_back(tape.bce_with_logits(head_logit(ctx, aux_lease, zi, &zj), T{1}));
        for (int neg = 0; neg < cfg_.negatives_per_edge; ++neg) {
          NodeId jn = train_negative(k, static_cast<std::uint64_t>(neg), ev.dst);
          Var zjn = enhanced_embedding(ctx, aux_lease, jn, ev.time);
          terms.push_back(
              tape.bce_with_logits(head_logit(ctx, aux_lease, zi, &zjn), T{0}));
        }
      } else {
        if (ev.label < 0) continue;
        Var zi = enhanced_embedding(ctx, aux_lease, ev.src, ev.time);
        terms.push_back(tape.bce_with_logits(head_logit(ctx, aux_lease, zi, nullptr),
                                             static_cast<T>(ev.label)));
      }
    }
    double loss_value = 0;
    if (!terms.empty()) {
      Var acc = terms[0];
      for (std::size_t i = 1; i < terms.size(); ++i) acc = tape.add(acc, terms[i]);
      Var loss = tape.scale(acc, T{1} / static_cast<T>(terms.size()));
      loss_value = static_cast<double>(tape.scalar_value(loss));
      tape.backward(loss);
      encoder_.params().zero_grads();
      aux_.zero_grads();
      encoder_.params().absorb_grads(tape, ctx.lease);
      aux_.absorb_grads(tape, aux_lease);
      encoder_.params().step(cfg_.optimizer);
      aux_.step(cfg_.head_optimizer());
    }
    encoder_.write_back(ctx);
    pending = messages_for(begin, end);
    return loss_value;
  }

  // Memory evolution only (no scoring, no training).
  void replay_range(MemoryStore<T>& memory, std::vector<RawMessage>& pending,
                    std::size_t begin, std::size_t end) {
    for (std::size_t b = begin; b < end; b += cfg_.batch_size) {
      std::size_t e = std::min(end, b + cfg_.batch_size);
      Tape<T> tape;
      auto ctx = encoder_.make_context(tape, memory, graph_);
      encoder_.apply_messages(ctx, pending);
      encoder_.write_back(ctx);
      pending = messages_for(b, e);
    }
  }

  void flush(MemoryStore<T>& memory, std::vector<RawMessage>& pending) {
    if (pending.empty()) return;
    Tape<T> tape;
    auto ctx = encoder_.make_context(tape, memory, graph_);
    encoder_.apply_messages(ctx, pending);
    encoder_.write_back(ctx);
    pending.clear();
  }

  std::vector<RawMessage> messages_for(std::size_t begin, std::size_t end) const {
    std::vector<RawMessage> msgs;
    msgs.reserve(2 * (end - begin));
    for (std::size_t k = begin; k < end; ++k) {
      const Event& e = graph_.event(k);
      msgs.push_back({e.src, e.dst, e.time, k});
      msgs.push_back({e.dst, e.src, e.time, k});
    }
    return msgs;
  }

 public:
  // Paired evaluation: the negative stream depends only on eval_seed and the
  // event ordinal, never on mode or parameters.
  NodeId eval_negative(EventOrdinal ordinal, NodeId true_dst) const {
    StreamRng rng(cfg_.eval_seed, ordinal, 0, 0, hash_str("eval_neg"));
    return draw_negative(rng, true_dst);
  }

 private:
  NodeId train_negative(EventOrdinal ordinal, std::uint64_t k, NodeId true_dst) const {
    StreamRng rng(cfg_.seed, ordinal, k, 0, hash_str("ft_neg"));
    return draw_negative(rng, true_dst);
  }

  NodeId draw_negative(StreamRng& rng, NodeId true_dst) const {
    NodeId begin = graph_.negative_pool_begin();
    NodeId pool = graph_.negative_pool_size();
    CPDG_REQUIRE(pool >= 2, "no eligible negative destination");
    std::uint64_t m = pool - (true_dst >= begin ? 1 : 0);
    std::uint64_t r = rng.below(m);
    NodeId cand = begin + static_cast<NodeId>(r);
    if (true_dst >= begin && cand >= true_dst) ++cand;
    return cand;
  }

  void register_params() {
    const std::size_t dz = encoder_.config().embed_dim;
    const std::size_t d_ei =
        cfg_.eie.mode == EieMode::Full ? 0 : checkpoints_->snapshots[0].dim();
    const std::size_t mlp_hidden = cfg_.eie.mlp_hidden ? cfg_.eie.mlp_hidden : d_ei;
    const std::size_t mlp_out = cfg_.eie.mlp_out ? cfg_.eie.mlp_out : d_ei;
    enhanced_dim_ = dz + (cfg_.eie.mode == EieMode::Full ? 0 : mlp_out);

    if (cfg_.eie.mode != EieMode::Full) {
      aux_.add("eie.mlp_w1", {d_ei, mlp_hidden});
      aux_.add("eie.mlp_b1", {mlp_hidden}, Init::Zero);
      aux_.add("eie.mlp_w2", {mlp_hidden, mlp_out});
      aux_.add("eie.mlp_b2", {mlp_out}, Init::Zero);
    }
    if (cfg_.eie.mode == EieMode::Attn) {
      aux_.add("eie.fa_w1", {d_ei + dz, d_ei});
      aux_.add("eie.fa_b1", {d_ei}, Init::Zero);
      aux_.add("eie.fa_w2", {d_ei, 1});
      aux_.add("eie.fa_b2", {1}, Init::Zero);
    }
    if (cfg_.eie.mode == EieMode::Gru) {
      for (const char* g : {"r", "z", "n"}) {
        aux_.add(concat("eie.gru_w_", g), {d_ei, d_ei});
        aux_.add(concat("eie.gru_u_", g), {d_ei, d_ei});
        aux_.add(concat("eie.gru_b_", g), {d_ei}, Init::Zero);
      }
    }

    const std::size_t head_in =
        cfg_.task == Task::LinkPrediction ? 2 * enhanced_dim_ : enhanced_dim_;
    const std::size_t head_hidden = cfg_.head_hidden ? cfg_.head_hidden : dz;
    aux_.add("head.w1", {head_in, head_hidden});
    aux_.add("head.b1", {head_hidden}, Init::Zero);
    aux_.add("head.w2", {head_hidden, 1});
    aux_.add("head.b2", {1}, Init::Zero);
  }

  const TemporalGraph& graph_;
  DgnnEncoder<T>& encoder_;
  const CheckpointSequence<T>* checkpoints_;
  FinetuneConfig cfg_;
  ParameterStore<T> aux_;
  std::size_t enhanced_dim_ = 0;
  mutable std::unordered_map<NodeId, Var> ei_cache_;
  mutable std::uint64_t ei_cache_tape_ = 0;
};

}  // namespace cpdg
