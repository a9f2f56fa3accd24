#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cpdg/common.hpp"

#include <nlohmann/json.hpp>

namespace cpdg {

// One timestamped interaction (i, j, t). Self-loops are rejected at ingest.
struct Event {
  NodeId src = 0;
  NodeId dst = 0;
  Time time = 0;
  std::int8_t label = -1;  // -1 = unlabeled, else {0,1}
};

struct NeighborEntry {
  NodeId node;
  Time time;
  EventOrdinal event;  // ordinal into the sorted event log
};

struct QueryStats {
  std::size_t search_steps = 0;  // binary-search probes
  std::size_t returned = 0;
};

// Per-segment half-open range of event ordinals plus boundary timestamps.
struct ChronoSplit {
  std::vector<std::size_t> offsets;    // size = segments + 1, offsets[0] = 0
  std::vector<Time> boundary_times;    // time of first event in each segment

  std::size_t segments() const { return offsets.size() - 1; }
  std::size_t begin(std::size_t s) const { return offsets[s]; }
  std::size_t end(std::size_t s) const { return offsets[s + 1]; }
  std::size_t size(std::size_t s) const { return end(s) - begin(s); }
};

struct IngestReport {
  std::size_t rows_read = 0;
  std::size_t self_loops_rejected = 0;
};

// Append-only event log plus a per-node time-sorted neighbor index.
// Immutable after construction; concurrent readers need no synchronization.
class TemporalGraph {
 public:
  TemporalGraph() = default;

  // Events need not be pre-sorted; construction sorts stably by timestamp.
  TemporalGraph(std::vector<Event> events, NodeId num_nodes,
                std::vector<std::vector<float>> edge_features = {},
                std::size_t feature_dim = 0)
      : events_(std::move(events)),
        num_nodes_(num_nodes),
        feature_dim_(feature_dim) {
    for (const Event& e : events_) {
      CPDG_REQUIRE(std::isfinite(e.time) && e.time >= 0,
                   "event timestamp must be finite and nonnegative, got ", e.time);
      CPDG_REQUIRE(e.src != e.dst, "self-loop event on node ", e.src);
      CPDG_REQUIRE(e.src < num_nodes_ && e.dst < num_nodes_,
                   "event references node beyond num_nodes");
    }
    std::stable_sort(events_.begin(), events_.end(),
                     [](const Event& a, const Event& b) { return a.time < b.time; });
    if (!edge_features.empty()) {
      CPDG_REQUIRE(edge_features.size() == events_.size(),
                   "edge feature rows must match event count");
      features_.resize(events_.size() * feature_dim_);
      // Caller-provided feature rows correspond to the pre-sort order only
      // when events came in sorted; ingest paths pass sorted data.
      for (std::size_t i = 0; i < edge_features.size(); ++i) {
        CPDG_REQUIRE(edge_features[i].size() == feature_dim_,
                     "edge feature row ", i, " has wrong width");
        std::copy(edge_features[i].begin(), edge_features[i].end(),
                  features_.begin() + static_cast<std::ptrdiff_t>(i * feature_dim_));
      }
    }
    build_index();
  }

  std::size_t num_events() const { return events_.size(); }
  NodeId num_nodes() const { return num_nodes_; }
  std::size_t feature_dim() const { return feature_dim_; }
  const std::vector<Event>& events() const { return events_; }
  const Event& event(EventOrdinal k) const { return events_[k]; }

  bool has_labels() const {
    return std::any_of(events_.begin(), events_.end(),
                       [](const Event& e) { return e.label >= 0; });
  }

  Time max_time() const {
    return events_.empty() ? 0.0 : events_.back().time;
  }

  // Sentinel strictly greater than every event time; querying with it
  // returns a node's full history.
  Time after_all() const { return max_time() + 1.0; }

  // Interactions of node i strictly before time t, ascending by (time, ordinal).
  // Both endpoints of an event see it (undirected interaction semantics).
  // Unknown / isolated nodes yield an empty span.
  std::span<const NeighborEntry> neighbors_before(NodeId i, Time t,
                                                  QueryStats* stats = nullptr) const {
    if (i >= num_nodes_) return {};
    const NeighborEntry* first = index_.data() + offsets_[i];
    const NeighborEntry* last = index_.data() + offsets_[i + 1];
    std::size_t steps = 0;
    // branchless-ish lower_bound on time with probe counting
    const NeighborEntry* lo = first;
    std::size_t len = static_cast<std::size_t>(last - first);
    while (len > 0) {
      std::size_t half = len / 2;
      const NeighborEntry* mid = lo + half;
      ++steps;
      if (mid->time < t) {
        lo = mid + 1;
        len -= half + 1;
      } else {
        len = half;
      }
    }
    if (stats) {
      stats->search_steps = steps;
      stats->returned = static_cast<std::size_t>(lo - first);
    }
    return {first, lo};
  }

  std::size_t degree_before(NodeId i, Time t) const {
    return neighbors_before(i, t).size();
  }

  std::size_t total_degree(NodeId i) const {
    if (i >= num_nodes_) return 0;
    return offsets_[i + 1] - offsets_[i];
  }

  // Event-count quantile split. Every event lands in exactly one segment;
  // any empty segment is an error.
  ChronoSplit chrono_split(const std::vector<double>& ratios) const {
    CPDG_REQUIRE(!ratios.empty(), "chrono_split needs at least one ratio");
    double sum = 0;
    for (double r : ratios) {
      CPDG_REQUIRE(r > 0, "split ratios must be positive, got ", r);
      sum += r;
    }
    CPDG_REQUIRE(std::abs(sum - 1.0) < 1e-9, "split ratios must sum to 1, got ", sum);
    CPDG_REQUIRE(events_.size() >= ratios.size(), "fewer events (", events_.size(),
                 ") than segments (", ratios.size(), ")");
    ChronoSplit split;
    split.offsets.push_back(0);
    double cum = 0;
    const auto n = static_cast<double>(events_.size());
    for (std::size_t s = 0; s < ratios.size(); ++s) {
      cum += ratios[s];
      auto b = (s + 1 == ratios.size())
                   ? events_.size()
                   : static_cast<std::size_t>(std::llround(cum * n));
      CPDG_REQUIRE(b > split.offsets.back(), "split segment ", s, " is empty");
      split.offsets.push_back(b);
    }
    for (std::size_t s = 0; s < ratios.size(); ++s)
      split.boundary_times.push_back(events_[split.offsets[s]].time);
    return split;
  }

  // Optional bipartite role boundary: nodes >= dst_role_begin are
  // destination-role (items). Absent for CSV graphs.
  std::optional<NodeId> dst_role_begin() const { return dst_role_begin_; }
  void set_dst_role_begin(NodeId b) { dst_role_begin_ = b; }

  // Nodes eligible as corrupted destinations: the destination-role set for
  // bipartite graphs, every node otherwise.
  NodeId negative_pool_begin() const { return dst_role_begin_.value_or(0); }
  NodeId negative_pool_size() const {
    return num_nodes_ - negative_pool_begin();
  }

  const std::unordered_map<std::string, NodeId>& id_map() const { return id_map_; }
  void set_id_map(std::unordered_map<std::string, NodeId> m) { id_map_ = std::move(m); }

  const float* edge_features_of(EventOrdinal k) const {
    return feature_dim_ == 0 ? nullptr : features_.data() + k * feature_dim_;
  }

  // ---- binary cache -------------------------------------------------------

  void save_cache(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    CPDG_REQUIRE(os.good(), "cannot open ", path, " for writing");
    io::write_magic(os, "CTDG");
    io::write_pod<std::uint32_t>(os, 1);  // version
    io::write_pod<std::uint64_t>(os, num_nodes_);
    io::write_pod<std::uint64_t>(os, events_.size());
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(feature_dim_));
    io::write_pod<std::uint64_t>(os, dst_role_begin_ ? *dst_role_begin_
                                                     : std::numeric_limits<std::uint64_t>::max());
    for (const Event& e : events_) {
      io::write_pod<std::uint32_t>(os, e.src);
      io::write_pod<std::uint32_t>(os, e.dst);
      io::write_pod<double>(os, e.time);
      io::write_pod<std::int8_t>(os, e.label);
    }
    io::write_vec(os, features_);
    CPDG_REQUIRE(os.good(), "write failure on ", path);
    save_id_map(path + ".idmap.json");
  }

  static TemporalGraph load_cache(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    CPDG_REQUIRE(is.good(), "cannot open graph cache ", path);
    io::expect_magic(is, "CTDG", path);
    auto version = io::read_pod<std::uint32_t>(is);
    CPDG_REQUIRE(version == 1, "unsupported CTDG version ", version);
    auto num_nodes = io::read_pod<std::uint64_t>(is);
    auto num_events = io::read_pod<std::uint64_t>(is);
    auto fdim = io::read_pod<std::uint32_t>(is);
    auto role = io::read_pod<std::uint64_t>(is);
    std::vector<Event> events;
    events.reserve(num_events);
    for (std::uint64_t k = 0; k < num_events; ++k) {
      Event e;
      e.src = io::read_pod<std::uint32_t>(is);
      e.dst = io::read_pod<std::uint32_t>(is);
      e.time = io::read_pod<double>(is);
      e.label = io::read_pod<std::int8_t>(is);
      events.push_back(e);
    }
    std::vector<float> feats;
    io::read_vec(is, feats, num_events * fdim);
    TemporalGraph g(std::move(events), static_cast<NodeId>(num_nodes));
    g.feature_dim_ = fdim;
    g.features_ = std::move(feats);
    if (role != std::numeric_limits<std::uint64_t>::max())
      g.dst_role_begin_ = static_cast<NodeId>(role);
    g.load_id_map(path + ".idmap.json");
    return g;
  }

 private:
  void build_index() {
    offsets_.assign(num_nodes_ + 1, 0);
    for (const Event& e : events_) {
      ++offsets_[e.src + 1];
      ++offsets_[e.dst + 1];
    }
    for (std::size_t i = 1; i < offsets_.size(); ++i) offsets_[i] += offsets_[i - 1];
    index_.resize(offsets_.back());
    std::vector<std::size_t> cursor(offsets_.begin(), offsets_.end() - 1);
    for (EventOrdinal k = 0; k < events_.size(); ++k) {
      const Event& e = events_[k];
      index_[cursor[e.src]++] = {e.dst, e.time, k};
      index_[cursor[e.dst]++] = {e.src, e.time, k};
    }
    // Events are time-sorted, so each node's entries already ascend by
    // (time, ordinal); nothing further to sort.
  }

  void save_id_map(const std::string& path) const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [orig, dense] : id_map_) j[orig] = dense;
    std::ofstream os(path);
    os << j.dump(2) << "\n";
  }

  void load_id_map(const std::string& path) {
    std::ifstream is(path);
    if (!is.good()) return;  // sidecar is optional
    nlohmann::json j;
    is >> j;
    id_map_.clear();
    for (auto it = j.begin(); it != j.end(); ++it)
      id_map_[it.key()] = it.value().get<NodeId>();
  }

  std::vector<Event> events_;
  NodeId num_nodes_ = 0;
  std::size_t feature_dim_ = 0;
  std::vector<float> features_;  // row-major num_events x feature_dim
  std::vector<std::size_t> offsets_;
  std::vector<NeighborEntry> index_;
  std::optional<NodeId> dst_role_begin_;
  std::unordered_map<std::string, NodeId> id_map_;
};

// ---- CSV ingest -----------------------------------------------------------

struct CsvSchema {
  std::string src_col = "src";
  std::string dst_col = "dst";
  std::string time_col = "timestamp";
  std::string label_col = "label";  // optional in file
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

// Parses `src,dst,timestamp[,label][,f0..fk]`. Node ids are densified in
// first-appearance order (file order); the original-id map is kept on the
// graph and persisted as a sidecar by save_cache.
inline TemporalGraph ingest_csv(const std::string& path, const CsvSchema& schema = {},
                                IngestReport* report = nullptr) {
  std::ifstream is(path);
  CPDG_REQUIRE(is.good(), "cannot open CSV file ", path);
  std::string line;
  IngestReport local;
  IngestReport& rep = report ? *report : local;

  std::unordered_map<std::string, NodeId> ids;
  auto densify = [&](const std::string& orig) {
    auto [it, inserted] = ids.try_emplace(orig, static_cast<NodeId>(ids.size()));
    return it->second;
  };

  if (!std::getline(is, line)) {
    return TemporalGraph({}, 0);  // empty file -> empty graph
  }
  auto header = detail::split_csv_line(line);
  int src_idx = -1, dst_idx = -1, time_idx = -1, label_idx = -1;
  std::vector<int> feature_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string& h = header[c];
    if (h == schema.src_col) src_idx = static_cast<int>(c);
    else if (h == schema.dst_col) dst_idx = static_cast<int>(c);
    else if (h == schema.time_col) time_idx = static_cast<int>(c);
    else if (h == schema.label_col) label_idx = static_cast<int>(c);
    else if (h.size() >= 2 && h[0] == 'f' &&
             std::all_of(h.begin() + 1, h.end(), [](char ch) { return std::isdigit(ch); }))
      feature_cols.push_back(static_cast<int>(c));
  }
  CPDG_REQUIRE(src_idx >= 0 && dst_idx >= 0 && time_idx >= 0,
               "CSV header must contain columns '", schema.src_col, "', '",
               schema.dst_col, "', '", schema.time_col, "' (file ", path, ")");

  std::vector<Event> events;
  std::vector<std::vector<float>> features;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    ++rep.rows_read;
    auto cells = detail::split_csv_line(line);
    CPDG_REQUIRE(cells.size() >= header.size(), "line ", line_no, ": expected ",
                 header.size(), " columns, got ", cells.size());
    Event e;
    try {
      e.time = std::stod(cells[static_cast<std::size_t>(time_idx)]);
    } catch (const std::exception&) {
      fail("line ", line_no, ": unparseable timestamp '",
           cells[static_cast<std::size_t>(time_idx)], "'");
    }
    CPDG_REQUIRE(std::isfinite(e.time) && e.time >= 0, "line ", line_no,
                 ": negative or non-finite timestamp ", e.time);
    const std::string& so = cells[static_cast<std::size_t>(src_idx)];
    const std::string& de = cells[static_cast<std::size_t>(dst_idx)];
    if (so == de) {
      ++rep.self_loops_rejected;
      continue;
    }
    e.src = densify(so);
    e.dst = densify(de);
    if (label_idx >= 0) {
      const std::string& lv = cells[static_cast<std::size_t>(label_idx)];
      if (!lv.empty()) {
        CPDG_REQUIRE(lv == "0" || lv == "1", "line ", line_no,
                     ": label must be 0 or 1, got '", lv, "'");
        e.label = static_cast<std::int8_t>(lv == "1" ? 1 : 0);
      }
    }
    if (!feature_cols.empty()) {
      std::vector<float> row;
      row.reserve(feature_cols.size());
      for (int fc : feature_cols) {
        try {
          row.push_back(std::stof(cells[static_cast<std::size_t>(fc)]));
        } catch (const std::exception&) {
          fail("line ", line_no, ": unparseable feature value");
        }
      }
      features.push_back(std::move(row));
    }
    events.push_back(e);
  }

  // stable sort inside the constructor preserves file order for ties, but
  // features must follow their events through the sort: pre-sort here.
  std::vector<std::size_t> order(events.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return events[a].time < events[b].time;
  });
  std::vector<Event> sorted_events;
  sorted_events.reserve(events.size());
  std::vector<std::vector<float>> sorted_features;
  for (std::size_t i : order) {
    sorted_events.push_back(events[i]);
    if (!features.empty()) sorted_features.push_back(std::move(features[i]));
  }
  TemporalGraph g(std::move(sorted_events), static_cast<NodeId>(ids.size()),
                  std::move(sorted_features), feature_cols.size());
  g.set_id_map(std::move(ids));
  return g;
}

// ---- synthetic generator ---------------------------------------------------

// Bipartite user-item stream with planted community structure and a planted
// temporal drift: each user prefers items of its own community with
// probability `preference`; at flip_fraction * horizon the preferred
// community rotates by one. flip_fraction >= 1 disables the drift.
struct GeneratorConfig {
  NodeId num_users = 100;
  NodeId num_items = 100;
  std::size_t num_events = 10000;
  int num_communities = 2;
  double preference = 0.9;
  double flip_fraction = 0.5;
  double horizon = 1000.0;
  bool with_labels = false;
};

inline TemporalGraph generate_synthetic(const GeneratorConfig& cfg, std::uint64_t seed) {
  CPDG_REQUIRE(cfg.num_users > 0 && cfg.num_items > 0, "generator needs nonzero nodes");
  CPDG_REQUIRE(cfg.num_events > 0, "generator needs nonzero events");
  CPDG_REQUIRE(cfg.num_communities >= 1, "generator needs >= 1 community");
  CPDG_REQUIRE(cfg.preference >= 0 && cfg.preference <= 1, "preference must be in [0,1]");

  const int C = cfg.num_communities;
  const Time flip_at = cfg.flip_fraction * cfg.horizon;

  // items of community c: ids U + c, U + c + C, ... (round robin)
  std::vector<std::vector<NodeId>> items_by_comm(static_cast<std::size_t>(C));
  for (NodeId it = 0; it < cfg.num_items; ++it)
    items_by_comm[it % static_cast<NodeId>(C)].push_back(cfg.num_users + it);

  std::vector<Event> events;
  events.reserve(cfg.num_events);
  const double step = cfg.horizon / static_cast<double>(cfg.num_events);
  for (std::size_t k = 0; k < cfg.num_events; ++k) {
    StreamRng rng(seed, k, 0, 0, hash_str("gen"));
    Time t = (static_cast<double>(k) + rng.uniform()) * step;
    NodeId user = static_cast<NodeId>(rng.below(cfg.num_users));
    int base = static_cast<int>(user) % C;
    int preferred = (t < flip_at) ? base : (base + 1) % C;
    int comm;
    if (C == 1 || rng.uniform() < cfg.preference) {
      comm = preferred;
    } else {
      int off = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(C - 1)));
      comm = (preferred + off) % C;
    }
    const auto& pool = items_by_comm[static_cast<std::size_t>(comm)];
    CPDG_REQUIRE(!pool.empty(), "community ", comm, " has no items");
    NodeId item = pool[rng.below(pool.size())];
    Event e;
    e.src = user;
    e.dst = item;
    e.time = t;
    if (cfg.with_labels) e.label = static_cast<std::int8_t>(comm != preferred ? 1 : 0);
    events.push_back(e);
  }
  TemporalGraph g(std::move(events), cfg.num_users + cfg.num_items);
  g.set_dst_role_begin(cfg.num_users);
  return g;
}

}  // namespace cpdg
