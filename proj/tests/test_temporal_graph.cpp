#include "cpdg/temporal_graph.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"

using namespace cpdg;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("cpdg_tg_" + name);
}

void write_file(const fs::path& p, const std::string& content) {
  std::ofstream os(p);
  os << content;
}

TemporalGraph tiny_graph(std::vector<Event> events, NodeId n) {
  return TemporalGraph(std::move(events), n);
}

}  // namespace

TEST(IngestCsv, SortsByTimestamp) {
  auto p = temp_file("sort.csv");
  write_file(p, "src,dst,timestamp\na,b,1.0\na,c,3.0\nb,c,2.0\n");
  auto g = ingest_csv(p.string());
  ASSERT_EQ(g.num_events(), 3u);
  EXPECT_DOUBLE_EQ(g.event(0).time, 1.0);
  EXPECT_DOUBLE_EQ(g.event(1).time, 2.0);
  EXPECT_DOUBLE_EQ(g.event(2).time, 3.0);
  EXPECT_EQ(g.num_nodes(), 3u);
  // densified ids follow first appearance: a=0, b=1, c=2
  EXPECT_EQ(g.id_map().at("a"), 0u);
  EXPECT_EQ(g.id_map().at("b"), 1u);
  EXPECT_EQ(g.id_map().at("c"), 2u);
}

TEST(IngestCsv, EmptyFile) {
  auto p = temp_file("empty.csv");
  write_file(p, "");
  auto g = ingest_csv(p.string());
  EXPECT_EQ(g.num_events(), 0u);
  EXPECT_EQ(g.num_nodes(), 0u);

  auto p2 = temp_file("header_only.csv");
  write_file(p2, "src,dst,timestamp\n");
  auto g2 = ingest_csv(p2.string());
  EXPECT_EQ(g2.num_events(), 0u);
  EXPECT_EQ(g2.num_nodes(), 0u);
}

TEST(IngestCsv, DuplicateEdgesAllowed) {
  auto p = temp_file("dup.csv");
  write_file(p, "src,dst,timestamp\na,b,1.0\na,b,1.0\n");
  auto g = ingest_csv(p.string());
  EXPECT_EQ(g.num_events(), 2u);  // CTDG keeps repeated interactions
}

TEST(IngestCsv, MalformedRowNamesLine) {
  auto p = temp_file("bad.csv");
  write_file(p, "src,dst,timestamp\na,b,1.0\na,c,notatime\n");
  try {
    ingest_csv(p.string());
    FAIL() << "expected error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(IngestCsv, NegativeTimestampRejected) {
  auto p = temp_file("neg.csv");
  write_file(p, "src,dst,timestamp\na,b,-1.0\n");
  EXPECT_THROW(ingest_csv(p.string()), Error);
}

TEST(IngestCsv, SelfLoopsCountedAndSkipped) {
  auto p = temp_file("loop.csv");
  write_file(p, "src,dst,timestamp\na,a,1.0\na,b,2.0\n");
  IngestReport rep;
  auto g = ingest_csv(p.string(), {}, &rep);
  EXPECT_EQ(g.num_events(), 1u);
  EXPECT_EQ(rep.self_loops_rejected, 1u);
}

TEST(IngestCsv, LabelsAndFeatures) {
  auto p = temp_file("feat.csv");
  write_file(p, "src,dst,timestamp,label,f0,f1\na,b,1.0,1,0.5,-2.0\nb,c,2.0,,1.0,3.0\n");
  auto g = ingest_csv(p.string());
  ASSERT_EQ(g.num_events(), 2u);
  EXPECT_EQ(g.event(0).label, 1);
  EXPECT_EQ(g.event(1).label, -1);  // empty cell -> unlabeled
  ASSERT_EQ(g.feature_dim(), 2u);
  EXPECT_FLOAT_EQ(g.edge_features_of(0)[1], -2.0f);
}

TEST(NeighborsBefore, StrictInequality) {
  auto g = tiny_graph({{0, 1, 1}, {0, 2, 2}, {0, 3, 5}}, 4);
  auto nb = g.neighbors_before(0, 5.0);
  ASSERT_EQ(nb.size(), 2u);  // the t=5 event is excluded by t_u < t
  EXPECT_EQ(nb[0].node, 1u);
  EXPECT_DOUBLE_EQ(nb[0].time, 1.0);
  EXPECT_EQ(nb[1].node, 2u);

  EXPECT_TRUE(g.neighbors_before(0, 0.0).empty());
  EXPECT_EQ(g.neighbors_before(0, g.after_all()).size(), 3u);
}

TEST(NeighborsBefore, UnknownNodeEmpty) {
  auto g = tiny_graph({{0, 1, 1}}, 2);
  EXPECT_TRUE(g.neighbors_before(77, 10.0).empty());
}

TEST(NeighborsBefore, MatchesNaiveScan) {
  // random multigraphs up to 1000 events, queried at random (i, t)
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    StreamRng rng(1234, trial);
    NodeId n = 3 + static_cast<NodeId>(rng.below(20));
    std::size_t m = 1 + rng.below(1000);
    std::vector<Event> events;
    std::vector<oracle::RawEvent> raw;
    for (std::size_t k = 0; k < m; ++k) {
      NodeId a = static_cast<NodeId>(rng.below(n));
      NodeId b = static_cast<NodeId>(rng.below(n));
      if (a == b) b = (b + 1) % n;
      double t = std::floor(rng.uniform() * 50.0);  // coarse times force ties
      events.push_back({a, b, t});
    }
    TemporalGraph g(events, n);
    for (const Event& e : g.events()) raw.push_back({e.src, e.dst, e.time});

    for (int q = 0; q < 50; ++q) {
      NodeId i = static_cast<NodeId>(rng.below(n));
      double t = rng.uniform() * 55.0;
      auto fast = g.neighbors_before(i, t);
      auto slow = oracle::neighbors_scan(raw, i, t);
      ASSERT_EQ(fast.size(), slow.size());
      for (std::size_t k = 0; k < slow.size(); ++k) {
        EXPECT_EQ(fast[k].node, slow[k].first);
        EXPECT_DOUBLE_EQ(fast[k].time, slow[k].second);
      }
    }
  }
}

TEST(NeighborsBefore, LogarithmicProbeCount) {
  GeneratorConfig cfg;
  cfg.num_users = 20;
  cfg.num_items = 20;
  cfg.num_events = 100000;
  auto g = generate_synthetic(cfg, 9);
  StreamRng rng(5, 0);
  for (int q = 0; q < 200; ++q) {
    NodeId i = static_cast<NodeId>(rng.below(g.num_nodes()));
    double t = rng.uniform() * cfg.horizon;
    QueryStats stats;
    g.neighbors_before(i, t, &stats);
    std::size_t deg = g.total_degree(i);
    double bound = std::log2(static_cast<double>(std::max<std::size_t>(deg, 2))) + 2;
    EXPECT_LE(static_cast<double>(stats.search_steps), bound);
  }
}

TEST(ChronoSplit, QuantileBoundaries) {
  std::vector<Event> ten;
  for (int k = 0; k < 10; ++k)
    ten.push_back({0, 1, static_cast<double>(k)});
  auto g10 = tiny_graph(ten, 2);
  auto s = g10.chrono_split({0.6, 0.4});
  EXPECT_EQ(s.size(0), 6u);
  EXPECT_EQ(s.size(1), 4u);

  std::vector<Event> hundred;
  for (int k = 0; k < 100; ++k) hundred.push_back({0, 1, static_cast<double>(k)});
  auto s811 = tiny_graph(hundred, 2).chrono_split({0.8, 0.1, 0.1});
  EXPECT_EQ(s811.size(0), 80u);
  EXPECT_EQ(s811.size(1), 10u);
  EXPECT_EQ(s811.size(2), 10u);

  std::vector<Event> twenty;
  for (int k = 0; k < 20; ++k) twenty.push_back({0, 1, static_cast<double>(k)});
  auto s6211 = tiny_graph(twenty, 2).chrono_split({0.6, 0.2, 0.1, 0.1});
  EXPECT_EQ(s6211.size(0), 12u);
  EXPECT_EQ(s6211.size(1), 4u);
  EXPECT_EQ(s6211.size(2), 2u);
  EXPECT_EQ(s6211.size(3), 2u);

  // disjoint cover
  EXPECT_EQ(s6211.offsets.front(), 0u);
  EXPECT_EQ(s6211.offsets.back(), 20u);
}

TEST(ChronoSplit, FewerEventsThanSegments) {
  auto g = tiny_graph({{0, 1, 0}}, 2);
  EXPECT_THROW(g.chrono_split({0.5, 0.25, 0.25}), Error);
  EXPECT_THROW(g.chrono_split({0.5, 0.6}), Error);  // ratios must sum to 1
}

TEST(CacheRoundTrip, IdenticalEventLog) {
  auto p = temp_file("rt.csv");
  write_file(p, "src,dst,timestamp,label\nu1,v4,3.5,1\nu2,v4,1.25,0\nu1,v5,9.0,\n");
  auto g = ingest_csv(p.string());
  auto cache = temp_file("rt.ctdg");
  g.save_cache(cache.string());
  auto g2 = TemporalGraph::load_cache(cache.string());
  ASSERT_EQ(g2.num_events(), g.num_events());
  ASSERT_EQ(g2.num_nodes(), g.num_nodes());
  for (std::size_t k = 0; k < g.num_events(); ++k) {
    EXPECT_EQ(g2.event(k).src, g.event(k).src);
    EXPECT_EQ(g2.event(k).dst, g.event(k).dst);
    EXPECT_DOUBLE_EQ(g2.event(k).time, g.event(k).time);
    EXPECT_EQ(g2.event(k).label, g.event(k).label);
  }
  EXPECT_EQ(g2.id_map().at("v5"), g.id_map().at("v5"));

  // second round trip is byte-identical
  auto cache2 = temp_file("rt2.ctdg");
  g2.save_cache(cache2.string());
  std::ifstream a(cache, std::ios::binary), b(cache2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), {});
  std::string sb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(sa, sb);
}

TEST(Generator, DeterministicBytes) {
  GeneratorConfig cfg;
  cfg.num_events = 2000;
  auto g1 = generate_synthetic(cfg, 7);
  auto g2 = generate_synthetic(cfg, 7);
  auto p1 = temp_file("gen1.ctdg"), p2 = temp_file("gen2.ctdg");
  g1.save_cache(p1.string());
  g2.save_cache(p2.string());
  std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), {});
  std::string sb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(sa, sb);

  auto g3 = generate_synthetic(cfg, 8);
  EXPECT_NE(g3.event(0).src, g1.event(0).src);  // different seed, different stream
}

TEST(Generator, PreferenceRate) {
  GeneratorConfig cfg;
  cfg.num_events = 10000;
  cfg.preference = 0.9;
  cfg.flip_fraction = 1.0;  // no drift
  auto g = generate_synthetic(cfg, 3);
  std::size_t intra = 0;
  for (const Event& e : g.events()) {
    int user_comm = static_cast<int>(e.src) % cfg.num_communities;
    int item_comm = static_cast<int>(e.dst - cfg.num_users) % cfg.num_communities;
    intra += (user_comm == item_comm);
  }
  double rate = static_cast<double>(intra) / static_cast<double>(g.num_events());
  // binomial 3 sigma around 0.9 over 10k draws is well above 0.85
  EXPECT_GE(rate, 0.85);
}

TEST(Generator, DriftFlipsPreference) {
  GeneratorConfig cfg;
  cfg.num_events = 20000;
  cfg.preference = 0.9;
  cfg.flip_fraction = 0.5;
  auto g = generate_synthetic(cfg, 11);
  double flip_at = cfg.flip_fraction * cfg.horizon;
  std::size_t pre_intra = 0, pre_n = 0, post_intra = 0, post_n = 0;
  for (const Event& e : g.events()) {
    int user_comm = static_cast<int>(e.src) % cfg.num_communities;
    int item_comm = static_cast<int>(e.dst - cfg.num_users) % cfg.num_communities;
    bool intra = user_comm == item_comm;
    if (e.time < flip_at) {
      pre_intra += intra;
      ++pre_n;
    } else {
      post_intra += intra;
      ++post_n;
    }
  }
  double pre_rate = static_cast<double>(pre_intra) / static_cast<double>(pre_n);
  double post_rate = static_cast<double>(post_intra) / static_cast<double>(post_n);
  // base-community preference goes 0.9 -> 0.1 at the flip; 3 sigma over
  // ~10k samples per half is ~0.009
  double sigma = 3 * std::sqrt(0.9 * 0.1 / 10000.0);
  EXPECT_NEAR(pre_rate, 0.9, 3 * sigma);
  EXPECT_NEAR(post_rate, 0.1, 3 * sigma);
  EXPECT_GT(pre_rate - post_rate, 0.7);
}

TEST(Generator, RejectsDegenerateConfigs) {
  GeneratorConfig cfg;
  cfg.num_events = 0;
  EXPECT_THROW(generate_synthetic(cfg, 1), Error);
  GeneratorConfig cfg2;
  cfg2.num_users = 0;
  EXPECT_THROW(generate_synthetic(cfg2, 1), Error);
}

TEST(EventInvariants, RejectedAtConstruction) {
  EXPECT_THROW(tiny_graph({{0, 0, 1.0}}, 1), Error);                       // self-loop
  EXPECT_THROW(tiny_graph({{0, 1, -2.0}}, 2), Error);                      // negative time
  EXPECT_THROW(tiny_graph({{0, 1, std::nan("")}}, 2), Error);              // non-finite
}
