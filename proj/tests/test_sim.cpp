#include <gtest/gtest.h>

#include <numbers>

#include "support.hpp"

using namespace flowcount;

namespace {

SimConfig small_config(MotionModel m, std::uint64_t seed) {
  SimConfig c;
  c.shape = {8, 8, 8};
  c.n_agents = 40;
  c.motion_model = m;
  c.seed = seed;
  c.n_frames = 12;
  return c;
}

// Head count per cell by flooring agent positions directly.
std::vector<double> binned(const SimState& s, const GridShape& g) {
  std::vector<double> m(static_cast<std::size_t>(g.cells()), 0.0);
  for (const Agent& a : s.agents)
    m[static_cast<std::size_t>(static_cast<int>(a.y) * g.cols + static_cast<int>(a.x))] += 1.0;
  return m;
}

}  // namespace

TEST(SimConfig, Validation) {
  SimConfig c;
  c.speed_max = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SimConfig{};
  c.entry_rate = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SimConfig{};
  c.entry_rate = 1;
  c.exit_enabled = false;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(motion_model_from_string("teleport"), ConfigError);
  EXPECT_EQ(motion_model_from_string(to_string(MotionModel::swirl)), MotionModel::swirl);
}

TEST(SimStep, StaticCrowdStaysPut) {
  SimConfig c = small_config(MotionModel::lanes, 1);
  c.steer_noise = 0.0;
  SimState st;
  st.agents = {{0, 2.5, 3.5, 0, 0}, {1, 5.25, 1.75, 0, 0}};
  st.next_id = 2;
  // Lane steering pulls towards the lane centre, so place agents on it.
  st.agents[0].y = 2.0;
  st.agents[1].y = 2.0;
  const SimState n = step(st, c);
  ASSERT_EQ(n.agents.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(n.agents[i].x, st.agents[i].x);
    EXPECT_EQ(n.agents[i].y, st.agents[i].y);
  }
  const FlowField f = ground_truth_flow(st, n, c.shape);
  EXPECT_EQ(f.total(), 2.0);
  for (int j = 0; j < c.shape.cells(); ++j)
    for (int ch = 0; ch < kFlowChannels; ++ch)
      if (ch != kSelf) {
        EXPECT_EQ(f.at(j, ch), 0.0);
      }
  const OpticalFlowField o = ground_truth_optical(st, n, c.shape);
  for (double v : o.uv) EXPECT_EQ(v, 0.0);
}

TEST(SimStep, BallisticStep) {
  SimConfig c = small_config(MotionModel::lanes, 1);
  SimState st;
  st.agents = {{0, 1.0, 2.0, 0.9, 0.0}};
  st.next_id = 1;
  const SimState n = step(st, c);
  EXPECT_EQ(n.agents[0].x, 1.0 + 0.9);
  EXPECT_EQ(n.frame_index, 1);
}

TEST(SimStep, SingleCrossingOnEastChannel) {
  SimConfig c = small_config(MotionModel::lanes, 1);
  c.shape = {1, 2, 8};
  SimState st;
  st.agents = {{0, 0.8, 0.5, 0.5, 0.0}};
  st.next_id = 1;
  const SimState n = step(st, c);
  const FlowField f = ground_truth_flow(st, n, c.shape);
  EXPECT_EQ(f.at(0, static_cast<int>(Channel::E)), 1.0);
  EXPECT_EQ(f.total(), 1.0);
}

TEST(SimStep, DeterministicUnderSeed) {
  for (auto m : {MotionModel::lanes, MotionModel::swirl, MotionModel::random_walk}) {
    SimConfig c = small_config(m, 17);
    c.entry_rate = 0.5;
    SimState a = initial_state(c), b = initial_state(c);
    for (int t = 0; t < 20; ++t) {
      a = step(a, c);
      b = step(b, c);
    }
    EXPECT_EQ(a, b);
    SimConfig d = c;
    d.seed = 18;
    SimState e = initial_state(d);
    for (int t = 0; t < 20; ++t) e = step(e, d);
    EXPECT_NE(a, e);
  }
}

TEST(SimState, InvariantsHoldOverLongRuns) {
  for (auto m : {MotionModel::lanes, MotionModel::swirl, MotionModel::random_walk})
    for (bool exits : {true, false}) {
      SimConfig c = small_config(m, 5);
      c.exit_enabled = exits;
      c.entry_rate = exits ? 1.0 : 0.0;
      SimState s = initial_state(c);
      for (int t = 0; t < 60; ++t) {
        const SimState n = step(s, c);
        EXPECT_EQ(n.agents.size(), s.agents.size());
        for (const Agent& a : n.agents) {
          EXPECT_TRUE(a.x >= 0 && a.x < c.shape.cols && a.y >= 0 && a.y < c.shape.rows);
          EXPECT_LE(std::hypot(a.vx, a.vy), c.speed_max + 1e-12);
        }
        s = n;
      }
    }
}

TEST(GroundTruthFlow, ConservationAndReversibility) {
  for (auto m : {MotionModel::lanes, MotionModel::swirl, MotionModel::random_walk}) {
    SimConfig c = small_config(m, 9);
    c.entry_rate = 0.8;
    std::vector<SimState> st{initial_state(c)};
    for (int t = 0; t < 15; ++t) st.push_back(step(st.back(), c));
    for (std::size_t t = 1; t + 1 < st.size(); ++t) {
      const FlowField in = ground_truth_flow(st[t - 1], st[t], c.shape);
      const FlowField out = ground_truth_flow(st[t], st[t + 1], c.shape);
      const auto heads = binned(st[t], c.shape);
      const DensityMap a = density_from_flows(in, SumMode::incoming);
      const DensityMap b = density_from_flows(out, SumMode::outgoing);
      for (int j = 0; j < c.shape.cells(); ++j) {
        EXPECT_EQ(a.at(j), heads[static_cast<std::size_t>(j)]);
        EXPECT_EQ(b.at(j), heads[static_cast<std::size_t>(j)]);
      }
      for (double v : conservation_violation_map(in, out)) EXPECT_EQ(v, 0.0);
      for (double v : in.values()) EXPECT_EQ(v, std::floor(v));
      // Replaying the step backwards.
      const FlowField back = ground_truth_flow(st[t], st[t - 1], c.shape);
      const FlowField rev = reverse_flow(in);
      EXPECT_TRUE(std::equal(back.values().begin(), back.values().end(), rev.values().begin()));
    }
  }
}

TEST(GroundTruthFlow, RejectsLongJumpsAndUnbalancedExits) {
  const GridShape g{4, 4, 8};
  SimState a, b;
  a.agents = {{0, 0.5, 0.5, 0, 0}};
  b.agents = {{0, 2.5, 0.5, 0, 0}};
  EXPECT_THROW(ground_truth_flow(a, b, g), AssumptionViolated);
  SimState gone;
  EXPECT_THROW(ground_truth_flow(a, gone, g), AssumptionViolated);
}

TEST(GroundTruthOptical, SignMatchesSingleAgentChannel) {
  SimConfig c = small_config(MotionModel::random_walk, 21);
  c.n_agents = 10;
  SimState s = initial_state(c);
  for (int t = 0; t < 30; ++t) {
    const SimState n = step(s, c);
    const FlowField f = ground_truth_flow(s, n, c.shape);
    const OpticalFlowField o = ground_truth_optical(s, n, c.shape);
    for (int j = 0; j < c.shape.cells(); ++j) {
      int active = -1;
      double mass = 0.0;
      for (int ch = 0; ch < kFlowChannels; ++ch)
        if (f.at(j, ch) > 0) {
          active = ch;
          mass += f.at(j, ch);
        }
      if (mass != 1.0 || active == kOutside) continue;
      const int dc = channel_dc(active);
      const int dr = channel_dr(active);
      if (dc != 0) {
        EXPECT_EQ(dc > 0, o.u(j) > 0) << "cell " << j;
      }
      if (dr != 0) {
        EXPECT_EQ(dr > 0, o.v(j) > 0) << "cell " << j;
      }
    }
    s = n;
  }
}

TEST(GroundTruthOptical, UniformAndMixedMotion) {
  const GridShape g{3, 3, 8};
  SimState a, b;
  a.agents = {{0, 0.5, 0.5, 0, 0}, {1, 1.5, 1.5, 0, 0}};
  b.agents = {{0, 1.5, 0.5, 0, 0}, {1, 2.5, 1.5, 0, 0}};
  const OpticalFlowField o = ground_truth_optical(a, b, g);
  EXPECT_EQ(o.u(0), 8.0);
  EXPECT_EQ(o.u(4), 8.0);
  EXPECT_EQ(o.v(4), 0.0);
  SimState c, d;
  c.agents = {{0, 1.2, 1.5, 0, 0}, {1, 1.8, 1.5, 0, 0}};
  d.agents = {{0, 2.2, 1.5, 0, 0}, {1, 0.8, 1.5, 0, 0}};
  const OpticalFlowField m = ground_truth_optical(c, d, g);
  EXPECT_NEAR(m.u(4), 0.0, 1e-12);
  EXPECT_EQ(m.v(4), 0.0);
}

TEST(Rasterize, EmptyPeakAndSuperposition) {
  SimConfig c = small_config(MotionModel::lanes, 1);
  c.blob_peak = 0.7;
  SimState none;
  for (double v : rasterize(none, c).pixels) EXPECT_EQ(v, 0.0);
  SimState one;
  one.agents = {{0, 20.5 / 8, 30.5 / 8, 0, 0}};
  const ObservationFrame f1 = rasterize(one, c);
  EXPECT_NEAR(f1.at(30, 20), 0.7, 1e-12);
  double mx = 0;
  for (double v : f1.pixels) mx = std::max(mx, v);
  EXPECT_EQ(mx, f1.at(30, 20));
  SimState two;
  two.agents = {{1, 50.5 / 8, 10.5 / 8, 0, 0}};
  SimState both;
  both.agents = {one.agents[0], two.agents[0]};
  const ObservationFrame f2 = rasterize(two, c);
  const ObservationFrame fb = rasterize(both, c);
  for (std::size_t i = 0; i < fb.pixels.size(); ++i) EXPECT_NEAR(fb.pixels[i], f1.pixels[i] + f2.pixels[i], 1e-12);
  SimConfig hot = c;
  hot.blob_peak = 3.0;
  EXPECT_EQ(rasterize(one, hot).at(30, 20), 1.0);
}

TEST(SimulateSequence, BuildsConsistentSequence) {
  SimConfig c = small_config(MotionModel::lanes, 2);
  const SimulatedSequence s = simulate_sequence(c, 3);
  EXPECT_EQ(s.seq.size(), c.n_frames);
  EXPECT_EQ(s.seq.flows.size(), static_cast<std::size_t>(c.n_frames - 1));
  EXPECT_EQ(s.seq.optical.size(), static_cast<std::size_t>(c.n_frames - 1));
  for (const auto& a : s.seq.annotations.frames) EXPECT_EQ(a.time_index % 3, 0);
  EXPECT_THROW(simulate_sequence(c, 0), ConfigError);
}
