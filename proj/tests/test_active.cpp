#include <gtest/gtest.h>

#include "support.hpp"

using namespace flowcount;

namespace {

SimulatedSequence small_sequence(int frames = 30) {
  SimConfig c;
  c.shape = {8, 8, 8};
  c.n_agents = 40;
  c.n_frames = frames;
  c.seed = 3;
  return simulate_sequence(c, 1);
}

// Ground-truth flows with extra mass planted on one transition.
struct PlantedModel {
  GroundTruthFlowModel gt;
  int t = 0;
  int cell = 0;
  double amount = 1.0;

  [[nodiscard]] FlowField predict(int a, int b) const {
    FlowField f = gt.predict(a, b);
    if (a == t - 1 && b == t) f.add(cell, kSelf, amount);
    return f;
  }
};

std::vector<int> even_keyframes(int lo, int hi) {
  std::vector<int> k;
  for (int t = lo; t <= hi; t += 2) k.push_back(t);
  return k;
}

// Patch score recomputed cell by cell from the flow definitions.
double brute_score(const FlowField& in, const FlowField& out, const CellRect& r) {
  const GridShape& s = in.shape();
  double e = 0.0;
  for (int rr = r.row0; rr < r.row0 + r.rows; ++rr)
    for (int cc = r.col0; cc < r.col0 + r.cols; ++cc) {
      const int j = s.index(rr, cc);
      double a = 0.0;
      for (int i = 0; i < s.cells(); ++i)
        for (int ch = 0; ch < 9; ++ch) {
          const int nr = i / s.cols + channel_dr(ch);
          const int nc = i % s.cols + channel_dc(ch);
          if (nr == rr && nc == cc) a += in.at(i, ch);
        }
      a += in.at(j, kOutside);
      double b = 0.0;
      for (int ch = 0; ch < kFlowChannels; ++ch) b += out.at(j, ch);
      e += std::abs(a - b);
    }
  return e;
}

}  // namespace

TEST(PatchGrid, BalancedPartition) {
  const PatchGrid g{4, {10, 9, 8}};
  g.validate();
  std::vector<int> hits(90, 0);
  for (int k = 0; k < g.count(); ++k) {
    const CellRect r = g.rect(k);
    EXPECT_TRUE(r.rows == 2 || r.rows == 3);
    EXPECT_TRUE(r.cols == 2 || r.cols == 3);
    for (int rr = r.row0; rr < r.row0 + r.rows; ++rr)
      for (int cc = r.col0; cc < r.col0 + r.cols; ++cc) ++hits[static_cast<std::size_t>(rr * 9 + cc)];
  }
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_EQ(g.max_cells(), 9);
  EXPECT_THROW((void)g.rect(16), RegionError);
  EXPECT_THROW((PatchGrid{1, {4, 4, 8}}.validate()), ConfigError);
  EXPECT_THROW((PatchGrid{5, {4, 4, 8}}.validate()), ConfigError);
}

TEST(ViolationScore, SingleCellExample) {
  const GridShape s{1, 1, 8};
  FlowField in(s), out(s);
  in.set(0, kSelf, 1.0);
  out.set(0, kSelf, 0.2);
  EXPECT_DOUBLE_EQ(violation_score(in, out, {0, 0, 1, 1}), 0.8);
  EXPECT_THROW(violation_score(in, out, {0, 0, 2, 1}), RegionError);
}

TEST(ViolationScore, ZeroOnGroundTruth) {
  const auto s = small_sequence(12);
  const PatchGrid g{4, s.seq.shape};
  for (std::size_t t = 1; t + 1 < s.seq.flows.size(); ++t)
    for (int k = 0; k < g.count(); ++k) EXPECT_EQ(violation_score(s.seq.flows[t - 1], s.seq.flows[t], g.rect(k)), 0.0);
}

TEST(ViolationScore, MatchesBruteForceOnRandomPairs) {
  const GridShape s{8, 8, 8};
  const PatchGrid g{4, s};
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const FlowField in = fc_test::random_flow(s, rng);
    const FlowField out = fc_test::random_flow(s, rng);
    const int k = static_cast<int>(rng.below(16));
    EXPECT_EQ(violation_score(in, out, g.rect(k)), brute_score(in, out, g.rect(k))) << "trial " << trial;
  }
}

TEST(ViolationScore, AdditiveOverPatches) {
  const GridShape s{8, 8, 8};
  const PatchGrid g{4, s};
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    // Multiples of 1/16 keep every partial sum exact.
    std::vector<double> a(static_cast<std::size_t>(s.cells()) * kFlowChannels), b(a.size());
    for (double& v : a) v = static_cast<double>(rng.below(33)) / 16.0;
    for (double& v : b) v = static_cast<double>(rng.below(33)) / 16.0;
    const FlowField in = FlowField::masked(s, a);
    const FlowField out = FlowField::masked(s, b);
    double parts = 0.0;
    for (int k = 0; k < g.count(); ++k) parts += violation_score(in, out, g.rect(k));
    EXPECT_EQ(parts, violation_score(in, out, {0, 0, 8, 8}));
  }
}

TEST(InitialBudget, LabelsOnePatchInAQuarterOfKeyframes) {
  const PatchGrid g{4, {8, 8, 8}};
  std::vector<int> keys;
  for (int t = 1; t <= 20; ++t) keys.push_back(t);
  const AnnotationBudget b = initial_budget(keys, g, 0.25, 7);
  EXPECT_EQ(b.labeled.size(), 5u);
  EXPECT_EQ(b.unlabeled_keyframes.size(), 15u);
  EXPECT_EQ(b.total_keyframes, 20);
  std::set<int> frames;
  for (const auto& lp : b.labeled) frames.insert(lp.frame);
  EXPECT_EQ(frames.size(), 5u);
  for (int t : b.unlabeled_keyframes) EXPECT_FALSE(frames.count(t));
  EXPECT_EQ(initial_budget(keys, g, 0.25, 7).labeled, b.labeled);
}

TEST(SelectPatches, PicksPlantedViolationFirst) {
  const auto s = small_sequence(24);
  const PatchGrid g{4, s.seq.shape};
  const int k_star = 9;
  const CellRect r = g.rect(k_star);
  const PlantedModel m{{s.seq.flows}, 6, s.seq.shape.index(r.row0 + 1, r.col0 + 1), 1.0};
  AnnotationBudget b;
  b.unlabeled_keyframes = even_keyframes(2, 20);
  b.total_keyframes = 10;
  const AnnotationBudget n = select_patches(m, b, g, 0.15);
  ASSERT_EQ(n.labeled.size(), 2u);
  EXPECT_EQ(n.labeled[0], (LabeledPatch{6, k_star}));
  // Every other keyframe scores zero; the lowest frame and patch win the tie.
  EXPECT_EQ(n.labeled[1], (LabeledPatch{2, 0}));
  EXPECT_EQ(select_patches(m, b, g, 0.15).labeled, n.labeled);
  EXPECT_EQ(n.iteration, 1);
}

TEST(SelectPatches, GrowthExhaustionAndFinalRatio) {
  const auto s = small_sequence(24);
  const PatchGrid g{4, s.seq.shape};
  const GroundTruthFlowModel m{s.seq.flows};
  std::vector<int> keys;
  for (int t = 1; t <= 20; ++t) keys.push_back(t);
  for (int mode = 0; mode < 2; ++mode) {
    AnnotationBudget b = initial_budget(keys, g, 0.25, 1);
    std::set<int> seen;
    for (const auto& lp : b.labeled) seen.insert(lp.frame);
    for (int it = 0; it < 5; ++it) {
      const std::size_t before = b.labeled.size();
      b = mode == 0 ? select_patches(m, std::move(b), g, 0.15) : select_patches_random(std::move(b), g, 0.15, 1);
      EXPECT_EQ(b.labeled.size(), before + 3);
      for (std::size_t i = before; i < b.labeled.size(); ++i) EXPECT_TRUE(seen.insert(b.labeled[i].frame).second);
    }
    EXPECT_TRUE(b.unlabeled_keyframes.empty());
    EXPECT_DOUBLE_EQ(b.annotation_ratio(g.count()), 1.0 / 16.0);
    if (mode == 0)
      EXPECT_THROW(select_patches(m, b, g, 0.15), ExhaustedError);
    else
      EXPECT_THROW(select_patches_random(b, g, 0.15, 1), ExhaustedError);
  }
}

TEST(Discriminator, SeparatesShiftedInputs) {
  const nn::Discriminator d(4, 8);
  std::vector<double> p = d.init(3);
  nn::OptimizerState opt = nn::OptimizerState::rmsprop(p.size(), 1e-2);
  Rng rng(5);
  auto draw = [&](double lo) {
    std::vector<double> x(4);
    for (double& v : x) v = rng.uniform(lo, lo + 1.0);
    return x;
  };
  for (int stepi = 0; stepi < 400; ++stepi) {
    const std::vector<std::vector<double>> lab{draw(0.5), draw(0.5)};
    const std::vector<std::vector<double>> unl{draw(0.0), draw(0.0)};
    nn::optimizer_step<double>(opt, p, loss_adversarial(d, p, lab, unl).grad_d_params);
  }
  int correct = 0;
  for (int i = 0; i < 200; ++i) {
    correct += d.forward(p, draw(0.5)).prob > 0.5;
    correct += d.forward(p, draw(0.0)).prob <= 0.5;
  }
  EXPECT_GT(correct / 400.0, 0.5);
}

class PatchTraining : public ::testing::Test {
 protected:
  SimulatedSequence sim = small_sequence(12);
  nn::FlowRegressor<float> model;
  std::map<int, DensityMap> targets = density_targets(sim.seq, KernelSpec{1.0, 4.0});
  PatchGrid grid{4, sim.seq.shape};
  std::vector<int> keys{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};

  PatchTrainConfig config(int steps) const {
    PatchTrainConfig c;
    c.steps = steps;
    c.learning_rate = 1e-3;
    c.eval_every = 2;
    c.seed = 4;
    c.disc_hidden = 4;
    return c;
  }
};

TEST_F(PatchTraining, DeterministicAndValidated) {
  const std::vector<LabeledPatch> lab{{3, 0}, {5, 6}, {7, 15}, {9, 4}};
  const auto a = train_patch_annotated<float>(model, model.init(1), sim.seq.frames, sim.seq.shape, lab, keys, targets,
                                              grid, config(5));
  const auto b = train_patch_annotated<float>(model, model.init(1), sim.seq.frames, sim.seq.shape, lab, keys, targets,
                                              grid, config(5));
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.disc_params, b.disc_params);
  ASSERT_EQ(a.log.size(), 5u);
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].total, b.log[i].total);
  EXPECT_EQ(a.val_split.size(), 1u);
  EXPECT_EQ(a.train_split.size(), 3u);
  EXPECT_GE(a.best_step, 0);
  EXPECT_THROW(train_patch_annotated<float>(model, model.init(1), sim.seq.frames, sim.seq.shape, {}, keys, targets,
                                            grid, config(1)),
               ConfigError);
  EXPECT_THROW(train_patch_annotated<float>(model, model.init(1), sim.seq.frames, sim.seq.shape, {{3, 16}}, keys,
                                            targets, grid, config(1)),
               RegionError);
  EXPECT_THROW(train_patch_annotated<float>(model, model.init(1), sim.seq.frames, sim.seq.shape, {{11, 0}}, keys,
                                            targets, grid, config(1)),
               RegionError);
}

TEST_F(PatchTraining, WithoutSpatialAndAdversarialTermsReducesToPatchLoss) {
  const int t = 4;
  std::vector<LabeledPatch> lab;
  for (int k = 0; k < grid.count(); ++k) lab.push_back({t, k});
  PatchTrainConfig c = config(1);
  c.learning_rate = 0.0;
  c.val_fraction = 0.0;
  c.weights.gamma = 0.0;
  c.weights.delta = 0.0;
  const auto p = model.init(2);
  const auto r = train_patch_annotated<float>(model, p, sim.seq.frames, sim.seq.shape, lab, {t}, targets, grid, c);
  ASSERT_EQ(r.log.size(), 1u);
  EXPECT_EQ(r.log[0].l_spatial, 0.0);
  EXPECT_EQ(r.log[0].l_advers, 0.0);
  EXPECT_EQ(r.log[0].l_uflow, 0.0);
  EXPECT_EQ(r.params, p);
  // The logged value equals the conservation loss of one of the patches.
  double best = 1e300;
  for (int k = 0; k < grid.count(); ++k) {
    const PatchCrop cr = make_crop(sim.seq.shape, grid.rect(k), 1);
    auto fr = [&](int s) { return crop_frame(sim.seq.frames[static_cast<std::size_t>(s)], cr.crop, 8); };
    auto fwd = [&](int a, int b) { return nn::flow_forward<float>(model, p, fr(a), fr(b), cr.shape, cr.outside_mask); };
    const DensityMap target = crop_density(targets.at(t), cr.crop);
    const CombiLoss l = loss_combi(fwd(t - 1, t), fwd(t, t + 1), fwd(t, t - 1), fwd(t + 1, t), &target, c.weights.alpha,
                                   cr.cell_mask);
    best = std::min(best, std::abs(l.value - r.log[0].total));
  }
  EXPECT_LT(best, 1e-9 * std::max(1.0, r.log[0].total));
}

TEST_F(PatchTraining, ActiveLoopCurveAndDeterminism) {
  ActiveConfig ac;
  ac.train = config(3);
  ac.iterations = 2;
  std::vector<int> test{10};
  const auto roi = roi_mask(RoiKind::left_half, sim.seq.shape);
  std::map<int, DensityMap> train_targets;
  for (int t : keys) train_targets.emplace(t, targets.at(t));
  train_targets.emplace(10, targets.at(10));
  const auto a = run_active_learning<float>(model, model.init(1), sim.seq.frames, sim.seq.shape, keys, train_targets,
                                            test, roi, ac);
  const auto b = run_active_learning<float>(model, model.init(1), sim.seq.frames, sim.seq.shape, keys, train_targets,
                                            test, roi, ac);
  ASSERT_EQ(a.curve.size(), 3u);
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    EXPECT_EQ(a.curve[i].mae, b.curve[i].mae);
    EXPECT_EQ(a.curve[i].labeled, b.curve[i].labeled);
  }
  EXPECT_DOUBLE_EQ(a.curve[0].annotation_ratio, 3.0 / 160.0);
  EXPECT_DOUBLE_EQ(a.curve[1].annotation_ratio, 5.0 / 160.0);
  EXPECT_DOUBLE_EQ(a.curve[2].annotation_ratio, 7.0 / 160.0);
  EXPECT_EQ(a.params, b.params);
  const std::string csv = active_curve_csv(a.curve);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "iteration,annotation_ratio,MAE,RMSE");
}
