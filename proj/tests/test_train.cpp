#include <gtest/gtest.h>

#include "support.hpp"

using namespace flowcount;

namespace {

// Serves fixed densities: both reconstructions of frame t give zhat[t] in cell 0.
struct FixtureModel {
  GridShape shape{1, 1, 8};
  std::map<int, double> zhat;

  [[nodiscard]] FlowField predict(int a, int b) const {
    FlowField f(shape, b > a ? Direction::forward : Direction::backward);
    f.set(0, kSelf, zhat.at(b > a ? b : a));
    return f;
  }
};

SimConfig lanes_config(int frames, std::uint64_t seed) {
  SimConfig c;
  c.shape = {8, 8, 8};
  c.n_agents = 40;
  c.n_frames = frames;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(CountMetrics, HandArithmetic) {
  const EvalResult r = count_metrics({10, 20}, {12, 16});
  EXPECT_DOUBLE_EQ(r.mae, 3.0);
  EXPECT_DOUBLE_EQ(r.rmse, std::sqrt(10.0));
  const EvalResult z = count_metrics({4, 5, 6}, {4, 5, 6});
  EXPECT_EQ(z.mae, 0.0);
  EXPECT_EQ(z.rmse, 0.0);
  EXPECT_THROW(count_metrics({}, {}), ConfigError);
  EXPECT_THROW(count_metrics({1}, {1, 2}), ShapeError);
}

TEST(Evaluate, TwoFrameFixture) {
  FixtureModel m;
  m.zhat = {{1, 12.0}, {2, 16.0}};
  std::map<int, DensityMap> targets{{1, DensityMap::from_values(m.shape, {10.0})},
                                    {2, DensityMap::from_values(m.shape, {20.0})}};
  const std::vector<int> test{1, 2};
  for (auto mode : {Reconstruction::forward, Reconstruction::backward, Reconstruction::average}) {
    const EvalResult r = evaluate(m, test, targets, {}, mode);
    EXPECT_DOUBLE_EQ(r.mae, 3.0);
    EXPECT_NEAR(r.rmse, 3.1623, 1e-4);
  }
  EXPECT_THROW(evaluate(m, std::vector<int>{}, targets), ConfigError);
  EXPECT_THROW(evaluate(m, std::vector<int>{3}, targets), AnnotationError);
}

TEST(Evaluate, GroundTruthFlowsScoreZero) {
  const SimulatedSequence sim = simulate_sequence(lanes_config(20, 3));
  const auto targets = count_targets(sim.seq);
  std::vector<int> test;
  for (int t = 1; t + 1 < sim.seq.size(); ++t) test.push_back(t);
  const GroundTruthFlowModel gt{sim.seq.flows};
  for (auto mode : {Reconstruction::forward, Reconstruction::backward, Reconstruction::average}) {
    const EvalResult r = evaluate(gt, test, targets, {}, mode);
    EXPECT_EQ(r.mae, 0.0);
    EXPECT_EQ(r.rmse, 0.0);
  }
  EXPECT_THROW((void)gt.predict(0, 2), ValueError);
}

TEST(Evaluate, HalfGridRoiMatchesMaskedSums) {
  const SimulatedSequence sim = simulate_sequence(lanes_config(12, 4));
  const auto targets = density_targets(sim.seq, KernelSpec{1.0, 4.0});
  const GridShape& s = sim.seq.shape;
  std::vector<std::uint8_t> roi(static_cast<std::size_t>(s.cells()), 0);
  for (int r = 0; r < s.rows; ++r)
    for (int c = 0; c < s.cols / 2; ++c) roi[static_cast<std::size_t>(s.index(r, c))] = 1;
  const nn::FlowRegressor<float> model;
  const auto p = model.init(1);
  const NetworkFlowModel<float> net{&model, p, sim.seq.frames, s};
  const std::vector<int> test{3, 4, 5};
  const EvalResult r = evaluate(net, test, targets, roi);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const DensityMap m = reconstruct_density(net, test[i], Reconstruction::average);
    double z = 0.0, zh = 0.0;
    for (int r0 = 0; r0 < s.rows; ++r0)
      for (int c = 0; c < s.cols / 2; ++c) {
        z += targets.at(test[i]).at(r0, c);
        zh += m.at(r0, c);
      }
    EXPECT_NEAR(r.z[i], z, 1e-9);
    EXPECT_NEAR(r.zhat[i], zh, 1e-9);
  }
}

TEST(Baseline, ConstantMeanPredictor) {
  const GridShape s{1, 1, 8};
  std::map<int, DensityMap> t;
  for (int i = 0; i < 4; ++i) t.emplace(i, DensityMap::from_values(s, {static_cast<double>(2 * i)}));
  const std::vector<int> train{0, 1}, test{2, 3};
  const EvalResult r = constant_mean_baseline(train, test, t);
  EXPECT_EQ(r.zhat, (std::vector<double>{1.0, 1.0}));
  EXPECT_DOUBLE_EQ(r.mae, 4.0);
}

TEST(Keyframes, UsableSchedule) {
  EXPECT_EQ(usable_keyframes(10, 1, DensityMode::flow), (std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8}));
  EXPECT_EQ(usable_keyframes(10, 2, DensityMode::flow), (std::vector<int>{2, 4, 6, 8}));
  EXPECT_EQ(usable_keyframes(10, 5, DensityMode::flow), (std::vector<int>{5}));
  EXPECT_EQ(usable_keyframes(10, 1, DensityMode::weak).front(), 2);
}

TEST(LrSchedule, LinearDecay) {
  EXPECT_EQ(scheduled_lr(1e-3, LrSchedule::constant, 7, 10), 1e-3);
  EXPECT_DOUBLE_EQ(scheduled_lr(1e-3, LrSchedule::linear, 0, 10), 1e-3);
  EXPECT_DOUBLE_EQ(scheduled_lr(1e-3, LrSchedule::linear, 5, 10), 5e-4);
  EXPECT_EQ(lr_schedule_from_string("linear"), LrSchedule::linear);
  EXPECT_THROW(lr_schedule_from_string("cosine"), ConfigError);
}

TEST(TrainThreeFrame, ZeroLearningRateLeavesParams) {
  const SimulatedSequence sim = simulate_sequence(lanes_config(10, 5));
  const auto targets = density_targets(sim.seq, KernelSpec{1.0, 4.0});
  const nn::FlowRegressor<float> model;
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.max_steps = 5;
  const auto p = model.init(2);
  const auto r = train_three_frame<float>(model, p, sim.seq.frames, sim.seq.shape, targets, cfg);
  EXPECT_EQ(r.params, p);
  EXPECT_EQ(r.log.size(), 5u);
  EXPECT_GT(r.log.front().total, 0.0);
}

TEST(TrainThreeFrame, ZeroTargetsAndZeroParamsStayPut) {
  const SimulatedSequence sim = simulate_sequence(lanes_config(8, 6));
  std::map<int, DensityMap> zero;
  for (int t = 0; t < 8; ++t) zero.emplace(t, DensityMap(sim.seq.shape));
  const nn::FlowRegressor<double> model;
  const std::vector<double> p(model.num_params(), 0.0);
  TrainConfig cfg;
  cfg.max_steps = 3;
  const auto r = train_three_frame<double>(model, p, sim.seq.frames, sim.seq.shape, zero, cfg);
  EXPECT_EQ(r.params, p);
  for (const auto& row : r.log) EXPECT_EQ(row.total, 0.0);
}

TEST(TrainThreeFrame, IntervalTwoSamplesEvenFramesOnly) {
  const SimulatedSequence sim = simulate_sequence(lanes_config(12, 7), 2);
  const auto targets = density_targets(sim.seq, KernelSpec{1.0, 4.0});
  const nn::FlowRegressor<float> model;
  TrainConfig cfg;
  cfg.keyframe_interval = 2;
  cfg.max_steps = 30;
  cfg.batch = 2;
  const auto r = train_three_frame<float>(model, model.init(1), sim.seq.frames, sim.seq.shape, targets, cfg);
  ASSERT_EQ(r.sampled.size(), 60u);
  for (int t : r.sampled) EXPECT_EQ(t % 2, 0);
  for (const auto& row : r.log) EXPECT_GT(row.l_uflow + row.l_flow, 0.0);
}

TEST(TrainThreeFrame, MissingTargetIsAnnotationError) {
  const SimulatedSequence sim = simulate_sequence(lanes_config(10, 8));
  auto targets = density_targets(sim.seq, KernelSpec{1.0, 4.0});
  targets.erase(4);
  const nn::FlowRegressor<float> model;
  TrainConfig cfg;
  cfg.max_steps = 1;
  EXPECT_THROW(train_three_frame<float>(model, model.init(1), sim.seq.frames, sim.seq.shape, targets, cfg),
               AnnotationError);
  cfg.use_optical = true;
  targets = density_targets(sim.seq, KernelSpec{1.0, 4.0});
  EXPECT_THROW(train_three_frame<float>(model, model.init(1), sim.seq.frames, sim.seq.shape, targets, cfg),
               ConfigError);
}

TEST(TrainThreeFrame, DeterministicUnderSeed) {
  const SimulatedSequence sim = simulate_sequence(lanes_config(10, 9));
  const auto targets = density_targets(sim.seq, KernelSpec{1.0, 4.0});
  const nn::FlowRegressor<float> model;
  TrainConfig cfg;
  cfg.max_steps = 20;
  cfg.seed = 3;
  const auto a = train_three_frame<float>(model, model.init(1), sim.seq.frames, sim.seq.shape, targets, cfg);
  const auto b = train_three_frame<float>(model, model.init(1), sim.seq.frames, sim.seq.shape, targets, cfg);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.sampled, b.sampled);
}

TEST(TrainThreeFrame, LossFallsBelowTenPercentOnLanes) {
  const SimulatedSequence sim = simulate_sequence(lanes_config(30, 10));
  const auto targets = density_targets(sim.seq, KernelSpec{1.0, 4.0});
  const nn::FlowRegressor<float> model;
  TrainConfig cfg;
  cfg.max_steps = 2000;
  cfg.learning_rate = 1e-3;
  cfg.seed = 1;
  const auto r = train_three_frame<float>(model, model.init(1), sim.seq.frames, sim.seq.shape, targets, cfg);
  const double first = mean_loss(r.log, false);
  const double last = mean_loss(r.log, true);
  EXPECT_LT(last, 0.1 * first) << first << " -> " << last;
}

TEST(TrainThreeFrame, OpticalTermAndWeakModeRun) {
  const SimulatedSequence sim = simulate_sequence(lanes_config(12, 11));
  const auto targets = density_targets(sim.seq, KernelSpec{1.0, 4.0});
  const nn::OpticalRegressor fo(4);
  const auto data = fo_samples(targets, sim.seq.optical, 0, 10);
  const FoResult pre = pretrain_fo(fo, data, 20, 1e-3, fo.init(1));
  const OpticalPrior prior{&fo, pre.params, sim.seq.optical};
  const nn::FlowRegressor<float> model;
  TrainConfig cfg;
  cfg.max_steps = 10;
  cfg.use_optical = true;
  const auto r = train_three_frame<float>(model, model.init(1), sim.seq.frames, sim.seq.shape, targets, cfg, &prior);
  for (const auto& row : r.log) EXPECT_GT(row.l_optical, 0.0);
  cfg.use_optical = false;
  cfg.mode = DensityMode::weak;
  const auto w = train_three_frame<float>(model, model.init(1), sim.seq.frames, sim.seq.shape, targets, cfg);
  for (int t : w.sampled) EXPECT_GE(t, 2);
}

TEST(PretrainFo, ZeroTargetsAndZeroInitStayPut) {
  const nn::OpticalRegressor fo(4);
  const GridShape s{4, 4, 8};
  Rng rng(1);
  std::vector<FoSample> data;
  for (int i = 0; i < 3; ++i)
    data.push_back({fc_test::random_density(s, rng), fc_test::random_density(s, rng), OpticalFlowField(s)});
  const std::vector<double> zero(fo.num_params(), 0.0);
  const FoResult r = pretrain_fo(fo, data, 10, 1e-3, zero);
  EXPECT_EQ(r.params, zero);
  for (double l : r.loss_curve) EXPECT_EQ(l, 0.0);
  EXPECT_THROW(pretrain_fo(fo, std::vector<FoSample>{}, 10, 1e-3, zero), ConfigError);
}

TEST(PretrainFo, LossIsNonIncreasingInMostSteps) {
  SimConfig c = lanes_config(40, 12);
  const SimulatedSequence sim = simulate_sequence(c);
  const auto targets = density_targets(sim.seq, KernelSpec{1.0, 4.0});
  const auto data = fo_samples(targets, sim.seq.optical, 0, 39);
  const nn::OpticalRegressor fo(8);
  const FoResult r = pretrain_fo(fo, data, 100, 1e-4, fo.init(3));
  int ok = 0;
  for (std::size_t k = 1; k < r.loss_curve.size(); ++k)
    if (r.loss_curve[k] <= r.loss_curve[k - 1]) ++ok;
  EXPECT_GE(ok, 95);
  EXPECT_LT(r.loss_curve.back(), r.loss_curve.front());
}

TEST(PretrainFo, MaskedTargetsNeverContribute) {
  const nn::OpticalRegressor fo(4);
  const GridShape s{2, 2, 8};
  Rng rng(2);
  const DensityMap cur = DensityMap::from_values(s, {1.0, 0.0, 2.0, 0.0});
  FoSample a{fc_test::random_density(s, rng), cur, OpticalFlowField(s)};
  FoSample b = a;
  b.target.uv[2] = 7.0;
  b.target.uv[7] = -3.0;
  const auto p = fo.init(5);
  EXPECT_EQ(fo_dataset_loss(fo, p, std::vector<FoSample>{a}, 1e-4, nullptr),
            fo_dataset_loss(fo, p, std::vector<FoSample>{b}, 1e-4, nullptr));
}

TEST(LossLog, CsvHeader) {
  std::vector<LossLogRow> rows(2);
  rows[1].step = 1;
  rows[1].total = 2.5;
  const std::string csv = loss_log_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,l_flow,l_cycle,l_uflow,l_optical,l_spatial,l_advers,total");
  EXPECT_NE(csv.find("\n1,0,0,0,0,0,0,2.5\n"), std::string::npos);
}
