#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "insight/detector.hpp"
#include "insight/numcore/grad_check.hpp"

using namespace insight;

namespace {

/// 20 x 20 raster over a 6 m square.
const RasterRange kMicroRange{-3.0, 3.0, -3.0, 3.0};
constexpr double kMicroRes = 0.3;

DetectorConfig micro_config() {
  DetectorConfig c;
  c.n_instances = 2;
  c.n_points = 3;
  c.dim = 8;
  c.layers = 1;
  c.heads = 2;
  c.patch = 5;
  c.seed = 7;
  return c;
}

std::vector<Instance> micro_instances() {
  Instance line{{{-2.0, -2.5}, {-1.0, 0.0}, {-2.2, 2.4}}, InstanceKind::polyline, ElementClass::divider};
  Instance box{{{0.5, -1.0}, {2.0, -1.0}, {2.0, 1.5}, {0.5, 1.5}, {0.5, -1.0}}, InstanceKind::polygon,
               ElementClass::pedestrian_crossing};
  return {canonicalize(line), canonicalize(box)};
}

Detector micro_detector(const DetectorConfig& c) {
  return make_detector(c, BevShape{20, 20, kNumClasses, c.patch}, kMicroRange);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("insight_test_detector_" + name);
  std::filesystem::remove_all(p);
  return p;
}

Target target_of(std::vector<Point2> pts, InstanceKind kind) {
  Target t{ElementClass::divider, kind, Tensor2(static_cast<Eigen::Index>(pts.size()), 2)};
  for (std::size_t k = 0; k < pts.size(); ++k) {
    t.points(static_cast<Eigen::Index>(k), 0) = pts[k].x;
    t.points(static_cast<Eigen::Index>(k), 1) = pts[k].y;
  }
  return t;
}

Eigen::RowVectorXd one_hot(int c) {
  Eigen::RowVectorXd p = Eigen::RowVectorXd::Zero(kClassSlots);
  p(c) = 1.0;
  return p;
}

}  // namespace

// ------------------------------------------------------------------ encoder

TEST(EncodeBev, ZeroRasterGivesPositionsPlusBias) {
  DetectorConfig c;
  c.dim = 16;
  Detector d = make_detector(c, BevShape{200, 100, kNumClasses, 10});
  d.params.value("encoder.b").setConstant(0.25);
  BevRaster r{200, 100, kNumClasses, 0.3, std::vector<float>(200 * 100 * kNumClasses, 0.0f)};
  const auto e = encode_bev(d, r);
  ASSERT_EQ(e.keys.rows(), 200);
  EXPECT_EQ(e.keys, Tensor2((e.positions.array() + 0.25).matrix()));
  EXPECT_EQ(e.values, e.keys);
}

TEST(EncodeBev, OnePatchShiftMovesContentToNeighbourToken) {
  DetectorConfig c;
  c.dim = 16;
  const BevShape shape{200, 100, kNumClasses, 10};
  Detector d = make_detector(c, shape);
  Rng rng(3);
  BevRaster a{200, 100, kNumClasses, 0.3, std::vector<float>(200 * 100 * kNumClasses, 0.0f)};
  BevRaster b = a;
  for (std::uint32_t row = 40; row < 60; ++row) {
    for (std::uint32_t col = 30; col < 50; ++col) {
      for (std::uint32_t ch = 0; ch < kNumClasses; ++ch) {
        const auto v = static_cast<float>(rng.uniform());
        a.at(row, col, ch) = v;
        b.at(row, col + 10, ch) = v;
      }
    }
  }
  const Tensor2 ca = encode_bev(d, a).keys - d.positions;
  const Tensor2 cb = encode_bev(d, b).keys - d.positions;
  const int gc = shape.grid_cols();
  for (int gr = 0; gr < shape.grid_rows(); ++gr) {
    for (int col = 0; col + 1 < gc; ++col) {
      EXPECT_LE((ca.row(gr * gc + col) - cb.row(gr * gc + col + 1)).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(EncodeBev, TokenCountAndShapeChecks) {
  EXPECT_EQ((BevShape{200, 100, kNumClasses, 10}.tokens()), 200);
  EXPECT_THROW((BevShape{200, 95, kNumClasses, 10}.validate()), ShapeError);
  const Detector d = make_detector(DetectorConfig{}, BevShape{200, 100, kNumClasses, 10});
  BevRaster wrong{100, 100, kNumClasses, 0.3, std::vector<float>(100 * 100 * kNumClasses, 0.0f)};
  EXPECT_THROW(encode_bev(d, wrong), ShapeError);
}

TEST(EncodeBev, PatchFeatureLayout) {
  BevRaster r{20, 20, kNumClasses, 0.3, std::vector<float>(20 * 20 * kNumClasses, 0.0f)};
  r.at(7, 13, 2) = 0.5f;  // patch (1, 2), cell (2, 3)
  const auto m = patchify(r, BevShape{20, 20, kNumClasses, 5});
  EXPECT_EQ(m.nonZeros(), 1);
  EXPECT_EQ(m.coeff(1 * 4 + 2, (2 * 5 + 3) * kNumClasses + 2), 0.5);
}

// ------------------------------------------------------------------ prediction

TEST(Predict, UntrainedShapeRangeAndDeterminism) {
  const auto c = micro_config();
  const Detector d = micro_detector(c);
  const auto raster = rasterize(micro_instances(), kMicroRes, kMicroRange);
  const auto p = predict(d, raster);
  ASSERT_EQ(p.instances.size(), 2u);
  for (const auto& inst : p.instances) {
    ASSERT_EQ(inst.points.size(), 3u);
    double sum = 0.0;
    for (double q : inst.class_probs) sum += q;
    EXPECT_NEAR(sum, 1.0, 1e-9);
    EXPECT_NEAR(inst.confidence, 1.0 - inst.class_probs[kNoObject], 1e-15);
    for (const auto& pt : inst.points) {
      EXPECT_TRUE(std::isfinite(pt.x) && std::isfinite(pt.y));
      EXPECT_GE(pt.x, kMicroRange.x_min);
      EXPECT_LE(pt.x, kMicroRange.x_max);
      EXPECT_GE(pt.y, kMicroRange.y_min);
      EXPECT_LE(pt.y, kMicroRange.y_max);
    }
  }
  EXPECT_EQ(predict(d, raster), p);
  auto order = confidence_order(p);
  std::sort(order.begin(), order.end());
  EXPECT_EQ(order, (std::vector<int>{0, 1}));
}

TEST(Predict, ScoredInstancesCloseCrossings) {
  PredictionSet ps;
  ps.instances.push_back({{}, 0.9, ElementClass::pedestrian_crossing, {{0, 0}, {1, 0}, {1, 1}}});
  ps.instances.push_back({{}, 0.4, ElementClass::centerline, {{0, 0}, {1, 0}}});
  const auto s = scored_instances(ps);
  EXPECT_EQ(s[0].instance.kind, InstanceKind::polygon);
  EXPECT_EQ(s[0].instance.points.size(), 4u);
  EXPECT_EQ(s[0].instance.points.back(), (Point2{0, 0}));
  EXPECT_EQ(s[1].instance.kind, InstanceKind::polyline);
  EXPECT_EQ(s[1].confidence, 0.4);
}

// ------------------------------------------------------------------ cost and matching

TEST(InstanceCost, ExactPredictionCostsZero) {
  const auto t = target_of({{0.1, 0.2}, {0.3, 0.5}, {0.6, 0.4}}, InstanceKind::polyline);
  const auto c = instance_cost(one_hot(static_cast<int>(t.cls)), t.points, t, 2.0, 5.0);
  EXPECT_EQ(c.cost, 0.0);
}

TEST(InstanceCost, ReversedPolylineHasZeroPointTerm) {
  const auto t = target_of({{0.1, 0.2}, {0.3, 0.5}, {0.6, 0.4}}, InstanceKind::polyline);
  const Tensor2 rev = t.points.colwise().reverse();
  const auto c = instance_cost(one_hot(0), rev, t, 2.0, 5.0);
  EXPECT_EQ(c.point_term, 0.0);
  EXPECT_EQ(c.ordering, 1);
  EXPECT_DOUBLE_EQ(c.cost, 2.0 * (1.0 - 0.0));
}

TEST(InstanceCost, SquareFromAnotherCornerHasZeroPointTerm) {
  const std::vector<Point2> sq{{0.2, 0.2}, {0.4, 0.2}, {0.4, 0.4}, {0.2, 0.4}};
  const auto t = target_of(sq, InstanceKind::polygon);
  for (int start = 0; start < 4; ++start) {
    for (int dir : {1, -1}) {
      std::vector<Point2> p;
      for (int k = 0; k < 4; ++k) p.push_back(sq[static_cast<std::size_t>(((start + dir * k) % 4 + 4) % 4)]);
      EXPECT_EQ(instance_cost(one_hot(1), target_of(p, InstanceKind::polygon).points, t, 2.0, 5.0).point_term, 0.0);
    }
  }
  // A polyline target does not get cyclic equivalence.
  std::vector<Point2> shifted{sq[1], sq[2], sq[3], sq[0]};
  EXPECT_GT(instance_cost(one_hot(1), target_of(shifted, InstanceKind::polyline).points,
                          target_of(sq, InstanceKind::polyline), 2.0, 5.0).point_term,
            0.0);
}

TEST(InstanceCost, PointTermInvariantUnderGtReversalAndShift) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = rng.uniform_int(2, 9);
    const bool polygon = trial % 2 == 1;
    Tensor2 pred(n, 2), gt(n, 2);
    for (Eigen::Index i = 0; i < pred.size(); ++i) {
      pred.data()[i] = rng.uniform();
      gt.data()[i] = rng.uniform();
    }
    const auto kind = polygon ? InstanceKind::polygon : InstanceKind::polyline;
    Target t{ElementClass::divider, kind, gt};
    const double base = instance_cost(one_hot(0), pred, t, 1.0, 1.0).point_term;
    Target rev{ElementClass::divider, kind, gt.colwise().reverse()};
    EXPECT_LE(std::abs(instance_cost(one_hot(0), pred, rev, 1.0, 1.0).point_term - base), 1e-12);
    if (polygon) {
      const int s = rng.uniform_int(1, n - 1);
      Tensor2 shifted(n, 2);
      for (int k = 0; k < n; ++k) shifted.row(k) = gt.row((k + s) % n);
      Target sh{ElementClass::divider, kind, shifted};
      EXPECT_LE(std::abs(instance_cost(one_hot(0), pred, sh, 1.0, 1.0).point_term - base), 1e-12);
    }
  }
}

TEST(InstanceCost, RejectsPointCountMismatch) {
  const auto t = target_of({{0, 0}, {1, 1}, {2, 2}}, InstanceKind::polyline);
  EXPECT_THROW(instance_cost(one_hot(0), Tensor2::Zero(4, 2), t, 1.0, 1.0), ShapeError);
}

TEST(MatchInstances, SingleTargetTakesCheaperSlot) {
  HeadOutput h;
  h.probs = Tensor2::Zero(2, kClassSlots);
  h.probs(0, 1) = 1.0;
  h.probs(1, kNoObject) = 1.0;
  h.points = Tensor2::Constant(4, 2, 0.5);
  auto t = target_of({{0.5, 0.5}, {0.5, 0.5}}, InstanceKind::polyline);
  const std::vector<Target> ts{t};
  const auto m = match_instances(h, ts, 2, 2.0, 5.0);
  EXPECT_EQ(m.slot_gt, (std::vector<int>{0, -1}));
  EXPECT_EQ(m.total_cost, 0.0);
}

TEST(MatchInstances, ZeroTargetsLeavesEverySlotEmpty) {
  HeadOutput h;
  h.probs = Tensor2::Constant(3, kClassSlots, 0.2);
  h.points = Tensor2::Constant(6, 2, 0.5);
  const auto m = match_instances(h, {}, 2, 2.0, 5.0);
  EXPECT_EQ(m.slot_gt, (std::vector<int>(3, -1)));
}

TEST(MatchInstances, MoreTargetsThanSlotsIsAnError) {
  HeadOutput h;
  h.probs = Tensor2::Constant(1, kClassSlots, 0.2);
  h.points = Tensor2::Constant(2, 2, 0.5);
  const auto t = target_of({{0, 0}, {1, 1}}, InstanceKind::polyline);
  const std::vector<Target> ts{t, t};
  EXPECT_THROW(match_instances(h, ts, 2, 1.0, 1.0), Error);
}

// ------------------------------------------------------------------ loss

namespace {

HeadOutput perfect_head(const std::vector<Target>& ts, int np, int slots, double logit_gap) {
  HeadOutput h;
  h.logits = Tensor2::Zero(slots, kClassSlots);
  h.points = Tensor2::Constant(slots * np, 2, 0.5);
  for (int i = 0; i < slots; ++i) {
    const int cls = i < static_cast<int>(ts.size()) ? static_cast<int>(ts[static_cast<std::size_t>(i)].cls) : kNoObject;
    h.logits(i, cls) = logit_gap;
    if (i < static_cast<int>(ts.size())) h.points.middleRows(i * np, np) = ts[static_cast<std::size_t>(i)].points;
  }
  h.probs = softmax_rows(h.logits);
  return h;
}

}  // namespace

TEST(Loss, PerfectPredictionLeavesOnlyEntropyFloor) {
  DetectorConfig cfg = micro_config();
  cfg.n_instances = 3;
  const std::vector<Target> ts{target_of({{0.1, 0.1}, {0.2, 0.3}, {0.4, 0.2}}, InstanceKind::polyline),
                               target_of({{0.6, 0.6}, {0.8, 0.6}, {0.7, 0.9}}, InstanceKind::polygon)};
  const auto h = perfect_head(ts, 3, 3, 4.0);
  const auto m = match_instances(h, ts, 3, cfg.lambda_cls, cfg.lambda_pts);
  const auto l = layer_loss(h, ts, m, cfg, nullptr);
  EXPECT_EQ(l.pts, 0.0);
  const double ce = std::log(std::exp(4.0) + 4.0) - 4.0;  // one logit at 4, four at 0
  EXPECT_NEAR(l.cls, cfg.lambda_cls * ce, 1e-12);
}

TEST(Loss, DoublingPointWeightDoublesPointTerm) {
  DetectorConfig cfg = micro_config();
  const std::vector<Target> ts{target_of({{0.1, 0.1}, {0.2, 0.3}, {0.4, 0.2}}, InstanceKind::polyline)};
  auto h = perfect_head(ts, 3, 2, 1.0);
  h.points.array() += 0.03;
  const auto m = match_instances(h, ts, 3, cfg.lambda_cls, cfg.lambda_pts);
  const auto a = layer_loss(h, ts, m, cfg, nullptr);
  cfg.lambda_pts *= 2.0;
  const auto b = layer_loss(h, ts, m, cfg, nullptr);
  EXPECT_EQ(b.pts, 2.0 * a.pts);
  EXPECT_EQ(b.cls, a.cls);
  EXPECT_NEAR(a.pts, 5.0 * 0.06, 1e-12);
}

TEST(Loss, NoObjectWeightScalesEmptySlots) {
  DetectorConfig cfg = micro_config();
  cfg.no_object_weight = 0.0;
  const std::vector<Target> ts{target_of({{0.1, 0.1}, {0.2, 0.3}, {0.4, 0.2}}, InstanceKind::polyline)};
  auto h = perfect_head(ts, 3, 2, 1.0);
  h.logits.row(1).setZero();
  h.probs = softmax_rows(h.logits);
  const auto m = match_instances(h, ts, 3, cfg.lambda_cls, cfg.lambda_pts);
  const auto a = layer_loss(h, ts, m, cfg, nullptr);
  h.logits.row(1).setConstant(3.0);
  h.probs = softmax_rows(h.logits);
  EXPECT_EQ(layer_loss(h, ts, m, cfg, nullptr).cls, a.cls);
}

TEST(Loss, EndToEndMicroGradientMatchesFiniteDifferences) {
  for (auto scheme : {QueryScheme::hybrid, QueryScheme::hierarchical, QueryScheme::naive}) {
    auto c = micro_config();
    c.query_scheme = scheme;
    c.epsilon = 0.3;
    Detector d = micro_detector(c);
    const auto gts = micro_instances();
    const auto raster = rasterize(gts, kMicroRes, kMicroRange);
    const auto patches = patchify(raster, d.shape);
    const auto targets = make_targets(gts, c.n_points, kMicroRange);
    Rng rng(5);
    StepPlan plan{draw_layer_masks(c.decoder_options(), d.instance_of, &rng, true), {}};
    const auto report = grad_check(
        [&](ParamStore&, bool with_grad) { return scene_loss(d, patches, targets, plan, with_grad).total(); }, d.params);
    EXPECT_TRUE(report.pass) << to_string(scheme) << ": " << report.worst_param << " rel " << report.max_rel_err;
    EXPECT_LT(report.max_rel_err, 1e-4);
  }
}

TEST(Loss, EndToEndGradientWithTwoLayersAndFeedForwardFusion) {
  auto c = micro_config();
  c.layers = 2;
  c.fusion = FusionMode::feed_forward;
  c.placement = Placement::before_cross;
  Detector d = micro_detector(c);
  const auto gts = micro_instances();
  const auto patches = patchify(rasterize(gts, kMicroRes, kMicroRange), d.shape);
  const auto targets = make_targets(gts, c.n_points, kMicroRange);
  StepPlan plan{draw_layer_masks(c.decoder_options(), d.instance_of, nullptr, false), {}};
  const auto report = grad_check(
      [&](ParamStore&, bool with_grad) { return scene_loss(d, patches, targets, plan, with_grad).total(); }, d.params);
  EXPECT_TRUE(report.pass) << report.worst_param << " rel " << report.max_rel_err;
}

// ------------------------------------------------------------------ training

namespace {

DetectorConfig small_train_config() {
  DetectorConfig c;
  c.dim = 16;
  c.heads = 2;
  c.layers = 2;
  c.epochs = 2;
  c.batch_size = 2;
  c.lr = 3e-3;
  c.eval_scenes = 2;
  c.seed = 21;
  return c;
}

const std::vector<SceneRecord>& small_dataset() {
  static const auto data = generate_dataset(SceneConfig{}, 12, 0.3);
  return data;
}

}  // namespace

TEST(Train, LossDecreasesOverTwoEpochs) {
  const auto dir = scratch("decrease");
  const auto r = train(small_dataset(), small_train_config(), {dir});
  ASSERT_EQ(r.log.size(), 2u);
  EXPECT_LT(r.log[1].loss, r.log[0].loss);
  EXPECT_TRUE(std::filesystem::exists(dir / kCheckpointFile));
  const auto header = nlohmann::json::parse(slurp(dir / kLogFile).substr(0, slurp(dir / kLogFile).find('\n')));
  EXPECT_EQ(header.at("config_hash"), hex64(small_train_config().hash()));
  EXPECT_EQ(header.at("train_scenes"), 10);
}

TEST(Train, IdenticalRunsProduceIdenticalFiles) {
  const auto a = scratch("det_a");
  const auto b = scratch("det_b");
  train(small_dataset(), small_train_config(), {a});
  train(small_dataset(), small_train_config(), {b});
  EXPECT_EQ(slurp(a / kLogFile), slurp(b / kLogFile));
  EXPECT_EQ(slurp(a / kCheckpointFile), slurp(b / kCheckpointFile));
}

TEST(Train, ResumeContinuesBitForBit) {
  const auto full = scratch("resume_full");
  const auto part = scratch("resume_part");
  auto cfg = small_train_config();
  cfg.epochs = 3;
  train(small_dataset(), cfg, {full});
  TrainOptions first{part};
  first.stop_after = 1;
  train(small_dataset(), cfg, first);
  TrainOptions rest{part};
  rest.resume = true;
  const auto r = train(small_dataset(), cfg, rest);
  EXPECT_EQ(r.log.size(), 3u);
  EXPECT_EQ(slurp(full / kLogFile), slurp(part / kLogFile));
  EXPECT_EQ(slurp(full / kCheckpointFile), slurp(part / kCheckpointFile));
}

TEST(Train, CheckpointRejectsOtherModelConfig) {
  const auto dir = scratch("mismatch");
  auto cfg = small_train_config();
  cfg.epochs = 1;
  train(small_dataset(), cfg, {dir});
  const auto shape = BevShape::of(small_dataset().front().raster, cfg.patch);
  EXPECT_NO_THROW(load_detector(cfg, shape, (dir / kCheckpointFile).string()));
  auto other = cfg;
  other.mask = MaskMode::off;
  EXPECT_THROW(load_detector(other, shape, (dir / kCheckpointFile).string()), StateMismatchError);
}

TEST(Train, RejectsTooFewSlots) {
  auto cfg = small_train_config();
  cfg.n_instances = 2;
  EXPECT_THROW(train(small_dataset(), cfg, {scratch("slots")}), UsageError);
}
