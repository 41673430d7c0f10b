#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "kpt/error.hpp"
#include "kpt/eval.hpp"
#include "kpt/random.hpp"

using namespace kpt;
using J = JointId;

namespace {

std::vector<JointId> everything() { return {all_joints().begin(), all_joints().end()}; }

struct Instance {
  std::vector<PoseAnnotation> gt;
  Predictions pred;
};

Instance random_instance(Rng& rng, const std::vector<JointId>& subset, std::size_t n) {
  Instance in;
  for (std::size_t i = 0; i < n; ++i) {
    PoseAnnotation p;
    for (auto& kp : p.joints) kp = {rng.uniform(0, 64), rng.uniform(0, 64), rng.uniform() < 0.85};
    p.head_len = rng.uniform(4, 16);
    std::vector<DecodedJoint> row;
    for (auto j : subset) {
      const double r = rng.uniform(0, 12), a = rng.uniform(0, 6.283);
      row.push_back({p[j].x + r * std::cos(a), p[j].y + r * std::sin(a), 1.0});
    }
    in.gt.push_back(p);
    in.pred.push_back(row);
  }
  return in;
}

// Independent recount: loops over joints first and recomputes the normalizer inline.
std::vector<std::pair<std::size_t, std::size_t>> recount(const Instance& in, const std::vector<JointId>& subset,
                                                         double threshold, Normalization norm, double img, double hm) {
  std::vector<std::pair<std::size_t, std::size_t>> counts(subset.size());
  for (std::size_t k = 0; k < subset.size(); ++k)
    for (std::size_t i = 0; i < in.gt.size(); ++i) {
      const auto& g = in.gt[i].joints[static_cast<std::size_t>(subset[k])];
      if (!g.visible) continue;
      double n = in.gt[i].head_len;
      if (norm == Normalization::bbox) {
        double lo_x = 1e18, lo_y = 1e18, hi_x = -1e18, hi_y = -1e18;
        for (const auto& q : in.gt[i].joints)
          if (q.visible) {
            lo_x = std::min(lo_x, q.x), hi_x = std::max(hi_x, q.x);
            lo_y = std::min(lo_y, q.y), hi_y = std::max(hi_y, q.y);
          }
        n = std::max(hi_x - lo_x, hi_y - lo_y);
      } else if (norm == Normalization::heatmap_tenth) {
        n = img / 10.0;
        (void)hm;
      }
      const double dx = in.pred[i][k].x - g.x, dy = in.pred[i][k].y - g.y;
      counts[k].second += 1;
      if (std::sqrt(dx * dx + dy * dy) < threshold * n) counts[k].first += 1;
    }
  return counts;
}

}  // namespace

TEST_CASE("perfect predictions score 100 under every normalization") {
  Rng rng(1);
  auto subset = everything();
  auto in = random_instance(rng, subset, 10);
  for (std::size_t i = 0; i < in.gt.size(); ++i)
    for (std::size_t k = 0; k < subset.size(); ++k)
      in.pred[i][k] = {in.gt[i][subset[k]].x, in.gt[i][subset[k]].y, 1};
  for (auto n : {Normalization::head, Normalization::bbox, Normalization::heatmap_tenth}) {
    auto r = pck(in.pred, in.gt, subset, {0.5, n, 64, 16});
    for (const auto& j : r.joints) CHECK(*j.score == 100.0);
    CHECK(*r.average == 100.0);
  }
}

TEST_CASE("strict inequality at the threshold") {
  PoseAnnotation p;
  p.head_len = 40;
  p[J::r_wrist] = {50, 50, true};
  p[J::l_wrist] = {50, 50, true};
  p[J::r_elbow] = {50, 50, true};
  Predictions pred = {{{69.9, 50, 1}, {70.0, 50, 1}, {62, 66, 1}}};  // 19.9, 20.0, 20.0
  auto r = pckh(pred, {p}, {J::r_wrist, J::l_wrist, J::r_elbow});
  CHECK(r.joints[0].correct == 1);
  CHECK(r.joints[1].correct == 0);
  CHECK(r.joints[2].correct == 0);
  CHECK(r.metric == "PCKh@0.5");
}

TEST_CASE("hand-counted wrist PCKh") {
  std::vector<PoseAnnotation> gt(3);
  Predictions pred;
  const double err[] = {10, 25, 5};
  for (int i = 0; i < 3; ++i) {
    gt[i].head_len = 40;
    gt[i][J::r_wrist] = {100, 100, true};
    pred.push_back({{100 + err[i], 100, 1}});
  }
  auto r = pckh(pred, gt, {J::r_wrist});
  CHECK(r.joints[0].score.value() == doctest::Approx(66.67).epsilon(1e-4));
  CHECK(r.group("Wrist")->score.value() == doctest::Approx(200.0 / 3.0));
}

TEST_CASE("metric equals an independent recount on 100 random instances") {
  Rng rng(99);
  for (int t = 0; t < 100; ++t) {
    std::vector<JointId> subset;
    for (auto j : all_joints())
      if (rng.uniform() < 0.6) subset.push_back(j);
    if (subset.empty()) subset.push_back(J::thorax);
    auto in = random_instance(rng, subset, 1 + rng.below(12));
    const double thr = rng.uniform(0.1, 1.0);
    for (auto n : {Normalization::head, Normalization::bbox, Normalization::heatmap_tenth}) {
      auto r = pck(in.pred, in.gt, subset, {thr, n, 64, 16});
      auto oracle = recount(in, subset, thr, n, 64, 16);
      for (std::size_t k = 0; k < subset.size(); ++k) {
        CHECK(r.joints[k].correct == oracle[k].first);
        CHECK(r.joints[k].total == oracle[k].second);
      }
      double sum = 0;
      int groups = 0;
      for (const auto& g : r.groups) {
        if (g.name == "Pelvis" || g.name == "Thorax") {
          CHECK_FALSE(g.in_average);
          continue;
        }
        if (!g.score) continue;
        sum += *g.score;
        ++groups;
      }
      if (groups) CHECK(*r.average == doctest::Approx(sum / groups).epsilon(1e-12));
      else CHECK_FALSE(r.average.has_value());
    }
  }
}

TEST_CASE("pelvis and thorax never reach the average") {
  std::vector<PoseAnnotation> gt(1);
  gt[0].head_len = 10;
  gt[0][J::pelvis] = {0, 0, true};
  gt[0][J::thorax] = {0, 0, true};
  gt[0][J::r_knee] = {0, 0, true};
  Predictions pred = {{{100, 100, 1}, {0, 0, 1}, {0, 0, 1}}};
  auto r = pckh(pred, gt, {J::r_knee, J::pelvis, J::thorax});
  CHECK(*r.group("Pelvis")->score == 100.0);
  CHECK(*r.group("Thorax")->score == 100.0);
  CHECK(*r.average == 0.0);
  auto only = pckh({{{0, 0, 1}}}, gt, {J::pelvis});
  CHECK_FALSE(only.average.has_value());
}

TEST_CASE("monotonic in threshold and normalizer, invariant under reordering") {
  Rng rng(5);
  auto subset = everything();
  auto in = random_instance(rng, subset, 30);
  auto prev = pckh(in.pred, in.gt, subset, 0.1);
  for (double t = 0.2; t <= 1.5; t += 0.1) {
    auto cur = pckh(in.pred, in.gt, subset, t);
    for (std::size_t k = 0; k < subset.size(); ++k) CHECK(cur.joints[k].correct >= prev.joints[k].correct);
    prev = cur;
  }
  auto big = in;
  for (auto& g : big.gt) g.head_len *= 1.5;
  auto a = pckh(big.pred, big.gt, subset), b = pckh(in.pred, in.gt, subset);
  for (std::size_t k = 0; k < subset.size(); ++k) CHECK(a.joints[k].correct >= b.joints[k].correct);

  auto shuffled = in;
  std::vector<std::size_t> order(in.gt.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  for (std::size_t i = 0; i < order.size(); ++i) {
    shuffled.gt[i] = in.gt[order[i]];
    shuffled.pred[i] = in.pred[order[i]];
  }
  auto c = pckh(shuffled.pred, shuffled.gt, subset);
  CHECK(nlohmann::json(c) == nlohmann::json(b));
}

TEST_CASE("metric input errors") {
  std::vector<PoseAnnotation> gt(2);
  Predictions pred = {{{0, 0, 0}}};
  try {
    pckh(pred, gt, {J::r_knee});
    FAIL("expected failure");
  } catch (const UsageError& e) {
    CHECK(std::string(e.what()).find("sample 1") != std::string::npos);
  }
  gt.resize(1);
  gt[0][J::r_knee] = {1, 1, false};
  auto r = pckh(pred, gt, {J::r_knee});
  CHECK_FALSE(r.joints[0].score.has_value());
  CHECK_FALSE(r.average.has_value());
  CHECK_THROWS_AS(pck(pred, gt, {J::r_knee}, {0.5, Normalization::bbox, 0, 0}), UsageError);
}

TEST_CASE("evaluate_model on a zeroed network") {
  HourglassArch a{.num_stacks = 2, .depth = 2, .base_channels = 8, .input_resolution = 32,
                  .heatmap_resolution = 8, .num_output_channels = 8};
  auto net = HourglassNet::build(a, 3);
  for (const auto& t : net.tensors()) {
    if (t.is_buffer || t.name.find("gamma") != std::string::npos) continue;
    auto v = t.tensor;
    for (auto& x : v.mutable_data()) x = 0.0f;
  }
  auto data = generate_synthetic(4, 10, 32);
  auto s2 = builtin_split("a").s2;
  auto preds = predict(net, data);
  for (const auto& row : preds)
    for (const auto& p : row) {
      CHECK(p.x == 0.0);
      CHECK(p.y == 0.0);
    }
  auto r = evaluate_model(net, data, s2, {});
  std::vector<std::string> names;
  for (const auto& g : r.groups) names.push_back(g.name);
  CHECK(names == std::vector<std::string>{"Elbow", "Wrist", "Knee", "Ankle"});
  double sum = 0;
  for (const auto& g : r.groups) {
    CHECK(*g.score >= 0.0);
    CHECK(*g.score <= 100.0);
    sum += *g.score;
  }
  CHECK(*r.average == doctest::Approx(sum / 4));
  CHECK(r.sample_count == 10);
  CHECK_THROWS_AS(evaluate_model(net, data, std::vector<JointId>{J::r_knee}, {}), UsageError);
  CHECK_THROWS_AS(evaluate_model(net, generate_synthetic(4, 2, 16), s2, {}), UsageError);

  auto d = builtin_split("d").s2;
  auto rd = evaluate_model(net, data, d, {});
  names.clear();
  for (const auto& g : rd.groups)
    if (g.in_average) names.push_back(g.name);
  CHECK(names == std::vector<std::string>{"Head", "Elbow", "Knee"});
}

TEST_CASE("table rendering") {
  auto report = [](std::vector<std::pair<std::string, double>> groups, double avg) {
    MetricReport r;
    r.metric = "PCKh@0.5";
    for (auto& [n, v] : groups) r.groups.push_back({n, 0, 0, v, true});
    r.average = avg;
    return r;
  };
  auto tl = report({{"Elbow", 87.9}, {"Wrist", 84.2}, {"Knee", 82.9}, {"Ankle", 80.6}}, 83.9);
  auto fw = report({{"Elbow", 74.7}, {"Wrist", 56.0}, {"Knee", 72.7}, {"Ankle", 66.8}}, 67.5);
  const auto table = render_table({{"Transfer learning", tl}, {"Frozen weights", fw}});
  CHECK(table ==
        "Configuration     | Elbow | Wrist | Knee | Ankle | Average\n"
        "Transfer learning | 87.9  | 84.2  | 82.9 | 80.6  | 83.9\n"
        "Frozen weights    | 74.7  | 56.0  | 72.7 | 66.8  | 67.5\n");
  CHECK(render_table_csv({{"Transfer learning", tl}}) ==
        "Configuration,Elbow,Wrist,Knee,Ankle,Average\nTransfer learning,87.9,84.2,82.9,80.6,83.9\n");
  const auto single = render_table({{"Random initialization", tl}});
  CHECK(std::count(single.begin(), single.end(), '\n') == 2);
  auto other = report({{"Head", 1}, {"Elbow", 2}, {"Knee", 3}}, 2);
  CHECK_THROWS_AS(render_table({{"a", tl}, {"b", other}}), InconsistentError);
}

TEST_CASE("curves round-trip") {
  RunHistory a = {{1, 0.5, 12.5, 2.5e-4, std::nullopt}, {2, 0.25, 40.0 / 3.0, 5e-5, std::nullopt}};
  RunHistory b = {{1, 0.1, 0.1 + 0.2, 1e-3, 1.5}};
  const auto csv = emit_curves({{"transfer_learning", a}, {"random_init", b}});
  auto back = parse_curves(csv);
  REQUIRE(back.size() == 2);
  CHECK(back[0].first == "transfer_learning");
  REQUIRE(back[0].second.size() == 2);
  CHECK(back[0].second[1].val_accuracy == 40.0 / 3.0);
  CHECK(back[0].second[1].learning_rate == 5e-5);
  CHECK(back[1].second[0].val_accuracy == 0.1 + 0.2);
  CHECK(emit_curves(back) == csv);
  CHECK_THROWS_AS(parse_curves("bad\n"), InconsistentError);

  for (const auto& r : a) CHECK(nlohmann::json(r).get<EpochRecord>() == r);
  CHECK(nlohmann::json(b[0]).get<EpochRecord>() == b[0]);
}
