#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>

#include "fixtures.hpp"
#include "quad/model_spec.hpp"
#include "quad/sensitivity.hpp"
#include "reference.hpp"

namespace quad {
namespace {

ErrorKind KindOf(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no quad::Error thrown";
  return ErrorKind::kIo;
}

std::vector<double> RandomDistribution(Rng& rng, size_t n) {
  std::vector<double> v(n);
  double sum = 0.0;
  for (double& e : v) sum += (e = rng.below(3) == 0 ? 0.0 : rng.uniform(0.0, 1.0));
  if (sum == 0.0) {
    v[0] = 1.0;
    sum = 1.0;
  }
  for (double& e : v) e /= sum;
  return v;
}

TEST(JsDivergence, IdenticalIsZero) {
  const std::vector<double> p{0.2, 0.3, 0.5};
  EXPECT_NEAR(JsDivergence(p, p), 0.0, 1e-15);
}

TEST(JsDivergence, DisjointSupportIsLn2) {
  const std::vector<double> p{1.0, 0.0}, q{0.0, 1.0};
  EXPECT_NEAR(JsDivergence(p, q), std::log(2.0), 1e-9);
}

TEST(JsDivergence, HalfVersusPointMass) {
  const std::vector<double> p{0.5, 0.5}, q{1.0, 0.0};
  // m = (0.75, 0.25): 0.5*(0.5 ln(2/3) + 0.5 ln 2) + 0.5 ln(4/3).
  const double oracle = 0.5 * (0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25)) +
                        0.5 * std::log(1.0 / 0.75);
  EXPECT_NEAR(oracle, 0.215761, 1e-6);
  EXPECT_NEAR(JsDivergence(p, q), oracle, 1e-9);
}

TEST(JsDivergence, Errors) {
  const std::vector<double> a{0.5, 0.5}, b{1.0}, c{0.6, 0.6}, d{1.5, -0.5};
  EXPECT_EQ(KindOf([&] { JsDivergence(a, b); }), ErrorKind::kShape);
  EXPECT_EQ(KindOf([&] { JsDivergence(a, c); }), ErrorKind::kRange);
  EXPECT_EQ(KindOf([&] { JsDivergence(d, a); }), ErrorKind::kRange);
}

TEST(JsDivergence, SymmetricBoundedAndMatchesOracle) {
  Rng rng(41);
  for (int trial = 0; trial < 500; ++trial) {
    const size_t n = 2 + static_cast<size_t>(rng.below(300));
    const auto p = RandomDistribution(rng, n);
    const auto q = RandomDistribution(rng, n);
    const double pq = JsDivergence(p, q);
    EXPECT_EQ(pq, JsDivergence(q, p));
    EXPECT_GE(pq, 0.0);
    EXPECT_LE(pq, std::log(2.0) + 1e-9);
    EXPECT_NEAR(pq, test::ReferenceJs(p, q), 1e-12 + 1e-9 * pq);
  }
}

TEST(SelectAnchor, Argmax) {
  EXPECT_EQ(SelectAnchor({{"L1", 0.9}, {"L2", 0.1}}, 0.05), (AnchorChoice{false, "L1"}));
}

TEST(SelectAnchor, EqualScoresFallBackToUnified) {
  EXPECT_EQ(SelectAnchor({{"L1", 0.5}, {"L2", 0.5}}, 0.05), (AnchorChoice{true, ""}));
}

TEST(SelectAnchor, SpreadAboveThresholdPicksMax) {
  // Spread 0.30 against threshold 0.05 * 0.50 = 0.025.
  EXPECT_EQ(SelectAnchor({{"L1", 0.50}, {"L2", 0.49}, {"L3", 0.20}}, 0.05), (AnchorChoice{false, "L1"}));
}

TEST(SelectAnchor, SpreadJustBelowThresholdIsUnified) {
  EXPECT_TRUE(SelectAnchor({{"L1", 1.0}, {"L2", 0.951}}, 0.05).unified);
  EXPECT_FALSE(SelectAnchor({{"L1", 1.0}, {"L2", 0.949}}, 0.05).unified);
}

TEST(SelectAnchor, AllZeroIsUnified) {
  EXPECT_TRUE(SelectAnchor({{"a", 0.0}, {"b", 0.0}}, 0.0).unified);
}

TEST(SelectAnchor, ExactTieWithZeroEpsilonBreaksLexicographically) {
  EXPECT_EQ(SelectAnchor({{"zeta", 0.7}, {"alpha", 0.7}, {"mid", 0.1}}, 0.0), (AnchorChoice{false, "alpha"}));
}

TEST(SelectAnchor, SingleAdapterIsItsOwnAnchor) {
  EXPECT_EQ(SelectAnchor({{"only", 0.3}}, 0.05), (AnchorChoice{false, "only"}));
}

TEST(SelectAnchor, Errors) {
  EXPECT_EQ(KindOf([] { SelectAnchor({}, 0.05); }), ErrorKind::kParameter);
  EXPECT_EQ(KindOf([] { SelectAnchor({{"a", 1.0}}, 1.0); }), ErrorKind::kParameter);
  EXPECT_EQ(KindOf([] { SelectAnchor({{"a", 1.0}}, -0.1); }), ErrorKind::kParameter);
  EXPECT_EQ(KindOf([] { SelectAnchor({{"a", NAN}, {"b", 1.0}}, 0.05); }), ErrorKind::kRange);
}

TEST(SelectAnchor, ScaleCovariantAtArgmax) {
  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    std::map<std::string, double> scores;
    const int n = 1 + static_cast<int>(rng.below(5));
    for (int i = 0; i < n; ++i) scores["L" + std::to_string(i)] = rng.uniform(0.0, 1.0);
    const double eps = rng.uniform(0.0, 0.5);
    const AnchorChoice base = SelectAnchor(scores, eps);
    for (double c : {0.5, 2.0, 8.0, 0.125}) {
      auto scaled = scores;
      for (auto& [id, s] : scaled) s *= c;
      EXPECT_EQ(SelectAnchor(scaled, eps), base) << "trial " << trial << " c " << c;
    }
  }
}

// Bundle, adapter and inputs built from small dyadic values so every
// intermediate lies exactly on a 2^-10 grid.
struct ExactCase {
  ModelBundle bundle;
  LoRAAdapter adapter;
  std::vector<CalibrationSample> data;
};

ExactCase MakeExactCase() {
  ExactCase c{test::FixtureBundle("toy2.model"), {}, {}};
  c.bundle.noise_std = 0.0f;
  Rng rng(3);
  auto dyadic = [&](Tensor& t, double step) {
    for (float& v : t.f32()) v = static_cast<float>(step * (static_cast<double>(rng.below(3)) - 1.0));
  };
  for (Role role : {Role::kEncoder, Role::kBackbone, Role::kDecoder}) {
    for (auto& [id, t] : c.bundle.graph(role).constants) dyadic(t, 0.5);
  }
  c.adapter = GenerateAdapter(c.bundle, {"exact", 2, 1.0f, 0.1f, 9, {}, 1.0f}, 9);
  for (auto& [node, e] : c.adapter.entries) {
    dyadic(e.a, 0.5);
    dyadic(e.b, 0.5);
  }
  c.data = GenerateDataset(c.bundle, 3, 4);
  for (auto& s : c.data) {
    dyadic(s.x, 0.25);
    dyadic(s.cond, 0.25);
  }
  return c;
}

QuantProfile GridProfile(const QuantProfile& shape_of) {
  QuantProfile p = shape_of;
  const QuantParams grid{1.0f / 1024.0f, 0, 16, true};
  for (auto& [k, q] : p.weight_params) q = grid;
  for (auto& [k, q] : p.act_params) q = grid;
  return p;
}

TEST(Qss, ZeroWhenEveryValueIsRepresentable) {
  const ExactCase c = MakeExactCase();
  const QuantProfile p = GridProfile(Calibrate(c.bundle, c.data, {Policy::W8A16(), 16, 0}, &c.adapter));
  for (size_t i = 0; i < c.data.size(); ++i) {
    const uint64_t seed = SampleSeed(0, i);
    const Tensor fp = ExecuteFp(c.bundle, c.data[i].x, c.data[i].cond, &c.adapter, seed);
    const Tensor qs = ExecuteQuantsim(c.bundle, p, &c.adapter, c.data[i].x, c.data[i].cond, seed);
    ASSERT_EQ(fp, qs) << "sample " << i;
  }
  EXPECT_EQ(Qss(c.bundle, c.adapter, p, c.data, 0), 0.0);
}

QuantProfile Requantized(const QuantProfile& base, int bits) {
  QuantProfile p = base;
  auto redo = [&](QuantParams& q) { q = ComputeQuantParams(q.range_lo(), q.range_hi(), bits, q.is_signed); };
  for (auto& [k, q] : p.weight_params) redo(q);
  for (auto& [k, q] : p.act_params) redo(q);
  return p;
}

TEST(Qss, CoarserProfileIsAtLeastAsSensitive) {
  for (uint64_t seed : {1, 2, 3}) {
    const ModelBundle b = test::FixtureBundle("sens.model", seed);
    const LoRAAdapter a = test::FixtureAdapter("sens_a.adapter", b, seed);
    const auto data = GenerateDataset(b, 4, seed);
    const QuantProfile p8 = Calibrate(b, data, {Policy::W8A8(), 8, seed}, &a);
    const QuantProfile p4 = Requantized(p8, 4);
    EXPECT_GE(Qss(b, a, p4, data, seed), Qss(b, a, p8, data, seed)) << "seed " << seed;
  }
}

TEST(Qss, MatchesIndependentPipeline) {
  const ModelBundle b = test::FixtureBundle("toy2.model", 2);
  const LoRAAdapter a = test::FixtureAdapter("a.adapter", b, 2);
  const auto data = GenerateDataset(b, 5, 2);
  const QuantProfile p = Calibrate(b, data, {Policy::W8A16(), 16, 2}, &a);
  const test::ScalarReference fp(b, nullptr, &a), qs(b, &p, &a);
  double want = 0.0;
  for (size_t i = 0; i < data.size(); ++i) {
    const uint64_t seed = SampleSeed(2, i);
    want += test::ReferenceOutputJs(fp.Forward(data[i].x, data[i].cond, seed),
                                    qs.Forward(data[i].x, data[i].cond, seed));
  }
  want /= static_cast<double>(data.size());
  const double got = Qss(b, a, p, data, 2);
  EXPECT_GT(want, 0.0);
  EXPECT_NEAR(got, want, 1e-6 * want);
}

TEST(Qss, Errors) {
  const ModelBundle b = test::FixtureBundle("toy2.model");
  const LoRAAdapter a = test::FixtureAdapter("a.adapter", b);
  const auto data = GenerateDataset(b, 2, 1);
  const QuantProfile p = Calibrate(b, data, {}, &a);
  EXPECT_EQ(KindOf([&] { Qss(b, a, p, {}, 0); }), ErrorKind::kParameter);
  QuantProfile holed = p;
  holed.act_params.erase(holed.act_params.begin());
  EXPECT_EQ(KindOf([&] { Qss(b, a, holed, data, 0); }), ErrorKind::kCoverage);
}

TEST(UnifiedProfile, SingleAdapterEqualsItsCalibration) {
  const ModelBundle b = test::FixtureBundle("toy2.model");
  const LoRAAdapter a = test::FixtureAdapter("a.adapter", b);
  const auto data = GenerateDataset(b, 3, 1);
  const CalibrationOptions opts{Policy::W8A16(), 8, 1};
  const std::vector<LoRAAdapter> one{a};
  EXPECT_EQ(UnifiedProfile(b, one, data, opts), Calibrate(b, data, opts, &a));
}

TEST(UnifiedProfile, SlotRangeIsUnionOfFactorRanges) {
  const ModelBundle b = test::FixtureBundle("toy2.model");
  LoRAAdapter lo = test::FixtureAdapter("a.adapter", b);
  LoRAAdapter hi = test::FixtureAdapter("b.adapter", b);
  const int node = LoraNodes(b.backbone).front();
  auto fill = [](Tensor& t, float from, float to) {
    auto v = t.f32();
    for (size_t i = 0; i < v.size(); ++i) v[i] = from + (to - from) * static_cast<float>(i) / static_cast<float>(v.size() - 1);
  };
  fill(lo.entries.at(node).a, -1.0f, 0.0f);
  fill(hi.entries.at(node).a, 0.0f, 2.0f);
  const std::vector<LoRAAdapter> both{lo, hi};
  const auto data = GenerateDataset(b, 2, 1);
  const QuantProfile p = UnifiedProfile(b, both, data, {Policy::W8A16(), 8, 1});
  const int a_slot = b.backbone.find_node(node)->attrs.a_slot;
  EXPECT_EQ(*p.weight({Role::kBackbone, a_slot}), ComputeQuantParams(-1.0, 2.0, 8, true));
}

TEST(UnifiedProfile, SlotParamsFromConcatenatedFactors) {
  const ModelBundle b = test::FixtureBundle("toy2.model");
  std::vector<LoRAAdapter> three;
  for (uint64_t s : {21, 22, 23}) three.push_back(GenerateAdapter(b, {"u" + std::to_string(s), 2, 1.0f, 0.2f + 0.1f * static_cast<float>(s - 21), s, {}, 1.0f}, s));
  const auto data = GenerateDataset(b, 2, 3);
  const QuantProfile p = UnifiedProfile(b, three, data, {Policy::W8A16(), 16, 3});
  for (int node : LoraNodes(b.backbone)) {
    const Node& n = *b.backbone.find_node(node);
    std::vector<float> as, bs;
    for (const auto& ad : three) {
      const auto& e = ad.entries.at(node);
      as.insert(as.end(), e.a.f32().begin(), e.a.f32().end());
      bs.insert(bs.end(), e.b.f32().begin(), e.b.f32().end());
    }
    auto scan = [](const std::vector<float>& v) {
      float mn = v[0], mx = v[0];
      for (float x : v) {
        mn = std::min(mn, x);
        mx = std::max(mx, x);
      }
      return ComputeQuantParams(mn, mx, 16, true);
    };
    EXPECT_EQ(*p.weight({Role::kBackbone, n.attrs.a_slot}), scan(as));
    EXPECT_EQ(*p.weight({Role::kBackbone, n.attrs.b_slot}), scan(bs));
  }
  CheckCoverage(b, p);
}

TEST(UnifiedProfile, DisjointTargetsAreCoverageError) {
  const ModelBundle b = test::FixtureBundle("toy2.model");
  const auto nodes = LoraNodes(b.backbone);
  const std::vector<LoRAAdapter> split{GenerateAdapter(b, {"p", 1, 1.0f, 0.1f, 1, {nodes[0]}, 1.0f}, 1),
                                       GenerateAdapter(b, {"q", 1, 1.0f, 0.1f, 2, {nodes[1]}, 1.0f}, 2)};
  const auto data = GenerateDataset(b, 1, 1);
  EXPECT_EQ(KindOf([&] { UnifiedProfile(b, split, data, {}); }), ErrorKind::kCoverage);
  EXPECT_EQ(KindOf([&] { UnifiedProfile(b, {}, data, {}); }), ErrorKind::kParameter);
}

TEST(BuildSharedProfile, SingleAdapterIsAnchor) {
  const ModelBundle b = test::FixtureBundle("toy2.model");
  const std::vector<LoRAAdapter> one{test::FixtureAdapter("a.adapter", b)};
  const auto data = GenerateDataset(b, 3, 1);
  const CalibrationOptions opts{Policy::W8A16(), 16, 1};
  const SharedProfile s = BuildSharedProfile(b, one, data, opts, 0.05);
  EXPECT_EQ(s.report.anchor, (AnchorChoice{false, "a"}));
  EXPECT_EQ(s.profile, Calibrate(b, data, opts, &one[0]));
}

struct SensSetup {
  ModelBundle bundle;
  std::vector<LoRAAdapter> adapters;
  std::vector<CalibrationSample> data;
};

SensSetup FragileSetup(uint64_t seed) {
  SensSetup s{test::FixtureBundle("sens.model", seed), {}, {}};
  for (const char* f : {"sens_a.adapter", "sens_b.adapter", "sens_fragile.adapter"}) {
    s.adapters.push_back(test::FixtureAdapter(f, s.bundle, seed));
  }
  s.data = GenerateDataset(s.bundle, 4, seed);
  return s;
}

TEST(BuildSharedProfile, FragileAdapterBecomesAnchor) {
  for (uint64_t seed : {1, 2, 3, 4}) {
    const SensSetup s = FragileSetup(seed);
    const CalibrationOptions opts{Policy::W8A16(), 8, seed};
    const SharedProfile out = BuildSharedProfile(s.bundle, s.adapters, s.data, opts, 0.05);
    EXPECT_EQ(out.report.anchor, (AnchorChoice{false, "fragile"})) << ReportToText(out.report);
    EXPECT_EQ(out.profile, out.provisional.at("fragile"));
    for (const auto& [id, q] : out.report.scores) EXPECT_TRUE(std::isfinite(q) && q >= 0.0);
    CheckCoverage(s.bundle, out.profile);
  }
}

TEST(BuildSharedProfile, EquallySensitivePairFallsBackToUnified) {
  // Power-of-two gauge rescaling of A and B is exact in float and scales the
  // slot quantization grid with it, so both adapters see identical errors.
  const ModelBundle b = test::FixtureBundle("sens.model");
  const LoRAAdapter base = test::FixtureAdapter("sens_a.adapter", b);
  const std::vector<LoRAAdapter> pair{test::GaugeScaled(base, "p", 1.0f), test::GaugeScaled(base, "q", 4.0f)};
  const auto data = GenerateDataset(b, 3, 1);
  const CalibrationOptions opts{Policy::W8A16(), 8, 1};
  const SharedProfile out = BuildSharedProfile(b, pair, data, opts, 0.05);
  EXPECT_EQ(out.report.scores.at("p"), out.report.scores.at("q"));
  EXPECT_TRUE(out.report.anchor.unified);
  EXPECT_EQ(out.profile, UnifiedProfile(b, pair, data, opts));
}

TEST(BuildSharedProfile, QssDataOverridesCalibrationData) {
  const SensSetup s = FragileSetup(1);
  const auto held_out = GenerateDataset(s.bundle, 2, 99);
  const CalibrationOptions opts{Policy::W8A16(), 8, 1};
  const SharedProfile out = BuildSharedProfile(s.bundle, s.adapters, s.data, opts, 0.05, held_out);
  for (const auto& a : s.adapters) {
    EXPECT_DOUBLE_EQ(out.report.scores.at(a.id), Qss(s.bundle, a, out.provisional.at(a.id), held_out, 1));
  }
}

TEST(BuildSharedProfile, DuplicateIdsRejected) {
  const ModelBundle b = test::FixtureBundle("toy2.model");
  const LoRAAdapter a = test::FixtureAdapter("a.adapter", b);
  const std::vector<LoRAAdapter> twice{a, a};
  const auto data = GenerateDataset(b, 1, 1);
  EXPECT_EQ(KindOf([&] { BuildSharedProfile(b, twice, data, {}, 0.05); }), ErrorKind::kParameter);
}

TEST(Report, KeySortedText) {
  QssReport r;
  r.scores = {{"b", 0.25}, {"a", 0.5}};
  r.anchor = {false, "a"};
  EXPECT_EQ(ReportToText(r),
            "a 0.5\nb 0.25\nanchor a\nrule max_qss\ntie_epsilon 0.05\ndivergence jensen_shannon\n");
  r.anchor = {true, ""};
  EXPECT_NE(ReportToText(r).find("anchor unified\nrule unified_fallback\n"), std::string::npos);
}

}  // namespace
}  // namespace quad
