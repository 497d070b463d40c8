#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include "fixtures.hpp"
#include "quad/exec.hpp"
#include "quad/graph.hpp"

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

TEST(Validate, EmptyGraphIsOk) { EXPECT_TRUE(Validate(Graph{}).ok()); }

TEST(Validate, SelfConsumingNodeIsCycle) {
  GraphBuilder b;
  const int x = b.Input("x", {2, 1});
  const int y = b.Activation(x, ActivationKind::kRelu);
  b.Output("y", y);
  Graph g = b.Build();
  Node* act = g.find_node(b.node_of(y));
  act->inputs = {y};
  const Diagnostic d = Validate(g);
  ASSERT_FALSE(d.ok());
  EXPECT_EQ(*d.kind, ErrorKind::kCycle);
  EXPECT_EQ(d.node_id, act->id);
}

TEST(Validate, TwoNodeLoopIsCycle) {
  GraphBuilder b;
  const int x = b.Input("x", {2, 1});
  const int p = b.Activation(x, ActivationKind::kRelu);
  const int q = b.Activation(p, ActivationKind::kSilu);
  b.Output("y", q);
  Graph g = b.Build();
  g.find_node(b.node_of(p))->inputs = {q};
  const Diagnostic d = Validate(g);
  ASSERT_FALSE(d.ok());
  EXPECT_EQ(*d.kind, ErrorKind::kCycle);
  EXPECT_EQ(KindOf([&] { TopoSort(g); }), ErrorKind::kCycle);
}

TEST(Validate, MatMulShapeMismatchReportsNode) {
  GraphBuilder b;
  const int x = b.Input("x", {2, 3});
  const int w = b.Constant(Tensor::Zeros({2, 3}));
  const int y = b.MatMul(w, x);
  b.Output("y", y);
  const Diagnostic d = Validate(b.Build());
  ASSERT_FALSE(d.ok());
  EXPECT_EQ(*d.kind, ErrorKind::kShape);
  EXPECT_EQ(d.node_id, b.node_of(y));
}

TEST(Validate, DanglingTensorId) {
  GraphBuilder b;
  const int x = b.Input("x", {2, 1});
  const int y = b.Activation(x, ActivationKind::kRelu);
  b.Output("y", y);
  Graph g = b.Build();
  g.find_node(b.node_of(y))->inputs = {999};
  const Diagnostic d = Validate(g);
  ASSERT_FALSE(d.ok());
  EXPECT_EQ(*d.kind, ErrorKind::kDangling);
}

TEST(Validate, SecondProducerOfATensorIsRejected) {
  GraphBuilder b;
  const int x = b.Input("x", {2, 1});
  const int p = b.Activation(x, ActivationKind::kRelu);
  const int q = b.Activation(x, ActivationKind::kSilu);
  b.Output("y", q);
  Graph g = b.Build();
  g.find_node(b.node_of(q))->output = p;
  EXPECT_FALSE(Validate(g).ok());
}

TEST(TopoSort, ChainKeepsOrder) {
  GraphBuilder b;
  int t = b.Input("x", {2, 1});
  for (int i = 0; i < 4; ++i) t = b.Activation(t, ActivationKind::kRelu);
  b.Output("y", t);
  const Graph g = b.Build();
  std::vector<int> ids;
  for (const Node& n : g.nodes) ids.push_back(n.id);
  EXPECT_EQ(TopoSort(g), ids);
}

TEST(TopoSort, DiamondVisitsBothBranchesLowerIdFirst) {
  GraphBuilder b;
  const int x = b.Input("x", {2, 1});
  const int l = b.Activation(x, ActivationKind::kRelu);
  const int r = b.Activation(x, ActivationKind::kSilu);
  const int j = b.Add(l, r);
  b.Output("y", j);
  Graph g = b.Build();
  // Shuffle storage order; the sort must not depend on it.
  std::reverse(g.nodes.begin(), g.nodes.end());
  const auto order = TopoSort(g);
  const auto pos = [&](int tensor) {
    return std::find(order.begin(), order.end(), b.node_of(tensor)) - order.begin();
  };
  EXPECT_LT(pos(l), pos(r));
  EXPECT_LT(pos(r), pos(j));
  EXPECT_LT(pos(x), pos(l));
}

TEST(TopoSort, RandomDagEdgesRespectOrder) {
  for (uint64_t s = 0; s < 100; ++s) {
    const Graph g = test::RandomDag(s, 12);
    ASSERT_TRUE(Validate(g).ok()) << Validate(g).message;
    const auto order = TopoSort(g);
    ASSERT_EQ(order.size(), g.nodes.size());
    std::map<int, size_t> pos;
    for (size_t i = 0; i < order.size(); ++i) pos[order[i]] = i;
    for (const Node& n : g.nodes) {
      for (int t : n.inputs) ASSERT_LT(pos.at(g.producer(t)->id), pos.at(n.id));
    }
  }
}

TEST(DumpGraph, StableLineFormat) {
  GraphBuilder b;
  const int x = b.Input("x", {3, 2});
  const int w = b.Constant(Tensor::Zeros({4, 3}));
  const int y = b.MatMul(w, x);
  const int a = b.Activation(y, ActivationKind::kSilu);
  b.Output("y", a);
  const std::string dump = DumpGraph(b.Build());
  EXPECT_EQ(dump,
            "0 input [] -> 0 {name=x shape=[3x2]}\n"
            "1 constant [] -> 1 {dtype=fp32 shape=[4x3]}\n"
            "2 matmul [1 0] -> 2 {}\n"
            "3 activation [2] -> 3 {act=silu}\n"
            "4 output [3] -> 4 {name=y}\n");
}

// W (2x2) with one lora node; returns the bundle-free graph and node id.
struct TinyLora {
  Graph g;
  int node = 0;
  int w = 0;
};

TinyLora MakeTinyLora(const Tensor& w) {
  GraphBuilder b;
  const int x = b.Input("x", {2, 1});
  const int wt = b.Constant(w);
  const int y = b.LoraMatMul(wt, x, 1);
  b.Output("y", y);
  return {b.Build(), b.node_of(y), wt};
}

TEST(AttachLoraStatic, ZeroAlphaLeavesConstantsBitExact) {
  Rng rng(4);
  const Tensor w = RandomNormal({2, 2}, rng, 1.0f);
  const TinyLora t = MakeTinyLora(w);
  LoRAAdapter a{"z", {}};
  a.entries[t.node] = {RandomNormal({2, 1}, rng, 1.0f), RandomNormal({1, 2}, rng, 1.0f), 0.0f};
  const Graph g = AttachLoraStatic(t.g, a);
  EXPECT_EQ(g.constants.at(t.w), w);
  EXPECT_EQ(g.find_node(t.node)->kind, NodeKind::kMatMul);
}

TEST(AttachLoraStatic, RankOneUpdateHitsOneEntry) {
  const Tensor w = Tensor::F32({2, 2}, {1, 2, 3, 4});
  const TinyLora t = MakeTinyLora(w);
  const float s = 0.75f, alpha = 2.0f;
  LoRAAdapter a{"r1", {}};
  a.entries[t.node] = {Tensor::F32({2, 1}, {s, 0}), Tensor::F32({1, 2}, {1, 0}), alpha};
  const Graph g = AttachLoraStatic(t.g, a);
  EXPECT_TRUE(ExactlyEqual(g.constants.at(t.w), Tensor::F32({2, 2}, {1 + alpha * s, 2, 3, 4})));
}

TEST(AttachLoraStatic, DoubleAttachAddsTwice) {
  Rng rng(10);
  const Tensor w = RandomNormal({2, 2}, rng, 1.0f);
  const TinyLora t = MakeTinyLora(w);
  LoRAAdapter a{"twice", {}};
  const Tensor A = RandomNormal({2, 1}, rng, 1.0f), B = RandomNormal({1, 2}, rng, 1.0f);
  a.entries[t.node] = {A, B, 0.5f};
  const Graph g = AttachLoraStatic(AttachLoraStatic(t.g, a), a);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      const double want = w.f32()[i * 2 + j] + 2.0 * 0.5 * A.f32()[i] * B.f32()[j];
      EXPECT_NEAR(g.constants.at(t.w).f32()[i * 2 + j], want, 1e-6);
    }
  }
}

TEST(AttachLoraStatic, TopologyUnchangedExceptKind) {
  const ModelBundle bundle = test::FixtureBundle("multistep.model");
  const LoRAAdapter a = test::FixtureAdapter("a.adapter", bundle);
  const Graph g = AttachLoraStatic(bundle.backbone, a);
  ASSERT_EQ(g.nodes.size(), bundle.backbone.nodes.size());
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    EXPECT_EQ(g.nodes[i].inputs, bundle.backbone.nodes[i].inputs);
    EXPECT_EQ(g.nodes[i].output, bundle.backbone.nodes[i].output);
    if (g.nodes[i].kind != bundle.backbone.nodes[i].kind) {
      EXPECT_EQ(bundle.backbone.nodes[i].kind, NodeKind::kLoraMatMul);
      EXPECT_EQ(g.nodes[i].kind, NodeKind::kMatMul);
    }
  }
}

TEST(AttachLoraStatic, MissingTargetIsDangling) {
  const TinyLora t = MakeTinyLora(Tensor::Zeros({2, 2}));
  LoRAAdapter a{"bad", {}};
  a.entries[77] = {Tensor::Zeros({2, 1}), Tensor::Zeros({1, 2}), 1.0f};
  EXPECT_EQ(KindOf([&] { AttachLoraStatic(t.g, a); }), ErrorKind::kDangling);
}

TEST(ExecuteFp, ZeroWeightsZeroNoiseGiveZeroOutput) {
  ModelSpec spec = ParseModelSpec(ReadText(test::FixturePath("toy2.model")));
  spec.noise_std = 0.0f;
  ModelBundle b = BuildBundle(spec, 3);
  for (Graph* g : {&b.encoder, &b.backbone, &b.decoder}) {
    for (auto& [id, t] : g->constants) std::fill(t.f32().begin(), t.f32().end(), 0.0f);
  }
  const auto data = GenerateDataset(b, 1, 5);
  const Tensor y = ExecuteFp(b, data[0].x, data[0].cond, nullptr, 9);
  EXPECT_TRUE(ExactlyEqual(y, Tensor::Zeros(y.shape())));
}

TEST(ExecuteFp, ZeroAFactorMatchesNoAdapterBitExact) {
  const ModelBundle b = test::FixtureBundle("multistep.model");
  LoRAAdapter a = test::FixtureAdapter("a.adapter", b);
  for (auto& [id, e] : a.entries) std::fill(e.a.f32().begin(), e.a.f32().end(), 0.0f);
  const auto data = GenerateDataset(b, 3, 8);
  for (size_t i = 0; i < data.size(); ++i) {
    EXPECT_TRUE(ExactlyEqual(ExecuteFp(b, data[i].x, data[i].cond, &a, i), ExecuteFp(b, data[i].x, data[i].cond, nullptr, i)));
  }
}

TEST(ExecuteFp, ToyAdapterMatchesMergedWeights) {
  const ModelBundle b = test::FixtureBundle("toy2.model");
  const LoRAAdapter a = test::FixtureAdapter("a.adapter", b);
  const ModelBundle merged = AttachLoraStatic(b, a);
  const auto data = GenerateDataset(b, 4, 6);
  for (size_t i = 0; i < data.size(); ++i) {
    const Tensor y_in = ExecuteFp(b, data[i].x, data[i].cond, &a, 100 + i);
    const Tensor y_merged = ExecuteFp(merged, data[i].x, data[i].cond, nullptr, 100 + i);
    EXPECT_LE(MaxRelativeError(y_in, y_merged), 1e-5);
  }
}

TEST(ExecuteFp, RuntimeAdapterMatchesMergedOnSeededCases) {
  for (uint64_t s = 0; s < 100; ++s) {
    const test::RandomCase c = test::MakeRandomCase(s);
    const Tensor y_in = ExecuteFp(c.bundle, c.x, c.cond, &c.adapter, c.noise_seed);
    const Tensor y_merged = ExecuteFp(AttachLoraStatic(c.bundle, c.adapter), c.x, c.cond, nullptr, c.noise_seed);
    ASSERT_LE(MaxRelativeError(y_in, y_merged), 1e-5) << "seed " << s;
  }
}

TEST(ExecuteFp, Deterministic) {
  const ModelBundle b = test::FixtureBundle("multistep.model");
  const LoRAAdapter a = test::FixtureAdapter("b.adapter", b);
  const auto data = GenerateDataset(b, 1, 2);
  EXPECT_EQ(ExecuteFp(b, data[0].x, data[0].cond, &a, 5), ExecuteFp(b, data[0].x, data[0].cond, &a, 5));
  EXPECT_FALSE(ExactlyEqual(ExecuteFp(b, data[0].x, data[0].cond, &a, 5), ExecuteFp(b, data[0].x, data[0].cond, &a, 6)));
}

TEST(ExecuteFp, AdapterShapeMismatchIsRejected) {
  const ModelBundle b = test::FixtureBundle("toy2.model");
  LoRAAdapter a = test::FixtureAdapter("a.adapter", b);
  a.entries.begin()->second.a = Tensor::Zeros({3, 2});
  const auto data = GenerateDataset(b, 1, 2);
  EXPECT_EQ(KindOf([&] { ExecuteFp(b, data[0].x, data[0].cond, &a, 0); }), ErrorKind::kShape);
}

TEST(ModelBundle, LoraOutsideBackboneIsRejected) {
  ModelBundle b = test::FixtureBundle("toy2.model");
  b.encoder = b.backbone;
  EXPECT_THROW(ValidateBundle(b), Error);
}

TEST(Adapter, RankAboveSlotRankIsRejected) {
  const ModelBundle b = test::FixtureBundle("toy2.model");
  AdapterSpec spec;
  spec.rank = 3;
  EXPECT_EQ(KindOf([&] { GenerateAdapter(b, spec, 1); }), ErrorKind::kShape);
}

}  // namespace
}  // namespace quad
