// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "quad/compile.hpp"
#include "quad/distill.hpp"
#include "quad/exec.hpp"
#include "quad/model_spec.hpp"
#include "quad/quant.hpp"
#include "quad/runtime.hpp"
#include "quad/sensitivity.hpp"

namespace quad {
namespace {

using Clock = std::chrono::steady_clock;

// Criterion body: returns an empty string on success, else the reason.
using Check = std::function<std::string(std::ostringstream& detail)>;

struct Criterion {
  int id;
  const char* name;
  double budget_s;  // 0 means no runtime bound
  Check check;
};

std::string Fail(const std::ostringstream& why) { return why.str().empty() ? "failed" : why.str(); }

const std::vector<const char*> kModels{"toy2.model", "multistep.model", "sens.model", "large.model"};

std::pair<std::string, std::string> AdapterFiles(const std::string& model) {
  if (model == "sens.model") return {"sens_a.adapter", "sens_fragile.adapter"};
  if (model == "large.model") return {"large_a.adapter", "large_b.adapter"};
  return {"a.adapter", "b.adapter"};
}

TensorMap RandomInputs(const Graph& g, Rng& rng, TensorMap in = {}) {
  const auto types = InferTypes(g);
  for (const NamedTensor& t : g.inputs) {
    if (!in.count(t.name)) in[t.name] = RandomNormal(types.at(t.tensor).shape, rng, 1.0f);
  }
  return in;
}

TensorMap SlotInputs(const Graph& backbone, const LoRAAdapter& adapter, std::span<const SlotDescriptor> slots) {
  const auto bindings = MakeBindings(backbone, adapter);
  TensorMap in;
  for (const SlotDescriptor& d : slots) {
    auto it = bindings.find(d.target_node_id);
    in[SlotInputName(d.slot_id, 'A')] = it == bindings.end() ? Tensor::Zeros(d.a_shape) : it->second.a;
    in[SlotInputName(d.slot_id, 'B')] = it == bindings.end() ? Tensor::Zeros(d.b_shape) : it->second.b;
    in[SlotInputName(d.slot_id, 'a')] = Tensor::Scalar(it == bindings.end() ? 0.0f : it->second.alpha);
  }
  return in;
}

std::string QuantRoundTrip(std::ostringstream& why) {
  // Unit-scale data: the fp32 result of dequantize then stays within 1e-7 of the grid value.
  Rng rng(20240601);
  const Tensor calib = RandomUniform({1000}, rng, -1.0f, 1.0f);
  float lo = calib.f32()[0], hi = lo;
  for (float v : calib.f32()) lo = std::min(lo, v), hi = std::max(hi, v);
  const QuantParams p = ComputeQuantParams(lo, hi, 8, true);
  const Tensor t = RandomUniform({100000}, rng, lo, hi);
  const Tensor back = Dequantize(Quantize(t, p), p);
  const double bound = p.scale / 2.0 + 1e-7;
  double worst = 0.0;
  for (int64_t i = 0; i < t.numel(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(back.f32()[i]) - t.f32()[i]));
  }
  why << "max |err| " << worst << " bound " << bound;
  return worst <= bound ? "" : Fail(why);
}

std::string LoraEquivalence(std::ostringstream& why) {
  double worst = 0.0;
  for (uint64_t seed = 1; seed <= 100; ++seed) {
    const test::RandomCase c = test::MakeRandomCase(seed);
    const auto data = GenerateDataset(c.bundle, 1, seed);
    const QuantProfile p = Calibrate(c.bundle, data, {}, &c.adapter);
    const RewriteResult r = RewriteLoraAsInput(c.bundle.backbone, p);
    const Graph merged = AttachLoraStatic(c.bundle.backbone, c.adapter);
    Rng rng(seed);
    const TensorMap plain = RandomInputs(c.bundle.backbone, rng, {{"cond", c.cond}});
    TensorMap in = SlotInputs(c.bundle.backbone, c.adapter, r.slots);
    in.insert(plain.begin(), plain.end());
    const double e = MaxRelativeError(Execute(r.graph, in).at("z"), Execute(merged, plain).at("z"));
    worst = std::max(worst, e);
  }
  why << "100 triples, max rel err " << worst;
  return worst <= 1e-5 ? "" : Fail(why);
}

std::string PassCorrectness(std::ostringstream& why) {
  int checked = 0;
  for (const char* model : kModels) {
    const ModelBundle b = test::FixtureBundle(model);
    const LoRAAdapter a = test::FixtureAdapter(AdapterFiles(model).first, b);
    const auto data = GenerateDataset(b, 4, 1);
    const QuantProfile prof = Calibrate(b, data, {Policy::W8A16(), 8, 1}, &a);
    Rng rng(7);
    for (Role role : {Role::kEncoder, Role::kBackbone, Role::kDecoder}) {
      // FP: the merged graph carries constant chains worth folding.
      const Graph fp = role == Role::kBackbone ? AttachLoraStatic(b.backbone, a) : b.graph(role);
      const Graph folded = DeadCodeEliminate(ConstantFold(fp));
      // Quantsim: the deployed form with LoRA factors as inputs.
      Graph g = b.graph(role);
      std::vector<SlotDescriptor> slots;
      if (role == Role::kBackbone) {
        RewriteResult r = RewriteLoraAsInput(g, prof);
        g = std::move(r.graph);
        slots = std::move(r.slots);
      }
      const Graph pre = DeadCodeEliminate(ConstantFold(MaterializeQuantsim(g, role, prof)));
      const Graph post = ScaleFold(pre);
      for (int i = 0; i < 100; ++i, ++checked) {
        const TensorMap in = RandomInputs(fp, rng);
        if (Execute(folded, in) != Execute(fp, in)) {
          why << model << " role " << RoleLetter(role) << " fold/DCE input " << i;
          return Fail(why);
        }
        const TensorMap qin = RandomInputs(g, rng, SlotInputs(b.backbone, a, slots));
        if (Execute(post, qin) != Execute(pre, qin)) {
          why << model << " role " << RoleLetter(role) << " scale fold input " << i;
          return Fail(why);
        }
      }
    }
  }
  why << checked << " inputs bit-exact across " << kModels.size() << " fixtures";
  return "";
}

std::string AnchorSelection(std::ostringstream& why) {
  const ModelBundle b = test::FixtureBundle("sens.model");
  const auto data = GenerateDataset(b, 4, 1);
  const CalibrationOptions opts{Policy::W8A16(), 8, 1};
  std::vector<LoRAAdapter> three;
  for (const char* f : {"sens_a.adapter", "sens_b.adapter", "sens_fragile.adapter"}) {
    three.push_back(test::FixtureAdapter(f, b));
  }
  const SharedProfile fragile = BuildSharedProfile(b, three, data, opts, 0.05);
  const auto& s = fragile.report.scores;
  why << "qss a " << s.at("a") << " b " << s.at("b") << " fragile " << s.at("fragile") << ", anchor "
      << (fragile.report.anchor.unified ? "unified" : fragile.report.anchor.adapter_id);
  if (!(s.at("fragile") > s.at("a") && s.at("fragile") > s.at("b"))) return Fail(why);
  if (fragile.report.anchor != AnchorChoice{false, "fragile"}) return Fail(why);

  // Symmetric fixture: one adapter and an exact power-of-two gauge copy of it.
  const std::vector<LoRAAdapter> pair{test::GaugeScaled(three[0], "p", 1.0f), test::GaugeScaled(three[0], "q", 4.0f)};
  const SharedProfile sym = BuildSharedProfile(b, pair, data, opts, 0.05);
  why << "; symmetric qss " << sym.report.scores.at("p") << " / " << sym.report.scores.at("q") << ", anchor "
      << (sym.report.anchor.unified ? "unified" : sym.report.anchor.adapter_id);
  return sym.report.anchor.unified ? "" : Fail(why);
}

std::string DistillEfficacy(std::ostringstream& why) {
  const ModelBundle b = test::FixtureBundle("toy2.model");
  const LoRAAdapter anchor = test::FixtureAdapter("a.adapter", b);
  const LoRAAdapter student = test::FixtureAdapter("b.adapter", b);
  const auto data = GenerateDataset(b, 8, 2);
  const QuantProfile shared = Calibrate(b, data, {Policy::W8A8(), 8, 3}, &anchor);

  DistillConfig cfg;
  cfg.steps = 200;
  cfg.learning_rate = 1e-2;
  cfg.batch = 4;
  cfg.seed = 3;
  const DistillResult r = QuadFinetune(b, student, shared, data, cfg);
  const double first = r.trace.front().recon, last = r.trace.back().recon;
  why << "recon " << first << " -> " << last << " (" << last / first << ")";
  if (r.trace.size() != 200 || !(first > 0.0) || last > 0.5 * first) return Fail(why);

  const std::vector<Tensor> teacher = TeacherOutputs(b, student, data, 3);
  const std::vector<size_t> idx{0, 1, 2, 3};
  auto loss = [&](const LoRAAdapter& a) {
    return DistillLossAndGrads(b, a, shared, data, teacher, idx, cfg.lambda_task, 3, FakeQuantMode::kSurrogate);
  };
  const LossAndGrads g = loss(student);
  const float h = 1e-3f;
  double num = 0.0, den = 0.0;
  for (const auto& [node, e] : student.entries) {
    for (int which = 0; which < 2; ++which) {
      const Tensor& analytic = which ? g.grads.at(node).b : g.grads.at(node).a;
      for (int64_t i = 0; i < analytic.numel(); ++i) {
        LoRAAdapter plus = student, minus = student;
        (which ? plus.entries.at(node).b : plus.entries.at(node).a).f32()[i] += h;
        (which ? minus.entries.at(node).b : minus.entries.at(node).a).f32()[i] -= h;
        const double fd = (loss(plus).total - loss(minus).total) / (2.0 * h);
        num += (fd - analytic.f32()[i]) * (fd - analytic.f32()[i]);
        den += fd * fd;
      }
    }
  }
  const double rel = std::sqrt(num / den);
  why << ", gradient rel err " << rel;
  return rel <= 1e-2 ? "" : Fail(why);
}

std::string MemoryRatio(std::ostringstream& why) {
  const std::vector<double> ten(10, 120.0), two{119.0, 119.0};
  const RomAccounting shipped = AccountRom(1400.0, ten);
  const RomAccounting table = AccountRom(1375.0, two);
  why << "shared " << shipped.shared_total_bytes << " ratio " << shipped.memory_ratio << "; table ratio "
      << table.memory_ratio;
  const bool ok = shipped.shared_total_bytes == 2600.0 && shipped.memory_ratio >= 5.8 &&
                  std::abs(table.memory_ratio - 1.85) <= 0.01;
  return ok ? "" : Fail(why);
}

std::string RuntimeEquivalence(std::ostringstream& why) {
  int runs = 0;
  for (const char* model : kModels) {
    const ModelBundle b = test::FixtureBundle(model);
    const auto [fa, fb] = AdapterFiles(model);
    const std::vector<LoRAAdapter> adapters{test::FixtureAdapter(fa, b), test::FixtureAdapter(fb, b)};
    const auto data = GenerateDataset(b, 3, 1);
    for (Policy policy : {Policy::W8A16(), Policy::W8A8(), Policy::Mixed(20)}) {
      const QuantProfile prof = Calibrate(b, data, {policy, 8, 1}, &adapters[0]);
      const CompiledModel m = Compile(b, prof, {"acceptance", 1});
      Session s = Session::Load(Freeze(m));
      for (const LoRAAdapter& a : adapters) {
        s.BindLora(EncodePack(PackLora(a, m.slots)));
        for (size_t i = 0; i < data.size(); ++i, ++runs) {
          const uint64_t seed = SampleSeed(9, i);
          if (s.Infer(data[i].x, data[i].cond, seed) !=
              ExecuteQuantsim(b, prof, &a, data[i].x, data[i].cond, seed)) {
            why << model << " " << PolicyString(policy) << " adapter " << a.id << " sample " << i;
            return Fail(why);
          }
        }
      }
    }
  }
  why << runs << " inferences bit-identical";
  return "";
}

std::string SwapVersusReload(std::ostringstream& why) {
  const ModelBundle b = test::FixtureBundle("large.model");
  const LoRAAdapter a = test::FixtureAdapter("large_a.adapter", b), c = test::FixtureAdapter("large_b.adapter", b);
  const auto data = GenerateDataset(b, 3, 1);
  const QuantProfile prof = Calibrate(b, data, {Policy::W8A16(), 8, 1}, &a);
  const CompiledModel m = Compile(b, prof, {"acceptance", 1});
  const auto model = Freeze(m);
  const SwapTiming t = SwapBenchmark(model, EncodePack(PackLora(a, m.slots)), EncodePack(PackLora(c, m.slots)), 11);
  why << "median bind " << t.swap_ms << " ms, reload " << t.reload_ms << " ms over " << t.reps << " reps";
  return t.reps >= 11 && t.swap_ms < t.reload_ms ? "" : Fail(why);
}

std::string MemoryPlanning(std::ostringstream& why) {
  for (uint64_t seed = 1; seed <= 1000; ++seed) {
    const MemoryPlan plan = PlanLifetimes(TensorLifetimes(test::RandomDag(seed, 3 + static_cast<int>(seed % 20))));
    if (FindOverlap(plan)) {
      why << "overlap on DAG " << seed;
      return Fail(why);
    }
  }
  int small = 0;
  double worst = 0.0;
  for (uint64_t seed = 1; seed <= 2000; ++seed) {
    const auto lt = TensorLifetimes(test::RandomDag(seed, 1 + static_cast<int>(seed % 5)));
    if (lt.size() > 6) continue;
    ++small;
    worst = std::max(worst, static_cast<double>(PlanLifetimes(lt).arena_size) /
                                static_cast<double>(OptimalArenaSize(lt)));
  }
  why << "1000 DAGs overlap-free; " << small << " graphs with <= 6 tensors, worst greedy/optimum " << worst;
  return small > 0 && worst <= 1.5 ? "" : Fail(why);
}

std::string SerializationDeterminism(std::ostringstream& why) {
  for (const char* model : kModels) {
    auto build = [&] {
      const ModelBundle b = test::FixtureBundle(model, 5);
      const LoRAAdapter a = test::FixtureAdapter(AdapterFiles(model).second, b, 5);
      const auto data = GenerateDataset(b, 3, 5);
      const QuantProfile prof = Calibrate(b, data, {Policy::W8A16(), 8, 5}, &a);
      const CompiledModel m = Compile(b, prof, {"acceptance", 5});
      const LoraPack pack = PackLora(a, m.slots);
      return std::make_tuple(m, Freeze(m), pack, EncodePack(pack));
    };
    const auto [m1, model1, pack1, packbytes1] = build();
    const auto [m2, model2, pack2, packbytes2] = build();
    if (model1 != model2 || packbytes1 != packbytes2) {
      why << model << ": bytes differ between runs";
      return Fail(why);
    }
    if (!(LoadModel(model1) == m1) || !(DecodePack(packbytes1) == pack1) ||
        !(UnpackAdapter(DecodePack(packbytes1)) == UnpackAdapter(pack1))) {
      why << model << ": round trip not structurally equal";
      return Fail(why);
    }
  }
  why << kModels.size() << " fixtures byte-identical and round-trip equal";
  return "";
}

int RunAll() {
  const std::vector<Criterion> criteria{
      {1, "quantization round-trip", 1.0, QuantRoundTrip},
      {2, "merged-vs-input LoRA equivalence", 10.0, LoraEquivalence},
      {3, "pass correctness", 30.0, PassCorrectness},
      {4, "anchor selection", 0.0, AnchorSelection},
      {5, "QUAD distillation efficacy", 60.0, DistillEfficacy},
      {6, "memory-ratio reproduction", 1.0, MemoryRatio},
      {7, "runtime/compiler equivalence", 10.0, RuntimeEquivalence},
      {8, "swap-vs-reload", 0.0, SwapVersusReload},
      {9, "memory-plan validity and quality", 0.0, MemoryPlanning},
      {10, "serialization determinism", 0.0, SerializationDeterminism},
  };
  int failures = 0;
  for (const Criterion& c : criteria) {
    std::ostringstream detail;
    std::string error;
    const auto start = Clock::now();
    try {
      error = c.check(detail);
    } catch (const std::exception& e) {
      error = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(Clock::now() - start).count();
    if (error.empty() && c.budget_s > 0.0 && secs >= c.budget_s) {
      error = detail.str() + "; runtime over budget";
    }
    const bool pass = error.empty();
    failures += !pass;
    std::printf("%s criterion %d (%s) [%.3f s]: %s\n", pass ? "PASS" : "FAIL", c.id, c.name, secs,
                pass ? detail.str().c_str() : error.c_str());
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}

}  // namespace
}  // namespace quad

int main() { return quad::RunAll(); }
