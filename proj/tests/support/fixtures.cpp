#include "fixtures.hpp"

#include <algorithm>
#include <sstream>
#include <unistd.h>

namespace quad::test {

std::filesystem::path FixturePath(const std::string& name) { return std::filesystem::path(QUAD_FIXTURE_DIR) / name; }

ModelBundle FixtureBundle(const std::string& model_file, uint64_t seed) {
  return BuildBundle(ParseModelSpec(ReadText(FixturePath(model_file))), seed);
}

LoRAAdapter FixtureAdapter(const std::string& adapter_file, const ModelBundle& bundle, uint64_t seed) {
  return LoadAdapterFile(FixturePath(adapter_file), bundle, seed);
}

std::string RandomModelText(Rng& rng) {
  auto width = [&] { return 2 + rng.below(7); };
  const int64_t x = width(), z = width(), c = 1 + rng.below(3), y = width();
  std::ostringstream os;
  os << "steps " << 1 + rng.below(3) << "\nnoise 0.5\nbatch " << 1 + rng.below(4) << "\n";
  os << "encoder\ninput x " << x << "\nlinear " << z << "\n";
  if (rng.below(2)) os << "bias\n";
  os << "backbone\ninput z " << z << "\ninput cond " << c << "\nconcat cond\n";
  const int64_t loras = 1 + rng.below(3);
  int64_t cur = z + c;
  for (int64_t i = 0; i < loras; ++i) {
    const bool last = i + 1 == loras;
    const int64_t out = last ? z : width();
    if (!last && rng.below(3) == 0) {
      cur = width();
      os << "linear " << cur << "\n";
    }
    os << "lora_linear " << out << " rank=" << 1 + rng.below(std::min<int64_t>({3, out, cur})) << "\n";
    cur = out;
    if (rng.below(2)) os << "bias\n";
    if (!last || rng.below(2)) os << "act " << (rng.below(2) ? "relu" : "silu") << "\n";
  }
  os << "decoder\ninput z " << z << "\nlinear " << y << "\n";
  return os.str();
}

RandomCase MakeRandomCase(uint64_t seed) {
  Rng rng(MixSeed(seed, 0xCA5E));
  RandomCase c;
  c.bundle = BuildBundle(ParseModelSpec(RandomModelText(rng)), seed);
  AdapterSpec spec;
  spec.id = "rand";
  spec.rank = 1;
  spec.scale = static_cast<float>(rng.uniform(0.05, 0.5));
  spec.alpha = static_cast<float>(rng.uniform(0.5, 2.0));
  spec.seed = seed;
  // Rank within every slot's r_max: take the smallest slot rank.
  int r_max = 1 << 20;
  for (int id : LoraNodes(c.bundle.backbone)) r_max = std::min(r_max, c.bundle.backbone.find_node(id)->attrs.rank);
  spec.rank = 1 + static_cast<int>(rng.below(r_max));
  c.adapter = GenerateAdapter(c.bundle, spec, seed);
  auto data = GenerateDataset(c.bundle, 1, MixSeed(seed, 7));
  c.x = data[0].x;
  c.cond = data[0].cond;
  c.noise_seed = MixSeed(seed, 11);
  return c;
}

Graph RandomDag(uint64_t seed, int nodes) {
  Rng rng(seed);
  GraphBuilder b;
  struct Value {
    int tensor;
    int64_t rows;
  };
  const int64_t cols = 1 + rng.below(4);
  std::vector<Value> live{{b.Input("x", {1 + rng.below(8), cols}), 0}};
  live[0].rows = b.graph().nodes.back().attrs.shape[0];
  for (int i = 0; i < nodes; ++i) {
    const Value v = live[static_cast<size_t>(rng.below(static_cast<int64_t>(live.size())))];
    std::vector<Value> same;
    for (const Value& w : live) {
      if (w.rows == v.rows) same.push_back(w);
    }
    switch (rng.below(5)) {
      case 0: {
        const int64_t rows = 1 + rng.below(12);
        const int w = b.Constant(RandomNormal({rows, v.rows}, rng, 0.5f));
        live.push_back({b.MatMul(w, v.tensor), rows});
        break;
      }
      case 1:
        live.push_back({b.Add(v.tensor, same[static_cast<size_t>(rng.below(static_cast<int64_t>(same.size())))].tensor), v.rows});
        break;
      case 2:
        live.push_back({b.Mul(v.tensor, same[static_cast<size_t>(rng.below(static_cast<int64_t>(same.size())))].tensor), v.rows});
        break;
      case 3:
        live.push_back({b.Activation(v.tensor, rng.below(2) ? ActivationKind::kRelu : ActivationKind::kSilu), v.rows});
        break;
      default: {
        const Value w = live[static_cast<size_t>(rng.below(static_cast<int64_t>(live.size())))];
        live.push_back({b.Concat(v.tensor, w.tensor), v.rows + w.rows});
        break;
      }
    }
  }
  b.Output("y", live.back().tensor);
  if (live.size() > 2 && rng.below(2)) b.Output("aux", live[live.size() / 2].tensor);
  return b.Build();
}

LoRAAdapter GaugeScaled(const LoRAAdapter& base, const std::string& id, float gain) {
  LoRAAdapter out = base;
  out.id = id;
  for (auto& [node, e] : out.entries) {
    for (float& v : e.a.f32()) v *= gain;
    for (float& v : e.b.f32()) v /= gain;
  }
  return out;
}

Tensor RunCompiled(const CompiledModel& m, const LoraPack* pack, const Tensor& x, const Tensor& cond,
                   uint64_t noise_seed) {
  TensorMap slots;
  for (const SlotDescriptor& d : m.slots) {
    slots[SlotInputName(d.slot_id, 'A')] = Tensor::Zeros(d.a_shape);
    slots[SlotInputName(d.slot_id, 'B')] = Tensor::Zeros(d.b_shape);
    slots[SlotInputName(d.slot_id, 'a')] = Tensor::Scalar(0.0f);
  }
  if (pack) {
    for (const PackedSlot& s : pack->slots) {
      slots[SlotInputName(s.slot_id, 'A')] = Dequantize(s.a, s.qa);
      slots[SlotInputName(s.slot_id, 'B')] = Dequantize(s.b, s.qb);
      slots[SlotInputName(s.slot_id, 'a')] = Tensor::Scalar(s.alpha);
    }
  }
  ModelBundle shell;
  shell.steps = m.steps;
  shell.noise_std = m.noise_std;
  return RunBundle(shell, x, cond, noise_seed, [&](Role role, const TensorMap& in) {
    TensorMap all = in;
    if (role == Role::kBackbone) all.insert(slots.begin(), slots.end());
    return Execute(m.graph(role), all).at(role == Role::kDecoder ? "y" : "z");
  });
}

TempDir::TempDir(const std::string& tag) {
  path_ = std::filesystem::temp_directory_path() /
          ("quad_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(reinterpret_cast<uintptr_t>(this)));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

}  // namespace quad::test
