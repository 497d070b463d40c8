#include "quad/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <future>
#include <sstream>

namespace quad {

std::string TraceToCsv(const DistillTrace& trace) {
  std::ostringstream os;
  os << "step,recon,task,total\n";
  char buf[128];
  for (const DistillStep& s : trace) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g\n", s.step, s.recon, s.task, s.total);
    os << buf;
  }
  return os.str();
}

double ReconLoss(const Tensor& teacher, const Tensor& student) { return MeanSquaredError(teacher, student); }

SteValue FakeQuantSte(float value, const QuantParams& p) {
  const bool inside = value >= p.range_lo() && value <= p.range_hi();
  return {FakeQuantValue(value, p), inside ? 1.0f : 0.0f};
}

namespace {

constexpr Role kRoles[] = {Role::kEncoder, Role::kBackbone, Role::kDecoder};

const char* OutputName(Role role) { return role == Role::kDecoder ? "y" : "z"; }

float Gate(float v, const QuantParams& p, FakeQuantMode mode) {
  if (mode == FakeQuantMode::kQuantize) return FakeQuantValue(v, p);
  return std::clamp(v, p.range_lo(), p.range_hi());
}

Tensor GateTensor(const Tensor& t, const QuantParams& p, FakeQuantMode mode) {
  if (mode == FakeQuantMode::kQuantize) return FakeQuant(t, p);
  Tensor out = t;
  for (float& v : out.f32()) v = Gate(v, p, mode);
  return out;
}

// Frozen student state shared by every forward pass of one objective evaluation.
struct Student {
  const ModelBundle* bundle;
  const QuantProfile* profile;
  FakeQuantMode mode;
  std::map<Role, std::map<int, Tensor>> weights;
  std::map<int, LoraBinding> bindings;
};

struct StageTape {
  Role role = Role::kBackbone;
  std::map<int, Tensor> values;  // every tensor after its fake-quant gate
  std::map<int, Tensor> pre;     // gated tensors before the gate
};

Tensor RunStage(const Student& st, Role role, const TensorMap& in, StageTape* tape) {
  ExecHooks hooks;
  hooks.constant_override = &st.weights.at(role);
  if (role == Role::kBackbone) hooks.lora = &st.bindings;
  hooks.on_produced = [&](int tensor, Tensor& value) {
    const QuantParams* p = st.profile->act({role, tensor});
    if (!p) return;
    if (tape) tape->pre[tensor] = value;
    value = GateTensor(value, *p, st.mode);
  };
  if (tape) {
    tape->role = role;
    hooks.record = &tape->values;
  }
  return Execute(st.bundle->graph(role), in, hooks).at(OutputName(role));
}

// Plain row-major helpers; gradients accumulate in double.
Tensor MatMulTN(const Tensor& a, const Tensor& b) {  // a^T b
  const int64_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  Tensor out({m, n}, DType::kF32);
  auto av = a.f32(), bv = b.f32();
  auto ov = out.f32();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += static_cast<double>(av[p * m + i]) * bv[p * n + j];
      ov[i * n + j] = static_cast<float>(acc);
    }
  }
  return out;
}

Tensor MatMulNT(const Tensor& a, const Tensor& b) {  // a b^T
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor out({m, n}, DType::kF32);
  auto av = a.f32(), bv = b.f32();
  auto ov = out.f32();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += static_cast<double>(av[i * k + p]) * bv[j * k + p];
      ov[i * n + j] = static_cast<float>(acc);
    }
  }
  return out;
}

Tensor MatMulNN(const Tensor& a, const Tensor& b) {
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n}, DType::kF32);
  auto av = a.f32(), bv = b.f32();
  auto ov = out.f32();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += static_cast<double>(av[i * k + p]) * bv[p * n + j];
      ov[i * n + j] = static_cast<float>(acc);
    }
  }
  return out;
}

void Accumulate(std::map<int, Tensor>& grads, int tensor, const Tensor& g) {
  auto it = grads.find(tensor);
  if (it == grads.end()) {
    grads.emplace(tensor, g);
    return;
  }
  auto dst = it->second.f32();
  auto src = g.f32();
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

struct PaddedGrads {
  Tensor a;  // [d_out x r_max]
  Tensor b;  // [r_max x d_in]
};

void AccumulateInto(Tensor& dst, const Tensor& src) {
  auto d = dst.f32();
  auto s = src.f32();
  for (size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Reverse pass over one recorded stage. Returns the gradient of each data input
// with respect to its raw (pre-gate) value.
std::map<std::string, Tensor> Backward(const Student& st, const StageTape& tape, const Tensor& dout,
                                       std::map<int, PaddedGrads>& lora_grads) {
  const Graph& g = st.bundle->graph(tape.role);
  std::map<int, Tensor> grads;
  grads.emplace(g.output_tensor(OutputName(tape.role)), dout);
  std::map<std::string, Tensor> input_grads;
  const auto order = TopoSort(g);
  auto value = [&](int tensor) -> const Tensor& { return tape.values.at(tensor); };
  auto is_const = [&](int tensor) { return g.constants.count(tensor) > 0; };

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node& n = *g.find_node(*it);
    auto git = grads.find(n.output);
    if (git == grads.end()) continue;
    Tensor dy = std::move(git->second);
    grads.erase(git);
    if (n.kind != NodeKind::kOutput) {
      if (const QuantParams* p = st.profile->act({tape.role, n.output})) {
        auto pre = tape.pre.at(n.output).f32();
        auto d = dy.f32();
        const float lo = p->range_lo(), hi = p->range_hi();
        for (size_t i = 0; i < d.size(); ++i) {
          if (!(pre[i] >= lo && pre[i] <= hi)) d[i] = 0.0f;
        }
      }
    }
    switch (n.kind) {
      case NodeKind::kOutput: Accumulate(grads, n.inputs[0], dy); break;
      case NodeKind::kInput: input_grads[n.attrs.name] = std::move(dy); break;
      case NodeKind::kConstant: break;
      case NodeKind::kMatMul: {
        const Tensor& a = value(n.inputs[0]);
        const Tensor& b = value(n.inputs[1]);
        if (!is_const(n.inputs[0])) Accumulate(grads, n.inputs[0], MatMulNT(dy, b));
        if (!is_const(n.inputs[1])) Accumulate(grads, n.inputs[1], MatMulTN(a, dy));
        break;
      }
      case NodeKind::kLoraMatMul: {
        const Tensor& w = value(n.inputs[0]);
        const Tensor& x = value(n.inputs[1]);
        Tensor dx = MatMulTN(w, dy);
        auto bit = st.bindings.find(n.id);
        if (bit != st.bindings.end()) {
          const LoraBinding& bind = bit->second;
          const Tensor bx = MatMulNN(bind.b, x);
          const Tensor at_dy = Scale(MatMulTN(bind.a, dy), bind.alpha);  // alpha A^T dy
          AccumulateInto(dx, MatMulTN(bind.b, at_dy));
          const Tensor da = Scale(MatMulNT(dy, bx), bind.alpha);
          const Tensor db = MatMulNT(at_dy, x);
          auto [lg, fresh] = lora_grads.try_emplace(n.id, PaddedGrads{da, db});
          if (!fresh) {
            AccumulateInto(lg->second.a, da);
            AccumulateInto(lg->second.b, db);
          }
        }
        if (!is_const(n.inputs[1])) Accumulate(grads, n.inputs[1], dx);
        break;
      }
      case NodeKind::kAdd:
        for (int in : n.inputs) {
          if (!is_const(in)) Accumulate(grads, in, dy);
        }
        break;
      case NodeKind::kMul: {
        for (int side = 0; side < 2; ++side) {
          const int in = n.inputs[side];
          if (is_const(in)) continue;
          Tensor d = dy;
          auto other = value(n.inputs[1 - side]).f32();
          auto dv = d.f32();
          for (size_t i = 0; i < dv.size(); ++i) dv[i] *= other[i];
          Accumulate(grads, in, d);
        }
        break;
      }
      case NodeKind::kActivation: {
        auto x = value(n.inputs[0]).f32();
        auto d = dy.f32();
        for (size_t i = 0; i < d.size(); ++i) {
          if (n.attrs.activation == ActivationKind::kRelu) {
            if (!(x[i] > 0.0f)) d[i] = 0.0f;
          } else {
            const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(x[i])));
            d[i] = static_cast<float>(d[i] * s * (1.0 + x[i] * (1.0 - s)));
          }
        }
        Accumulate(grads, n.inputs[0], dy);
        break;
      }
      case NodeKind::kConcat: {
        const Tensor& a = value(n.inputs[0]);
        const size_t split = static_cast<size_t>(a.numel());
        auto d = dy.f32();
        Tensor ga(a.shape(), DType::kF32);
        Tensor gb(value(n.inputs[1]).shape(), DType::kF32);
        std::copy(d.begin(), d.begin() + split, ga.f32().begin());
        std::copy(d.begin() + split, d.end(), gb.f32().begin());
        if (!is_const(n.inputs[0])) Accumulate(grads, n.inputs[0], ga);
        if (!is_const(n.inputs[1])) Accumulate(grads, n.inputs[1], gb);
        break;
      }
      case NodeKind::kScale: {
        const float alpha = value(n.inputs[1]).f32()[0];
        if (!is_const(n.inputs[0])) Accumulate(grads, n.inputs[0], Scale(dy, alpha));
        break;
      }
      case NodeKind::kConv2d: {
        const Tensor& x = value(n.inputs[0]);
        const Tensor& w = value(n.inputs[1]);
        const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const int64_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
        const int64_t OH = dy.dim(2), OW = dy.dim(3);
        const int stride = n.attrs.stride, pad = n.attrs.padding;
        Tensor dx(x.shape(), DType::kF32);
        auto dxv = dx.f32();
        auto wv = w.f32();
        auto dv = dy.f32();
        for (int64_t b = 0; b < N; ++b)
          for (int64_t o = 0; o < O; ++o)
            for (int64_t oy = 0; oy < OH; ++oy)
              for (int64_t ox = 0; ox < OW; ++ox) {
                const float go = dv[((b * O + o) * OH + oy) * OW + ox];
                for (int64_t c = 0; c < C; ++c)
                  for (int64_t ky = 0; ky < KH; ++ky) {
                    const int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (int64_t kx = 0; kx < KW; ++kx) {
                      const int64_t ix = ox * stride - pad + kx;
                      if (ix < 0 || ix >= W) continue;
                      dxv[((b * C + c) * H + iy) * W + ix] += wv[((o * C + c) * KH + ky) * KW + kx] * go;
                    }
                  }
              }
        if (!is_const(n.inputs[0])) Accumulate(grads, n.inputs[0], dx);
        break;
      }
      default:
        throw Error(ErrorKind::kParameter, std::string("no gradient rule for ") + NodeKindName(n.kind));
    }
  }
  return input_grads;
}

Student MakeStudent(const ModelBundle& bundle, const LoRAAdapter& adapter, const QuantProfile& shared,
                    FakeQuantMode mode) {
  Student st{&bundle, &shared, mode, {}, {}};
  for (Role r : kRoles) st.weights[r] = FakeQuantConstants(bundle.graph(r), r, shared);
  st.bindings = MakeBindings(bundle.backbone, adapter, [&](int slot, const Tensor& factor) {
    return GateTensor(factor, *shared.weight({Role::kBackbone, slot}), mode);
  });
  return st;
}

void CheckConfig(const DistillConfig& cfg) {
  if (cfg.steps < 1) throw Error(ErrorKind::kParameter, "distillation steps must be >= 1");
  if (cfg.batch < 1) throw Error(ErrorKind::kParameter, "distillation batch must be >= 1");
  if (!(cfg.learning_rate >= 0.0) || !std::isfinite(cfg.learning_rate)) {
    throw Error(ErrorKind::kParameter, "learning rate must be finite and >= 0");
  }
  if (!(cfg.lambda_task >= 0.0) || !std::isfinite(cfg.lambda_task)) {
    throw Error(ErrorKind::kParameter, "lambda_task must be finite and >= 0");
  }
}

}  // namespace

std::vector<Tensor> TeacherOutputs(const ModelBundle& bundle, const LoRAAdapter& adapter,
                                   std::span<const CalibrationSample> data, uint64_t seed) {
  std::vector<Tensor> out;
  out.reserve(data.size());
  for (size_t i = 0; i < data.size(); ++i) {
    out.push_back(ExecuteFp(bundle, data[i].x, data[i].cond, &adapter, SampleSeed(seed, i)));
  }
  return out;
}

LossAndGrads DistillLossAndGrads(const ModelBundle& bundle, const LoRAAdapter& adapter,
                                 const QuantProfile& shared, std::span<const CalibrationSample> data,
                                 std::span<const Tensor> teacher, std::span<const size_t> samples,
                                 double lambda_task, uint64_t seed, FakeQuantMode mode) {
  if (samples.empty()) throw Error(ErrorKind::kParameter, "distillation batch is empty");
  if (teacher.size() != data.size()) throw Error(ErrorKind::kParameter, "one teacher output per sample");
  const Student st = MakeStudent(bundle, adapter, shared, mode);
  const double inv_batch = 1.0 / static_cast<double>(samples.size());

  LossAndGrads out;
  std::map<int, PaddedGrads> padded;
  for (size_t idx : samples) {
    const CalibrationSample& s = data[idx];
    Tensor z = RunStage(st, Role::kEncoder, {{"x", s.x}}, nullptr);
    const Tensor noise = MakeNoise(z.shape(), SampleSeed(seed, idx), bundle.noise_std);
    Tensor noisy(z.shape(), DType::kF32);
    kernels::Add(z.view(), noise.view(), noisy.mutable_view());
    z = std::move(noisy);
    std::vector<StageTape> steps(static_cast<size_t>(bundle.steps));
    for (StageTape& tape : steps) z = RunStage(st, Role::kBackbone, {{"z", z}, {"cond", s.cond}}, &tape);
    StageTape dec;
    const Tensor y = RunStage(st, Role::kDecoder, {{"z", z}}, &dec);

    const Tensor& t = teacher[idx];
    const double recon = ReconLoss(t, y);
    double task = 0.0;
    if (s.target) task = MeanSquaredError(y, *s.target);
    out.recon += recon * inv_batch;
    out.task += task * inv_batch;

    const double scale = 2.0 / static_cast<double>(y.numel()) * inv_batch;
    Tensor dy(y.shape(), DType::kF32);
    auto yv = y.f32();
    auto tv = t.f32();
    auto dv = dy.f32();
    for (size_t i = 0; i < dv.size(); ++i) {
      double d = scale * (static_cast<double>(yv[i]) - tv[i]);
      if (s.target) d += lambda_task * scale * (static_cast<double>(yv[i]) - s.target->f32()[i]);
      dv[i] = static_cast<float>(d);
    }
    Tensor dz = Backward(st, dec, dy, padded).at("z");
    for (auto it = steps.rbegin(); it != steps.rend(); ++it) dz = Backward(st, *it, dz, padded).at("z");
  }
  out.total = out.recon + lambda_task * out.task;

  // Strip the rank padding and gate by the straight-through range of each factor.
  for (const auto& [node_id, entry] : adapter.entries) {
    const Node& n = *bundle.backbone.find_node(node_id);
    const int r = entry.rank(), r_max = n.attrs.rank;
    FactorGrads fg{Tensor::Zeros(entry.a.shape()), Tensor::Zeros(entry.b.shape())};
    auto pit = padded.find(node_id);
    if (pit != padded.end()) {
      const QuantParams& pa = *shared.weight({Role::kBackbone, n.attrs.a_slot});
      const QuantParams& pb = *shared.weight({Role::kBackbone, n.attrs.b_slot});
      const int64_t d_out = entry.a.dim(0), d_in = entry.b.dim(1);
      for (int64_t i = 0; i < d_out; ++i) {
        for (int k = 0; k < r; ++k) {
          const float ste = FakeQuantSte(entry.a.f32()[i * r + k], pa).grad;
          fg.a.f32()[i * r + k] = pit->second.a.f32()[i * r_max + k] * ste;
        }
      }
      for (int64_t i = 0; i < r * d_in; ++i) {
        fg.b.f32()[i] = pit->second.b.f32()[i] * FakeQuantSte(entry.b.f32()[i], pb).grad;
      }
    }
    out.grads.emplace(node_id, std::move(fg));
  }
  return out;
}

DistillResult QuadFinetune(const ModelBundle& bundle, const LoRAAdapter& adapter, const QuantProfile& shared,
                           std::span<const CalibrationSample> data, const DistillConfig& cfg) {
  CheckConfig(cfg);
  if (data.empty()) throw Error(ErrorKind::kParameter, "distillation needs at least one sample");
  CheckCoverage(bundle, shared);
  ValidateAdapter(bundle.backbone, adapter);
  const std::vector<Tensor> teacher = TeacherOutputs(bundle, adapter, data, cfg.seed);

  DistillResult result{adapter, {}};
  result.trace.reserve(static_cast<size_t>(cfg.steps));
  const size_t batch = std::min(static_cast<size_t>(cfg.batch), data.size());
  std::vector<size_t> samples(batch);
  for (int step = 0; step < cfg.steps; ++step) {
    // Deterministic cyclic batches.
    for (size_t j = 0; j < batch; ++j) samples[j] = (static_cast<size_t>(step) * batch + j) % data.size();
    const LossAndGrads lg = DistillLossAndGrads(bundle, result.adapter, shared, data, teacher, samples,
                                                cfg.lambda_task, cfg.seed, FakeQuantMode::kQuantize);
    if (!std::isfinite(lg.total) || !std::isfinite(lg.recon) || !std::isfinite(lg.task)) {
      throw Error(ErrorKind::kDivergence, "distillation of '" + adapter.id + "' diverged at step " +
                                              std::to_string(step));
    }
    result.trace.push_back({step, lg.recon, lg.task, lg.total});
    const float lr = static_cast<float>(cfg.learning_rate);
    for (auto& [node_id, entry] : result.adapter.entries) {
      const FactorGrads& g = lg.grads.at(node_id);
      auto a = entry.a.f32();
      auto b = entry.b.f32();
      for (size_t i = 0; i < a.size(); ++i) a[i] -= lr * g.a.f32()[i];
      for (size_t i = 0; i < b.size(); ++i) b[i] -= lr * g.b.f32()[i];
      for (float v : a) {
        if (!std::isfinite(v)) {
          throw Error(ErrorKind::kDivergence, "distillation of '" + adapter.id + "' diverged at step " +
                                                  std::to_string(step));
        }
      }
      for (float v : b) {
        if (!std::isfinite(v)) {
          throw Error(ErrorKind::kDivergence, "distillation of '" + adapter.id + "' diverged at step " +
                                                  std::to_string(step));
        }
      }
    }
  }
  return result;
}

std::vector<LoRAAdapter> QuadAlignAll(const ModelBundle& bundle, std::span<const LoRAAdapter> adapters,
                                      const QuantProfile& shared,
                                      std::span<const std::vector<CalibrationSample>> datasets,
                                      const DistillConfig& cfg, const std::optional<std::string>& skip_id) {
  if (datasets.size() != adapters.size() && datasets.size() != 1) {
    throw Error(ErrorKind::kParameter, "need one dataset per adapter or a single shared dataset");
  }
  CheckConfig(cfg);
  std::vector<std::future<LoRAAdapter>> jobs;
  for (size_t i = 0; i < adapters.size(); ++i) {
    const LoRAAdapter& a = adapters[i];
    const auto& data = datasets.size() == 1 ? datasets[0] : datasets[i];
    if (skip_id && a.id == *skip_id) {
      std::promise<LoRAAdapter> done;
      done.set_value(a);
      jobs.push_back(done.get_future());
      continue;
    }
    jobs.push_back(std::async(std::launch::async, [&bundle, &a, &shared, &data, cfg] {
      return QuadFinetune(bundle, a, shared, data, cfg).adapter;
    }));
  }
  std::vector<LoRAAdapter> out;
  out.reserve(jobs.size());
  for (auto& j : jobs) out.push_back(j.get());
  return out;
}

}  // namespace quad
