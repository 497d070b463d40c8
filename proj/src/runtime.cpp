#include "quad/runtime.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <set>
#include <sstream>

#include "byte_io.hpp"

namespace quad {

namespace {

size_t Align4(size_t n) { return (n + 3) & ~size_t{3}; }

bool LifetimesIntersect(int a_first, int a_last, int b_first, int b_last) {
  return a_first <= b_last && b_first <= a_last;
}

bool IsArenaTensor(const Node& n) {
  switch (n.kind) {
    case NodeKind::kConstant:
    case NodeKind::kOutput: return false;
    case NodeKind::kInput: return n.attrs.role == InputRole::kData;
    default: return true;
  }
}

using Clock = std::chrono::steady_clock;

double MsSince(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

struct Range {
  size_t offset;
  size_t end;
};

std::vector<Range> ConflictingRanges(const MemoryPlan& plan, const Lifetime& t) {
  std::vector<Range> out;
  for (const auto& [tid, p] : plan.tensors) {
    if (LifetimesIntersect(p.first, p.last, t.first, t.last)) out.push_back({p.offset, p.offset + p.size});
  }
  std::sort(out.begin(), out.end(), [](const Range& a, const Range& b) { return a.offset < b.offset; });
  return out;
}

// Lowest offset where `size` bytes fit between the given ranges.
size_t LowestFit(const std::vector<Range>& ranges, size_t size) {
  size_t candidate = 0;
  for (const Range& r : ranges) {
    if (candidate + size <= r.offset) return candidate;
    candidate = std::max(candidate, r.end);
  }
  return candidate;
}

}  // namespace

std::vector<Lifetime> TensorLifetimes(const Graph& g) {
  const auto order = TopoSort(g);
  const auto types = InferTypes(g);
  const int end = static_cast<int>(order.size());
  std::map<int, int> position;
  for (int i = 0; i < end; ++i) position[order[static_cast<size_t>(i)]] = i;

  std::map<int, Lifetime> live;
  for (int i = 0; i < end; ++i) {
    const Node& n = *g.find_node(order[static_cast<size_t>(i)]);
    if (!IsArenaTensor(n)) continue;
    const TensorType& t = types.at(n.output);
    const size_t bytes = Align4(static_cast<size_t>(NumElements(t.shape)) * DTypeSize(t.dtype));
    const int first = n.kind == NodeKind::kInput ? 0 : i;
    live[n.output] = Lifetime{n.output, bytes, first, first};
  }
  for (int i = 0; i < end; ++i) {
    const Node& n = *g.find_node(order[static_cast<size_t>(i)]);
    for (int t : n.inputs) {
      auto it = live.find(t);
      if (it == live.end()) continue;
      it->second.last = std::max(it->second.last, n.kind == NodeKind::kOutput ? end : i);
    }
  }
  std::vector<Lifetime> out;
  for (auto& [tid, l] : live) out.push_back(l);
  return out;
}

MemoryPlan PlanLifetimes(std::span<const Lifetime> lifetimes) {
  std::vector<Lifetime> sorted(lifetimes.begin(), lifetimes.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](const Lifetime& a, const Lifetime& b) {
    if (a.size != b.size) return a.size > b.size;
    if (a.first != b.first) return a.first < b.first;
    return a.tensor < b.tensor;
  });
  MemoryPlan plan;
  for (const Lifetime& t : sorted) {
    const auto ranges = ConflictingRanges(plan, t);
    // Best fit: the smallest gap that holds the tensor, else the top.
    size_t best = 0;
    size_t best_gap = SIZE_MAX;
    size_t cursor = 0;
    for (const Range& r : ranges) {
      if (r.offset > cursor) {
        const size_t gap = r.offset - cursor;
        if (gap >= t.size && gap < best_gap) {
          best = cursor;
          best_gap = gap;
        }
      }
      cursor = std::max(cursor, r.end);
    }
    if (best_gap == SIZE_MAX) best = cursor;
    plan.tensors[t.tensor] = Placement{best, t.size, t.first, t.last};
    plan.arena_size = std::max(plan.arena_size, best + t.size);
  }
  return plan;
}

MemoryPlan PlanMemory(const Graph& g) {
  const auto lifetimes = TensorLifetimes(g);
  return PlanLifetimes(lifetimes);
}

size_t OptimalArenaSize(std::span<const Lifetime> lifetimes) {
  if (lifetimes.size() > 9) throw Error(ErrorKind::kParameter, "brute-force planning is limited to 9 tensors");
  std::vector<size_t> perm(lifetimes.size());
  std::iota(perm.begin(), perm.end(), 0);
  size_t best = SIZE_MAX;
  do {
    MemoryPlan plan;
    for (size_t i : perm) {
      const Lifetime& t = lifetimes[i];
      const size_t offset = LowestFit(ConflictingRanges(plan, t), t.size);
      plan.tensors[t.tensor] = Placement{offset, t.size, t.first, t.last};
      plan.arena_size = std::max(plan.arena_size, offset + t.size);
      if (plan.arena_size >= best) break;
    }
    best = std::min(best, plan.arena_size);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return lifetimes.empty() ? 0 : best;
}

size_t PeakLiveBytes(std::span<const Lifetime> lifetimes) {
  size_t peak = 0;
  for (const Lifetime& probe : lifetimes) {
    // The maximum is attained at some tensor's first position.
    size_t live = 0;
    for (const Lifetime& t : lifetimes) {
      if (t.first <= probe.first && probe.first <= t.last) live += t.size;
    }
    peak = std::max(peak, live);
  }
  return peak;
}

std::optional<std::pair<int, int>> FindOverlap(const MemoryPlan& plan) {
  for (auto a = plan.tensors.begin(); a != plan.tensors.end(); ++a) {
    for (auto b = std::next(a); b != plan.tensors.end(); ++b) {
      const Placement& p = a->second;
      const Placement& q = b->second;
      if (p.size == 0 || q.size == 0) continue;
      if (!LifetimesIntersect(p.first, p.last, q.first, q.last)) continue;
      if (p.offset < q.offset + q.size && q.offset < p.offset + p.size) return std::make_pair(a->first, b->first);
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Session

Session Session::Load(std::span<const std::byte> model_bytes) {
  const auto start = Clock::now();
  Session s;
  s.model_ = LoadModel(model_bytes);
  size_t arena = 0;
  for (Role role : {Role::kEncoder, Role::kBackbone, Role::kDecoder}) {
    Stage& st = s.stages_[static_cast<size_t>(role)];
    st.graph = s.model_.graph(role);
    st.order = TopoSort(st.graph);
    st.types = InferTypes(st.graph);
    st.plan = PlanMemory(st.graph);
    for (const Node& n : st.graph.nodes) {
      if (n.kind != NodeKind::kOutput) continue;
      int target = n.inputs[0];
      while (st.alias.count(target)) target = st.alias.at(target);
      st.alias[n.output] = target;
    }
    arena = std::max(arena, st.plan.arena_size);
  }
  s.arena_.assign(arena / sizeof(uint32_t) + 1, 0u);
  s.init_ms_ = MsSince(start);
  return s;
}

size_t Session::slot_bytes() const {
  size_t n = 0;
  for (const auto& [tid, t] : slot_buffers_) n += t.nbytes();
  return n;
}

uint32_t Session::BaseChecksum() const {
  io::Writer w;
  for (const Stage& st : stages_) {
    for (const auto& [tid, t] : st.graph.constants) w.bytes(t.bytes());
  }
  return io::Crc32(w.buffer());
}

void Session::BindLora(std::span<const std::byte> pack_bytes) {
  const LoraPack pack = DecodePack(pack_bytes);
  std::map<int, Tensor> buffers;
  std::map<int, const SlotDescriptor*> by_slot;
  for (const SlotDescriptor& d : model_.slots) {
    buffers[d.a_tensor] = Tensor::Zeros(d.a_shape);
    buffers[d.b_tensor] = Tensor::Zeros(d.b_shape);
    buffers[d.alpha_tensor] = Tensor::Scalar(0.0f);
    by_slot[d.slot_id] = &d;
  }
  std::set<int> seen;
  for (const PackedSlot& s : pack.slots) {
    auto it = by_slot.find(s.slot_id);
    if (it == by_slot.end()) throw Error(ErrorKind::kBinding, "pack references unknown slot " + std::to_string(s.slot_id));
    if (!seen.insert(s.slot_id).second) throw Error(ErrorKind::kBinding, "pack binds slot twice");
    const SlotDescriptor& d = *it->second;
    const bool fits = s.target_node_id == d.target_node_id && s.r_max == d.r_max() && s.d_out == d.a_shape[0] &&
                      s.d_in == d.b_shape[1] && s.bits == d.bits && s.qa == d.qa && s.qb == d.qb &&
                      s.a.shape() == d.a_shape && s.b.shape() == d.b_shape;
    if (!fits) {
      throw Error(ErrorKind::kBinding, "pack slot " + std::to_string(s.slot_id) + " does not match the model descriptor");
    }
    try {
      buffers[d.a_tensor] = Dequantize(s.a, d.qa);
      buffers[d.b_tensor] = Dequantize(s.b, d.qb);
    } catch (const Error& e) {
      throw Error(ErrorKind::kBinding, std::string("pack payload rejected: ") + e.what());
    }
    buffers[d.alpha_tensor] = Tensor::Scalar(s.alpha);
  }
  slot_buffers_ = std::move(buffers);
  bound_ = pack.adapter_id;
}

TensorView Session::ArenaView(const Stage& s, int tensor) {
  auto al = s.alias.find(tensor);
  const int target = al == s.alias.end() ? tensor : al->second;
  const Placement& p = s.plan.tensors.at(target);
  const TensorType& t = s.types.at(target);
  return TensorView{t.shape, t.dtype, reinterpret_cast<std::byte*>(arena_.data()) + p.offset};
}

Tensor Session::RunStage(Role role, const TensorMap& inputs) {
  const Stage& s = stages_[static_cast<size_t>(role)];
  const Graph& g = s.graph;
  auto operand = [&](int tensor) -> ConstTensorView {
    auto c = g.constants.find(tensor);
    if (c != g.constants.end()) return c->second.view();
    // Slot buffers hold backbone tensor ids only.
    if (role == Role::kBackbone) {
      auto b = slot_buffers_.find(tensor);
      if (b != slot_buffers_.end()) return b->second.view();
    }
    return ArenaView(s, tensor);
  };
  std::vector<ConstTensorView> views;
  for (int id : s.order) {
    const Node& n = *g.find_node(id);
    switch (n.kind) {
      case NodeKind::kConstant:
      case NodeKind::kOutput: continue;
      case NodeKind::kInput: {
        if (n.attrs.role != InputRole::kData) continue;
        auto it = inputs.find(n.attrs.name);
        if (it == inputs.end()) throw Error(ErrorKind::kDangling, "missing input '" + n.attrs.name + "'");
        const TensorType& want = s.types.at(n.output);
        if (it->second.shape() != want.shape || it->second.dtype() != want.dtype) {
          throw Error(ErrorKind::kShape, "input '" + n.attrs.name + "' expects " + ShapeString(want.shape) +
                                             " got " + ShapeString(it->second.shape()));
        }
        std::memcpy(ArenaView(s, n.output).data, it->second.raw(), it->second.nbytes());
        continue;
      }
      default: break;
    }
    views.clear();
    for (int t : n.inputs) views.push_back(operand(t));
    EvalNode(n, views, ArenaView(s, n.output));
  }
  const char* name = role == Role::kDecoder ? "y" : "z";
  const int out = g.output_tensor(name);
  const ConstTensorView v = ArenaView(s, out);
  Tensor result(Shape(v.shape.begin(), v.shape.end()), v.dtype);
  std::memcpy(result.raw(), v.data, result.nbytes());
  return result;
}

Tensor Session::Infer(const Tensor& x, const Tensor& cond, uint64_t seed) {
  if (!model_.slots.empty() && !bound_) {
    throw Error(ErrorKind::kBinding, "model has LoRA slots but no adapter is bound");
  }
  const auto start = Clock::now();
  Tensor y = RunBundle(
      ModelBundle{{}, {}, {}, model_.steps, model_.noise_std}, x, cond, seed,
      [&](Role role, const TensorMap& in) { return RunStage(role, in); });
  execute_ms_ += MsSince(start);
  return y;
}

// ---------------------------------------------------------------------------
// KPIs

RomAccounting AccountRom(double base_bytes, std::span<const double> lora_bytes) {
  if (lora_bytes.empty()) throw Error(ErrorKind::kParameter, "ROM accounting needs at least one adapter");
  if (!(base_bytes >= 0.0)) throw Error(ErrorKind::kParameter, "base size must be non-negative");
  RomAccounting r;
  r.n_usecases = lora_bytes.size();
  r.base_bytes = base_bytes;
  r.lora_total_bytes = std::accumulate(lora_bytes.begin(), lora_bytes.end(), 0.0);
  const double n = static_cast<double>(r.n_usecases);
  r.separate_total_bytes = n * (base_bytes + r.lora_total_bytes / n);
  r.shared_total_bytes = base_bytes + r.lora_total_bytes;
  r.memory_ratio = r.separate_total_bytes / r.shared_total_bytes;
  return r;
}

KpiReport RunKpi(std::span<const std::byte> model_bytes, std::span<const std::vector<std::byte>> packs,
                 std::span<const WorkloadItem> workload) {
  if (packs.empty()) throw Error(ErrorKind::kParameter, "KPI run needs at least one pack");
  const auto start = Clock::now();
  KpiReport r;
  Session s = Session::Load(model_bytes);
  r.init_ms = s.init_ms();
  std::vector<double> lora_sizes;
  for (const auto& pack : packs) {
    const auto bind_start = Clock::now();
    s.BindLora(pack);
    r.bind_ms += MsSince(bind_start);
    for (const WorkloadItem& w : workload) s.Infer(w.x, w.cond, w.seed);
    lora_sizes.push_back(static_cast<double>(pack.size()));
    r.lora_rom_bytes += pack.size();
  }
  r.execute_ms = s.execute_ms();
  r.end_to_end_ms = MsSince(start);
  r.shared_rom_bytes = model_bytes.size();
  r.peak_ram_bytes = s.arena_bytes();
  r.adapter_ram_bytes = s.slot_bytes();
  const RomAccounting rom = AccountRom(static_cast<double>(model_bytes.size()), lora_sizes);
  r.n_usecases = rom.n_usecases;
  r.separate_total_bytes = rom.separate_total_bytes;
  r.shared_total_bytes = rom.shared_total_bytes;
  r.memory_ratio = rom.memory_ratio;
  return r;
}

namespace {

std::vector<std::pair<std::string, std::string>> KpiFields(const KpiReport& r) {
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return std::string(buf);
  };
  std::vector<std::pair<std::string, std::string>> f = {
      {"adapter_ram_bytes", std::to_string(r.adapter_ram_bytes)},
      {"bind_ms", num(r.bind_ms)},
      {"end_to_end_ms", num(r.end_to_end_ms)},
      {"execute_ms", num(r.execute_ms)},
      {"init_ms", num(r.init_ms)},
      {"lora_rom_bytes", std::to_string(r.lora_rom_bytes)},
      {"memory_ratio", num(r.memory_ratio)},
      {"n_usecases", std::to_string(r.n_usecases)},
      {"peak_ram_bytes", std::to_string(r.peak_ram_bytes)},
      {"separate_total_bytes", num(r.separate_total_bytes)},
      {"shared_rom_bytes", std::to_string(r.shared_rom_bytes)},
      {"shared_total_bytes", num(r.shared_total_bytes)},
  };
  std::sort(f.begin(), f.end());
  return f;
}

}  // namespace

std::string KpiToText(const KpiReport& r) {
  std::ostringstream os;
  for (const auto& [k, v] : KpiFields(r)) os << k << ' ' << v << '\n';
  return os.str();
}

std::string KpiToCsv(const KpiReport& r) {
  const auto f = KpiFields(r);
  std::ostringstream os;
  for (size_t i = 0; i < f.size(); ++i) os << (i ? "," : "") << f[i].first;
  os << '\n';
  for (size_t i = 0; i < f.size(); ++i) os << (i ? "," : "") << f[i].second;
  os << '\n';
  return os.str();
}

double Median(std::vector<double> values) {
  if (values.empty()) throw Error(ErrorKind::kParameter, "median of an empty sample");
  std::sort(values.begin(), values.end());
  const size_t mid = values.size() / 2;
  return values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

SwapTiming SwapBenchmark(std::span<const std::byte> model_bytes, std::span<const std::byte> pack_a,
                         std::span<const std::byte> pack_b, int reps) {
  if (reps < 3) throw Error(ErrorKind::kParameter, "swap benchmark needs at least 3 repetitions");
  Session live = Session::Load(model_bytes);
  live.BindLora(pack_a);
  std::vector<double> swap, reload;
  for (int i = 0; i < reps; ++i) {
    const auto pack = i % 2 == 0 ? pack_b : pack_a;
    const auto t0 = Clock::now();
    live.BindLora(pack);
    swap.push_back(MsSince(t0));

    const auto t1 = Clock::now();
    Session fresh = Session::Load(model_bytes);
    fresh.BindLora(pack);
    reload.push_back(MsSince(t1));
  }
  return {Median(swap), Median(reload), reps};
}

}  // namespace quad
