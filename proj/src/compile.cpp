#include "quad/compile.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdio>
#include <limits>
#include <set>
#include <sstream>

#include "byte_io.hpp"

namespace quad {

namespace io {

uint32_t Crc32(std::span<const std::byte> data) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks.
  size_t pos = 0;
  while (pos < data.size()) {
    const size_t n = std::min<size_t>(data.size() - pos, 1u << 30);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data.data() + pos), static_cast<uInt>(n));
    pos += n;
  }
  return static_cast<uint32_t>(crc);
}

}  // namespace io

std::string SlotInputName(int slot_id, char which) {
  const std::string base = "lora." + std::to_string(slot_id) + ".";
  switch (which) {
    case 'A': return base + "A";
    case 'B': return base + "B";
    default: return base + "alpha";
  }
}

namespace {

Node MakeNode(Graph& g, NodeKind kind, std::vector<int> inputs, int output, NodeAttrs attrs = {}) {
  Node n;
  n.id = g.next_node_id++;
  n.kind = kind;
  n.inputs = std::move(inputs);
  n.output = output;
  n.attrs = std::move(attrs);
  return n;
}

int AddNode(Graph& g, NodeKind kind, std::vector<int> inputs, NodeAttrs attrs = {}) {
  const int out = g.next_tensor_id++;
  g.nodes.push_back(MakeNode(g, kind, std::move(inputs), out, std::move(attrs)));
  return out;
}

NodeAttrs InternalAttrs() {
  NodeAttrs a;
  a.lora_internal = true;
  return a;
}

int AddSlotInput(Graph& g, const std::string& name, int tensor, Shape shape, InputRole role, int slot) {
  NodeAttrs a;
  a.name = name;
  a.shape = std::move(shape);
  a.role = role;
  a.slot = slot;
  g.nodes.push_back(MakeNode(g, NodeKind::kInput, {}, tensor, a));
  g.inputs.push_back({name, tensor});
  return tensor;
}

bool Foldable(NodeKind k) {
  switch (k) {
    case NodeKind::kInput:
    case NodeKind::kOutput:
    case NodeKind::kConstant:
    case NodeKind::kDequantize:
    case NodeKind::kLoraMatMul: return false;
    default: return true;
  }
}

}  // namespace

RewriteResult RewriteLoraAsInput(const Graph& g, const QuantProfile& shared) {
  ValidateOrThrow(g);
  RewriteResult r{g, {}};
  const auto types = InferTypes(g);
  int slot_id = 0;
  for (int node_id : LoraNodes(g)) {
    const Node original = *g.find_node(node_id);
    const int a_tid = original.attrs.a_slot, b_tid = original.attrs.b_slot;
    const QuantParams* qa = shared.weight({Role::kBackbone, a_tid});
    const QuantParams* qb = shared.weight({Role::kBackbone, b_tid});
    if (!qa || !qb) {
      throw Error(ErrorKind::kCoverage, "no slot params for lora node " + std::to_string(node_id));
    }
    const Shape a_shape = types.at(a_tid).shape;
    const Shape b_shape = types.at(b_tid).shape;
    const int x = original.inputs[1];
    Graph& out = r.graph;

    // The node keeps its id and computes W x into a fresh tensor.
    const int wx = out.next_tensor_id++;
    Node* n = out.find_node(node_id);
    n->kind = NodeKind::kMatMul;
    n->output = wx;
    n->attrs = InternalAttrs();

    AddSlotInput(out, SlotInputName(slot_id, 'A'), a_tid, a_shape, InputRole::kLoraA, slot_id);
    AddSlotInput(out, SlotInputName(slot_id, 'B'), b_tid, b_shape, InputRole::kLoraB, slot_id);
    const int alpha = AddSlotInput(out, SlotInputName(slot_id, 'a'), out.next_tensor_id++, {1},
                                   InputRole::kLoraAlpha, slot_id);
    const int bx = AddNode(out, NodeKind::kMatMul, {b_tid, x}, InternalAttrs());
    const int abx = AddNode(out, NodeKind::kMatMul, {a_tid, bx}, InternalAttrs());
    const int scaled = AddNode(out, NodeKind::kScale, {abx, alpha}, InternalAttrs());
    out.nodes.push_back(MakeNode(out, NodeKind::kAdd, {wx, scaled}, original.output));

    SlotDescriptor d;
    d.slot_id = slot_id++;
    d.target_node_id = node_id;
    d.a_tensor = a_tid;
    d.b_tensor = b_tid;
    d.alpha_tensor = alpha;
    d.a_shape = a_shape;
    d.b_shape = b_shape;
    d.qa = *qa;
    d.qb = *qb;
    d.bits = qa->bits;
    r.slots.push_back(std::move(d));
  }
  ValidateOrThrow(r.graph);
  return r;
}

Graph MaterializeQuantsim(const Graph& g, Role role, const QuantProfile& profile) {
  ValidateOrThrow(g);
  Graph out = g;
  const size_t original_count = out.nodes.size();
  for (size_t i = 0; i < original_count; ++i) {
    Node& n = out.nodes[i];
    const int tid = n.output;
    if (n.kind == NodeKind::kConstant) {
      const Tensor& value = out.constants.at(tid);
      if (value.dtype() != DType::kF32) continue;
      const QuantParams* p = profile.weight({role, tid});
      if (!p) throw Error(ErrorKind::kCoverage, "no weight params for " + KeyString({role, tid}));
      const int tq = out.next_tensor_id++;
      n.output = tq;
      out.constants.emplace(tq, Quantize(value, *p));
      out.constants.erase(tid);
      NodeAttrs a;
      a.quant = *p;
      out.nodes.push_back(MakeNode(out, NodeKind::kDequantize, {tq}, tid, a));
      continue;
    }
    if (!IsQuantizableActivation(n)) continue;
    const QuantParams* p = profile.act({role, tid});
    if (!p) throw Error(ErrorKind::kCoverage, "no activation params for " + KeyString({role, tid}));
    const QuantParams params = *p;
    const int raw = out.next_tensor_id++;
    const bool is_input = n.kind == NodeKind::kInput;
    n.output = raw;
    if (is_input) {
      for (auto& in : out.inputs) {
        if (in.tensor == tid) in.tensor = raw;
      }
    }
    NodeAttrs qa;
    qa.quant = params;
    const int q = AddNode(out, NodeKind::kQuantize, {raw}, qa);
    out.nodes.push_back(MakeNode(out, NodeKind::kDequantize, {q}, tid, qa));
  }
  ValidateOrThrow(out);
  return out;
}

Graph ConstantFold(const Graph& g) {
  ValidateOrThrow(g);
  Graph out = g;
  const auto types = InferTypes(g);
  std::set<int> feeders;  // constants consumed by folded nodes
  for (int id : TopoSort(g)) {
    Node& n = *out.find_node(id);
    if (!Foldable(n.kind)) continue;
    const bool all_const = std::all_of(n.inputs.begin(), n.inputs.end(),
                                       [&](int t) { return out.constants.count(t) > 0; });
    if (!all_const) continue;
    std::vector<ConstTensorView> views;
    for (int t : n.inputs) views.push_back(out.constants.at(t).view());
    const TensorType& type = types.at(n.output);
    Tensor value(type.shape, type.dtype);
    EvalNode(n, views, value.mutable_view());
    feeders.insert(n.inputs.begin(), n.inputs.end());
    out.constants[n.output] = std::move(value);
    n.kind = NodeKind::kConstant;
    n.inputs.clear();
    n.attrs = {};
  }
  std::set<int> used;
  for (const Node& n : out.nodes) used.insert(n.inputs.begin(), n.inputs.end());
  std::erase_if(out.nodes, [&](const Node& n) {
    return n.kind == NodeKind::kConstant && feeders.count(n.output) && !used.count(n.output);
  });
  for (int t : feeders) {
    if (!used.count(t)) out.constants.erase(t);
  }
  return out;
}

Graph DeadCodeEliminate(const Graph& g) {
  ValidateOrThrow(g);
  Graph out = g;
  std::set<int> live_tensors;
  std::vector<int> stack;
  for (const Node& n : g.nodes) {
    if (n.kind == NodeKind::kOutput) stack.push_back(n.output);
  }
  while (!stack.empty()) {
    const int t = stack.back();
    stack.pop_back();
    if (!live_tensors.insert(t).second) continue;
    const Node* p = g.producer(t);
    if (p) stack.insert(stack.end(), p->inputs.begin(), p->inputs.end());
  }
  std::erase_if(out.nodes, [&](const Node& n) {
    return n.kind != NodeKind::kInput && !live_tensors.count(n.output);
  });
  std::erase_if(out.constants, [&](const auto& kv) { return !live_tensors.count(kv.first); });
  return out;
}

Graph ScaleFold(const Graph& g) {
  ValidateOrThrow(g);
  std::map<int, std::vector<int>> users;  // tensor -> consuming node ids
  for (const Node& n : g.nodes) {
    for (int t : n.inputs) users[t].push_back(n.id);
  }
  struct Fusion {
    int matmul;
    int quantize;
  };
  std::vector<Fusion> fusions;
  for (const Node& m : g.nodes) {
    if (m.kind != NodeKind::kMatMul) continue;
    const Node* da = g.producer(m.inputs[0]);
    const Node* db = g.producer(m.inputs[1]);
    if (!da || !db || da->kind != NodeKind::kDequantize || db->kind != NodeKind::kDequantize) continue;
    const auto& u = users[m.output];
    if (u.size() != 1) continue;
    const Node* q = g.find_node(u[0]);
    if (q->kind != NodeKind::kQuantize) continue;
    fusions.push_back({m.id, q->id});
  }
  if (fusions.empty()) return g;

  Graph out = g;
  std::set<int> removed;
  for (const Fusion& f : fusions) {
    Node& m = *out.find_node(f.matmul);
    const Node& q = *g.find_node(f.quantize);
    const Node& da = *g.producer(m.inputs[0]);
    const Node& db = *g.producer(m.inputs[1]);
    NodeAttrs a;
    a.quant = q.attrs.quant;
    a.quant_weight = da.attrs.quant;
    a.quant_input = db.attrs.quant;
    m.kind = NodeKind::kQMatMul;
    m.inputs = {da.inputs[0], db.inputs[0]};
    m.output = q.output;
    m.attrs = a;
    removed.insert(f.quantize);
  }
  std::erase_if(out.nodes, [&](const Node& n) { return removed.count(n.id) > 0; });
  // Dequantize nodes left without consumers go away here.
  return DeadCodeEliminate(out);
}

size_t ComputeNodeCount(const Graph& g) {
  return static_cast<size_t>(std::count_if(g.nodes.begin(), g.nodes.end(), [](const Node& n) {
    return n.kind != NodeKind::kInput && n.kind != NodeKind::kOutput && n.kind != NodeKind::kConstant;
  }));
}

const Graph& CompiledModel::graph(Role role) const {
  switch (role) {
    case Role::kEncoder: return encoder;
    case Role::kBackbone: return backbone;
    case Role::kDecoder: return decoder;
  }
  return backbone;
}

CompiledModel Compile(const ModelBundle& bundle, const QuantProfile& shared, const CompileOptions& options) {
  ValidateBundle(bundle);
  CheckCoverage(bundle, shared);
  CompiledModel m;
  m.version = kModelVersion;
  m.name = options.name;
  m.seed = options.seed;
  m.steps = bundle.steps;
  m.noise_std = bundle.noise_std;
  m.profile = shared;
  for (Role role : {Role::kEncoder, Role::kBackbone, Role::kDecoder}) {
    Graph g = bundle.graph(role);
    if (role == Role::kBackbone) {
      RewriteResult r = RewriteLoraAsInput(g, shared);
      g = std::move(r.graph);
      m.slots = std::move(r.slots);
    }
    g = MaterializeQuantsim(g, role, shared);
    g = ConstantFold(g);
    g = DeadCodeEliminate(g);
    g = ScaleFold(g);
    g = Sorted(g);
    ValidateOrThrow(g);
    (role == Role::kEncoder ? m.encoder : role == Role::kBackbone ? m.backbone : m.decoder) = std::move(g);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Binary encoding

namespace {

constexpr char kModelMagic[5] = "QADM";
constexpr char kPackMagic[5] = "QLPK";

void WriteParams(io::Writer& w, const QuantParams& p) {
  w.f32(p.scale);
  w.i32(p.zero_point);
  w.u8(static_cast<uint8_t>(p.bits));
  w.u8(p.is_signed ? 1 : 0);
}

QuantParams ReadParams(io::Reader& r) {
  QuantParams p;
  p.scale = r.f32();
  p.zero_point = r.i32();
  p.bits = r.u8();
  p.is_signed = r.u8() != 0;
  if (p.bits < 2 || p.bits > 16) throw Error(ErrorKind::kFormat, "bad quantization bit width");
  return p;
}

void WriteShape(io::Writer& w, const Shape& s) {
  if (s.size() > 255) throw Error(ErrorKind::kRange, "tensor rank overflows the format");
  w.u8(static_cast<uint8_t>(s.size()));
  for (int64_t d : s) {
    if (d < 0 || d > std::numeric_limits<uint32_t>::max()) {
      throw Error(ErrorKind::kRange, "tensor extent overflows the format");
    }
    w.u32(static_cast<uint32_t>(d));
  }
}

Shape ReadShape(io::Reader& r) {
  Shape s(r.u8());
  for (auto& d : s) d = r.u32();
  return s;
}

void WriteTensor(io::Writer& w, const Tensor& t) {
  const auto bytes = EncodeQtns(t);
  w.u32(static_cast<uint32_t>(bytes.size()));
  w.bytes(bytes);
}

Tensor ReadTensor(io::Reader& r) {
  const uint32_t n = r.u32();
  return DecodeQtns(r.bytes(n));
}

void WriteGraph(io::Writer& w, const Graph& g) {
  w.i32(g.next_node_id);
  w.i32(g.next_tensor_id);
  w.u32(static_cast<uint32_t>(g.nodes.size()));
  for (const Node& n : g.nodes) {
    w.i32(n.id);
    w.u8(static_cast<uint8_t>(n.kind));
    w.u32(static_cast<uint32_t>(n.inputs.size()));
    for (int t : n.inputs) w.i32(t);
    w.i32(n.output);
    const NodeAttrs& a = n.attrs;
    w.str(a.name);
    WriteShape(w, a.shape);
    w.u8(static_cast<uint8_t>(a.dtype));
    w.u8(static_cast<uint8_t>(a.role));
    w.i32(a.slot);
    w.u8(static_cast<uint8_t>(a.activation));
    w.i32(a.stride);
    w.i32(a.padding);
    w.i32(a.rank);
    w.i32(a.a_slot);
    w.i32(a.b_slot);
    w.u8(a.lora_internal ? 1 : 0);
    WriteParams(w, a.quant);
    WriteParams(w, a.quant_weight);
    WriteParams(w, a.quant_input);
  }
  auto named = [&](const std::vector<NamedTensor>& list) {
    w.u32(static_cast<uint32_t>(list.size()));
    for (const auto& nt : list) {
      w.str(nt.name);
      w.i32(nt.tensor);
    }
  };
  named(g.inputs);
  named(g.outputs);
  w.u32(static_cast<uint32_t>(g.constants.size()));
  for (const auto& [tid, value] : g.constants) {
    w.i32(tid);
    WriteTensor(w, value);
  }
}

Graph ReadGraph(io::Reader& r) {
  Graph g;
  g.next_node_id = r.i32();
  g.next_tensor_id = r.i32();
  const uint32_t n_nodes = r.u32();
  for (uint32_t i = 0; i < n_nodes; ++i) {
    Node n;
    n.id = r.i32();
    const uint8_t kind = r.u8();
    if (kind > static_cast<uint8_t>(NodeKind::kQMatMul)) throw Error(ErrorKind::kFormat, "unknown node kind");
    n.kind = static_cast<NodeKind>(kind);
    const uint32_t n_in = r.u32();
    if (n_in > 8) throw Error(ErrorKind::kFormat, "bad operand count");
    for (uint32_t k = 0; k < n_in; ++k) n.inputs.push_back(r.i32());
    n.output = r.i32();
    NodeAttrs& a = n.attrs;
    a.name = r.str();
    a.shape = ReadShape(r);
    a.dtype = static_cast<DType>(r.u8());
    a.role = static_cast<InputRole>(r.u8());
    a.slot = r.i32();
    a.activation = static_cast<ActivationKind>(r.u8());
    a.stride = r.i32();
    a.padding = r.i32();
    a.rank = r.i32();
    a.a_slot = r.i32();
    a.b_slot = r.i32();
    a.lora_internal = r.u8() != 0;
    a.quant = ReadParams(r);
    a.quant_weight = ReadParams(r);
    a.quant_input = ReadParams(r);
    g.nodes.push_back(std::move(n));
  }
  auto named = [&](std::vector<NamedTensor>& list) {
    const uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
      NamedTensor nt;
      nt.name = r.str();
      nt.tensor = r.i32();
      list.push_back(std::move(nt));
    }
  };
  named(g.inputs);
  named(g.outputs);
  const uint32_t n_const = r.u32();
  for (uint32_t i = 0; i < n_const; ++i) {
    const int tid = r.i32();
    g.constants.emplace(tid, ReadTensor(r));
  }
  return g;
}

void WriteProfileMap(io::Writer& w, const std::map<TensorKey, QuantParams>& m) {
  w.u32(static_cast<uint32_t>(m.size()));
  for (const auto& [k, p] : m) {
    w.u8(static_cast<uint8_t>(k.role));
    w.i32(k.tensor);
    WriteParams(w, p);
  }
}

std::map<TensorKey, QuantParams> ReadProfileMap(io::Reader& r) {
  std::map<TensorKey, QuantParams> m;
  const uint32_t n = r.u32();
  for (uint32_t i = 0; i < n; ++i) {
    const uint8_t role = r.u8();
    if (role > 2) throw Error(ErrorKind::kFormat, "bad graph role");
    const int tensor = r.i32();
    m[{static_cast<Role>(role), tensor}] = ReadParams(r);
  }
  return m;
}

void WriteSlot(io::Writer& w, const SlotDescriptor& d) {
  w.i32(d.slot_id);
  w.i32(d.target_node_id);
  w.i32(d.a_tensor);
  w.i32(d.b_tensor);
  w.i32(d.alpha_tensor);
  WriteShape(w, d.a_shape);
  WriteShape(w, d.b_shape);
  w.u8(static_cast<uint8_t>(d.bits));
  WriteParams(w, d.qa);
  WriteParams(w, d.qb);
}

SlotDescriptor ReadSlot(io::Reader& r) {
  SlotDescriptor d;
  d.slot_id = r.i32();
  d.target_node_id = r.i32();
  d.a_tensor = r.i32();
  d.b_tensor = r.i32();
  d.alpha_tensor = r.i32();
  d.a_shape = ReadShape(r);
  d.b_shape = ReadShape(r);
  d.bits = r.u8();
  d.qa = ReadParams(r);
  d.qb = ReadParams(r);
  if (d.a_shape.size() != 2 || d.b_shape.size() != 2 || d.a_shape[1] != d.b_shape[0]) {
    throw Error(ErrorKind::kFormat, "bad slot descriptor shapes");
  }
  return d;
}

template <typename Fn>
std::vector<std::byte> Payload(Fn&& fn) {
  io::Writer w;
  fn(w);
  return w.take();
}

// Shared envelope: magic, u16 version, u32 total size, body, u32 CRC-32.
std::vector<std::byte> Envelope(const char (&magic)[5], uint16_t version, const std::vector<std::byte>& body) {
  io::Writer w;
  w.tag(magic);
  w.u16(version);
  w.u32(static_cast<uint32_t>(4 + 2 + 4 + body.size() + 4));
  w.bytes(body);
  w.u32(io::Crc32(w.buffer()));
  return w.take();
}

// Verifies the envelope and returns the body.
std::span<const std::byte> OpenEnvelope(std::span<const std::byte> bytes, const char (&magic)[5],
                                        uint16_t version, const char* what) {
  io::Reader r(bytes);
  if (bytes.size() < 4 || r.tag() != std::string(magic, 4)) {
    throw Error(ErrorKind::kFormat, std::string("bad magic, not a ") + what + " file");
  }
  const uint16_t v = r.u16();
  if (v != version) throw Error(ErrorKind::kFormat, std::string("unsupported ") + what + " version " + std::to_string(v));
  const uint32_t total = r.u32();
  if (bytes.size() < total || total < 14) throw Error(ErrorKind::kFormat, std::string("truncated ") + what + " file");
  if (bytes.size() > total) throw Error(ErrorKind::kFormat, std::string("trailing bytes after ") + what + " data");
  io::Reader tail(bytes.subspan(total - 4));
  if (tail.u32() != io::Crc32(bytes.first(total - 4))) {
    throw Error(ErrorKind::kIntegrity, std::string(what) + " checksum mismatch");
  }
  return bytes.subspan(10, total - 14);
}

}  // namespace

std::vector<std::byte> Freeze(const CompiledModel& model) {
  for (const Graph* g : {&model.encoder, &model.backbone, &model.decoder}) ValidateOrThrow(*g);
  io::Writer body;
  body.section("META", Payload([&](io::Writer& w) {
    w.str(model.name);
    w.u64(model.seed);
    w.i32(model.steps);
    w.f32(model.noise_std);
  }));
  body.section("GRPE", Payload([&](io::Writer& w) { WriteGraph(w, model.encoder); }));
  body.section("GRPU", Payload([&](io::Writer& w) { WriteGraph(w, model.backbone); }));
  body.section("GRPD", Payload([&](io::Writer& w) { WriteGraph(w, model.decoder); }));
  body.section("SLOT", Payload([&](io::Writer& w) {
    w.u32(static_cast<uint32_t>(model.slots.size()));
    for (const auto& d : model.slots) WriteSlot(w, d);
  }));
  body.section("PROF", Payload([&](io::Writer& w) {
    w.u8(static_cast<uint8_t>(model.profile.policy.kind));
    w.u64(std::bit_cast<uint64_t>(model.profile.policy.mixed_percent));
    w.u8(static_cast<uint8_t>(model.profile.lora_bits));
    WriteProfileMap(w, model.profile.weight_params);
    WriteProfileMap(w, model.profile.act_params);
  }));
  return Envelope(kModelMagic, model.version, body.take());
}

CompiledModel LoadModel(std::span<const std::byte> bytes) {
  const auto body = OpenEnvelope(bytes, kModelMagic, kModelVersion, "model");
  CompiledModel m;
  m.version = kModelVersion;
  io::Reader r(body);
  const char* order[] = {"META", "GRPE", "GRPU", "GRPD", "SLOT", "PROF"};
  for (const char* expected : order) {
    const std::string tag = r.tag();
    if (tag != expected) throw Error(ErrorKind::kFormat, "expected section " + std::string(expected) + ", found " + tag);
    const uint32_t len = r.u32();
    io::Reader s(r.bytes(len));
    if (tag == "META") {
      m.name = s.str();
      m.seed = s.u64();
      m.steps = s.i32();
      m.noise_std = s.f32();
    } else if (tag == "GRPE") {
      m.encoder = ReadGraph(s);
    } else if (tag == "GRPU") {
      m.backbone = ReadGraph(s);
    } else if (tag == "GRPD") {
      m.decoder = ReadGraph(s);
    } else if (tag == "SLOT") {
      const uint32_t n = s.u32();
      for (uint32_t i = 0; i < n; ++i) m.slots.push_back(ReadSlot(s));
    } else {
      const uint8_t kind = s.u8();
      if (kind > 2) throw Error(ErrorKind::kFormat, "bad policy kind");
      m.profile.policy.kind = static_cast<PolicyKind>(kind);
      m.profile.policy.mixed_percent = std::bit_cast<double>(s.u64());
      m.profile.lora_bits = s.u8();
      m.profile.weight_params = ReadProfileMap(s);
      m.profile.act_params = ReadProfileMap(s);
    }
    if (!s.done()) throw Error(ErrorKind::kFormat, "section " + tag + " has trailing bytes");
  }
  if (!r.done()) throw Error(ErrorKind::kFormat, "unexpected data after the last section");
  if (m.steps < 1) throw Error(ErrorKind::kFormat, "bad step count");
  for (const Graph* g : {&m.encoder, &m.backbone, &m.decoder}) {
    const Diagnostic d = Validate(*g);
    if (!d.ok()) throw Error(ErrorKind::kFormat, "stored graph is invalid: " + d.message);
  }
  const auto types = InferTypes(m.backbone);
  for (const auto& d : m.slots) {
    auto a = types.find(d.a_tensor);
    auto b = types.find(d.b_tensor);
    if (a == types.end() || b == types.end() || a->second.shape != d.a_shape || b->second.shape != d.b_shape ||
        !types.count(d.alpha_tensor)) {
      throw Error(ErrorKind::kFormat, "slot descriptor does not match the backbone inputs");
    }
  }
  return m;
}

std::string InspectModel(std::span<const std::byte> bytes) {
  const CompiledModel m = LoadModel(bytes);
  std::ostringstream os;
  io::Reader r(bytes);
  os << "magic " << r.tag() << "\n";
  os << "version " << r.u16() << "\n";
  os << "size_bytes " << r.u32() << "\n";
  while (r.remaining() > 4) {
    const std::string tag = r.tag();
    const uint32_t len = r.u32();
    r.bytes(len);
    os << "section " << tag << " " << len << "\n";
  }
  char crc[16];
  std::snprintf(crc, sizeof crc, "%08x", r.u32());
  os << "crc32 " << crc << "\n";
  os << "name " << m.name << "\n";
  os << "seed " << m.seed << "\n";
  os << "steps " << m.steps << "\n";
  os << "policy " << PolicyString(m.profile.policy) << "\n";
  size_t weight_bytes = 0, weight_count = 0;
  for (const Graph* g : {&m.encoder, &m.backbone, &m.decoder}) {
    for (const auto& [tid, t] : g->constants) {
      weight_bytes += t.nbytes();
      weight_count += static_cast<size_t>(t.numel());
    }
  }
  os << "weight_elements " << weight_count << "\n";
  os << "weight_payload_bytes " << weight_bytes << "\n";
  os << "nodes " << m.encoder.nodes.size() << " " << m.backbone.nodes.size() << " " << m.decoder.nodes.size()
     << "\n";
  os << "slots " << m.slots.size() << "\n";
  for (const auto& d : m.slots) {
    os << "slot " << d.slot_id << " target " << d.target_node_id << " A " << ShapeString(d.a_shape) << " B "
       << ShapeString(d.b_shape) << " bits " << d.bits << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// LoRA packs

LoraPack PackLora(const LoRAAdapter& adapter, std::span<const SlotDescriptor> slots) {
  std::map<int, const SlotDescriptor*> by_target;
  for (const auto& d : slots) by_target[d.target_node_id] = &d;
  for (const auto& [node, e] : adapter.entries) {
    if (!by_target.count(node)) {
      throw Error(ErrorKind::kDangling, "adapter '" + adapter.id + "' targets node " + std::to_string(node) +
                                            " which has no slot");
    }
  }
  LoraPack pack{adapter.id, {}};
  for (const auto& d : slots) {
    auto it = adapter.entries.find(d.target_node_id);
    if (it == adapter.entries.end()) continue;
    const LoraEntry& e = it->second;
    const int r = static_cast<int>(e.a.rank() == 2 ? e.a.dim(1) : -1);
    if (e.a.rank() != 2 || e.b.rank() != 2 || e.a.dim(0) != d.a_shape[0] || e.b.dim(1) != d.b_shape[1] ||
        e.b.dim(0) != r) {
      throw Error(ErrorKind::kShape, "adapter '" + adapter.id + "' factors do not fit slot " +
                                         std::to_string(d.slot_id));
    }
    if (r > d.r_max()) {
      throw Error(ErrorKind::kShape, "adapter rank " + std::to_string(r) + " exceeds slot r_max " +
                                         std::to_string(d.r_max()));
    }
    PackedSlot s;
    s.slot_id = d.slot_id;
    s.target_node_id = d.target_node_id;
    s.rank = r;
    s.r_max = d.r_max();
    s.d_out = d.a_shape[0];
    s.d_in = d.b_shape[1];
    s.bits = d.bits;
    s.alpha = e.alpha;
    s.qa = d.qa;
    s.qb = d.qb;
    s.a = Tensor(d.a_shape, d.qa.storage_dtype());
    s.b = Tensor(d.b_shape, d.qb.storage_dtype());
    for (int64_t i = 0; i < s.a.numel(); ++i) s.a.set_int(i, d.qa.zero_point);
    for (int64_t i = 0; i < s.b.numel(); ++i) s.b.set_int(i, d.qb.zero_point);
    for (int64_t i = 0; i < s.d_out; ++i) {
      for (int k = 0; k < r; ++k) s.a.set_int(i * s.r_max + k, QuantizeValue(e.a.f32()[i * r + k], d.qa));
    }
    for (int64_t i = 0; i < r * s.d_in; ++i) s.b.set_int(i, QuantizeValue(e.b.f32()[i], d.qb));
    pack.slots.push_back(std::move(s));
  }
  return pack;
}

namespace {

void WriteInts(io::Writer& w, const Tensor& t) {
  const size_t width = DTypeSize(t.dtype());
  for (int64_t i = 0; i < t.numel(); ++i) {
    const int32_t v = t.int_at(i);
    if (width == 1) {
      w.u8(static_cast<uint8_t>(v));
    } else if (width == 2) {
      w.u16(static_cast<uint16_t>(v));
    } else {
      w.i32(v);
    }
  }
}

Tensor ReadInts(io::Reader& r, const Shape& shape, DType dtype) {
  Tensor t(shape, dtype);
  const size_t width = DTypeSize(dtype);
  for (int64_t i = 0; i < t.numel(); ++i) {
    int32_t v;
    if (width == 1) {
      v = static_cast<int8_t>(r.u8());
    } else if (width == 2) {
      v = static_cast<int16_t>(r.u16());
    } else {
      v = r.i32();
    }
    t.set_int(i, v);
  }
  return t;
}

}  // namespace

std::vector<std::byte> EncodePack(const LoraPack& pack) {
  io::Writer w;
  w.str(pack.adapter_id);
  w.u32(static_cast<uint32_t>(pack.slots.size()));
  for (const PackedSlot& s : pack.slots) {
    w.i32(s.slot_id);
    w.i32(s.target_node_id);
    w.i32(s.rank);
    w.i32(s.r_max);
    w.i64(s.d_out);
    w.i64(s.d_in);
    w.u8(static_cast<uint8_t>(s.bits));
    w.f32(s.alpha);
    WriteParams(w, s.qa);
    WriteParams(w, s.qb);
    WriteInts(w, s.a);
    WriteInts(w, s.b);
  }
  return Envelope(kPackMagic, kPackVersion, w.take());
}

LoraPack DecodePack(std::span<const std::byte> bytes) {
  io::Reader r(OpenEnvelope(bytes, kPackMagic, kPackVersion, "pack"));
  LoraPack pack;
  pack.adapter_id = r.str();
  const uint32_t n = r.u32();
  for (uint32_t i = 0; i < n; ++i) {
    PackedSlot s;
    s.slot_id = r.i32();
    s.target_node_id = r.i32();
    s.rank = r.i32();
    s.r_max = r.i32();
    s.d_out = r.i64();
    s.d_in = r.i64();
    s.bits = r.u8();
    s.alpha = r.f32();
    s.qa = ReadParams(r);
    s.qb = ReadParams(r);
    if (s.rank < 1 || s.rank > s.r_max || s.d_out < 1 || s.d_in < 1 ||
        static_cast<uint64_t>(s.d_out + s.d_in) * static_cast<uint64_t>(s.r_max) > r.remaining()) {
      throw Error(ErrorKind::kFormat, "bad pack slot record");
    }
    s.a = ReadInts(r, {s.d_out, s.r_max}, s.qa.storage_dtype());
    s.b = ReadInts(r, {s.r_max, s.d_in}, s.qb.storage_dtype());
    pack.slots.push_back(std::move(s));
  }
  if (!r.done()) throw Error(ErrorKind::kFormat, "trailing bytes in pack");
  return pack;
}

LoRAAdapter UnpackAdapter(const LoraPack& pack) {
  LoRAAdapter a{pack.adapter_id, {}};
  for (const PackedSlot& s : pack.slots) {
    LoraEntry e{Tensor::Zeros({s.d_out, s.rank}), Tensor::Zeros({s.rank, s.d_in}), s.alpha};
    for (int64_t i = 0; i < s.d_out; ++i) {
      for (int k = 0; k < s.rank; ++k) {
        e.a.f32()[i * s.rank + k] = DequantizeValue(s.a.int_at(i * s.r_max + k), s.qa);
      }
    }
    for (int64_t i = 0; i < s.rank * s.d_in; ++i) e.b.f32()[i] = DequantizeValue(s.b.int_at(i), s.qb);
    a.entries.emplace(s.target_node_id, std::move(e));
  }
  return a;
}

size_t PackPayloadBytes(const LoraPack& pack) {
  size_t n = 0;
  for (const PackedSlot& s : pack.slots) n += s.a.nbytes() + s.b.nbytes();
  return n;
}

std::string InspectPack(std::span<const std::byte> bytes) {
  const LoraPack pack = DecodePack(bytes);
  std::ostringstream os;
  io::Reader r(bytes);
  os << "magic " << r.tag() << "\n";
  os << "version " << r.u16() << "\n";
  os << "size_bytes " << r.u32() << "\n";
  os << "adapter_id " << pack.adapter_id << "\n";
  os << "payload_bytes " << PackPayloadBytes(pack) << "\n";
  os << "slots " << pack.slots.size() << "\n";
  for (const PackedSlot& s : pack.slots) {
    os << "slot " << s.slot_id << " target " << s.target_node_id << " rank " << s.rank << " r_max " << s.r_max
       << " bits " << s.bits << " bytes " << s.a.nbytes() + s.b.nbytes() << "\n";
  }
  return os.str();
}

}  // namespace quad
