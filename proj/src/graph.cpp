#include "quad/graph.hpp"

#include <algorithm>
#include <cstdio>
#include <functional>
#include <queue>
#include <set>
#include <sstream>

namespace quad {

const char* NodeKindName(NodeKind kind) {
  switch (kind) {
    case NodeKind::kInput: return "input";
    case NodeKind::kOutput: return "output";
    case NodeKind::kConstant: return "constant";
    case NodeKind::kMatMul: return "matmul";
    case NodeKind::kConv2d: return "conv2d";
    case NodeKind::kAdd: return "add";
    case NodeKind::kMul: return "mul";
    case NodeKind::kActivation: return "activation";
    case NodeKind::kLoraMatMul: return "lora_matmul";
    case NodeKind::kConcat: return "concat";
    case NodeKind::kScale: return "scale";
    case NodeKind::kQuantize: return "quantize";
    case NodeKind::kDequantize: return "dequantize";
    case NodeKind::kQMatMul: return "qmatmul";
  }
  return "?";
}

const Node* Graph::find_node(int id) const {
  for (const Node& n : nodes) {
    if (n.id == id) return &n;
  }
  return nullptr;
}

Node* Graph::find_node(int id) {
  for (Node& n : nodes) {
    if (n.id == id) return &n;
  }
  return nullptr;
}

const Node* Graph::producer(int tensor) const {
  for (const Node& n : nodes) {
    if (n.output == tensor) return &n;
  }
  return nullptr;
}

int Graph::input_tensor(const std::string& name) const {
  for (const auto& in : inputs) {
    if (in.name == name) return in.tensor;
  }
  throw Error(ErrorKind::kDangling, "graph has no input named '" + name + "'");
}

int Graph::output_tensor(const std::string& name) const {
  for (const auto& out : outputs) {
    if (out.name == name) return out.tensor;
  }
  throw Error(ErrorKind::kDangling, "graph has no output named '" + name + "'");
}

namespace {

Diagnostic Fail(ErrorKind kind, int node, std::string message) {
  return Diagnostic{kind, node, std::move(message)};
}

size_t ExpectedArity(NodeKind kind) {
  switch (kind) {
    case NodeKind::kInput:
    case NodeKind::kConstant: return 0;
    case NodeKind::kOutput:
    case NodeKind::kActivation:
    case NodeKind::kQuantize:
    case NodeKind::kDequantize: return 1;
    default: return 2;
  }
}

// Kahn over the dependency relation; returns the sorted ids (possibly partial
// when a cycle exists).
std::vector<int> Kahn(const Graph& g) {
  std::map<int, int> producer_of;  // tensor -> node id
  for (const Node& n : g.nodes) producer_of[n.output] = n.id;
  std::map<int, int> indegree;
  std::map<int, std::vector<int>> users;
  for (const Node& n : g.nodes) {
    indegree[n.id];
    std::set<int> deps;
    for (int t : n.inputs) {
      auto it = producer_of.find(t);
      if (it != producer_of.end()) deps.insert(it->second);
    }
    for (int d : deps) {
      ++indegree[n.id];
      users[d].push_back(n.id);
    }
  }
  std::priority_queue<int, std::vector<int>, std::greater<>> ready;
  for (const auto& [id, deg] : indegree) {
    if (deg == 0) ready.push(id);
  }
  std::vector<int> order;
  while (!ready.empty()) {
    const int id = ready.top();
    ready.pop();
    order.push_back(id);
    for (int u : users[id]) {
      if (--indegree[u] == 0) ready.push(u);
    }
  }
  return order;
}

TensorType F32Type(Shape s) { return TensorType{std::move(s), DType::kF32}; }

// Shape rule of one node given its operand types.
TensorType NodeType(const Node& n, const std::map<int, TensorType>& types, const Graph& g) {
  auto in = [&](size_t i) -> const TensorType& { return types.at(n.inputs[i]); };
  auto mismatch = [&](const std::string& what) {
    return Error(ErrorKind::kShape, what);
  };
  auto require_f32 = [&](const TensorType& t) {
    if (t.dtype != DType::kF32) throw mismatch(std::string(NodeKindName(n.kind)) + " expects fp32 operands");
  };
  switch (n.kind) {
    case NodeKind::kInput: return TensorType{n.attrs.shape, n.attrs.dtype};
    case NodeKind::kConstant: {
      auto it = g.constants.find(n.output);
      if (it == g.constants.end()) throw Error(ErrorKind::kDangling, "constant without value");
      return TensorType{it->second.shape(), it->second.dtype()};
    }
    case NodeKind::kOutput: return in(0);
    case NodeKind::kMatMul: {
      require_f32(in(0));
      require_f32(in(1));
      const auto& a = in(0).shape;
      const auto& b = in(1).shape;
      if (a.size() != 2 || b.size() != 2 || a[1] != b[0]) {
        throw mismatch("matmul " + ShapeString(a) + " by " + ShapeString(b));
      }
      return F32Type({a[0], b[1]});
    }
    case NodeKind::kLoraMatMul: {
      require_f32(in(0));
      require_f32(in(1));
      const auto& w = in(0).shape;
      const auto& x = in(1).shape;
      if (w.size() != 2 || x.size() != 2 || w[1] != x[0]) {
        throw mismatch("lora_matmul " + ShapeString(w) + " by " + ShapeString(x));
      }
      if (n.attrs.rank < 1 || n.attrs.rank > std::min(w[0], w[1])) {
        throw mismatch("lora_matmul rank " + std::to_string(n.attrs.rank) + " exceeds min(d_out, d_in)");
      }
      return F32Type({w[0], x[1]});
    }
    case NodeKind::kConv2d: {
      require_f32(in(0));
      require_f32(in(1));
      if (n.attrs.stride < 1 || n.attrs.padding < 0) throw mismatch("conv2d stride/padding");
      return F32Type(Conv2dOutputShape(in(0).shape, in(1).shape, n.attrs.stride, n.attrs.padding));
    }
    case NodeKind::kAdd:
    case NodeKind::kMul: {
      require_f32(in(0));
      require_f32(in(1));
      if (in(0).shape != in(1).shape) {
        throw mismatch(std::string(NodeKindName(n.kind)) + " " + ShapeString(in(0).shape) + " vs " +
                       ShapeString(in(1).shape));
      }
      return in(0);
    }
    case NodeKind::kActivation: require_f32(in(0)); return in(0);
    case NodeKind::kConcat: {
      require_f32(in(0));
      require_f32(in(1));
      const auto& a = in(0).shape;
      const auto& b = in(1).shape;
      if (a.size() != b.size() || !std::equal(a.begin() + 1, a.end(), b.begin() + 1, b.end())) {
        throw mismatch("concat " + ShapeString(a) + " with " + ShapeString(b));
      }
      Shape s = a;
      s[0] += b[0];
      return F32Type(s);
    }
    case NodeKind::kScale: {
      require_f32(in(0));
      require_f32(in(1));
      if (NumElements(in(1).shape) != 1) throw mismatch("scale factor must hold one element");
      return in(0);
    }
    case NodeKind::kQuantize:
      require_f32(in(0));
      return TensorType{in(0).shape, n.attrs.quant.storage_dtype()};
    case NodeKind::kDequantize:
      if (in(0).dtype == DType::kF32) throw mismatch("dequantize expects an integer operand");
      return F32Type(in(0).shape);
    case NodeKind::kQMatMul: {
      const auto& a = in(0).shape;
      const auto& b = in(1).shape;
      if (in(0).dtype == DType::kF32 || in(1).dtype == DType::kF32) {
        throw mismatch("qmatmul expects integer operands");
      }
      if (a.size() != 2 || b.size() != 2 || a[1] != b[0]) {
        throw mismatch("qmatmul " + ShapeString(a) + " by " + ShapeString(b));
      }
      return TensorType{{a[0], b[1]}, n.attrs.quant.storage_dtype()};
    }
  }
  throw mismatch("unknown node kind");
}

struct TypeResult {
  std::map<int, TensorType> types;
  std::optional<Diagnostic> failure;
};

TypeResult PropagateTypes(const Graph& g, const std::vector<int>& order) {
  TypeResult r;
  for (int id : order) {
    const Node& n = *g.find_node(id);
    if (n.kind == NodeKind::kLoraMatMul) {
      try {
        r.types[n.output] = NodeType(n, r.types, g);
      } catch (const Error& e) {
        r.failure = Fail(e.kind(), n.id, e.what());
        return r;
      }
      // Reserve the factor slots once the frozen weight shape is known.
      const Shape w = r.types.at(n.inputs[0]).shape;
      if (n.attrs.a_slot >= 0) r.types[n.attrs.a_slot] = F32Type({w[0], n.attrs.rank});
      if (n.attrs.b_slot >= 0) r.types[n.attrs.b_slot] = F32Type({n.attrs.rank, w[1]});
      continue;
    }
    try {
      r.types[n.output] = NodeType(n, r.types, g);
    } catch (const Error& e) {
      r.failure = Fail(e.kind(), n.id, e.what());
      return r;
    }
  }
  return r;
}

}  // namespace

Diagnostic Validate(const Graph& g) {
  std::set<int> node_ids;
  std::map<int, int> producer_of;
  std::set<int> slot_ids;
  for (const Node& n : g.nodes) {
    if (!node_ids.insert(n.id).second) {
      return Fail(ErrorKind::kIntegrity, n.id, "duplicate node id");
    }
    if (!producer_of.emplace(n.output, n.id).second) {
      return Fail(ErrorKind::kIntegrity, n.id,
                  "tensor " + std::to_string(n.output) + " has more than one producer");
    }
    if (n.inputs.size() != ExpectedArity(n.kind)) {
      return Fail(ErrorKind::kShape, n.id, std::string(NodeKindName(n.kind)) + " has wrong operand count");
    }
    if (n.kind == NodeKind::kLoraMatMul) {
      if (n.attrs.a_slot < 0 || n.attrs.b_slot < 0 || n.attrs.a_slot == n.attrs.b_slot) {
        return Fail(ErrorKind::kShape, n.id, "lora_matmul must declare distinct A and B slots");
      }
      if (!slot_ids.insert(n.attrs.a_slot).second || !slot_ids.insert(n.attrs.b_slot).second) {
        return Fail(ErrorKind::kIntegrity, n.id, "lora slot id reused");
      }
    }
  }
  for (const Node& n : g.nodes) {
    if (slot_ids.count(n.output)) {
      return Fail(ErrorKind::kIntegrity, n.id, "node produces a reserved lora slot id");
    }
    for (int t : n.inputs) {
      if (t == n.output) return Fail(ErrorKind::kCycle, n.id, "node consumes its own output");
      if (!producer_of.count(t)) {
        return Fail(ErrorKind::kDangling, n.id, "input tensor " + std::to_string(t) + " has no producer");
      }
    }
    if (n.kind == NodeKind::kConstant && !g.constants.count(n.output)) {
      return Fail(ErrorKind::kDangling, n.id, "constant node without a value");
    }
  }
  for (const auto& [tid, value] : g.constants) {
    auto it = producer_of.find(tid);
    if (it == producer_of.end() || g.find_node(it->second)->kind != NodeKind::kConstant) {
      return Fail(ErrorKind::kDangling, -1, "constant value " + std::to_string(tid) + " has no constant node");
    }
  }
  // Interface lists mirror the input/output nodes one to one.
  size_t n_inputs = 0, n_outputs = 0;
  for (const Node& n : g.nodes) {
    if (n.kind == NodeKind::kInput) {
      ++n_inputs;
      auto hit = std::find_if(g.inputs.begin(), g.inputs.end(),
                              [&](const NamedTensor& nt) { return nt.tensor == n.output; });
      if (hit == g.inputs.end() || hit->name != n.attrs.name) {
        return Fail(ErrorKind::kDangling, n.id, "input node missing from graph inputs");
      }
    } else if (n.kind == NodeKind::kOutput) {
      ++n_outputs;
      auto hit = std::find_if(g.outputs.begin(), g.outputs.end(),
                              [&](const NamedTensor& nt) { return nt.tensor == n.output; });
      if (hit == g.outputs.end() || hit->name != n.attrs.name) {
        return Fail(ErrorKind::kDangling, n.id, "output node missing from graph outputs");
      }
    }
  }
  if (n_inputs != g.inputs.size() || n_outputs != g.outputs.size()) {
    return Fail(ErrorKind::kDangling, -1, "graph input/output lists do not match nodes");
  }

  const std::vector<int> order = Kahn(g);
  if (order.size() != g.nodes.size()) {
    std::set<int> done(order.begin(), order.end());
    for (int id : node_ids) {
      if (!done.count(id)) return Fail(ErrorKind::kCycle, id, "cycle through node " + std::to_string(id));
    }
  }

  TypeResult typed = PropagateTypes(g, order);
  if (typed.failure) return *typed.failure;

  // Every output must depend on at least one graph input.
  std::set<int> from_inputs;
  for (int id : order) {
    const Node& n = *g.find_node(id);
    bool live = n.kind == NodeKind::kInput;
    for (int t : n.inputs) live = live || from_inputs.count(t);
    if (live) from_inputs.insert(n.output);
  }
  for (const auto& out : g.outputs) {
    if (!from_inputs.count(out.tensor)) {
      return Fail(ErrorKind::kDangling, producer_of.at(out.tensor),
                  "output '" + out.name + "' is not reachable from any input");
    }
  }
  return {};
}

void ValidateOrThrow(const Graph& g) {
  const Diagnostic d = Validate(g);
  if (!d.ok()) {
    throw Error(*d.kind, "node " + std::to_string(d.node_id) + ": " + d.message);
  }
}

std::vector<int> TopoSort(const Graph& g) {
  std::vector<int> order = Kahn(g);
  if (order.size() != g.nodes.size()) throw Error(ErrorKind::kCycle, "graph contains a cycle");
  return order;
}

Graph Sorted(const Graph& g) {
  Graph out = g;
  out.nodes.clear();
  for (int id : TopoSort(g)) out.nodes.push_back(*g.find_node(id));
  return out;
}

std::map<int, TensorType> InferTypes(const Graph& g) {
  TypeResult r = PropagateTypes(g, TopoSort(g));
  if (r.failure) {
    throw Error(*r.failure->kind, "node " + std::to_string(r.failure->node_id) + ": " + r.failure->message);
  }
  return std::move(r.types);
}

namespace {

std::string FormatFloat(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

std::string FormatQuant(const QuantParams& p) {
  return "s=" + FormatFloat(p.scale) + " z=" + std::to_string(p.zero_point) + " b=" +
         std::to_string(p.bits) + (p.is_signed ? "s" : "u");
}

}  // namespace

std::string DumpGraph(const Graph& g) {
  std::ostringstream os;
  for (int id : TopoSort(g)) {
    const Node& n = *g.find_node(id);
    os << n.id << ' ' << NodeKindName(n.kind) << " [";
    for (size_t i = 0; i < n.inputs.size(); ++i) os << (i ? " " : "") << n.inputs[i];
    os << "] -> " << n.output << " {";
    std::vector<std::string> attrs;
    switch (n.kind) {
      case NodeKind::kInput:
        attrs.push_back("name=" + n.attrs.name);
        attrs.push_back("shape=" + ShapeString(n.attrs.shape));
        if (n.attrs.role != InputRole::kData) attrs.push_back("slot=" + std::to_string(n.attrs.slot));
        break;
      case NodeKind::kOutput: attrs.push_back("name=" + n.attrs.name); break;
      case NodeKind::kConstant: {
        const Tensor& c = g.constants.at(n.output);
        attrs.push_back(std::string("dtype=") + DTypeName(c.dtype()));
        attrs.push_back("shape=" + ShapeString(c.shape()));
        break;
      }
      case NodeKind::kConv2d:
        attrs.push_back("stride=" + std::to_string(n.attrs.stride));
        attrs.push_back("padding=" + std::to_string(n.attrs.padding));
        break;
      case NodeKind::kActivation: attrs.push_back(std::string("act=") + ActivationName(n.attrs.activation)); break;
      case NodeKind::kLoraMatMul:
        attrs.push_back("rank=" + std::to_string(n.attrs.rank));
        attrs.push_back("a=" + std::to_string(n.attrs.a_slot));
        attrs.push_back("b=" + std::to_string(n.attrs.b_slot));
        break;
      case NodeKind::kQuantize:
      case NodeKind::kDequantize: attrs.push_back(FormatQuant(n.attrs.quant)); break;
      case NodeKind::kQMatMul:
        attrs.push_back("w:" + FormatQuant(n.attrs.quant_weight));
        attrs.push_back("x:" + FormatQuant(n.attrs.quant_input));
        attrs.push_back("y:" + FormatQuant(n.attrs.quant));
        break;
      default: break;
    }
    if (n.attrs.lora_internal) attrs.push_back("lora_internal");
    for (size_t i = 0; i < attrs.size(); ++i) os << (i ? " " : "") << attrs[i];
    os << "}\n";
  }
  return os.str();
}

int GraphBuilder::Append(NodeKind kind, std::vector<int> inputs, NodeAttrs attrs) {
  Node n;
  n.id = graph_.next_node_id++;
  n.kind = kind;
  n.inputs = std::move(inputs);
  n.output = graph_.next_tensor_id++;
  n.attrs = std::move(attrs);
  graph_.nodes.push_back(std::move(n));
  return graph_.nodes.back().output;
}

int GraphBuilder::Input(const std::string& name, Shape shape) {
  NodeAttrs a;
  a.name = name;
  a.shape = std::move(shape);
  const int t = Append(NodeKind::kInput, {}, a);
  graph_.inputs.push_back({name, t});
  return t;
}

int GraphBuilder::Constant(Tensor value) {
  const int t = Append(NodeKind::kConstant, {});
  graph_.constants.emplace(t, std::move(value));
  return t;
}

int GraphBuilder::MatMul(int lhs, int rhs) { return Append(NodeKind::kMatMul, {lhs, rhs}); }

int GraphBuilder::LoraMatMul(int weight, int x, int rank) {
  NodeAttrs a;
  a.rank = rank;
  a.a_slot = graph_.next_tensor_id++;
  a.b_slot = graph_.next_tensor_id++;
  return Append(NodeKind::kLoraMatMul, {weight, x}, a);
}

int GraphBuilder::Conv2d(int x, int weight, int stride, int padding) {
  NodeAttrs a;
  a.stride = stride;
  a.padding = padding;
  return Append(NodeKind::kConv2d, {x, weight}, a);
}

int GraphBuilder::Add(int a, int b) { return Append(NodeKind::kAdd, {a, b}); }
int GraphBuilder::Mul(int a, int b) { return Append(NodeKind::kMul, {a, b}); }

int GraphBuilder::Activation(int x, ActivationKind kind) {
  NodeAttrs a;
  a.activation = kind;
  return Append(NodeKind::kActivation, {x}, a);
}

int GraphBuilder::Concat(int a, int b) { return Append(NodeKind::kConcat, {a, b}); }
int GraphBuilder::Scale(int x, int alpha) { return Append(NodeKind::kScale, {x, alpha}); }

int GraphBuilder::Output(const std::string& name, int x) {
  NodeAttrs a;
  a.name = name;
  const int t = Append(NodeKind::kOutput, {x}, a);
  graph_.outputs.push_back({name, t});
  return t;
}

int GraphBuilder::node_of(int tensor) const {
  const Node* n = graph_.producer(tensor);
  if (!n) throw Error(ErrorKind::kDangling, "no producer for tensor " + std::to_string(tensor));
  return n->id;
}

}  // namespace quad
