#include "quad/exec.hpp"

#include <algorithm>
#include <set>

#include "quad/rng.hpp"

namespace quad {

void EvalNode(const Node& node, std::span<const ConstTensorView> ins, TensorView out) {
  switch (node.kind) {
    case NodeKind::kMatMul: kernels::MatMul(ins[0], ins[1], out); return;
    case NodeKind::kConv2d:
      kernels::Conv2d(ins[0], ins[1], node.attrs.stride, node.attrs.padding, out);
      return;
    case NodeKind::kAdd: kernels::Add(ins[0], ins[1], out); return;
    case NodeKind::kMul: kernels::Mul(ins[0], ins[1], out); return;
    case NodeKind::kActivation:
      if (node.attrs.activation == ActivationKind::kRelu) {
        kernels::Relu(ins[0], out);
      } else {
        kernels::Silu(ins[0], out);
      }
      return;
    case NodeKind::kConcat: kernels::ConcatRows(ins[0], ins[1], out); return;
    case NodeKind::kScale: kernels::Scale(ins[0], ins[1].as<float>()[0], out); return;
    case NodeKind::kQuantize: kernels::Quantize(ins[0], node.attrs.quant, out); return;
    case NodeKind::kDequantize: kernels::Dequantize(ins[0], node.attrs.quant, out); return;
    case NodeKind::kQMatMul: {
      Tensor w(Shape(ins[0].shape.begin(), ins[0].shape.end()), DType::kF32);
      Tensor x(Shape(ins[1].shape.begin(), ins[1].shape.end()), DType::kF32);
      kernels::Dequantize(ins[0], node.attrs.quant_weight, w.mutable_view());
      kernels::Dequantize(ins[1], node.attrs.quant_input, x.mutable_view());
      Tensor y = MatMul(w, x);
      kernels::Quantize(y.view(), node.attrs.quant, out);
      return;
    }
    case NodeKind::kLoraMatMul: {
      if (ins.size() == 2) {
        kernels::MatMul(ins[0], ins[1], out);
        return;
      }
      const ConstTensorView& w = ins[0];
      const ConstTensorView& x = ins[1];
      const ConstTensorView& a = ins[2];
      const ConstTensorView& b = ins[3];
      Tensor wx({w.shape[0], x.shape[1]}, DType::kF32);
      Tensor bx({b.shape[0], x.shape[1]}, DType::kF32);
      Tensor abx({a.shape[0], x.shape[1]}, DType::kF32);
      Tensor scaled({a.shape[0], x.shape[1]}, DType::kF32);
      kernels::MatMul(w, x, wx.mutable_view());
      kernels::MatMul(b, x, bx.mutable_view());
      kernels::MatMul(a, bx.view(), abx.mutable_view());
      kernels::Scale(abx.view(), ins[4].as<float>()[0], scaled.mutable_view());
      kernels::Add(wx.view(), scaled.view(), out);
      return;
    }
    case NodeKind::kInput:
    case NodeKind::kOutput:
    case NodeKind::kConstant: break;
  }
  throw Error(ErrorKind::kParameter, std::string("EvalNode cannot evaluate ") + NodeKindName(node.kind));
}

TensorMap Execute(const Graph& g, const TensorMap& inputs, const ExecHooks& hooks) {
  const auto types = InferTypes(g);
  std::map<int, Tensor> values;
  for (int id : TopoSort(g)) {
    const Node& n = *g.find_node(id);
    Tensor produced;
    switch (n.kind) {
      case NodeKind::kInput: {
        auto it = inputs.find(n.attrs.name);
        if (it == inputs.end()) throw Error(ErrorKind::kDangling, "missing input '" + n.attrs.name + "'");
        const TensorType& want = types.at(n.output);
        if (it->second.shape() != want.shape || it->second.dtype() != want.dtype) {
          throw Error(ErrorKind::kShape, "input '" + n.attrs.name + "' expects " + ShapeString(want.shape) +
                                             " got " + ShapeString(it->second.shape()));
        }
        produced = it->second;
        break;
      }
      case NodeKind::kConstant: {
        const Tensor* value = &g.constants.at(n.output);
        if (hooks.constant_override) {
          auto it = hooks.constant_override->find(n.output);
          if (it != hooks.constant_override->end()) value = &it->second;
        }
        values[n.output] = *value;
        if (hooks.record) (*hooks.record)[n.output] = *value;
        continue;
      }
      case NodeKind::kOutput: produced = values.at(n.inputs[0]); break;
      default: {
        const TensorType& t = types.at(n.output);
        produced = Tensor(t.shape, t.dtype);
        std::vector<ConstTensorView> views;
        for (int in : n.inputs) views.push_back(values.at(in).view());
        Tensor alpha;
        if (n.kind == NodeKind::kLoraMatMul && hooks.lora) {
          auto it = hooks.lora->find(n.id);
          if (it != hooks.lora->end()) {
            alpha = Tensor::Scalar(it->second.alpha);
            views.push_back(it->second.a.view());
            views.push_back(it->second.b.view());
            views.push_back(alpha.view());
          }
        }
        EvalNode(n, views, produced.mutable_view());
        break;
      }
    }
    if (hooks.on_produced && n.kind != NodeKind::kOutput) hooks.on_produced(n.output, produced);
    if (hooks.record) (*hooks.record)[n.output] = produced;
    values[n.output] = std::move(produced);
  }
  TensorMap result;
  for (const auto& out : g.outputs) result[out.name] = values.at(out.tensor);
  return result;
}

char RoleLetter(Role role) {
  switch (role) {
    case Role::kEncoder: return 'E';
    case Role::kBackbone: return 'U';
    case Role::kDecoder: return 'D';
  }
  return '?';
}

Role RoleFromLetter(char c) {
  switch (c) {
    case 'E': return Role::kEncoder;
    case 'U': return Role::kBackbone;
    case 'D': return Role::kDecoder;
    default: throw Error(ErrorKind::kFormat, std::string("unknown graph role '") + c + "'");
  }
}

const Graph& ModelBundle::graph(Role role) const {
  switch (role) {
    case Role::kEncoder: return encoder;
    case Role::kBackbone: return backbone;
    case Role::kDecoder: return decoder;
  }
  return backbone;
}

Graph& ModelBundle::graph(Role role) {
  return const_cast<Graph&>(static_cast<const ModelBundle&>(*this).graph(role));
}

std::vector<int> LoraNodes(const Graph& g) {
  std::vector<int> ids;
  for (const Node& n : g.nodes) {
    if (n.kind == NodeKind::kLoraMatMul) ids.push_back(n.id);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

namespace {

const Shape& InputShape(const Graph& g, const std::string& name) {
  const Node* n = g.producer(g.input_tensor(name));
  return n->attrs.shape;
}

Shape OutputShape(const Graph& g, const std::string& name) {
  return InferTypes(g).at(g.output_tensor(name)).shape;
}

}  // namespace

void ValidateBundle(const ModelBundle& bundle) {
  if (bundle.steps < 1) throw Error(ErrorKind::kParameter, "bundle steps must be >= 1");
  for (Role r : {Role::kEncoder, Role::kBackbone, Role::kDecoder}) {
    const Diagnostic d = Validate(bundle.graph(r));
    if (!d.ok()) {
      throw Error(*d.kind, std::string(1, RoleLetter(r)) + " node " + std::to_string(d.node_id) + ": " +
                               d.message);
    }
    if (r != Role::kBackbone && !LoraNodes(bundle.graph(r)).empty()) {
      throw Error(ErrorKind::kParameter, "only the backbone may contain lora_matmul nodes");
    }
  }
  const Shape z_enc = OutputShape(bundle.encoder, "z");
  const Shape& z_in = InputShape(bundle.backbone, "z");
  InputShape(bundle.backbone, "cond");
  const Shape z_out = OutputShape(bundle.backbone, "z");
  const Shape& z_dec = InputShape(bundle.decoder, "z");
  OutputShape(bundle.decoder, "y");
  InputShape(bundle.encoder, "x");
  if (z_enc != z_in || z_out != z_in || z_dec != z_out) {
    throw Error(ErrorKind::kShape, "latent shapes disagree between encoder, backbone and decoder");
  }
}

void ValidateAdapter(const Graph& backbone, const LoRAAdapter& adapter) {
  const auto types = InferTypes(backbone);
  for (const auto& [node_id, entry] : adapter.entries) {
    const Node* n = backbone.find_node(node_id);
    if (!n || n->kind != NodeKind::kLoraMatMul) {
      throw Error(ErrorKind::kDangling, "adapter '" + adapter.id + "' targets node " +
                                            std::to_string(node_id) + " which is not a lora_matmul");
    }
    const Shape& w = types.at(n->inputs[0]).shape;
    if (entry.a.rank() != 2 || entry.b.rank() != 2 || entry.a.dim(0) != w[0] || entry.b.dim(1) != w[1] ||
        entry.a.dim(1) != entry.b.dim(0)) {
      throw Error(ErrorKind::kShape, "adapter '" + adapter.id + "' factors " + ShapeString(entry.a.shape()) +
                                         "," + ShapeString(entry.b.shape()) + " do not fit W " + ShapeString(w) +
                                         " at node " + std::to_string(node_id));
    }
    if (entry.rank() > n->attrs.rank) {
      throw Error(ErrorKind::kShape, "adapter rank " + std::to_string(entry.rank()) + " exceeds slot rank " +
                                         std::to_string(n->attrs.rank) + " at node " + std::to_string(node_id));
    }
  }
}

std::map<int, LoraBinding> MakeBindings(
    const Graph& backbone, const LoRAAdapter& adapter,
    const std::function<Tensor(int slot_tensor, const Tensor&)>& transform) {
  ValidateAdapter(backbone, adapter);
  std::map<int, LoraBinding> out;
  for (const auto& [node_id, entry] : adapter.entries) {
    const Node& n = *backbone.find_node(node_id);
    const int r = entry.rank();
    const int r_max = n.attrs.rank;
    const Tensor a = transform ? transform(n.attrs.a_slot, entry.a) : entry.a;
    const Tensor b = transform ? transform(n.attrs.b_slot, entry.b) : entry.b;
    const int64_t d_out = a.dim(0), d_in = b.dim(1);
    LoraBinding bind{Tensor::Zeros({d_out, r_max}), Tensor::Zeros({r_max, d_in}), entry.alpha};
    for (int64_t i = 0; i < d_out; ++i) {
      for (int k = 0; k < r; ++k) bind.a.f32()[i * r_max + k] = a.f32()[i * r + k];
    }
    std::copy(b.f32().begin(), b.f32().end(), bind.b.f32().begin());
    out.emplace(node_id, std::move(bind));
  }
  return out;
}

Tensor MakeNoise(const Shape& shape, uint64_t seed, float stddev) {
  Rng rng(seed);
  Tensor t(shape, DType::kF32);
  for (float& v : t.f32()) v = static_cast<float>(rng.normal()) * stddev;
  return t;
}

Tensor RunBundle(const ModelBundle& bundle, const Tensor& x, const Tensor& cond, uint64_t noise_seed,
                 const StageFn& stage) {
  Tensor z = stage(Role::kEncoder, {{"x", x}});
  const Tensor noise = MakeNoise(z.shape(), noise_seed, bundle.noise_std);
  Tensor noisy(z.shape(), DType::kF32);
  kernels::Add(z.view(), noise.view(), noisy.mutable_view());
  z = std::move(noisy);
  for (int step = 0; step < bundle.steps; ++step) {
    z = stage(Role::kBackbone, {{"z", z}, {"cond", cond}});
  }
  return stage(Role::kDecoder, {{"z", z}});
}

Tensor ExecuteFp(const ModelBundle& bundle, const Tensor& x, const Tensor& cond,
                 const LoRAAdapter* adapter, uint64_t noise_seed) {
  std::map<int, LoraBinding> bindings;
  if (adapter) bindings = MakeBindings(bundle.backbone, *adapter);
  return RunBundle(bundle, x, cond, noise_seed, [&](Role role, const TensorMap& in) {
    ExecHooks hooks;
    if (role == Role::kBackbone) hooks.lora = &bindings;
    TensorMap out = Execute(bundle.graph(role), in, hooks);
    return out.at(role == Role::kDecoder ? "y" : "z");
  });
}

Graph AttachLoraStatic(const Graph& g, const LoRAAdapter& adapter) {
  Graph out = g;
  const auto types = InferTypes(g);
  for (const auto& [node_id, entry] : adapter.entries) {
    Node* n = out.find_node(node_id);
    if (!n || (n->kind != NodeKind::kLoraMatMul && n->kind != NodeKind::kMatMul)) {
      throw Error(ErrorKind::kDangling, "adapter target " + std::to_string(node_id) + " missing");
    }
    const int w_id = n->inputs[0];
    auto it = out.constants.find(w_id);
    if (it == out.constants.end()) {
      throw Error(ErrorKind::kParameter, "target " + std::to_string(node_id) + " has no constant weight");
    }
    size_t users = 0;
    for (const Node& other : out.nodes) users += std::count(other.inputs.begin(), other.inputs.end(), w_id);
    if (users != 1) throw Error(ErrorKind::kParameter, "weight of node " + std::to_string(node_id) + " is shared");
    const Tensor& w = it->second;
    if (entry.a.dim(0) != w.dim(0) || entry.b.dim(1) != w.dim(1) || entry.a.dim(1) != entry.b.dim(0)) {
      throw Error(ErrorKind::kShape, "adapter factors do not fit W at node " + std::to_string(node_id));
    }
    const Tensor delta = Scale(MatMul(entry.a, entry.b), entry.alpha);
    it->second = Elementwise(w, delta, ElementwiseOp::kAdd);
    n->kind = NodeKind::kMatMul;
  }
  return out;
}

ModelBundle AttachLoraStatic(const ModelBundle& bundle, const LoRAAdapter& adapter) {
  ModelBundle out = bundle;
  out.backbone = AttachLoraStatic(bundle.backbone, adapter);
  return out;
}

}  // namespace quad
