#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "quad/error.hpp"
#include "quad/quant_params.hpp"
#include "quad/tensor.hpp"

namespace quad {

enum class NodeKind : uint8_t {
  kInput = 0,
  kOutput,
  kConstant,
  kMatMul,
  kConv2d,
  kAdd,
  kMul,
  kActivation,
  kLoraMatMul,
  kConcat,
  kScale,
  kQuantize,
  kDequantize,
  kQMatMul,
};

const char* NodeKindName(NodeKind kind);

// Role an input placeholder plays in the graph interface.
enum class InputRole : uint8_t { kData = 0, kLoraA, kLoraB, kLoraAlpha };

struct NodeAttrs {
  std::string name;                 // input / output interface name
  Shape shape;                      // input placeholder shape
  DType dtype = DType::kF32;        // input placeholder dtype
  InputRole role = InputRole::kData;
  int slot = -1;                    // lora slot bound by a slot input
  ActivationKind activation = ActivationKind::kRelu;
  int stride = 1;
  int padding = 0;
  // lora_matmul: slot rank r_max and the tensor ids reserved for its factors.
  int rank = 0;
  int a_slot = -1;
  int b_slot = -1;
  bool lora_internal = false;       // intermediate created by the LoRA-as-input rewrite
  QuantParams quant;                // quantize / dequantize / qmatmul output
  QuantParams quant_weight;         // qmatmul lhs
  QuantParams quant_input;          // qmatmul rhs

  friend bool operator==(const NodeAttrs&, const NodeAttrs&) = default;
};

// One operation producing exactly one tensor id.
//   matmul [lhs, rhs]; conv2d [x, w]; add/mul [a, b]; activation [x]
//   lora_matmul [W, x] with factor slots a_slot/b_slot (W x + alpha A (B x))
//   concat [a, b] along axis 0; scale [x, alpha(1)]
//   quantize [x]; dequantize [q]; qmatmul [Wq, xq] (fused dequant-matmul-quant)
struct Node {
  int id = 0;
  NodeKind kind = NodeKind::kInput;
  std::vector<int> inputs;
  int output = 0;
  NodeAttrs attrs;

  friend bool operator==(const Node&, const Node&) = default;
};

struct NamedTensor {
  std::string name;
  int tensor = 0;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct Graph {
  std::vector<Node> nodes;
  std::vector<NamedTensor> inputs;
  std::vector<NamedTensor> outputs;
  std::map<int, Tensor> constants;
  int next_node_id = 0;
  int next_tensor_id = 0;

  const Node* find_node(int id) const;
  Node* find_node(int id);
  const Node* producer(int tensor) const;
  int input_tensor(const std::string& name) const;
  int output_tensor(const std::string& name) const;

  friend bool operator==(const Graph&, const Graph&) = default;
};

struct TensorType {
  Shape shape;
  DType dtype = DType::kF32;
  friend bool operator==(const TensorType&, const TensorType&) = default;
};

// First violation found by Validate; ok() when none.
struct Diagnostic {
  std::optional<ErrorKind> kind;
  int node_id = -1;
  std::string message;

  bool ok() const { return !kind.has_value(); }
};

Diagnostic Validate(const Graph& g);
// Throws quad::Error carrying the diagnostic when the graph is invalid.
void ValidateOrThrow(const Graph& g);

// Kahn's algorithm, ascending node id among ready nodes.
std::vector<int> TopoSort(const Graph& g);
// Nodes reordered by TopoSort.
Graph Sorted(const Graph& g);

// Shape and dtype of every tensor id, including lora factor slots.
std::map<int, TensorType> InferTypes(const Graph& g);

// One node per line in topological order: `id kind [in-ids] -> out-id {attrs}`.
std::string DumpGraph(const Graph& g);

// Incremental construction; each call appends one node and returns its tensor id.
class GraphBuilder {
 public:
  int Input(const std::string& name, Shape shape);
  int Constant(Tensor value);
  int MatMul(int lhs, int rhs);
  int LoraMatMul(int weight, int x, int rank);
  int Conv2d(int x, int weight, int stride, int padding);
  int Add(int a, int b);
  int Mul(int a, int b);
  int Activation(int x, ActivationKind kind);
  int Concat(int a, int b);
  int Scale(int x, int alpha);
  int Output(const std::string& name, int x);

  // Node id that produced the given tensor.
  int node_of(int tensor) const;
  Graph Build() const { return graph_; }
  Graph& graph() { return graph_; }

 private:
  int Append(NodeKind kind, std::vector<int> inputs, NodeAttrs attrs = {});
  Graph graph_;
};

}  // namespace quad
