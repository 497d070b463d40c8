#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>

#include "quad/graph.hpp"

namespace quad {

using TensorMap = std::map<std::string, Tensor>;

// Factors bound to one lora_matmul node, already padded to the slot rank.
struct LoraBinding {
  Tensor a;  // [d_out x r_max]
  Tensor b;  // [r_max x d_in]
  float alpha = 1.0f;
};

struct ExecHooks {
  // lora_matmul node id -> bound factors; unbound nodes compute W x only.
  const std::map<int, LoraBinding>* lora = nullptr;
  // Replaces constant values by tensor id (e.g. fake-quantized weights).
  const std::map<int, Tensor>* constant_override = nullptr;
  // Called on every non-constant tensor right after it is produced; may rewrite it in place.
  std::function<void(int tensor, Tensor& value)> on_produced;
  // When set, receives every tensor value (post hook) keyed by tensor id.
  std::map<int, Tensor>* record = nullptr;
};

// Evaluates one node into a preallocated output. For lora_matmul, `ins` is
// [W, x] or [W, x, A, B, alpha]; the second form computes W x + alpha A (B x)
// as separate products joined by an add.
void EvalNode(const Node& node, std::span<const ConstTensorView> ins, TensorView out);

TensorMap Execute(const Graph& g, const TensorMap& inputs, const ExecHooks& hooks = {});

enum class Role : uint8_t { kEncoder = 0, kBackbone = 1, kDecoder = 2 };
char RoleLetter(Role role);
Role RoleFromLetter(char c);

// Encoder / denoising backbone / decoder. Interface names are fixed:
// encoder x -> z, backbone (z, cond) -> z, decoder z -> y.
struct ModelBundle {
  Graph encoder;
  Graph backbone;
  Graph decoder;
  int steps = 1;
  float noise_std = 1.0f;

  const Graph& graph(Role role) const;
  Graph& graph(Role role);
  friend bool operator==(const ModelBundle&, const ModelBundle&) = default;
};

void ValidateBundle(const ModelBundle& bundle);

struct LoraEntry {
  Tensor a;  // [d_out x r]
  Tensor b;  // [r x d_in]
  float alpha = 1.0f;
  int rank() const { return static_cast<int>(a.dim(1)); }
  friend bool operator==(const LoraEntry&, const LoraEntry&) = default;
};

struct LoRAAdapter {
  std::string id;
  std::map<int, LoraEntry> entries;  // lora_matmul node id -> factors
  friend bool operator==(const LoRAAdapter&, const LoRAAdapter&) = default;
};

// Shape and target checks against the backbone's lora_matmul nodes.
void ValidateAdapter(const Graph& backbone, const LoRAAdapter& adapter);
// Pads every entry to its node's slot rank. `transform` (if set) is applied to
// A and B before padding, e.g. fake quantization.
std::map<int, LoraBinding> MakeBindings(
    const Graph& backbone, const LoRAAdapter& adapter,
    const std::function<Tensor(int slot_tensor, const Tensor&)>& transform = {});

// Seeded standard-normal noise scaled by stddev.
Tensor MakeNoise(const Shape& shape, uint64_t seed, float stddev);

// Stage callback used by RunBundle: evaluates one graph role on named inputs.
using StageFn = std::function<Tensor(Role, const TensorMap&)>;

// z = E(x) + eps; z = U(z, cond) `steps` times; return D(z).
Tensor RunBundle(const ModelBundle& bundle, const Tensor& x, const Tensor& cond, uint64_t noise_seed,
                 const StageFn& stage);

Tensor ExecuteFp(const ModelBundle& bundle, const Tensor& x, const Tensor& cond,
                 const LoRAAdapter* adapter, uint64_t noise_seed);

// Replaces each targeted W by W + alpha A B and turns the node into a plain matmul.
Graph AttachLoraStatic(const Graph& g, const LoRAAdapter& adapter);
ModelBundle AttachLoraStatic(const ModelBundle& bundle, const LoRAAdapter& adapter);

// lora_matmul node ids in ascending order.
std::vector<int> LoraNodes(const Graph& g);

}  // namespace quad
