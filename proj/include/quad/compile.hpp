#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "quad/quant.hpp"

namespace quad {

// One LoRA slot exposed as graph inputs by the LoRA-as-input rewrite.
struct SlotDescriptor {
  int slot_id = 0;
  int target_node_id = 0;
  int a_tensor = 0;      // graph input receiving A [d_out x r_max]
  int b_tensor = 0;      // graph input receiving B [r_max x d_in]
  int alpha_tensor = 0;  // graph input receiving alpha [1]
  Shape a_shape;
  Shape b_shape;
  int bits = 16;
  QuantParams qa;
  QuantParams qb;

  int r_max() const { return static_cast<int>(a_shape.at(1)); }
  friend bool operator==(const SlotDescriptor&, const SlotDescriptor&) = default;
};

std::string SlotInputName(int slot_id, char which);  // "lora.<slot>.A" / B / alpha

struct RewriteResult {
  Graph graph;
  std::vector<SlotDescriptor> slots;
};

// Each lora_matmul becomes matmul(W, x) plus a separate alpha * A (B x) path
// joined by add; A, B and alpha become graph inputs. Slot ids follow ascending
// node id. Descriptor quant params come from the backbone slot keys of `shared`.
RewriteResult RewriteLoraAsInput(const Graph& g, const QuantProfile& shared);

// Makes fake quantization explicit: every profiled activation gets a
// quantize -> dequantize pair and every f32 constant is stored as an integer
// payload followed by a dequantize node.
Graph MaterializeQuantsim(const Graph& g, Role role, const QuantProfile& profile);

// Evaluates compute nodes whose inputs are all constants. Dequantize nodes are
// never folded so weights keep their integer payloads.
Graph ConstantFold(const Graph& g);

// Removes nodes with no path to an output. Graph inputs are kept.
Graph DeadCodeEliminate(const Graph& g);

// Fuses dequantize(Wq), dequantize(xq) -> matmul -> quantize into one qmatmul
// carrying the three parameter sets.
Graph ScaleFold(const Graph& g);

// Arithmetic (non-interface, non-constant) node count.
size_t ComputeNodeCount(const Graph& g);

struct CompiledModel {
  uint16_t version = 1;
  std::string name;
  uint64_t seed = 0;
  Graph encoder;
  Graph backbone;
  Graph decoder;
  int steps = 1;
  float noise_std = 1.0f;
  QuantProfile profile;
  std::vector<SlotDescriptor> slots;

  const Graph& graph(Role role) const;
  friend bool operator==(const CompiledModel&, const CompiledModel&) = default;
};

struct CompileOptions {
  std::string name = "model";
  uint64_t seed = 0;
};

// rewrite -> materialize -> constant fold -> dead code elimination -> scale fold.
CompiledModel Compile(const ModelBundle& bundle, const QuantProfile& shared, const CompileOptions& options = {});

constexpr uint16_t kModelVersion = 1;
constexpr uint16_t kPackVersion = 1;

// "QADM", u16 version, tagged sections (META, GRPE, GRPU, GRPD, SLOT, PROF),
// u32 CRC-32 of everything before it. Little-endian throughout.
std::vector<std::byte> Freeze(const CompiledModel& model);
CompiledModel LoadModel(std::span<const std::byte> bytes);

// Header fields and per-section byte counts.
std::string InspectModel(std::span<const std::byte> bytes);

struct PackedSlot {
  int slot_id = 0;
  int target_node_id = 0;
  int rank = 0;  // effective adapter rank, <= r_max
  int r_max = 0;
  int64_t d_out = 0;
  int64_t d_in = 0;
  int bits = 16;
  float alpha = 1.0f;
  QuantParams qa;
  QuantParams qb;
  Tensor a;  // integer payload [d_out x r_max], padding holds the zero point
  Tensor b;  // integer payload [r_max x d_in]
  friend bool operator==(const PackedSlot&, const PackedSlot&) = default;
};

struct LoraPack {
  std::string adapter_id;
  std::vector<PackedSlot> slots;
  friend bool operator==(const LoraPack&, const LoraPack&) = default;
};

// Quantizes the adapter factors at the slot params of `shared` (via the descriptors).
LoraPack PackLora(const LoRAAdapter& adapter, std::span<const SlotDescriptor> slots);
// "QLPK", u16 version, adapter id, per-slot records and payloads, u32 CRC-32.
std::vector<std::byte> EncodePack(const LoraPack& pack);
LoraPack DecodePack(std::span<const std::byte> bytes);
// Dequantized factors trimmed to the effective rank (fake-quantized originals).
LoRAAdapter UnpackAdapter(const LoraPack& pack);
size_t PackPayloadBytes(const LoraPack& pack);
std::string InspectPack(std::span<const std::byte> bytes);

}  // namespace quad
