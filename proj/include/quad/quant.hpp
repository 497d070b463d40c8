#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "quad/exec.hpp"
#include "quad/quant_params.hpp"

namespace quad {

// Identifies a tensor inside a bundle: graph role plus tensor id.
struct TensorKey {
  Role role = Role::kBackbone;
  int tensor = 0;
  auto operator<=>(const TensorKey&) const = default;
};

std::string KeyString(const TensorKey& key);  // e.g. "U:12"
TensorKey ParseKey(const std::string& text);

enum class PolicyKind : uint8_t { kW8A16 = 0, kW8A8 = 1, kMixed = 2 };

struct Policy {
  PolicyKind kind = PolicyKind::kW8A16;
  double mixed_percent = 0.0;  // share of activation tensors at 8 bits (mixed only)

  static Policy W8A16() { return {}; }
  static Policy W8A8() { return {PolicyKind::kW8A8, 0.0}; }
  static Policy Mixed(double percent) { return {PolicyKind::kMixed, percent}; }
  friend bool operator==(const Policy&, const Policy&) = default;
};

std::string PolicyString(const Policy& p);     // w8a16 | w8a8 | mixed:<x>
Policy ParsePolicy(const std::string& text);

struct QuantProfile {
  std::map<TensorKey, QuantParams> weight_params;  // constants and lora factor slots
  std::map<TensorKey, QuantParams> act_params;
  Policy policy;
  int lora_bits = 16;

  const QuantParams* weight(const TensorKey& k) const;
  const QuantParams* act(const TensorKey& k) const;
  friend bool operator==(const QuantProfile&, const QuantProfile&) = default;
};

struct Observer {
  TensorKey key;
  float running_min = 0.0f;
  float running_max = 0.0f;
  bool seen = false;

  void Update(std::span<const float> values);
};

struct QuantizableSet {
  std::vector<TensorKey> weights;      // constant outputs
  std::vector<TensorKey> lora_slots;   // lora_matmul A/B factor slots
  std::vector<TensorKey> activations;  // data inputs and compute-node outputs
};

// Tensors that a covering profile must parameterize. Outputs of output nodes
// and intermediates introduced by the LoRA-as-input rewrite are excluded.
QuantizableSet Quantizable(const ModelBundle& bundle);

// Data inputs and compute-node outputs, excluding rewrite intermediates.
bool IsQuantizableActivation(const Node& n);

void CheckCoverage(const ModelBundle& bundle, const QuantProfile& profile);

struct CalibrationSample {
  Tensor x;
  Tensor cond;
  std::optional<Tensor> target;
};

// Noise seed used for calibration sample i; QSS and distillation reuse it.
uint64_t SampleSeed(uint64_t seed, size_t index);

struct CalibrationOptions {
  Policy policy;
  int lora_bits = 16;
  uint64_t seed = 0;
};

// Runs FP executions with `adapter` bound (if any), tracks global min/max per
// tensor and converts them: weights 8-bit, activations per policy, lora slots
// at lora_bits from the bound factors.
QuantProfile Calibrate(const ModelBundle& bundle, std::span<const CalibrationSample> data,
                       const CalibrationOptions& options, const LoRAAdapter* adapter = nullptr);

// Observers over every quantizable activation for the given runs; exposed so
// the unified profile can accumulate across adapters.
class CalibrationObservers {
 public:
  explicit CalibrationObservers(const ModelBundle& bundle);
  void Run(const ModelBundle& bundle, std::span<const CalibrationSample> data, uint64_t seed,
           const LoRAAdapter* adapter);
  const std::map<TensorKey, Observer>& activations() const { return acts_; }

 private:
  std::map<TensorKey, Observer> acts_;
};

// Weight + activation params from observers and the policy; lora slots left empty.
QuantProfile ProfileFromObservers(const ModelBundle& bundle, const std::map<TensorKey, Observer>& acts,
                                  const Policy& policy, int lora_bits);

// Activation bit width per key after applying the policy (8 or 16).
std::map<TensorKey, int> AssignActivationBits(const std::map<TensorKey, Observer>& acts,
                                              const Policy& policy);

// Fake-quant (QuantSim) execution: same dataflow as ExecuteFp, with every
// weight and profiled activation passed through dequantize(quantize(.)) and
// the adapter factors fake-quantized under their slot params.
Tensor ExecuteQuantsim(const ModelBundle& bundle, const QuantProfile& profile, const LoRAAdapter* adapter,
                       const Tensor& x, const Tensor& cond, uint64_t noise_seed);

// Fake-quantized copies of every constant of the given role.
std::map<int, Tensor> FakeQuantConstants(const Graph& g, Role role, const QuantProfile& profile);

// Key-sorted text map: `<kind> <key>: {scale: .., zero_point: .., bits: .., signed: ..}`.
std::string ProfileToText(const QuantProfile& profile);
QuantProfile ProfileFromText(const std::string& text);

}  // namespace quad
