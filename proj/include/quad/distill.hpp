#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "quad/quant.hpp"

namespace quad {

struct DistillConfig {
  int steps = 200;
  double learning_rate = 1e-2;
  double lambda_task = 0.1;
  int batch = 1;
  uint64_t seed = 0;
};

struct DistillStep {
  int step = 0;
  double recon = 0.0;
  double task = 0.0;
  double total = 0.0;
};

using DistillTrace = std::vector<DistillStep>;

std::string TraceToCsv(const DistillTrace& trace);

// Mean squared error between teacher and student outputs.
double ReconLoss(const Tensor& teacher, const Tensor& student);

struct SteValue {
  float forward = 0.0f;
  float grad = 0.0f;  // 1 inside the representable range, 0 outside
};

SteValue FakeQuantSte(float value, const QuantParams& p);

// How the student applies quantization. kQuantize is true fake quantization
// (QuantSim); kSurrogate replaces it by clamping to the representable range,
// the function whose derivative the straight-through estimator reports.
enum class FakeQuantMode { kQuantize, kSurrogate };

struct FactorGrads {
  Tensor a;  // same shape as the adapter entry's A
  Tensor b;
};

struct LossAndGrads {
  double recon = 0.0;
  double task = 0.0;
  double total = 0.0;
  std::map<int, FactorGrads> grads;  // lora node id -> dL/dA, dL/dB
};

// Distillation objective over `samples` (indices into the data, noise seeds
// derived from their index) with gradients on the adapter factors only.
// `teacher` holds the FP outputs for every data sample.
LossAndGrads DistillLossAndGrads(const ModelBundle& bundle, const LoRAAdapter& adapter,
                                 const QuantProfile& shared, std::span<const CalibrationSample> data,
                                 std::span<const Tensor> teacher, std::span<const size_t> samples,
                                 double lambda_task, uint64_t seed, FakeQuantMode mode);

// Teacher outputs: FP execution with the given adapter for every sample.
std::vector<Tensor> TeacherOutputs(const ModelBundle& bundle, const LoRAAdapter& adapter,
                                   std::span<const CalibrationSample> data, uint64_t seed);

struct DistillResult {
  LoRAAdapter adapter;
  DistillTrace trace;
};

// Teacher: FP with the original adapter. Student: QuantSim under `shared`.
// Plain gradient descent on the adapter factors; base weights and the profile
// stay frozen.
DistillResult QuadFinetune(const ModelBundle& bundle, const LoRAAdapter& adapter, const QuantProfile& shared,
                           std::span<const CalibrationSample> data, const DistillConfig& cfg);

// Runs QuadFinetune on every adapter independently (in parallel). The adapter
// whose id equals `skip_id` is returned unchanged.
std::vector<LoRAAdapter> QuadAlignAll(const ModelBundle& bundle, std::span<const LoRAAdapter> adapters,
                                      const QuantProfile& shared,
                                      std::span<const std::vector<CalibrationSample>> datasets,
                                      const DistillConfig& cfg, const std::optional<std::string>& skip_id = {});

}  // namespace quad
