#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "quad/compile.hpp"

namespace quad {

// Live range of one arena tensor over topological node positions, inclusive.
struct Lifetime {
  int tensor = 0;
  size_t size = 0;  // bytes, rounded up to 4
  int first = 0;
  int last = 0;
};

struct Placement {
  size_t offset = 0;
  size_t size = 0;
  int first = 0;
  int last = 0;
  friend bool operator==(const Placement&, const Placement&) = default;
};

struct MemoryPlan {
  std::map<int, Placement> tensors;
  size_t arena_size = 0;
  friend bool operator==(const MemoryPlan&, const MemoryPlan&) = default;
};

// Arena tensors of a graph: data inputs and compute outputs. Constants and
// LoRA slot inputs live outside the arena; output nodes alias their operand.
// Graph inputs are live from position 0, graph outputs to the end.
std::vector<Lifetime> TensorLifetimes(const Graph& g);

// Greedy best-fit: tensors in decreasing size order, each placed in the
// smallest gap left by already placed tensors whose lifetimes intersect.
MemoryPlan PlanLifetimes(std::span<const Lifetime> lifetimes);
MemoryPlan PlanMemory(const Graph& g);

// Minimal arena over every placement order with lowest-fit placement; exponential, small inputs only.
size_t OptimalArenaSize(std::span<const Lifetime> lifetimes);

// Largest total size of simultaneously live tensors.
size_t PeakLiveBytes(std::span<const Lifetime> lifetimes);

// First pair of tensors with intersecting lifetimes and byte ranges, if any.
std::optional<std::pair<int, int>> FindOverlap(const MemoryPlan& plan);

class Session {
 public:
  // Verifies and loads a frozen model, plans memory and allocates the arena.
  static Session Load(std::span<const std::byte> model_bytes);

  // Copies a pack into the slot buffers. All checks run before any state
  // changes, so a failed bind leaves the previous binding in place. Slots the
  // pack does not cover are zero-filled.
  void BindLora(std::span<const std::byte> pack_bytes);

  Tensor Infer(const Tensor& x, const Tensor& cond, uint64_t seed);

  const CompiledModel& model() const { return model_; }
  const std::optional<std::string>& bound_adapter() const { return bound_; }
  const MemoryPlan& plan(Role role) const { return stages_[static_cast<size_t>(role)].plan; }
  // CRC-32 over every base weight payload.
  uint32_t BaseChecksum() const;
  size_t arena_bytes() const { return arena_.size() * sizeof(uint32_t); }
  size_t slot_bytes() const;
  double init_ms() const { return init_ms_; }
  double execute_ms() const { return execute_ms_; }

 private:
  struct Stage {
    Graph graph;
    std::vector<int> order;
    std::map<int, TensorType> types;
    MemoryPlan plan;
    std::map<int, int> alias;  // output-node tensor -> aliased tensor
  };

  Tensor RunStage(Role role, const TensorMap& inputs);
  TensorView ArenaView(const Stage& s, int tensor);

  CompiledModel model_;
  std::array<Stage, 3> stages_;
  std::vector<uint32_t> arena_;
  std::map<int, Tensor> slot_buffers_;
  std::optional<std::string> bound_;
  double init_ms_ = 0.0;
  double execute_ms_ = 0.0;
};

struct RomAccounting {
  size_t n_usecases = 0;
  double base_bytes = 0.0;
  double lora_total_bytes = 0.0;
  double separate_total_bytes = 0.0;  // n * (base + mean lora)
  double shared_total_bytes = 0.0;    // base + sum lora
  double memory_ratio = 0.0;
};

RomAccounting AccountRom(double base_bytes, std::span<const double> lora_bytes);

struct WorkloadItem {
  Tensor x;
  Tensor cond;
  uint64_t seed = 0;
};

struct KpiReport {
  double init_ms = 0.0;
  double bind_ms = 0.0;
  double execute_ms = 0.0;
  double end_to_end_ms = 0.0;
  size_t shared_rom_bytes = 0;
  size_t lora_rom_bytes = 0;
  size_t peak_ram_bytes = 0;     // activation arena
  size_t adapter_ram_bytes = 0;  // slot buffers
  size_t n_usecases = 0;
  double separate_total_bytes = 0.0;
  double shared_total_bytes = 0.0;
  double memory_ratio = 0.0;
};

// Loads the model, then binds each pack and runs the whole workload under it.
KpiReport RunKpi(std::span<const std::byte> model_bytes, std::span<const std::vector<std::byte>> packs,
                 std::span<const WorkloadItem> workload);

std::string KpiToText(const KpiReport& r);  // key-sorted `key value` lines
std::string KpiToCsv(const KpiReport& r);   // header row plus one value row

struct SwapTiming {
  double swap_ms = 0.0;    // median bind_lora on a live session
  double reload_ms = 0.0;  // median load_model + bind_lora
  int reps = 0;
};

// Alternates pack_a / pack_b binds; every bind performs the full copy.
SwapTiming SwapBenchmark(std::span<const std::byte> model_bytes, std::span<const std::byte> pack_a,
                         std::span<const std::byte> pack_b, int reps);

double Median(std::vector<double> values);

}  // namespace quad
