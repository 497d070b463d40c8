#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "quad/model_spec.hpp"
#include "quad/rng.hpp"
#include "quad/runtime.hpp"

namespace quad::test {

std::filesystem::path FixturePath(const std::string& name);
ModelBundle FixtureBundle(const std::string& model_file, uint64_t seed = 1);
LoRAAdapter FixtureAdapter(const std::string& adapter_file, const ModelBundle& bundle, uint64_t seed = 1);

// Random model spec text: encoder, a backbone with 1..3 lora layers mixed with
// linear, bias and activation layers, decoder. Widths 2..8, batch 1..4.
std::string RandomModelText(Rng& rng);

struct RandomCase {
  ModelBundle bundle;
  LoRAAdapter adapter;
  Tensor x;
  Tensor cond;
  uint64_t noise_seed = 0;
};

// One seeded (bundle, adapter, input) triple.
RandomCase MakeRandomCase(uint64_t seed);

// Random DAG of matmul / add / mul / activation / concat nodes over a single
// data input; `nodes` compute nodes, several outputs.
Graph RandomDag(uint64_t seed, int nodes);

// Adapter whose factors are `base` scaled by gain (A) and 1/gain (B).
LoRAAdapter GaugeScaled(const LoRAAdapter& base, const std::string& id, float gain);

// Compiled model evaluated by the plain graph executor; slot inputs get the
// dequantized pack payloads (zeros when `pack` is null or skips a slot).
Tensor RunCompiled(const CompiledModel& m, const LoraPack* pack, const Tensor& x, const Tensor& cond,
                   uint64_t noise_seed);

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace quad::test
