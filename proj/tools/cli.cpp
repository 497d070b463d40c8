#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "quad/compile.hpp"
#include "quad/distill.hpp"
#include "quad/model_spec.hpp"
#include "quad/runtime.hpp"
#include "quad/sensitivity.hpp"

namespace quad::cli {
namespace {

namespace fs = std::filesystem;

// Missing or malformed input: exit 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A pipeline stage threw: exit 1, message carries the stage name.
struct StageError : std::runtime_error {
  StageError(const std::string& stage, const std::string& what)
      : std::runtime_error("stage " + stage + " failed: " + what) {}
};

template <typename F>
auto Input(const std::string& what, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const std::exception& e) {
    throw UsageError(what + ": " + e.what());
  }
}

template <typename F>
auto Stage(const std::string& name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

struct Globals {
  uint64_t seed = 0;
  std::string policy = "w8a16";
  int lora_bits = 16;
  double tie_eps = kDefaultTieEpsilon;

  CalibrationOptions Calibration() const {
    return {Input("--policy", [&] { return ParsePolicy(policy); }), lora_bits, seed};
  }
};

struct DistillFlags {
  int steps = 200;
  double lr = 1e-2;
  double lambda = 0.1;
  int batch = 1;

  void Add(CLI::App* app) {
    app->add_option("--steps", steps, "Distillation steps")->check(CLI::PositiveNumber);
    app->add_option("--lr", lr, "Gradient descent step size")->check(CLI::NonNegativeNumber);
    app->add_option("--lambda", lambda, "Weight of the task loss")->check(CLI::NonNegativeNumber);
    app->add_option("--batch", batch, "Samples per step")->check(CLI::PositiveNumber);
  }
  DistillConfig Config(uint64_t seed) const { return {steps, lr, lambda, batch, seed}; }
};

ModelBundle LoadBundle(const std::string& path, uint64_t seed) {
  return Input("model " + path, [&] { return BuildBundle(ParseModelSpec(ReadText(path)), seed); });
}

std::vector<CalibrationSample> LoadData(const std::string& dir) {
  return Input("data", [&] { return LoadDataset(dir); });
}

std::vector<LoRAAdapter> LoadAdapters(const std::vector<std::string>& paths, const ModelBundle& bundle,
                                      uint64_t seed) {
  std::vector<LoRAAdapter> out;
  for (const auto& p : paths) out.push_back(Input("adapter " + p, [&] { return LoadAdapterFile(p, bundle, seed); }));
  return out;
}

QuantProfile LoadProfile(const std::string& path) {
  return Input("profile " + path, [&] { return ProfileFromText(ReadText(path)); });
}

std::vector<std::byte> LoadBytes(const std::string& what, const std::string& path) {
  return Input(what + " " + path, [&] { return ReadBytes(path); });
}

void Write(const std::string& path, std::span<const std::byte> bytes) {
  Stage("write", [&] {
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    WriteBytes(path, bytes);
  });
}

void Write(const std::string& path, const std::string& text) {
  Write(path, std::as_bytes(std::span(text.data(), text.size())));
}

std::string Magic(std::span<const std::byte> bytes) {
  if (bytes.size() < 4) return {};
  return std::string(reinterpret_cast<const char*>(bytes.data()), 4);
}

std::vector<WorkloadItem> Workload(std::span<const CalibrationSample> data, uint64_t seed) {
  std::vector<WorkloadItem> w;
  for (size_t i = 0; i < data.size(); ++i) w.push_back({data[i].x, data[i].cond, SampleSeed(seed, i)});
  return w;
}

std::string BenchText(const KpiReport& kpi, const std::optional<SwapTiming>& swap) {
  std::string text = KpiToText(kpi);
  if (swap) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "swap_bind_ms %.6f\nswap_reload_ms %.6f\nswap_reps %d\n", swap->swap_ms,
                  swap->reload_ms, swap->reps);
    text += buf;
  }
  return text;
}

std::optional<SwapTiming> Swap(std::span<const std::byte> model, const std::vector<std::vector<std::byte>>& packs,
                               int reps) {
  if (packs.empty()) return std::nullopt;
  return SwapBenchmark(model, packs.front(), packs.size() > 1 ? packs[1] : packs.front(), reps);
}

std::string InspectAdapter(std::span<const std::byte> bytes) {
  const LoRAAdapter a = DecodeAdapter(bytes);
  std::ostringstream os;
  os << "adapter " << a.id << "\nentries " << a.entries.size() << "\n";
  for (const auto& [node, e] : a.entries) {
    os << "node " << node << " rank " << e.rank() << " alpha " << e.alpha << " A " << ShapeString(e.a.shape())
       << " B " << ShapeString(e.b.shape()) << "\n";
  }
  return os.str();
}

class Cli {
 public:
  Cli(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

  int Run(const std::vector<std::string>& args) {
    CLI::App app{"QUAD toolkit: shared quantized graph with LoRA adapters as runtime inputs", "quad"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_config("--config", "", "Key-value config file; flags win");
    app.add_option("--seed", g_.seed, "Seed for weights, data and noise");
    app.add_option("--policy", g_.policy, "w8a16 | w8a8 | mixed:<x>");
    app.add_option("--lora-bits", g_.lora_bits, "LoRA factor bits")->check(CLI::IsMember({8, 16}));
    app.add_option("--tie-eps", g_.tie_eps, "Relative QSS spread under which the unified profile is used")
        ->check(CLI::NonNegativeNumber);

    AddGenData(app);
    AddCalibrate(app);
    AddQss(app);
    AddDistill(app);
    AddCompile(app);
    AddPackLora(app);
    AddRun(app);
    AddBench(app);
    AddInspect(app);
    AddPipeline(app);

    std::vector<std::string> storage{"quad"};
    storage.insert(storage.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& s : storage) argv.push_back(s.data());
    try {
      app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
      return app.exit(e, out_, err_) == 0 ? kExitOk : kExitUsage;
    }
    try {
      action_();
      return kExitOk;
    } catch (const UsageError& e) {
      err_ << "error: " << e.what() << "\n";
      return kExitUsage;
    } catch (const StageError& e) {
      err_ << "error: " << e.what() << "\n";
      return kExitStageFailure;
    } catch (const std::exception& e) {
      err_ << "error: " << e.what() << "\n";
      return kExitStageFailure;
    }
  }

 private:
  CLI::App* Sub(CLI::App& app, const std::string& name, const std::string& help, std::function<void()> fn) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->callback([this, fn = std::move(fn)] { action_ = fn; });
    return sub;
  }

  void AddGenData(CLI::App& app) {
    auto* s = Sub(app, "gen-data", "Write a seeded dataset for a model spec", [this] {
      const ModelBundle b = LoadBundle(model_, g_.seed);
      if (count_ == 0) throw UsageError("--count must be positive");
      const auto data = Stage("gen-data", [&] { return GenerateDataset(b, count_, g_.seed); });
      Stage("write", [&] { SaveDataset(out_path_, data); });
      out_ << "samples " << data.size() << " -> " << out_path_ << "\n";
    });
    s->add_option("--model", model_, "Model spec")->required()->check(CLI::ExistingFile);
    s->add_option("--count", count_, "Number of samples");
    s->add_option("--out", out_path_, "Output directory")->required();
  }

  void AddCalibrate(CLI::App& app) {
    auto* s = Sub(app, "calibrate", "Min-max calibration into a profile file", [this] {
      const ModelBundle b = LoadBundle(model_, g_.seed);
      const auto data = LoadData(data_);
      const auto opts = g_.Calibration();
      std::optional<LoRAAdapter> adapter;
      if (!adapters_.empty()) adapter = LoadAdapters({adapters_.front()}, b, g_.seed).front();
      const QuantProfile p =
          Stage("calibrate", [&] { return Calibrate(b, data, opts, adapter ? &*adapter : nullptr); });
      Write(out_path_, ProfileToText(p));
      out_ << "profile " << p.weight_params.size() << " weights " << p.act_params.size() << " activations -> "
           << out_path_ << "\n";
    });
    s->add_option("--model", model_, "Model spec")->required()->check(CLI::ExistingFile);
    s->add_option("--data", data_, "Calibration data directory")->required();
    s->add_option("--adapter", adapters_, "Adapter bound during calibration")->expected(0, 1);
    s->add_option("--out", out_path_, "Profile output")->required();
  }

  void AddQss(CLI::App& app) {
    auto* s = Sub(app, "qss", "Score adapters and choose the anchor", [this] {
      const ModelBundle b = LoadBundle(model_, g_.seed);
      const QuantProfile base = LoadProfile(profile_);
      const auto data = LoadData(data_);
      std::vector<CalibrationSample> held;
      if (!qss_data_.empty()) held = LoadData(qss_data_);
      const auto adapters = LoadAdapters(adapters_, b, g_.seed);
      const CalibrationOptions opts{base.policy, base.lora_bits, g_.seed};
      const SharedProfile shared =
          Stage("qss", [&] { return BuildSharedProfile(b, adapters, data, opts, g_.tie_eps, held); });
      Write(out_path_, ReportToText(shared.report));
      if (!shared_out_.empty()) Write(shared_out_, ProfileToText(shared.profile));
      out_ << ReportToText(shared.report);
    });
    s->add_option("--model", model_, "Model spec")->required()->check(CLI::ExistingFile);
    s->add_option("--data", data_, "Calibration data directory")->required();
    s->add_option("--qss-data", qss_data_, "Held-out data for scoring (default: calibration data)");
    s->add_option("--adapter", adapters_, "Adapter file (repeatable)")->required();
    s->add_option("--profile", profile_, "Profile whose policy and lora bits are used")->required();
    s->add_option("--out", out_path_, "Report output")->required();
    s->add_option("--shared-out", shared_out_, "Shared profile output");
  }

  void AddDistill(CLI::App& app) {
    auto* s = Sub(app, "distill", "Align one adapter to a shared profile", [this] {
      const ModelBundle b = LoadBundle(model_, g_.seed);
      const QuantProfile shared = LoadProfile(profile_);
      const auto data = LoadData(data_);
      const LoRAAdapter adapter = LoadAdapters({adapters_.front()}, b, g_.seed).front();
      const DistillResult r =
          Stage("distill", [&] { return QuadFinetune(b, adapter, shared, data, distill_.Config(g_.seed)); });
      Write(out_path_, EncodeAdapter(r.adapter));
      if (!trace_.empty()) Write(trace_, TraceToCsv(r.trace));
      out_ << "adapter " << r.adapter.id << " recon " << r.trace.front().recon << " -> " << r.trace.back().recon
           << "\n";
    });
    s->add_option("--model", model_, "Model spec")->required()->check(CLI::ExistingFile);
    s->add_option("--data", data_, "Training data directory")->required();
    s->add_option("--adapter", adapters_, "Adapter file")->required()->expected(1);
    s->add_option("--profile", profile_, "Shared profile")->required();
    s->add_option("--out", out_path_, "Aligned adapter output")->required();
    s->add_option("--trace", trace_, "Loss trace CSV output");
    distill_.Add(s);
  }

  void AddCompile(CLI::App& app) {
    auto* s = Sub(app, "compile", "Compile and freeze the shared graph", [this] {
      const ModelBundle b = LoadBundle(model_, g_.seed);
      const QuantProfile shared = LoadProfile(profile_);
      const auto bytes = Stage("compile", [&] { return Freeze(Compile(b, shared, {name_, g_.seed})); });
      Write(out_path_, bytes);
      out_ << "model " << name_ << " " << bytes.size() << " bytes -> " << out_path_ << "\n";
    });
    s->add_option("--model", model_, "Model spec")->required()->check(CLI::ExistingFile);
    s->add_option("--profile", profile_, "Shared profile")->required();
    s->add_option("--out", out_path_, "Frozen model output")->required();
    s->add_option("--name", name_, "Model name");
  }

  void AddPackLora(CLI::App& app) {
    auto* s = Sub(app, "pack-lora", "Quantize an adapter into a LoRA pack", [this] {
      const auto model_bytes = LoadBytes("model", quadm_);
      const CompiledModel m = Input("model " + quadm_, [&] { return LoadModel(model_bytes); });
      const auto adapter_bytes = LoadBytes("adapter", adapters_.front());
      LoRAAdapter adapter;
      if (Magic(adapter_bytes) == "QLAD") {
        adapter = Input("adapter", [&] { return DecodeAdapter(adapter_bytes); });
      } else {
        if (model_.empty()) throw UsageError("text adapter specs need --model");
        adapter = LoadAdapters({adapters_.front()}, LoadBundle(model_, g_.seed), g_.seed).front();
      }
      const auto bytes = Stage("pack", [&] { return EncodePack(PackLora(adapter, m.slots)); });
      Write(out_path_, bytes);
      out_ << "pack " << adapter.id << " " << bytes.size() << " bytes -> " << out_path_ << "\n";
    });
    s->add_option("--quadm", quadm_, "Frozen model")->required();
    s->add_option("--adapter", adapters_, "Adapter file")->required()->expected(1);
    s->add_option("--model", model_, "Model spec (for text adapter specs)");
    s->add_option("--out", out_path_, "Pack output")->required();
  }

  void AddRun(CLI::App& app) {
    auto* s = Sub(app, "run", "Run inference on a dataset", [this] {
      const auto model_bytes = LoadBytes("model", quadm_);
      std::vector<std::byte> pack;
      if (!packs_.empty()) pack = LoadBytes("pack", packs_.front());
      const auto data = LoadData(data_);
      Session session = Stage("load", [&] { return Session::Load(model_bytes); });
      if (!pack.empty()) Stage("bind", [&] { session.BindLora(pack); });
      for (size_t i = 0; i < data.size(); ++i) {
        const Tensor y = Stage("infer", [&] { return session.Infer(data[i].x, data[i].cond, SampleSeed(g_.seed, i)); });
        char name[32];
        std::snprintf(name, sizeof name, "s%05zu", i);
        if (!out_path_.empty()) {
          Stage("write", [&] {
            fs::create_directories(out_path_);
            WriteQtns(fs::path(out_path_) / (std::string(name) + ".y.qtns"), y);
          });
        }
        out_ << name;
        if (data[i].target) out_ << " mse " << MeanSquaredError(*data[i].target, y);
        out_ << "\n";
      }
      out_ << "adapter " << session.bound_adapter().value_or("none") << " samples " << data.size() << "\n";
    });
    s->add_option("--quadm", quadm_, "Frozen model")->required();
    s->add_option("--lora", packs_, "LoRA pack to bind")->expected(0, 1);
    s->add_option("--data", data_, "Input data directory")->required();
    s->add_option("--out", out_path_, "Output directory for y tensors");
  }

  void AddBench(CLI::App& app) {
    auto* s = Sub(app, "bench", "KPI report and swap-vs-reload timing", [this] {
      const auto model_bytes = LoadBytes("model", quadm_);
      std::vector<std::vector<std::byte>> packs;
      for (const auto& p : packs_) packs.push_back(LoadBytes("pack", p));
      const auto data = LoadData(data_);
      const auto workload = Workload(data, g_.seed);
      const KpiReport kpi = Stage("bench", [&] { return RunKpi(model_bytes, packs, workload); });
      const auto swap = Stage("bench", [&] { return Swap(model_bytes, packs, reps_); });
      const std::string text = csv_ ? KpiToCsv(kpi) : BenchText(kpi, swap);
      if (!out_path_.empty()) Write(out_path_, text);
      out_ << text;
    });
    s->add_option("--quadm", quadm_, "Frozen model")->required();
    s->add_option("--lora", packs_, "LoRA packs (repeatable)");
    s->add_option("--data", data_, "Workload data directory")->required();
    s->add_option("--reps", reps_, "Swap benchmark repetitions")->check(CLI::PositiveNumber);
    s->add_option("--out", out_path_, "Report output");
    s->add_flag("--csv", csv_, "Emit the KPI report as CSV");
  }

  void AddInspect(CLI::App& app) {
    auto* s = Sub(app, "inspect", "Describe a .quadm, .qlp, adapter or tensor file", [this] {
      const auto bytes = LoadBytes("file", inspect_);
      const std::string magic = Magic(bytes);
      std::string text;
      if (magic == "QADM") {
        text = Input("model", [&] { return InspectModel(bytes); });
      } else if (magic == "QLPK") {
        text = Input("pack", [&] { return InspectPack(bytes); });
      } else if (magic == "QLAD") {
        text = Input("adapter", [&] { return InspectAdapter(bytes); });
      } else if (magic == "QTNS") {
        const Tensor t = Input("tensor", [&] { return DecodeQtns(bytes); });
        text = std::string("tensor ") + DTypeName(t.dtype()) + " " + ShapeString(t.shape()) + "\n";
      } else {
        throw UsageError("unrecognized file '" + inspect_ + "'");
      }
      out_ << text;
    });
    s->add_option("file", inspect_, "File to describe")->required();
  }

  void AddPipeline(CLI::App& app) {
    auto* s = Sub(app, "pipeline", "calibrate, qss, distill, compile, pack and bench in one run", [this] {
      const ModelBundle b = LoadBundle(model_, g_.seed);
      const auto data = LoadData(data_);
      std::vector<CalibrationSample> held;
      if (!qss_data_.empty()) held = LoadData(qss_data_);
      const auto adapters = LoadAdapters(adapters_, b, g_.seed);
      const auto opts = g_.Calibration();
      const fs::path dir(out_path_);

      const SharedProfile shared =
          Stage("qss", [&] { return BuildSharedProfile(b, adapters, data, opts, g_.tie_eps, held); });
      Write((dir / "profile.txt").string(), ProfileToText(shared.profile));
      Write((dir / "qss_report.txt").string(), ReportToText(shared.report));

      std::optional<std::string> anchor;
      if (!shared.report.anchor.unified) anchor = shared.report.anchor.adapter_id;
      const std::vector<std::vector<CalibrationSample>> sets{data};
      const auto aligned = Stage(
          "distill", [&] { return QuadAlignAll(b, adapters, shared.profile, sets, distill_.Config(g_.seed), anchor); });
      for (const auto& a : aligned) Write((dir / "adapters" / (a.id + ".qlad")).string(), EncodeAdapter(a));

      const CompiledModel model = Stage("compile", [&] { return Compile(b, shared.profile, {name_, g_.seed}); });
      const auto model_bytes = Stage("freeze", [&] { return Freeze(model); });
      Write((dir / (name_ + ".quadm")).string(), model_bytes);

      std::vector<std::vector<std::byte>> packs;
      for (const auto& a : aligned) {
        packs.push_back(Stage("pack", [&] { return EncodePack(PackLora(a, model.slots)); }));
        Write((dir / (a.id + ".qlp")).string(), packs.back());
      }

      const auto workload = Workload(data, g_.seed);
      const KpiReport kpi = Stage("bench", [&] { return RunKpi(model_bytes, packs, workload); });
      const auto swap = Stage("bench", [&] { return Swap(model_bytes, packs, reps_); });
      Write((dir / "kpi.txt").string(), BenchText(kpi, swap));

      out_ << "anchor " << (anchor ? *anchor : std::string("unified")) << "\n"
           << "model " << model_bytes.size() << " bytes, " << packs.size() << " packs\n"
           << "memory_ratio " << kpi.memory_ratio << "\n";
    });
    s->add_option("--model", model_, "Model spec")->required()->check(CLI::ExistingFile);
    s->add_option("--data", data_, "Calibration and distillation data directory")->required();
    s->add_option("--qss-data", qss_data_, "Held-out data for scoring (default: calibration data)");
    s->add_option("--adapter", adapters_, "Adapter file (repeatable)")->required();
    s->add_option("--out", out_path_, "Output directory")->required();
    s->add_option("--name", name_, "Model name");
    s->add_option("--reps", reps_, "Swap benchmark repetitions")->check(CLI::PositiveNumber);
    distill_.Add(s);
  }

  std::ostream& out_;
  std::ostream& err_;
  Globals g_;
  DistillFlags distill_;
  std::function<void()> action_;

  std::string model_;
  std::string data_;
  std::string qss_data_;
  std::string profile_;
  std::string shared_out_;
  std::string out_path_;
  std::string trace_;
  std::string quadm_;
  std::string inspect_;
  std::string name_ = "model";
  std::vector<std::string> adapters_;
  std::vector<std::string> packs_;
  size_t count_ = 8;
  int reps_ = 11;
  bool csv_ = false;
};

}  // namespace

int RunCli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  return Cli(out, err).Run(args);
}

int RunCli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return RunCli(args, std::cout, std::cerr);
}

}  // namespace quad::cli
