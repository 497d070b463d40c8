#include "quad/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "quad/rng.hpp"

namespace quad {

std::string KeyString(const TensorKey& key) {
  return std::string(1, RoleLetter(key.role)) + ":" + std::to_string(key.tensor);
}

TensorKey ParseKey(const std::string& text) {
  if (text.size() < 3 || text[1] != ':') throw Error(ErrorKind::kFormat, "bad tensor key '" + text + "'");
  try {
    return TensorKey{RoleFromLetter(text[0]), std::stoi(text.substr(2))};
  } catch (const std::logic_error&) {
    throw Error(ErrorKind::kFormat, "bad tensor key '" + text + "'");
  }
}

std::string PolicyString(const Policy& p) {
  switch (p.kind) {
    case PolicyKind::kW8A16: return "w8a16";
    case PolicyKind::kW8A8: return "w8a8";
    case PolicyKind::kMixed: {
      std::ostringstream os;
      os << "mixed:" << p.mixed_percent;
      return os.str();
    }
  }
  return "?";
}

Policy ParsePolicy(const std::string& text) {
  if (text == "w8a16") return Policy::W8A16();
  if (text == "w8a8") return Policy::W8A8();
  if (text.rfind("mixed:", 0) == 0) {
    double x = 0.0;
    try {
      x = std::stod(text.substr(6));
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::kParameter, "bad mixed policy '" + text + "'");
    }
    if (!(x >= 0.0 && x <= 100.0)) throw Error(ErrorKind::kParameter, "mixed percent must be in [0,100]");
    return Policy::Mixed(x);
  }
  throw Error(ErrorKind::kParameter, "unknown policy '" + text + "'");
}

const QuantParams* QuantProfile::weight(const TensorKey& k) const {
  auto it = weight_params.find(k);
  return it == weight_params.end() ? nullptr : &it->second;
}

const QuantParams* QuantProfile::act(const TensorKey& k) const {
  auto it = act_params.find(k);
  return it == act_params.end() ? nullptr : &it->second;
}

void Observer::Update(std::span<const float> values) {
  for (float v : values) {
    if (!seen) {
      running_min = running_max = v;
      seen = true;
    } else {
      running_min = std::min(running_min, v);
      running_max = std::max(running_max, v);
    }
  }
}

namespace {

constexpr Role kRoles[] = {Role::kEncoder, Role::kBackbone, Role::kDecoder};

bool IsComputeKind(NodeKind k) {
  switch (k) {
    case NodeKind::kMatMul:
    case NodeKind::kConv2d:
    case NodeKind::kAdd:
    case NodeKind::kMul:
    case NodeKind::kActivation:
    case NodeKind::kLoraMatMul:
    case NodeKind::kConcat:
    case NodeKind::kScale: return true;
    default: return false;
  }
}

std::pair<float, float> MinMax(std::span<const float> v) {
  auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return {*lo, *hi};
}

}  // namespace

bool IsQuantizableActivation(const Node& n) {
  if (n.attrs.lora_internal) return false;
  if (n.kind == NodeKind::kInput) return n.attrs.role == InputRole::kData && n.attrs.dtype == DType::kF32;
  return IsComputeKind(n.kind);
}

QuantizableSet Quantizable(const ModelBundle& bundle) {
  QuantizableSet set;
  for (Role r : kRoles) {
    const Graph& g = bundle.graph(r);
    for (const Node& n : g.nodes) {
      if (n.kind == NodeKind::kConstant && g.constants.at(n.output).dtype() == DType::kF32) {
        set.weights.push_back({r, n.output});
      } else if (n.kind == NodeKind::kLoraMatMul) {
        set.lora_slots.push_back({r, n.attrs.a_slot});
        set.lora_slots.push_back({r, n.attrs.b_slot});
      }
      if (IsQuantizableActivation(n)) set.activations.push_back({r, n.output});
    }
  }
  return set;
}

void CheckCoverage(const ModelBundle& bundle, const QuantProfile& profile) {
  const QuantizableSet set = Quantizable(bundle);
  for (const auto& k : set.weights) {
    if (!profile.weight(k)) throw Error(ErrorKind::kCoverage, "no weight params for " + KeyString(k));
  }
  for (const auto& k : set.lora_slots) {
    if (!profile.weight(k)) throw Error(ErrorKind::kCoverage, "no lora slot params for " + KeyString(k));
  }
  for (const auto& k : set.activations) {
    if (!profile.act(k)) throw Error(ErrorKind::kCoverage, "no activation params for " + KeyString(k));
  }
}

uint64_t SampleSeed(uint64_t seed, size_t index) { return MixSeed(seed, 0x5A17 + index); }

CalibrationObservers::CalibrationObservers(const ModelBundle& bundle) {
  for (const auto& k : Quantizable(bundle).activations) acts_[k] = Observer{k};
}

void CalibrationObservers::Run(const ModelBundle& bundle, std::span<const CalibrationSample> data,
                               uint64_t seed, const LoRAAdapter* adapter) {
  std::map<int, LoraBinding> bindings;
  if (adapter) bindings = MakeBindings(bundle.backbone, *adapter);
  for (size_t i = 0; i < data.size(); ++i) {
    RunBundle(bundle, data[i].x, data[i].cond, SampleSeed(seed, i), [&](Role role, const TensorMap& in) {
      ExecHooks hooks;
      if (role == Role::kBackbone) hooks.lora = &bindings;
      hooks.on_produced = [&](int tensor, Tensor& value) {
        auto it = acts_.find({role, tensor});
        if (it != acts_.end()) it->second.Update(value.f32());
      };
      return Execute(bundle.graph(role), in, hooks).at(role == Role::kDecoder ? "y" : "z");
    });
  }
}

std::map<TensorKey, int> AssignActivationBits(const std::map<TensorKey, Observer>& acts,
                                              const Policy& policy) {
  std::map<TensorKey, int> bits;
  for (const auto& [k, obs] : acts) bits[k] = policy.kind == PolicyKind::kW8A8 ? 8 : 16;
  if (policy.kind != PolicyKind::kMixed) return bits;
  std::vector<std::pair<double, TensorKey>> ranked;
  for (const auto& [k, obs] : acts) {
    ranked.emplace_back(static_cast<double>(obs.running_max) - obs.running_min, k);
  }
  // Widest dynamic range first; ties by key.
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  const auto count = static_cast<size_t>(
      std::ceil(static_cast<double>(ranked.size()) * policy.mixed_percent / 100.0 - 1e-9));
  for (size_t i = 0; i < std::min(count, ranked.size()); ++i) bits[ranked[i].second] = 8;
  return bits;
}

QuantProfile ProfileFromObservers(const ModelBundle& bundle, const std::map<TensorKey, Observer>& acts,
                                  const Policy& policy, int lora_bits) {
  QuantProfile p;
  p.policy = policy;
  p.lora_bits = lora_bits;
  for (const auto& k : Quantizable(bundle).weights) {
    auto [lo, hi] = MinMax(bundle.graph(k.role).constants.at(k.tensor).f32());
    p.weight_params[k] = ComputeQuantParams(lo, hi, 8, true);
  }
  const auto bits = AssignActivationBits(acts, policy);
  for (const auto& [k, obs] : acts) {
    const float lo = obs.seen ? obs.running_min : 0.0f;
    const float hi = obs.seen ? obs.running_max : 0.0f;
    p.act_params[k] = ComputeQuantParams(lo, hi, bits.at(k), true);
  }
  return p;
}

QuantProfile Calibrate(const ModelBundle& bundle, std::span<const CalibrationSample> data,
                       const CalibrationOptions& options, const LoRAAdapter* adapter) {
  if (data.empty()) throw Error(ErrorKind::kParameter, "calibration needs at least one sample");
  if (options.lora_bits != 8 && options.lora_bits != 16) {
    throw Error(ErrorKind::kParameter, "lora bits must be 8 or 16");
  }
  CalibrationObservers observers(bundle);
  observers.Run(bundle, data, options.seed, adapter);
  QuantProfile p = ProfileFromObservers(bundle, observers.activations(), options.policy, options.lora_bits);
  for (int node_id : LoraNodes(bundle.backbone)) {
    const Node& n = *bundle.backbone.find_node(node_id);
    float a_lo = 0, a_hi = 0, b_lo = 0, b_hi = 0;
    if (adapter) {
      auto it = adapter->entries.find(node_id);
      if (it != adapter->entries.end()) {
        std::tie(a_lo, a_hi) = MinMax(it->second.a.f32());
        std::tie(b_lo, b_hi) = MinMax(it->second.b.f32());
      }
    }
    p.weight_params[{Role::kBackbone, n.attrs.a_slot}] = ComputeQuantParams(a_lo, a_hi, options.lora_bits, true);
    p.weight_params[{Role::kBackbone, n.attrs.b_slot}] = ComputeQuantParams(b_lo, b_hi, options.lora_bits, true);
  }
  return p;
}

std::map<int, Tensor> FakeQuantConstants(const Graph& g, Role role, const QuantProfile& profile) {
  std::map<int, Tensor> out;
  for (const auto& [tid, value] : g.constants) {
    const QuantParams* p = profile.weight({role, tid});
    if (!p) throw Error(ErrorKind::kCoverage, "no weight params for " + KeyString({role, tid}));
    out.emplace(tid, FakeQuant(value, *p));
  }
  return out;
}

Tensor ExecuteQuantsim(const ModelBundle& bundle, const QuantProfile& profile, const LoRAAdapter* adapter,
                       const Tensor& x, const Tensor& cond, uint64_t noise_seed) {
  CheckCoverage(bundle, profile);
  std::map<Role, std::map<int, Tensor>> weights;
  for (Role r : kRoles) weights[r] = FakeQuantConstants(bundle.graph(r), r, profile);
  std::map<int, LoraBinding> bindings;
  if (adapter) {
    bindings = MakeBindings(bundle.backbone, *adapter, [&](int slot, const Tensor& factor) {
      return FakeQuant(factor, *profile.weight({Role::kBackbone, slot}));
    });
  }
  return RunBundle(bundle, x, cond, noise_seed, [&](Role role, const TensorMap& in) {
    ExecHooks hooks;
    hooks.constant_override = &weights[role];
    if (role == Role::kBackbone) hooks.lora = &bindings;
    hooks.on_produced = [&](int tensor, Tensor& value) {
      if (const QuantParams* p = profile.act({role, tensor})) value = FakeQuant(value, *p);
    };
    return Execute(bundle.graph(role), in, hooks).at(role == Role::kDecoder ? "y" : "z");
  });
}

namespace {

std::string ParamsText(const QuantParams& p) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "{scale: %.9g, zero_point: %d, bits: %d, signed: %s}",
                static_cast<double>(p.scale), p.zero_point, p.bits, p.is_signed ? "true" : "false");
  return buf;
}

}  // namespace

std::string ProfileToText(const QuantProfile& profile) {
  std::ostringstream os;
  os << "policy " << PolicyString(profile.policy) << "\n";
  os << "lora_bits " << profile.lora_bits << "\n";
  for (const auto& [k, p] : profile.act_params) os << "act " << KeyString(k) << ": " << ParamsText(p) << "\n";
  for (const auto& [k, p] : profile.weight_params) os << "weight " << KeyString(k) << ": " << ParamsText(p) << "\n";
  return os.str();
}

QuantProfile ProfileFromText(const std::string& text) {
  QuantProfile profile;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  bool have_policy = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    auto bad = [&]() { return Error(ErrorKind::kFormat, "profile line " + std::to_string(line_no)); };
    if (tag == "policy") {
      std::string v;
      ls >> v;
      profile.policy = ParsePolicy(v);
      have_policy = true;
    } else if (tag == "lora_bits") {
      if (!(ls >> profile.lora_bits)) throw bad();
    } else if (tag == "act" || tag == "weight") {
      std::string key;
      ls >> key;
      if (key.empty() || key.back() != ':') throw bad();
      key.pop_back();
      const std::string rest = line.substr(line.find('{'));
      double scale = 0;
      int zp = 0, bits = 0;
      char sign[8] = {};
      if (std::sscanf(rest.c_str(), "{scale: %lf, zero_point: %d, bits: %d, signed: %7[a-z]}", &scale, &zp,
                      &bits, sign) != 4) {
        throw bad();
      }
      QuantParams p{static_cast<float>(scale), zp, bits, std::string(sign) == "true"};
      (tag == "act" ? profile.act_params : profile.weight_params)[ParseKey(key)] = p;
    } else {
      throw bad();
    }
  }
  if (!have_policy) throw Error(ErrorKind::kFormat, "profile has no policy line");
  return profile;
}

}  // namespace quad
