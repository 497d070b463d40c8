#include "quad/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <future>
#include <set>
#include <sstream>

namespace quad {

namespace {

void CheckDistribution(std::span<const double> p) {
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw Error(ErrorKind::kRange, "probability entries must be non-negative");
    sum += v;
  }
  if (std::fabs(sum - 1.0) > 1e-6) throw Error(ErrorKind::kRange, "distribution does not sum to 1");
}

std::vector<double> Smooth(std::span<const double> p) {
  std::vector<double> out(p.begin(), p.end());
  double sum = 0.0;
  for (double& v : out) {
    v += kJsSmoothing;
    sum += v;
  }
  for (double& v : out) v /= sum;
  return out;
}

double KlTerm(double p, double m) { return p > 0.0 ? p * std::log(p / m) : 0.0; }

std::vector<double> Normalized(const Histogram& h) {
  const double total = static_cast<double>(h.total());
  std::vector<double> out;
  out.reserve(h.counts.size());
  for (uint64_t c : h.counts) out.push_back(static_cast<double>(c) / total);
  return out;
}

}  // namespace

double JsDivergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw Error(ErrorKind::kShape, "distribution length mismatch");
  CheckDistribution(p);
  CheckDistribution(q);
  const auto ps = Smooth(p);
  const auto qs = Smooth(q);
  double js = 0.0;
  for (size_t i = 0; i < ps.size(); ++i) {
    const double m = 0.5 * (ps[i] + qs[i]);
    js += 0.5 * (KlTerm(ps[i], m) + KlTerm(qs[i], m));
  }
  return std::max(js, 0.0);
}

double OutputDivergence(const Tensor& reference, const Tensor& test) {
  if (reference.shape() != test.shape()) throw Error(ErrorKind::kShape, "output shape mismatch");
  auto a = reference.f32();
  auto b = test.f32();
  const auto [amin, amax] = std::minmax_element(a.begin(), a.end());
  const auto [bmin, bmax] = std::minmax_element(b.begin(), b.end());
  const double lo = std::min(*amin, *bmin);
  const double hi = std::max(*amax, *bmax);
  // A zero-width union range means every value of both outputs is identical.
  if (!(lo < hi)) return 0.0;
  const auto p = Normalized(MakeHistogram(a, kQssBins, lo, hi));
  const auto q = Normalized(MakeHistogram(b, kQssBins, lo, hi));
  return JsDivergence(p, q);
}

double Qss(const ModelBundle& bundle, const LoRAAdapter& adapter, const QuantProfile& profile,
           std::span<const CalibrationSample> data, uint64_t seed) {
  if (data.empty()) throw Error(ErrorKind::kParameter, "QSS needs at least one sample");
  CheckCoverage(bundle, profile);
  double sum = 0.0;
  for (size_t i = 0; i < data.size(); ++i) {
    const uint64_t noise = SampleSeed(seed, i);
    const Tensor fp = ExecuteFp(bundle, data[i].x, data[i].cond, &adapter, noise);
    const Tensor qs = ExecuteQuantsim(bundle, profile, &adapter, data[i].x, data[i].cond, noise);
    sum += OutputDivergence(fp, qs);
  }
  return sum / static_cast<double>(data.size());
}

AnchorChoice SelectAnchor(const std::map<std::string, double>& scores, double tie_epsilon) {
  if (scores.empty()) throw Error(ErrorKind::kParameter, "anchor selection needs at least one score");
  if (!(tie_epsilon >= 0.0 && tie_epsilon < 1.0)) {
    throw Error(ErrorKind::kParameter, "tie epsilon must be in [0, 1)");
  }
  double lo = scores.begin()->second;
  double hi = lo;
  std::string best = scores.begin()->first;
  // std::map iterates ids in lexicographic order, so the first maximum wins ties.
  for (const auto& [id, s] : scores) {
    if (!std::isfinite(s) || s < 0.0) throw Error(ErrorKind::kRange, "QSS of '" + id + "' is invalid");
    lo = std::min(lo, s);
    if (s > hi) {
      hi = s;
      best = id;
    }
  }
  // A single adapter is its own anchor.
  if (scores.size() > 1 && (hi == 0.0 || (hi - lo) < tie_epsilon * hi)) return {true, ""};
  return {false, best};
}

std::string ReportToText(const QssReport& report) {
  std::ostringstream os;
  char buf[64];
  for (const auto& [id, s] : report.scores) {
    std::snprintf(buf, sizeof buf, "%.9g", s);
    os << id << ' ' << buf << '\n';
  }
  os << "anchor " << (report.anchor.unified ? "unified" : report.anchor.adapter_id) << '\n';
  os << "rule " << (report.anchor.unified ? "unified_fallback" : "max_qss") << '\n';
  std::snprintf(buf, sizeof buf, "%.9g", report.tie_epsilon);
  os << "tie_epsilon " << buf << '\n';
  os << "divergence " << report.divergence << '\n';
  return os.str();
}

QuantProfile UnifiedProfile(const ModelBundle& bundle, std::span<const LoRAAdapter> adapters,
                            std::span<const CalibrationSample> data, const CalibrationOptions& options) {
  if (adapters.empty()) throw Error(ErrorKind::kParameter, "unified profile needs at least one adapter");
  if (data.empty()) throw Error(ErrorKind::kParameter, "calibration needs at least one sample");
  // Adapters must share at least one target layer.
  std::set<int> common;
  for (const auto& [node, e] : adapters[0].entries) common.insert(node);
  for (const LoRAAdapter& a : adapters) {
    std::set<int> keep;
    for (int node : common) {
      if (a.entries.count(node)) keep.insert(node);
    }
    common = std::move(keep);
  }
  if (common.empty()) throw Error(ErrorKind::kCoverage, "adapters target disjoint layer sets");

  CalibrationObservers observers(bundle);
  for (const LoRAAdapter& a : adapters) observers.Run(bundle, data, options.seed, &a);
  QuantProfile p = ProfileFromObservers(bundle, observers.activations(), options.policy, options.lora_bits);

  for (int node_id : LoraNodes(bundle.backbone)) {
    const Node& n = *bundle.backbone.find_node(node_id);
    std::vector<float> a_all, b_all;
    for (const LoRAAdapter& a : adapters) {
      auto it = a.entries.find(node_id);
      if (it == a.entries.end()) continue;
      a_all.insert(a_all.end(), it->second.a.f32().begin(), it->second.a.f32().end());
      b_all.insert(b_all.end(), it->second.b.f32().begin(), it->second.b.f32().end());
    }
    auto range = [](const std::vector<float>& v) -> std::pair<float, float> {
      if (v.empty()) return {0.0f, 0.0f};
      auto [lo, hi] = std::minmax_element(v.begin(), v.end());
      return {*lo, *hi};
    };
    const auto [alo, ahi] = range(a_all);
    const auto [blo, bhi] = range(b_all);
    p.weight_params[{Role::kBackbone, n.attrs.a_slot}] = ComputeQuantParams(alo, ahi, options.lora_bits, true);
    p.weight_params[{Role::kBackbone, n.attrs.b_slot}] = ComputeQuantParams(blo, bhi, options.lora_bits, true);
  }
  return p;
}

SharedProfile BuildSharedProfile(const ModelBundle& bundle, std::span<const LoRAAdapter> adapters,
                                 std::span<const CalibrationSample> data, const CalibrationOptions& options,
                                 double tie_epsilon, std::span<const CalibrationSample> qss_data) {
  if (adapters.empty()) throw Error(ErrorKind::kParameter, "shared profile needs at least one adapter");
  const auto eval_data = qss_data.empty() ? data : qss_data;
  SharedProfile out;
  out.report.tie_epsilon = tie_epsilon;

  // Scores are independent per adapter; the reduction below is sequential.
  std::vector<std::future<std::pair<QuantProfile, double>>> jobs;
  for (const LoRAAdapter& a : adapters) {
    jobs.push_back(std::async(std::launch::async, [&bundle, &a, data, eval_data, &options] {
      QuantProfile p = Calibrate(bundle, data, options, &a);
      const double score = Qss(bundle, a, p, eval_data, options.seed);
      return std::make_pair(std::move(p), score);
    }));
  }
  for (size_t i = 0; i < adapters.size(); ++i) {
    auto [profile, score] = jobs[i].get();
    if (out.report.scores.count(adapters[i].id)) {
      throw Error(ErrorKind::kParameter, "duplicate adapter id '" + adapters[i].id + "'");
    }
    out.report.scores[adapters[i].id] = score;
    out.provisional[adapters[i].id] = std::move(profile);
  }
  out.report.anchor = SelectAnchor(out.report.scores, tie_epsilon);
  out.profile = out.report.anchor.unified ? UnifiedProfile(bundle, adapters, data, options)
                                          : out.provisional.at(out.report.anchor.adapter_id);
  CheckCoverage(bundle, out.profile);
  return out;
}

}  // namespace quad
